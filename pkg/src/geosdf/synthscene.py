"""Analytic ground-truth scenes standing in for captured video.

Shapes have exact signed distance functions, textures are procedural, and
reference images come from sphere tracing with a fixed (non-learned) shading
model, so every metric later in the pipeline has a closed-form oracle.
Datasets are written as dependency-free binary PPM/PGM plus small text
files and are byte-reproducible for a fixed seed.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import articulation as art
from . import renderer
from .errors import DataError, GenerationError, UsageError


# ---------------------------------------------------------------------------
# exact signed distance functions

def sphere_sdf(x, radius):
    return np.linalg.norm(np.atleast_2d(x), axis=1) - radius


def torus_sdf(x, major, minor):
    x = np.atleast_2d(x)
    q = np.stack([np.hypot(x[:, 0], x[:, 1]) - major, x[:, 2]], axis=1)
    return np.linalg.norm(q, axis=1) - minor


def capsule_sdf(x, half_length, radius):
    x = np.atleast_2d(x)
    z = np.clip(x[:, 2], -half_length, half_length)
    axis_pt = np.stack([np.zeros(len(x)), np.zeros(len(x)), z], axis=1)
    return np.linalg.norm(x - axis_pt, axis=1) - radius


@dataclass
class AnalyticScene:
    shape: dict                      # {"kind": ..., parameters...}
    texture: str = "normal"          # "normal" | "const:r,g,b"
    background: tuple = (0.0, 0.0, 0.0)
    shading: str = "lambert"         # "lambert" | "none"
    ambient: float = 0.3
    light_dir: tuple = None          # normalized, set by make_dataset
    skeleton_blend_band: float = 0.1
    frames: list = field(default_factory=list)  # BonePose per frame
    holdout: list = field(default_factory=list)

    @property
    def articulated(self):
        return self.shape["kind"] == "capsule2"

    def skeleton(self):
        if not self.articulated:
            return None
        return art.two_bone_capsule_skeleton(self.skeleton_blend_band)

    def frame_pose(self, frame):
        if not self.articulated:
            return None
        return self.frames[frame]

    def canonical_sdf(self, x):
        k = self.shape["kind"]
        if k == "sphere":
            return sphere_sdf(x, self.shape["radius"])
        if k == "torus":
            return torus_sdf(x, self.shape["major"], self.shape["minor"])
        if k in ("capsule", "capsule2"):
            return capsule_sdf(x, self.shape["half_length"],
                               self.shape["radius"])
        raise UsageError(f"unknown shape kind {self.shape['kind']!r}")

    def sdf(self, x, frame=0):
        """Exact posed-space signed distance.

        For the articulated capsule the point is pulled back through each
        bone's exact inverse rigid transform and the minimum canonical
        distance is taken, which keeps the unit-gradient property everywhere
        off the medial set.
        """
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if not self.articulated or not self.frames:
            return self.canonical_sdf(x)
        pose = self.frames[frame]
        d = np.full(len(x), np.inf)
        for b in range(pose.num_bones):
            x_b = (x - pose.translations[b]) @ pose.rotations[b]
            d = np.minimum(d, self.canonical_sdf(x_b))
        return d

    def sdf_fn(self, frame=0):
        return lambda x: self.sdf(x, frame)

    def normal(self, x, frame=0, h=1e-6):
        x = np.atleast_2d(x)
        g = np.zeros_like(x)
        for k in range(3):
            dx = np.zeros(3)
            dx[k] = h
            g[:, k] = (self.sdf(x + dx, frame) - self.sdf(x - dx, frame)) \
                / (2 * h)
        n = np.linalg.norm(g, axis=1, keepdims=True)
        return g / np.maximum(n, 1e-12)

    def texture_color(self, x, n):
        if self.texture == "normal":
            return 0.5 + 0.5 * n
        if self.texture.startswith("const:"):
            rgb = np.array([float(v) for v in self.texture[6:].split(",")])
            return np.broadcast_to(rgb, (len(np.atleast_2d(x)), 3)).copy()
        raise UsageError(f"unknown texture {self.texture!r}")

    def surface_samples(self, n, rng, frame=0):
        """Exact area-weighted samples of the posed surface with normals."""
        k = self.shape["kind"]
        if k == "sphere":
            dirs = _unit_dirs(rng, n)
            return self.shape["radius"] * dirs, dirs
        if k == "torus":
            major, minor = self.shape["major"], self.shape["minor"]
            pts, nrm = [], []
            need = n
            while need > 0:
                theta = rng.uniform(0, 2 * np.pi, 2 * need)
                phi = rng.uniform(0, 2 * np.pi, 2 * need)
                keep = rng.uniform(0, 1, 2 * need) \
                    < (major + minor * np.cos(phi)) / (major + minor)
                theta, phi = theta[keep][:need], phi[keep][:need]
                ring = np.stack([np.cos(theta), np.sin(theta),
                                 np.zeros(len(theta))], axis=1)
                nn = ring * np.cos(phi)[:, None]
                nn[:, 2] = np.sin(phi)
                pts.append(major * ring + minor * nn)
                nrm.append(nn)
                need -= len(theta)
            return np.concatenate(pts)[:n], np.concatenate(nrm)[:n]
        if k in ("capsule", "capsule2"):
            pts, nrm = _capsule_surface(rng, n, self.shape["half_length"],
                                        self.shape["radius"])
            if k == "capsule2" and self.frames:
                pose = self.frames[frame]
                skel_pts, skel_nrm = [], []
                # posed surface = union of per-bone rigid images, minus the
                # parts swallowed inside the union
                for b in range(pose.num_bones):
                    p = pts @ pose.rotations[b].T + pose.translations[b]
                    nn = nrm @ pose.rotations[b].T
                    keep = self.sdf(p, frame) > -1e-9
                    skel_pts.append(p[keep])
                    skel_nrm.append(nn[keep])
                pts = np.concatenate(skel_pts)
                nrm = np.concatenate(skel_nrm)
                sel = rng.permutation(len(pts))[:n]
                return pts[sel], nrm[sel]
            return pts, nrm
        raise UsageError(f"cannot sample shape {k!r}")

    def to_dict(self):
        return {
            "shape": self.shape,
            "texture": self.texture,
            "background": list(self.background),
            "shading": self.shading,
            "ambient": self.ambient,
            "light_dir": list(self.light_dir) if self.light_dir else None,
            "skeleton_blend_band": self.skeleton_blend_band,
            "holdout": list(self.holdout),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(shape=d["shape"], texture=d["texture"],
                   background=tuple(d["background"]), shading=d["shading"],
                   ambient=d["ambient"],
                   light_dir=tuple(d["light_dir"]) if d["light_dir"] else None,
                   skeleton_blend_band=d["skeleton_blend_band"],
                   holdout=list(d["holdout"]))


def _unit_dirs(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _capsule_surface(rng, n, half, radius):
    # areas: cylinder 2*pi*r*2h, sphere caps 4*pi*r^2
    a_cyl = 2 * np.pi * radius * 2 * half
    a_cap = 4 * np.pi * radius ** 2
    n_cyl = int(round(n * a_cyl / (a_cyl + a_cap)))
    phi = rng.uniform(0, 2 * np.pi, n_cyl)
    z = rng.uniform(-half, half, n_cyl)
    nrm_c = np.stack([np.cos(phi), np.sin(phi), np.zeros(n_cyl)], axis=1)
    pts_c = radius * nrm_c + np.stack([np.zeros(n_cyl), np.zeros(n_cyl), z],
                                      axis=1)
    dirs = _unit_dirs(rng, n - n_cyl)
    centers = np.where(dirs[:, 2:] >= 0, half, -half)
    pts_s = radius * dirs + np.concatenate(
        [np.zeros((n - n_cyl, 2)), centers], axis=1)
    return np.concatenate([pts_c, pts_s]), np.concatenate([nrm_c, dirs])


def make_scene(kind, texture="normal", frames=10, max_bend_deg=45.0,
               background=(0.0, 0.0, 0.0), shading="lambert"):
    """Factory for the standard desk-scale scenes."""
    shapes = {
        "sphere": {"kind": "sphere", "radius": 0.5},
        "torus": {"kind": "torus", "major": 0.35, "minor": 0.15},
        "capsule": {"kind": "capsule", "half_length": 0.25, "radius": 0.15},
        "capsule2": {"kind": "capsule2", "half_length": 0.25, "radius": 0.15},
    }
    if kind not in shapes:
        raise UsageError(f"unknown shape {kind!r} "
                         f"(choose from {sorted(shapes)})")
    scene = AnalyticScene(shape=shapes[kind], texture=texture,
                          background=background, shading=shading)
    if kind == "capsule2":
        angles = np.deg2rad(np.linspace(-max_bend_deg, max_bend_deg, frames))
        scene.frames = [art.capsule_bend_pose(a) for a in angles]
        scene.holdout = [frames - 2, frames - 1]  # largest bends are OOD
    return scene


# ---------------------------------------------------------------------------
# sphere tracing

def trace(field, o, d, near, far, tol=1e-5, max_steps=256):
    """March each ray to the zero level; returns (t, hit, nonconverged)."""
    o = np.atleast_2d(o)
    d = np.atleast_2d(d)
    t = np.full(len(o), near)
    hit = np.zeros(len(o), dtype=bool)
    active = np.ones(len(o), dtype=bool)
    for _ in range(max_steps):
        if not active.any():
            break
        x = o[active] + t[active, None] * d[active]
        dist = np.asarray(field(x), dtype=np.float64)
        idx = np.nonzero(active)[0]
        hit_now = np.abs(dist) < tol
        hit[idx[hit_now]] = True
        active[idx[hit_now]] = False
        t[idx[~hit_now]] += dist[~hit_now]
        escaped = t[idx] > far
        active[idx[escaped]] = False
    nonconverged = int(active.sum())
    return t, hit, nonconverged


def render_reference(scene, camera, frame=0, tol=1e-5, max_steps=256):
    """Sphere-traced ground-truth image and mask for one view."""
    pix = renderer.pixel_grid(camera.width, camera.height)
    o, d = renderer.make_rays(camera, pix)
    field = scene.sdf_fn(frame)
    t, hit, nonconv = trace(field, o, d, camera.near, camera.far, tol,
                            max_steps)
    if nonconv > 0.001 * len(pix):
        raise GenerationError(
            f"sphere tracing failed on {nonconv}/{len(pix)} pixels")
    img = np.broadcast_to(np.asarray(scene.background),
                          (len(pix), 3)).copy()
    if hit.any():
        x = o[hit] + t[hit, None] * d[hit]
        n = scene.normal(x, frame)
        tex = scene.texture_color(x, n)
        if scene.shading == "lambert":
            light = np.asarray(scene.light_dir, dtype=np.float64)
            lam = np.maximum(0.0, -(n @ light))
            shade = scene.ambient + (1 - scene.ambient) * lam
            img[hit] = tex * shade[:, None]
        else:
            img[hit] = tex
    h, w = camera.height, camera.width
    return img.reshape(h, w, 3), hit.reshape(h, w)


# ---------------------------------------------------------------------------
# PPM / PGM I/O (binary, dependency-free)

def write_ppm(path, img):
    img8 = np.clip(np.round(np.asarray(img) * 255), 0, 255).astype(np.uint8)
    h, w = img8.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(img8.tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        nl = blob.find(b"\n", pos)
        tokens.extend(blob[pos:nl].split())
        pos = nl + 1
    if tokens[0] != b"P6":
        raise DataError(f"{path}: not binary PPM")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=pos)
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


def write_pgm(path, mask):
    m8 = (np.asarray(mask, dtype=bool) * np.uint8(255))
    h, w = m8.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(m8.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        nl = blob.find(b"\n", pos)
        tokens.extend(blob[pos:nl].split())
        pos = nl + 1
    if tokens[0] != b"P5":
        raise DataError(f"{path}: not binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=pos)
    return data.reshape(h, w) > 127


# ---------------------------------------------------------------------------
# dataset directory

@dataclass
class SceneDataset:
    root: str
    images: np.ndarray   # (N, H, W, 3)
    masks: np.ndarray    # (N, H, W)
    cameras: list
    poses: list          # BonePose per frame ([] for static scenes)
    scene: AnalyticScene
    meta: dict

    @property
    def num_frames(self):
        return len(self.images)

    @property
    def holdout(self):
        return list(self.scene.holdout)

    @property
    def train_frames(self):
        return [i for i in range(self.num_frames) if i not in self.holdout]

    def pose(self, i):
        return self.poses[i] if self.poses else None

    def skeleton(self):
        return self.scene.skeleton()


def make_dataset(scene, out_dir, views=20, image_size=64, ring_radius=2.0,
                 elevation_deg=0.0, fov_deg=40.0, near=0.5, far=3.8,
                 holdout_every=10, seed=0):
    """Write a full dataset directory; returns the loaded SceneDataset.

    Cameras sit on a ring; frame i pairs camera i with pose i (the monocular
    analog).  Static scenes default to holding out every ``holdout_every``-th
    view starting at holdout_every // 2; articulated scenes hold out their
    last two (largest-bend) frames.
    """
    n = views if not scene.articulated else len(scene.frames)
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)

    angles = 2 * np.pi * np.arange(n) / n
    elev = np.deg2rad(elevation_deg)
    cameras = []
    for a in angles:
        eye = ring_radius * np.array([np.cos(a) * np.cos(elev),
                                      np.sin(a) * np.cos(elev),
                                      np.sin(elev)])
        cameras.append(renderer.Camera.look_at(
            eye, (0, 0, 0), (0, 0, 1), fov_deg, image_size, image_size,
            near, far))

    if scene.light_dir is None:
        scene.light_dir = tuple(cameras[0].rot[:, 2])  # fixed headlight of view 0
    if not scene.articulated and not scene.holdout:
        scene.holdout = [i for i in range(n)
                         if i % holdout_every == holdout_every // 2]

    for i, cam in enumerate(cameras):
        img, mask = render_reference(scene, cam, frame=i if scene.articulated
                                     else 0)
        write_ppm(os.path.join(out_dir, "images", f"frame_{i:03d}.ppm"), img)
        write_pgm(os.path.join(out_dir, "masks", f"frame_{i:03d}.pgm"), mask)

    with open(os.path.join(out_dir, "cameras.txt"), "w") as fh:
        for cam in cameras:
            fh.write(cam.to_line() + "\n")

    poses = scene.frames if scene.articulated \
        else [art.BonePose.identity(0) for _ in range(n)]
    if scene.articulated:
        art.save_poses(os.path.join(out_dir, "poses.txt"), poses)
    else:
        with open(os.path.join(out_dir, "poses.txt"), "w") as fh:
            fh.write("# geosdf poses: frame then per bone ax ay az tx ty tz\n")
            fh.write("bones 0\n")
            for i in range(n):
                fh.write(f"{i}\n")

    meta = {
        "scene": scene.to_dict(),
        "views": n,
        "image_size": image_size,
        "ring_radius": ring_radius,
        "elevation_deg": elevation_deg,
        "fov_deg": fov_deg,
        "near": near,
        "far": far,
        "seed": seed,
    }
    with open(os.path.join(out_dir, "oracle.json"), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
    return load_dataset(out_dir)


def load_dataset(root):
    oracle = os.path.join(root, "oracle.json")
    if not os.path.exists(oracle):
        raise DataError(f"{root}: missing oracle.json (not a dataset?)")
    with open(oracle) as fh:
        meta = json.load(fh)
    scene = AnalyticScene.from_dict(meta["scene"])
    n = meta["views"]
    size = meta["image_size"]

    with open(os.path.join(root, "cameras.txt")) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    cameras = [renderer.Camera.from_line(ln, size, size, meta["near"],
                                         meta["far"]) for ln in lines]

    images = np.stack([read_ppm(os.path.join(root, "images",
                                             f"frame_{i:03d}.ppm"))
                       for i in range(n)])
    masks = np.stack([read_pgm(os.path.join(root, "masks",
                                            f"frame_{i:03d}.pgm"))
                      for i in range(n)])
    poses = art.load_poses(os.path.join(root, "poses.txt")) \
        if scene.articulated else []
    if scene.articulated:
        scene.frames = poses
    counts = {len(images), len(masks), len(cameras)}
    if scene.articulated:
        counts.add(len(poses))
    if len(counts) != 1:
        raise DataError(f"{root}: image/mask/camera/pose counts disagree")
    return SceneDataset(root=root, images=images, masks=masks,
                        cameras=cameras, poses=poses, scene=scene, meta=meta)
