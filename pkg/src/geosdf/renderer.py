"""Ray generation, occupancy-grid empty-space skipping, sampling,
posed->canonical warping and alpha compositing.

Sample batches are kept compact: field math runs only on real samples, and
per-ray structure is recovered by scattering into a rectangular (rays,
slots) grid whose padding carries zero density.  Transmittance uses the
exp-of-negative-cumsum identity, so inserting zero-density samples anywhere
is exactly a no-op.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import articulation as art
from . import diffcore as dc
from .errors import UsageError


# ---------------------------------------------------------------------------
# cameras

@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    rot: np.ndarray      # (3, 3) camera-to-world rotation, columns x,y,z(fwd)
    origin: np.ndarray   # (3,) camera center in world
    width: int
    height: int
    near: float = 0.2
    far: float = 4.0

    def __post_init__(self):
        self.rot = np.asarray(self.rot, dtype=np.float64)
        self.origin = np.asarray(self.origin, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise UsageError("focal lengths must be positive")
        if not self.near < self.far:
            raise UsageError("near must be below far")

    @classmethod
    def look_at(cls, eye, target, up, fov_deg, width, height,
                near=0.2, far=4.0):
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right = right / np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd], axis=1)
        f = (width / 2) / np.tan(np.deg2rad(fov_deg) / 2)
        return cls(f, f, width / 2, height / 2, rot, eye, width, height,
                   near, far)

    def to_line(self):
        ext = np.concatenate([self.rot, self.origin[:, None]], axis=1)
        vals = [self.fx, self.fy, self.cx, self.cy] + list(ext.ravel())
        return " ".join(f"{v:.17g}" for v in vals)

    @classmethod
    def from_line(cls, line, width, height, near, far):
        vals = [float(v) for v in line.split()]
        ext = np.array(vals[4:]).reshape(3, 4)
        return cls(vals[0], vals[1], vals[2], vals[3], ext[:, :3], ext[:, 3],
                   width, height, near, far)


def make_rays(camera, pixels):
    """Rays (origins, unit directions) through pixel centers.

    ``pixels`` is (M, 2) as (u=column, v=row); integer pixels must be within
    the image bounds, fractional values are allowed for probing.
    """
    pix = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    if np.issubdtype(np.asarray(pixels).dtype, np.integer):
        if (pix < 0).any() or (pix[:, 0] >= camera.width).any() \
                or (pix[:, 1] >= camera.height).any():
            raise UsageError("pixel index outside image bounds")
    d_cam = np.stack([(pix[:, 0] - camera.cx) / camera.fx,
                      (pix[:, 1] - camera.cy) / camera.fy,
                      np.ones(len(pix))], axis=1)
    d_world = d_cam @ camera.rot.T
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    o = np.broadcast_to(camera.origin, d_world.shape).copy()
    return o, d_world


def pixel_grid(width, height):
    u, v = np.meshgrid(np.arange(width), np.arange(height))
    return np.stack([u.ravel(), v.ravel()], axis=1)


# ---------------------------------------------------------------------------
# occupancy grid

@dataclass
class OccupancyGrid:
    resolution: int = 64
    box_min: tuple = (-1.0, -1.0, -1.0)
    box_max: tuple = (1.0, 1.0, 1.0)
    density_threshold_scale: float = 0.01  # of current alpha
    update_period: int = 100
    probes_per_cell: int = 8
    bits: np.ndarray = None

    def __post_init__(self):
        if self.bits is None:
            self.bits = np.ones((self.resolution,) * 3, dtype=bool)

    def cell_size(self):
        return (np.asarray(self.box_max) - np.asarray(self.box_min)) \
            / self.resolution

    def cell_of(self, points):
        p = np.atleast_2d(points)
        idx = np.floor((p - np.asarray(self.box_min)) / self.cell_size())
        return idx.astype(np.int64)

    def query(self, points):
        p = np.atleast_2d(points)
        idx = self.cell_of(p)
        ok = np.all((idx >= 0) & (idx < self.resolution), axis=1)
        out = np.zeros(len(p), dtype=bool)
        if ok.any():
            i = idx[ok]
            out[ok] = self.bits[i[:, 0], i[:, 1], i[:, 2]]
        return out

    def occupied_fraction(self):
        return float(self.bits.mean())


def _dilate(bits):
    out = bits.copy()
    for ax in range(3):
        shifted_f = np.zeros_like(bits)
        shifted_b = np.zeros_like(bits)
        sl_f = [slice(None)] * 3
        sl_b = [slice(None)] * 3
        sl_f[ax] = slice(1, None)
        sl_b[ax] = slice(None, -1)
        shifted_f[tuple(sl_f)] = out[tuple(sl_b)]
        shifted_b[tuple(sl_b)] = out[tuple(sl_f)]
        out = out | shifted_f | shifted_b
    return out


def update_occupancy(grid, model, poses=None, skel=None, rng=None,
                     chunk=131072):
    """Refresh occupancy from the current field and training poses.

    Density is probed at jittered canonical cell points; occupied canonical
    probes are mapped forward through each pose (identity for static scenes)
    and the posed cells containing any image are marked, then dilated one
    cell.  The probe density threshold scales with the current alpha.

    Probing is restricted to the current canonical support plus a two-cell
    ring.  The support can only expand one cell per update (dilation ring),
    so for a continuously evolving field the restriction never misses
    growth; the first update on a fresh grid probes everything.
    """
    rng = rng or np.random.default_rng(0)
    res = grid.resolution
    lo = np.asarray(grid.box_min)
    cell = grid.cell_size()

    canon = getattr(grid, "_canon_bits", None)
    if canon is None:
        canon = np.ones((res,) * 3, dtype=bool)
    cand = _dilate(_dilate(canon))
    cand_ijk = np.argwhere(cand)
    centers = (cand_ijk + 0.5) * cell + lo
    k = grid.probes_per_cell
    probes = (centers[:, None, :]
              + (rng.uniform(-0.5, 0.5, size=(len(centers), k, 3)) * cell))
    probes = np.ascontiguousarray(probes.reshape(-1, 3), dtype=np.float32)

    dens = np.empty(len(probes), dtype=np.float64)
    for i in range(0, len(probes), chunk):
        dens[i:i + chunk] = model.density_np(
            model.sdf_np(probes[i:i + chunk]))
    thr = grid.density_threshold_scale * model.alpha_value()
    hot = probes[dens >= thr]

    canon_new = np.zeros((res,) * 3, dtype=bool)
    hot_cell = cand_ijk[np.nonzero((dens >= thr).reshape(len(centers), k)
                                   .any(axis=1))[0]]
    canon_new[hot_cell[:, 0], hot_cell[:, 1], hot_cell[:, 2]] = True
    grid._canon_bits = _dilate(canon_new)

    bits = np.zeros((res,) * 3, dtype=bool)
    pose_list = poses if poses else [None]
    for pose in pose_list:
        pts = hot if pose is None else art.lbs(hot, pose, skel)
        idx = np.floor((pts - lo) / cell).astype(np.int64)
        ok = np.all((idx >= 0) & (idx < res), axis=1)
        i = idx[ok]
        bits[i[:, 0], i[:, 1], i[:, 2]] = True
    grid.bits = _dilate(bits)
    return grid


# ---------------------------------------------------------------------------
# stratified sampling restricted to occupied space

def sample_ray(o, d, grid, n_max, near, far, rng=None, probes=256,
               min_step=None):
    """Stratified t-values restricted to occupied cells.

    Returns (t (R, S), valid (R, S)).  Each ray gets
    min(n_max, ceil(occupied_measure / min_step)) samples stratified over the
    occupied part of [near, far]; rays that miss all occupied cells get
    none.  With a fully occupied grid this is exactly n_max stratified
    samples over [near, far].  ``rng=None`` centers samples (deterministic).
    """
    o = np.atleast_2d(o)
    d = np.atleast_2d(d)
    r = len(o)
    if min_step is None:
        min_step = (far - near) / (4 * n_max)
    dt = (far - near) / probes
    tp = near + (np.arange(probes) + 0.5) * dt
    pts = o[:, None, :] + tp[None, :, None] * d[:, None, :]
    occ = (grid.query(pts.reshape(-1, 3)).reshape(r, probes)
           if grid is not None else np.ones((r, probes), dtype=bool))

    count = occ.sum(axis=1)
    n_i = np.minimum(n_max, np.ceil(count * dt / min_step)).astype(np.int64)
    n_i[count == 0] = 0
    s = int(n_i.max()) if len(n_i) else 0
    if s == 0:
        return np.zeros((r, 0)), np.zeros((r, 0), dtype=bool)

    # occupied probe columns, in order, per ray
    order = np.argsort(~occ, axis=1, kind="stable")
    j = np.arange(s)[None, :]
    valid = j < n_i[:, None]
    xi = rng.uniform(0.0, 1.0, size=(r, s)) if rng is not None \
        else np.full((r, s), 0.5)
    u = (j + xi) / np.maximum(n_i, 1)[:, None]
    pos = u * count[:, None]
    seg = np.minimum(np.floor(pos), np.maximum(count - 1, 0)[:, None]) \
        .astype(np.int64)
    within = pos - seg
    col = np.take_along_axis(order, np.minimum(seg, probes - 1), axis=1)
    t = near + (col + within) * dt
    t[~valid] = far
    return t, valid


def sample_deltas(t, valid, far):
    """Interval length per sample: t_{j+1} - t_j, last valid gets far - t."""
    r, s = t.shape
    delta = np.zeros((r, s))
    if s > 1:
        delta[:, :-1] = t[:, 1:] - t[:, :-1]
    counts = valid.sum(axis=1)
    has = counts > 0
    last = np.maximum(counts - 1, 0)
    delta[np.arange(r)[has], last[has]] = far - t[np.arange(r)[has], last[has]]
    delta[~valid] = 0.0
    return np.maximum(delta, 0.0)


# ---------------------------------------------------------------------------
# shading

@dataclass
class SampleBatch:
    """Compact per-sample quantities plus the (rays, slots) bookkeeping."""
    shape: tuple              # (R, S)
    flat_idx: np.ndarray      # (M,) into R*S, row-major, sorted
    ray_id: np.ndarray        # (M,)
    t: np.ndarray             # (M,)
    delta: np.ndarray         # (M,)
    x_d: np.ndarray           # (M, 3) posed points
    x_c: object               # Var (M, 3) canonical, post-offset
    d: object                 # Var (M,)
    v: object                 # Var (M, feature_dim)
    grads: object             # Var (M, 3) spatial gradient of d at x_c
    normals: object           # Var (M, 3) unit normals
    sigma: object             # Var (M,)
    color: object             # Var (M, 3)
    ok: np.ndarray            # (M,) correspondence found
    pair_left: np.ndarray = None   # (M-1,) mask: sample i and i+1 consecutive
                                   # on the same ray

    @property
    def count(self):
        return len(self.flat_idx)


@dataclass
class RaySample:
    """One materialized sample (testing/introspection convenience)."""
    t: float
    x_d: np.ndarray
    x_c: np.ndarray
    d: float
    v: np.ndarray
    n_hat: np.ndarray
    sigma: float
    c: np.ndarray
    delta: float


def materialize_samples(batch):
    out = []
    for i in range(batch.count):
        out.append(RaySample(
            t=float(batch.t[i]), x_d=batch.x_d[i], x_c=batch.x_c.data[i],
            d=float(batch.d.data[i]), v=batch.v.data[i],
            n_hat=batch.normals.data[i], sigma=float(batch.sigma.data[i]),
            c=batch.color.data[i], delta=float(batch.delta[i])))
    return out


def shade_samples(model, leaf, o, d, t, valid, far, pose=None, skel=None,
                  need_normals=True):
    """Evaluate the canonical fields along rays.

    Static scenes use the identity correspondence; articulated ones run the
    inverse-skinning search (no gradients flow through it) and add the
    pose-conditioned offset on the tape.  Samples without a correspondence
    get sigma = 0 and black color.
    """
    r, s = t.shape
    delta_rs = sample_deltas(t, valid, far)
    flat_idx = np.nonzero(valid.ravel())[0]
    ray_id = flat_idx // max(s, 1)
    t_c = t.ravel()[flat_idx]
    delta_c = delta_rs.ravel()[flat_idx]
    x_d = (o[:, None, :] + t[..., None] * d[:, None, :]).reshape(-1, 3)[flat_idx]

    if pose is not None:
        cands, vmask = art.inverse_lbs_batch(x_d, pose, skel)
        x_cstar, ok = art.select_correspondence_batch(cands, vmask,
                                                      model.sdf_np)
    else:
        x_cstar, ok = x_d, np.ones(len(x_d), dtype=bool)

    xv = dc.Var(np.ascontiguousarray(x_cstar, dtype=model.store.dtype))
    if model.offset_field.enabled and pose is not None:
        theta = np.broadcast_to(pose.theta.astype(model.store.dtype),
                                (len(x_d), len(pose.theta))).copy()
        x_eval = dc.add(xv, model.offset(leaf, xv, dc.Var(theta)))
    else:
        x_eval = xv

    d_var, v = model.sdf(leaf, x_eval)
    grads = normals = None
    if need_normals:
        grads = dc.grad(d_var, [x_eval],
                        seed=dc.Var(np.ones_like(d_var.data)))[0]
        if grads is None:  # no_grad mode
            grads = dc.Var(np.zeros_like(x_eval.data))
        normals = dc.normalize(grads, axis=1)

    sigma = model.density(leaf, d_var)
    color = model.color(leaf, x_eval, v)
    if not ok.all():
        sigma = dc.where(ok, sigma, 0.0)
        color = dc.where(ok[:, None], color, 0.0)

    pair_left = (ray_id[:-1] == ray_id[1:]) if len(ray_id) > 1 \
        else np.zeros(0, dtype=bool)
    return SampleBatch(shape=(r, s), flat_idx=flat_idx, ray_id=ray_id,
                       t=t_c, delta=delta_c, x_d=x_d, x_c=x_eval, d=d_var,
                       v=v, grads=grads, normals=normals, sigma=sigma,
                       color=color, ok=ok, pair_left=pair_left)


# ---------------------------------------------------------------------------
# compositing

def composite(sigma, delta, color):
    """Alpha compositing over rectangular (R, S) sample grids.

    alpha_i = 1 - exp(-sigma_i delta_i); transmittance is the exponential of
    the negative exclusive cumulative optical depth.  Returns (C (R, 3),
    A (R,), weights (R, S)).
    """
    sigma = dc.as_var(sigma)
    delta = dc.as_var(delta)
    color = dc.as_var(color)
    tau = dc.mul(sigma, delta)
    cum = dc.cumsum(tau, 1)
    excl = dc.sub(cum, tau)
    trans = dc.exp(dc.neg(excl))
    alpha = dc.sub(1.0, dc.exp(dc.neg(tau)))
    w = dc.mul(alpha, trans)
    c_hat = dc.vsum(dc.mul(dc.reshape(w, (*w.data.shape, 1)), color), axis=1)
    a_hat = dc.vsum(w, axis=1)
    return c_hat, a_hat, w


def composite_compact(batch):
    """Compositing for a compact SampleBatch; returns (C, A, w_compact)."""
    r, s = batch.shape
    tau_c = dc.mul(batch.sigma, dc.Var(batch.delta.astype(
        batch.sigma.data.dtype)))
    tau_full = dc.reshape(dc.scatter_add(tau_c, batch.flat_idx, r * s), (r, s))
    cum = dc.cumsum(tau_full, 1)
    excl = dc.sub(cum, tau_full)
    trans_c = dc.exp(dc.neg(dc.gather(dc.reshape(excl, (r * s,)),
                                      batch.flat_idx)))
    alpha_c = dc.sub(1.0, dc.exp(dc.neg(tau_c)))
    w_c = dc.mul(alpha_c, trans_c)
    a_hat = dc.scatter_add(w_c, batch.ray_id, r)
    ch = [dc.scatter_add(dc.mul(w_c, dc.slice_(batch.color,
                                               (slice(None), k))),
                         batch.ray_id, r) for k in range(3)]
    c_hat = dc.concat([dc.reshape(c, (r, 1)) for c in ch], axis=1)
    return c_hat, a_hat, w_c


def composite_background(c_hat, a_hat, background):
    bg = np.asarray(background, dtype=c_hat.data.dtype)
    return dc.add(c_hat, dc.mul(dc.reshape(dc.sub(1.0, a_hat),
                                           (len(a_hat.data), 1)),
                                dc.Var(bg)))


# ---------------------------------------------------------------------------
# full-frame inference rendering

def render_image(model, camera, pose=None, skel=None, grid=None, n_max=128,
                 background=(0.0, 0.0, 0.0), chunk=8192, min_step=None):
    """Render a full frame without gradients; returns (image, alpha)."""
    w, h = camera.width, camera.height
    pix = pixel_grid(w, h)
    img = np.zeros((h * w, 3), dtype=np.float64)
    alpha = np.zeros(h * w, dtype=np.float64)
    if min_step is None:
        min_step = (camera.far - camera.near) / (8 * n_max)
    with dc.no_grad():
        leaf = model.store.leaf()
        for i in range(0, len(pix), chunk):
            o, d = make_rays(camera, pix[i:i + chunk])
            t, valid = sample_ray(o, d, grid, n_max, camera.near, camera.far,
                                  rng=None, min_step=min_step)
            if valid.sum() == 0:
                img[i:i + chunk] = background
                continue
            batch = shade_samples(model, leaf, o, d, t, valid, camera.far,
                                  pose=pose, skel=skel, need_normals=False)
            c_hat, a_hat, _ = composite_compact(batch)
            c_full = composite_background(c_hat, a_hat, background)
            img[i:i + chunk] = c_full.data
            alpha[i:i + chunk] = a_hat.data
    return img.reshape(h, w, 3), alpha.reshape(h, w)
