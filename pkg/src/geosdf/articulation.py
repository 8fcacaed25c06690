"""Toy-skeleton linear blend skinning and its inverse correspondence search.

The rig is deliberately tiny: two bones along the z axis of a capsule with a
smoothstep blend band, the smallest configuration that folds posed space
onto canonical space one-to-many when bent.  The posed->canonical inverse
runs a damped Newton iteration from one bone-anchored start per bone,
vectorized over points.  Gradients never flow through the search: the
correspondence is treated as locally rigid and differentiability is carried
by the offset field downstream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, UsageError


def rotation_from_axis_angle(v):
    """Rodrigues rotation from an axis-angle 3-vector."""
    v = np.asarray(v, dtype=np.float64)
    angle = np.linalg.norm(v)
    if angle < 1e-12:
        return np.eye(3)
    axis = v / angle
    k = np.array([[0, -axis[2], axis[1]],
                  [axis[2], 0, -axis[0]],
                  [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def axis_angle_from_rotation(r):
    """Inverse of rotation_from_axis_angle (angle in [0, pi])."""
    r = np.asarray(r, dtype=np.float64)
    cos = np.clip((np.trace(r) - 1) / 2, -1.0, 1.0)
    angle = np.arccos(cos)
    if angle < 1e-12:
        return np.zeros(3)
    axis = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    axis /= 2 * np.sin(angle)
    return axis * angle


@dataclass
class Skeleton:
    num_bones: int
    rest_joints: np.ndarray  # (n_b, 3)
    weight_fn: callable      # (N, 3) -> (N, n_b), rows sum to 1

    def weights(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        w = self.weight_fn(x)
        return w


def smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3 - 2 * t)


def two_bone_capsule_skeleton(blend_band=0.1):
    """Two bones split at z=0 with a smoothstep blend over ``blend_band``."""

    def weight_fn(x):
        s = smoothstep(x[:, 2] / blend_band + 0.5)
        return np.stack([1 - s, s], axis=1)

    return Skeleton(num_bones=2,
                    rest_joints=np.array([[0.0, 0.0, -0.1], [0.0, 0.0, 0.1]]),
                    weight_fn=weight_fn)


@dataclass
class BonePose:
    rotations: np.ndarray     # (n_b, 3, 3)
    translations: np.ndarray  # (n_b, 3)

    def __post_init__(self):
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        self.translations = np.asarray(self.translations, dtype=np.float64)
        for r in self.rotations:
            if not np.allclose(r.T @ r, np.eye(3), atol=1e-6):
                raise UsageError("bone rotation is not orthonormal")
            if np.linalg.det(r) < 0:
                raise UsageError("bone rotation is a reflection")

    @property
    def num_bones(self):
        return len(self.rotations)

    @property
    def theta(self):
        """Axis-angle stack feeding the pose-conditioned offset field."""
        return np.concatenate([axis_angle_from_rotation(r)
                               for r in self.rotations])

    @classmethod
    def identity(cls, num_bones):
        return cls(np.repeat(np.eye(3)[None], num_bones, axis=0),
                   np.zeros((num_bones, 3)))

    @classmethod
    def from_params(cls, params):
        """params: (n_b, 6) rows of axis-angle then translation."""
        params = np.asarray(params, dtype=np.float64).reshape(-1, 6)
        rots = np.stack([rotation_from_axis_angle(p[:3]) for p in params])
        return cls(rots, params[:, 3:].copy())

    def to_params(self):
        return np.concatenate([np.concatenate([axis_angle_from_rotation(r), t])
                               for r, t in zip(self.rotations, self.translations)])


def capsule_bend_pose(angle, axis=(1.0, 0.0, 0.0)):
    """Elbow pose for the two-bone rig: bone 0 fixed, bone 1 rotated about
    the joint at the origin."""
    r1 = rotation_from_axis_angle(np.asarray(axis) * angle)
    return BonePose(np.stack([np.eye(3), r1]), np.zeros((2, 3)))


def lbs(x_c, pose, skel):
    """Forward linear blend skinning: x_d = sum_i w_i (R_i x + t_i)."""
    x = np.atleast_2d(np.asarray(x_c, dtype=np.float64))
    w = skel.weights(x)  # (N, n_b)
    posed = np.einsum("bij,nj->nbi", pose.rotations, x) + pose.translations
    out = np.einsum("nb,nbi->ni", w, posed)
    return out[0] if np.asarray(x_c).ndim == 1 else out


@dataclass
class InverseOpts:
    max_iters: int = 20
    tol_corr: float = 1e-5
    merge_radius: float = 1e-3
    fd_step: float = 1e-5


def _newton_solve(x0, x_d, pose, skel, opts):
    """Damped Newton on r(x) = lbs(x) - x_d, vectorized over points."""
    x = x0.copy()
    r = lbs(x, pose, skel) - x_d
    rn = np.linalg.norm(r, axis=1)
    h = opts.fd_step
    eye = np.eye(3)
    for _ in range(opts.max_iters):
        active = rn > opts.tol_corr
        if not active.any():
            break
        xa = x[active]
        ra = r[active]
        jac = np.empty((len(xa), 3, 3))
        for k in range(3):
            dx = eye[k] * h
            jac[:, :, k] = (lbs(xa + dx, pose, skel)
                            - lbs(xa - dx, pose, skel)) / (2 * h)
        # ridge keeps near-singular blend-band Jacobians solvable
        det = np.abs(np.linalg.det(jac))
        jac[det < 1e-12] += 1e-8 * eye
        step = np.linalg.solve(jac, ra[:, :, None])[:, :, 0]

        xa_new = xa - step
        r_new = lbs(xa_new, pose, skel) - x_d[active]
        rn_new = np.linalg.norm(r_new, axis=1)
        # damping: halve the step while the residual grows
        lam = np.ones(len(xa))
        for _ in range(4):
            worse = rn_new > np.linalg.norm(ra, axis=1)
            if not worse.any():
                break
            lam[worse] *= 0.5
            xa_new[worse] = xa[worse] - lam[worse, None] * step[worse]
            r_new[worse] = lbs(xa_new[worse], pose, skel) - x_d[active][worse]
            rn_new[worse] = np.linalg.norm(r_new[worse], axis=1)
        x[active] = xa_new
        r[active] = r_new
        rn[active] = rn_new
    return x, rn


def inverse_lbs_batch(x_d, pose, skel, opts=None):
    """Candidates for every point: (n_init, N, 3) plus a validity mask.

    One initialization per bone: the point pulled back by that bone's rigid
    inverse.  Converged duplicates within ``merge_radius`` are masked out.
    """
    opts = opts or InverseOpts()
    x_d = np.atleast_2d(np.asarray(x_d, dtype=np.float64))
    n = len(x_d)
    nb = pose.num_bones
    cands = np.zeros((nb, n, 3))
    valid = np.zeros((nb, n), dtype=bool)
    for b in range(nb):
        x0 = (x_d - pose.translations[b]) @ pose.rotations[b]
        xc, rn = _newton_solve(x0, x_d, pose, skel, opts)
        cands[b] = xc
        valid[b] = rn < opts.tol_corr
    # dedupe: keep the first of any pair closer than merge_radius
    for b in range(1, nb):
        for a in range(b):
            dup = (valid[a] & valid[b]
                   & (np.linalg.norm(cands[a] - cands[b], axis=1)
                      < opts.merge_radius))
            valid[b][dup] = False
    return cands, valid


def inverse_lbs(x_d, pose, skel, opts=None):
    """Per-point list of converged canonical candidates (may be empty)."""
    cands, valid = inverse_lbs_batch(np.atleast_2d(x_d), pose, skel, opts)
    out = [cands[valid[:, i], i] for i in range(cands.shape[1])]
    return out[0] if np.asarray(x_d).ndim == 1 else out


def select_correspondence(candidates, sdf_fn):
    """The candidate with minimum SDF value, or None when there is none."""
    candidates = np.atleast_2d(np.asarray(candidates, dtype=np.float64))
    if candidates.size == 0:
        return None
    if len(candidates) == 1:
        return candidates[0]
    d = np.asarray(sdf_fn(candidates), dtype=np.float64).ravel()
    return candidates[int(np.argmin(d))]


def select_correspondence_batch(cands, valid, sdf_fn):
    """Vectorized selection over (n_init, N, 3) candidates.

    Returns (x_c (N, 3), ok (N,)); invalid points get zeros and ok=False.
    """
    nb, n, _ = cands.shape
    d = np.full((nb, n), np.inf)
    flat = cands.reshape(-1, 3)
    mask = valid.reshape(-1)
    if mask.any():
        d_flat = np.full(nb * n, np.inf)
        d_flat[mask] = np.asarray(sdf_fn(flat[mask])).ravel()
        d = d_flat.reshape(nb, n)
    ok = valid.any(axis=0)
    best = np.argmin(d, axis=0)
    x_c = cands[best, np.arange(n)]
    x_c[~ok] = 0.0
    return x_c, ok


# ---------------------------------------------------------------------------
# pose file I/O: one line per frame, "frame ax ay az tx ty tz" per bone

def save_poses(path, poses):
    nb = poses[0].num_bones if poses else 0
    with open(path, "w") as fh:
        fh.write(f"# geosdf poses: frame then per bone ax ay az tx ty tz\n")
        fh.write(f"bones {nb}\n")
        for i, pose in enumerate(poses):
            vals = pose.to_params()
            fh.write(" ".join([str(i)] + [f"{v:.17g}" for v in vals]) + "\n")


def load_poses(path):
    poses = []
    nb = None
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("bones "):
                nb = int(line.split()[1])
                continue
            parts = line.split()
            vals = np.array([float(v) for v in parts[1:]])
            if nb is None or len(vals) != 6 * nb:
                raise DataError(f"{path}: malformed pose line {line!r}")
            poses.append(BonePose.from_params(vals.reshape(nb, 6)))
    return poses
