"""Training losses: photometric, mask, Eikonal, the ray-wise normal
smoothing regularizer, and the finite-difference/curvature alternatives it
is ablated against.

The smoothing term is evaluated literally as its two midpoint addends
|n_mid - n_j| + |n_mid - n_{j+1}|, normalized per ray by the sample count
and averaged over rays.  The two addends are algebraically equal (each is
half the consecutive-normal difference), which the tests pin down.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .errors import NumericFault, UsageError


@dataclass
class LossWeights:
    rgb: float = 10.0
    alpha: float = 0.1
    eikonal: float = 0.1
    smooth: float = 1.0     # admissible range [0.5, 1.5]
    curvature: float = 1e-3

    def __post_init__(self):
        if min(self.rgb, self.alpha, self.eikonal, self.smooth,
               self.curvature) < 0:
            raise UsageError("loss weights must be non-negative")


class RegularizerKind(str, enum.Enum):
    NONE = "none"
    ANALYTIC_EIKONAL = "analytic_eikonal"   # base model (plain Eikonal only)
    SMOOTH_NORMALS = "smooth_normals"
    NUMERICAL_EIKONAL = "numerical_eikonal"
    CURVATURE_LAPLACIAN = "curvature_laplacian"


def rgb_loss(c_hat, c_gt):
    """Mean absolute error over rays and channels."""
    c_hat = dc.as_var(c_hat)
    gt = np.asarray(c_gt, dtype=c_hat.data.dtype)
    if c_hat.data.shape != gt.shape:
        raise UsageError("rgb_loss: prediction/target count mismatch")
    return dc.mean(dc.abs_(dc.sub(c_hat, dc.Var(gt))))


def mask_loss(a_hat, m_gt):
    a_hat = dc.as_var(a_hat)
    gt = np.asarray(m_gt, dtype=a_hat.data.dtype)
    return dc.mean(dc.abs_(dc.sub(a_hat, dc.Var(gt))))


def eikonal_from_grads(grads):
    """Mean (||grad|| - 1)^2 over sample points."""
    g = dc.as_var(grads)
    return dc.mean(dc.square(dc.sub(dc.safe_norm(g, axis=1), 1.0)))


def eikonal_loss(points, sdf_program, leaf):
    """Eikonal loss with analytic spatial gradients at the given points.

    ``sdf_program(leaf, x_var) -> d Var``.  Training reuses the ray-sample
    gradients instead of calling this directly.
    """
    xv = dc.Var(np.atleast_2d(np.asarray(points)))
    d = sdf_program(leaf, xv)
    g = dc.grad(d, [xv], seed=dc.Var(np.ones_like(d.data)))[0]
    return eikonal_from_grads(g)


def smooth_loss(normals, ray_id, sample_counts, pair_mask=None):
    """Ray-wise normal smoothing over consecutive sample pairs.

    ``normals``: Var (M, 3) unit normals in compact ray-major order;
    ``ray_id``: (M,) ray index per sample; ``sample_counts``: (R,) samples
    per ray.  Rays with fewer than two samples contribute zero.  The per-ray
    pair sums divide by the ray's sample count and the result averages over
    all R rays.
    """
    n = dc.as_var(normals)
    m = n.data.shape[0]
    r = len(sample_counts)
    if m < 2 or r == 0:
        return dc.Var(np.zeros((), dtype=n.data.dtype))
    if pair_mask is None:
        pair_mask = ray_id[:-1] == ray_id[1:]
    n_j = dc.slice_(n, (slice(0, m - 1),))
    n_j1 = dc.slice_(n, (slice(1, m),))
    n_mid = dc.mul(dc.add(n_j, n_j1), 0.5)
    addend_a = dc.safe_norm(dc.sub(n_mid, n_j), axis=1)
    addend_b = dc.safe_norm(dc.sub(n_mid, n_j1), axis=1)
    pair = dc.mul(dc.add(addend_a, addend_b),
                  dc.Var(pair_mask.astype(n.data.dtype)))
    per_ray = dc.scatter_add(pair, ray_id[:-1], r)
    counts = np.maximum(np.asarray(sample_counts, dtype=np.float64), 1.0)
    per_ray = dc.mul(per_ray, dc.Var((1.0 / counts).astype(n.data.dtype)))
    return dc.mul(dc.vsum(per_ray), 1.0 / r)


def smooth_loss_addends(normals_a, normals_b):
    """The literal two midpoint addends for one pair (testing hook)."""
    na = dc.as_var(np.atleast_2d(normals_a))
    nb = dc.as_var(np.atleast_2d(normals_b))
    mid = dc.mul(dc.add(na, nb), 0.5)
    return (dc.safe_norm(dc.sub(mid, na), axis=1),
            dc.safe_norm(dc.sub(mid, nb), axis=1))


def numerical_eikonal_loss(points, sdf_program, leaf, eps):
    """Eikonal loss with central-difference gradients (6 axis probes).

    Every probe is a differentiable field evaluation, so backpropagation
    reaches the hash cells of all six probe points.
    """
    if eps <= 0:
        raise UsageError("eps must be positive")
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = len(pts)
    probes = []
    for k in range(3):
        dx = np.zeros(3)
        dx[k] = eps
        probes.append(pts + dx)
        probes.append(pts - dx)
    allpts = np.concatenate(probes)
    d = sdf_program(leaf, dc.Var(allpts))
    comps = []
    for k in range(3):
        dp = dc.slice_(d, (slice(2 * k * n, (2 * k + 1) * n),))
        dm = dc.slice_(d, (slice((2 * k + 1) * n, (2 * k + 2) * n),))
        comps.append(dc.reshape(dc.mul(dc.sub(dp, dm), 1.0 / (2 * eps)),
                                (n, 1)))
    g = dc.concat(comps, axis=1)
    return eikonal_from_grads(g)


def curvature_loss(points, sdf_program, leaf, eps):
    """Mean |discrete Laplacian| of the field, 6 probes plus the center."""
    if eps <= 0:
        raise UsageError("eps must be positive")
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = len(pts)
    stack = [pts]
    for k in range(3):
        dx = np.zeros(3)
        dx[k] = eps
        stack.append(pts + dx)
        stack.append(pts - dx)
    d = sdf_program(leaf, dc.Var(np.concatenate(stack)))
    d0 = dc.slice_(d, (slice(0, n),))
    lap = None
    for k in range(3):
        dp = dc.slice_(d, (slice((2 * k + 1) * n, (2 * k + 2) * n),))
        dm = dc.slice_(d, (slice((2 * k + 2) * n, (2 * k + 3) * n),))
        term = dc.sub(dc.add(dp, dm), dc.mul(d0, 2.0))
        lap = term if lap is None else dc.add(lap, term)
    return dc.mean(dc.abs_(dc.mul(lap, 1.0 / eps ** 2)))


def fd_eps_schedule(iteration, total, eps_start=1e-2, eps_end=1e-3):
    """Exponential decay of the finite-difference scale over training."""
    if total <= 1:
        return eps_end
    f = min(max(iteration / (total - 1), 0.0), 1.0)
    return float(eps_start * (eps_end / eps_start) ** f)


def total_loss(parts, weights, kind):
    """Weighted sum; the regularizer kind selects the geometry terms.

    ``parts`` maps term name -> scalar Var; required keys: rgb, alpha;
    eikonal / eikonal_fd / smooth / curvature per kind.  Returns (Var,
    breakdown dict of floats).
    """
    kind = RegularizerKind(kind)
    terms = {"rgb": weights.rgb, "alpha": weights.alpha}
    if kind == RegularizerKind.NUMERICAL_EIKONAL:
        terms["eikonal_fd"] = weights.eikonal
    else:
        terms["eikonal"] = weights.eikonal
    if kind == RegularizerKind.SMOOTH_NORMALS:
        terms["smooth"] = weights.smooth
    if kind == RegularizerKind.CURVATURE_LAPLACIAN:
        terms["curvature"] = weights.curvature

    total = None
    breakdown = {}
    for name, w in terms.items():
        if name not in parts:
            raise UsageError(f"total_loss: missing term {name!r}")
        term = parts[name]
        val = float(term.data)
        if not np.isfinite(val):
            raise NumericFault(f"loss term {name!r} is non-finite")
        breakdown[name] = val
        piece = dc.mul(term, float(w))
        total = piece if total is None else dc.add(total, piece)
    breakdown["total"] = float(total.data)
    return total, breakdown
