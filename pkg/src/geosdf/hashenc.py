"""Multiresolution hash-grid spatial encoding with optional sinusoidal bands.

Each level is a virtual voxel grid; vertex features live either in a dense
table (when the lattice fits) or in a fixed-size hash table indexed by the
XOR-of-primes scheme.  Queries interpolate the 8 cell corners trilinearly.
All levels are processed as one (levels, N, ...) block so a full encode is
a handful of tape nodes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .errors import UsageError

# corner order: bit 0 -> x, bit 1 -> y, bit 2 -> z
_CORNERS = np.array([[(c >> a) & 1 for a in range(3)] for c in range(8)],
                    dtype=np.int64)
_PRIMES = np.array([1, 2654435761, 805459861], dtype=np.uint64)


@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 12
    base_resolution: int = 16
    growth_factor: float = 1.38
    features_per_level: int = 2
    table_size_log2: int = 17
    box_min: tuple = (-1.0, -1.0, -1.0)
    box_max: tuple = (1.0, 1.0, 1.0)

    def resolution(self, level):
        return int(np.floor(self.base_resolution * self.growth_factor ** level))

    def resolutions(self):
        return np.array([self.resolution(l) for l in range(self.levels)])

    def is_direct(self, level):
        # small lattices index directly (collision-free), like Instant-NGP
        n = self.resolution(level) + 1
        return n ** 3 <= 2 ** self.table_size_log2

    def table_entries(self, level):
        if self.is_direct(level):
            n = self.resolution(level) + 1
            return n ** 3
        return 2 ** self.table_size_log2

    def entry_offsets(self):
        offs = [0]
        for l in range(self.levels):
            offs.append(offs[-1] + self.table_entries(l))
        return np.array(offs)

    def total_entries(self):
        return int(self.entry_offsets()[-1])

    def total_features(self):
        return self.total_entries() * self.features_per_level

    def output_dim(self):
        return self.levels * self.features_per_level


@dataclass(frozen=True)
class HybridPEConfig:
    enabled: bool = False
    num_frequencies: int = 4
    max_frequency_log2: float = 3.0

    def output_dim(self):
        return 3 * 2 * self.num_frequencies if self.enabled else 0

    def frequencies(self):
        if self.num_frequencies == 1:
            return np.array([2.0 ** self.max_frequency_log2])
        return 2.0 ** np.linspace(0.0, self.max_frequency_log2,
                                  self.num_frequencies)


def init_features(cfg, rng):
    """Near-zero feature init so the geometric initialization dominates."""
    return rng.uniform(-1e-4, 1e-4, size=cfg.total_features())


def _clamped(cfg, x):
    lo = np.asarray(cfg.box_min, dtype=x.dtype)
    hi = np.asarray(cfg.box_max, dtype=x.dtype)
    return np.clip(x, lo, hi)


def _lattice_indices(cfg, x):
    """Cell base coordinates and per-level corner entry indices.

    Returns (c0 (L, N, 3) float, entry_idx (L, N, 8) int32 global entries).
    ``x`` is clamped to the domain box first; callers that need gradients
    must subtract c0 from their own scaled coordinates on the tape.
    """
    x = _clamped(cfg, np.asarray(x))
    if x.ndim == 1:
        x = x[None]
    dtype = x.dtype if x.dtype in (np.float32, np.float64) else np.float64
    lo = np.asarray(cfg.box_min, dtype=dtype)
    size = np.asarray(cfg.box_max, dtype=dtype) - lo
    res = cfg.resolutions().astype(dtype)  # (L,)
    u = (x[None] - lo) / size * res[:, None, None]  # (L, N, 3)
    c0 = np.floor(u)
    np.clip(c0, 0, res[:, None, None] - 1, out=c0)
    c0i = c0.astype(np.int32)

    offs = cfg.entry_offsets()
    mask = np.uint32(2 ** cfg.table_size_log2 - 1)
    primes32 = _PRIMES.astype(np.uint32)
    entry = np.empty((cfg.levels, x.shape[0], 8), dtype=np.int32)
    bits = _CORNERS.astype(np.int32)  # (8, 3)
    for l in range(cfg.levels):
        cx = c0i[l, :, None, 0] + bits[:, 0]
        cy = c0i[l, :, None, 1] + bits[:, 1]
        cz = c0i[l, :, None, 2] + bits[:, 2]
        n = cfg.resolution(l) + 1
        if cfg.is_direct(l):
            e = cx + n * (cy + n * cz)
        else:
            h = (cx.astype(np.uint32) * primes32[0]
                 ^ cy.astype(np.uint32) * primes32[1]
                 ^ cz.astype(np.uint32) * primes32[2])
            e = (h & mask).astype(np.int32)
        entry[l] = e + np.int32(offs[l])
    return c0, entry


def encode(x, features, cfg, pe=None, precomputed=None):
    """Encode points -> concatenated per-level features (+ optional PE).

    ``x`` is a Var or array of shape (N, 3); ``features`` is the flat feature
    Var of length cfg.total_features().  Differentiable in both.
    ``precomputed`` short-circuits the lattice hashing with a cached
    ``_lattice_indices`` result for fixed query points.
    """
    xv = dc.as_var(x)
    if xv.data.ndim != 2 or xv.data.shape[1] != 3:
        raise UsageError("encode expects points of shape (N, 3)")
    if not np.isfinite(xv.data).all():
        raise UsageError("non-finite query point")
    n = xv.data.shape[0]
    dtype = xv.data.dtype
    lo = np.asarray(cfg.box_min, dtype=dtype)
    size = np.asarray(cfg.box_max, dtype=dtype) - lo
    res = cfg.resolutions().astype(dtype)

    # clamp on data; gradient of clamp is identity inside the box, zero outside
    inside = (xv.data >= lo) & (xv.data <= lo + size)
    x_cl = dc.where(inside, xv, dc.Var(_clamped(cfg, xv.data)))

    c0, entry = precomputed if precomputed is not None \
        else _lattice_indices(cfg, xv.data)
    # per-axis fractional coordinates, each (L, N): keeps the backward pass
    # away from (L, N, 3)-sized scatter buffers
    fx, gx = [], []
    for k in range(3):
        xk = dc.slice_(x_cl, (slice(None), k))                 # (N,)
        scale_k = dc.Var((res / size[k]).reshape(-1, 1).astype(dtype))
        u_k = dc.mul(dc.sub(xk, float(lo[k])), scale_k)        # (L, N)
        f_k = dc.sub(u_k, dc.Var(np.asarray(c0[:, :, k], dtype=dtype)))
        fx.append(f_k)
        gx.append(dc.sub(1.0, f_k))
    # corner order has x in bit 0: share the four xy products
    xy = {(bx, by): dc.mul(fx[0] if bx else gx[0], fx[1] if by else gx[1])
          for bx in (0, 1) for by in (0, 1)}
    corner_w = []
    for c in range(8):
        bits = _CORNERS[c]
        t3 = fx[2] if bits[2] else gx[2]
        corner_w.append(dc.reshape(dc.mul(xy[(bits[0], bits[1])], t3),
                                   (cfg.levels, n, 1)))
    w = dc.concat(corner_w, axis=2)                           # (L, N, 8)

    f = cfg.features_per_level
    fidx = (entry[..., None] * f + np.arange(f)).astype(np.int32)  # (L, N, 8, F)
    feats = dc.gather(features, fidx)                         # (L, N, 8, F)
    lvl = dc.corner_mix(w, feats)                             # (L, N, F)
    out = dc.reshape(dc.transpose(lvl, (1, 0, 2)), (n, cfg.levels * f))

    if pe is not None and pe.enabled:
        freqs = dc.Var(pe.frequencies().astype(dtype))
        ang = dc.reshape(dc.mul(dc.reshape(x_cl if x_cl.data.ndim == 2 else xv,
                                           (n, 3, 1)), freqs),
                         (n, 3 * pe.num_frequencies))
        out = dc.concat([out, dc.sin(ang), dc.cos(ang)], axis=1)
    return out


def interpolation_weights(cfg, x):
    """The 8 trilinear corner weights per level for plain-numpy callers."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    lo = np.asarray(cfg.box_min)
    size = np.asarray(cfg.box_max) - lo
    res = cfg.resolutions().astype(np.float64)
    c0, _ = _lattice_indices(cfg, x)
    u = (_clamped(cfg, x)[None] - lo) / size * res[:, None, None]
    frac = u - c0
    w = np.ones((cfg.levels, x.shape[0], 8))
    for c in range(8):
        for k in range(3):
            w[:, :, c] *= frac[:, :, k] if _CORNERS[c, k] else 1 - frac[:, :, k]
    return w


def touched_cells(x, cfg):
    """Set of (level, entry) hash-table entries whose features influence
    encode at the given point(s).  Accepts (3,) or (N, 3); for a batch the
    union over all points is returned."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    _, entry = _lattice_indices(cfg, x)
    offs = cfg.entry_offsets()
    out = set()
    for l in range(cfg.levels):
        for e in np.unique(entry[l]):
            out.add((l, int(e - offs[l])))
    return out


def feature_indices(cfg, cells, segment_offset=0):
    """Flat parameter indices backing a set of (level, entry) cells."""
    offs = cfg.entry_offsets()
    f = cfg.features_per_level
    idx = []
    for level, e in cells:
        base = (offs[level] + e) * f + segment_offset
        idx.extend(range(base, base + f))
    return np.array(sorted(idx), dtype=np.intp)


def points_clear_of_cell_faces(cfg, rng, n, margin):
    """Sample points whose distance to every level's cell faces exceeds
    ``margin`` along each axis.  Finite-difference probes with step below
    ``margin`` then stay inside one cell per level, where the encoding is
    smooth; this is the validity domain of the central-difference oracle."""
    lo = np.asarray(cfg.box_min)
    size = np.asarray(cfg.box_max) - lo
    res = cfg.resolutions()
    out = []
    while len(out) < n:
        cand = rng.uniform(lo + 2 * margin, lo + size - 2 * margin,
                           size=(max(64, 4 * n), 3))
        u = (cand[None] - lo) / size * res[:, None, None]
        dist = np.abs(u - np.round(u)) / res[:, None, None] * size
        ok = dist.min(axis=(0, 2)) > margin
        out.extend(cand[ok])
    return np.array(out[:n])
