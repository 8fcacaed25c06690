"""Canonical representation: SDF-with-features network, texture network,
pose-conditioned offset network, and the learnable density sharpness.

The SDF is an additive composition: a small MLP head over the hash encoding
plus the analytic term ||x|| - r0.  At init the head is near zero, so the
field starts as a sphere of radius r0 and the invariants below hold by
construction.  Cold checkpoint I/O lives here too (flat binary container,
bit-exact round trip).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import hashenc
from .errors import DataError, NumericFault, UsageError

SOFTPLUS_BETA = 100.0
FEATURE_DIM = 16


# ---------------------------------------------------------------------------
# small MLP helpers over the flat store

def mlp_register(store, prefix, dims, rng, final_scale=None, he_scale=1.0):
    """Register weight/bias segments for an MLP; final layer optionally tiny."""
    for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
        scale = np.sqrt(2.0 / din) * he_scale
        if final_scale is not None and i == len(dims) - 2:
            scale = final_scale
        store.add(f"{prefix}.w{i}", rng.normal(0.0, scale, size=(din, dout)))
        store.add(f"{prefix}.b{i}", np.zeros(dout))


def mlp_apply(store, leaf, prefix, dims, x):
    h = x
    for i in range(len(dims) - 1):
        w = dc.reshape(store.slice_param(leaf, f"{prefix}.w{i}"),
                       (dims[i], dims[i + 1]))
        b = store.slice_param(leaf, f"{prefix}.b{i}")
        h = dc.add(dc.matmul(h, w), b)
        if i < len(dims) - 2:
            h = dc.softplus(h, beta=SOFTPLUS_BETA)
    return h


# ---------------------------------------------------------------------------
# field definitions

@dataclass
class SdfField:
    encoder: hashenc.HashGridConfig = field(default_factory=hashenc.HashGridConfig)
    pe: hashenc.HybridPEConfig = field(default_factory=hashenc.HybridPEConfig)
    hidden_width: int = 64
    hidden_layers: int = 2
    geo_init_radius: float = 0.3

    def dims(self):
        din = self.encoder.output_dim() + self.pe.output_dim()
        return (din, *([self.hidden_width] * self.hidden_layers), 1 + FEATURE_DIM)

    def register(self, store, rng):
        store.add("hash.features", hashenc.init_features(self.encoder, rng))
        mlp_register(store, "sdf", self.dims(), rng, final_scale=1e-4)

    def __call__(self, store, leaf, x):
        """(d, v): signed distance and feature vector, both Vars."""
        feats = store.slice_param(leaf, "hash.features")
        enc = hashenc.encode(x, feats, self.encoder, self.pe)
        out = mlp_apply(store, leaf, "sdf", self.dims(), enc)
        radial = dc.sub(dc.safe_norm(x, axis=1), self.geo_init_radius)
        d = dc.add(dc.slice_(out, (slice(None), 0)), radial)
        v = dc.slice_(out, (slice(None), slice(1, 1 + FEATURE_DIM)))
        return d, v


@dataclass
class TextureField:
    hidden_width: int = 64
    hidden_layers: int = 2

    def dims(self):
        return (3 + FEATURE_DIM, *([self.hidden_width] * self.hidden_layers), 3)

    def register(self, store, rng):
        mlp_register(store, "tex", self.dims(), rng, final_scale=1e-4)

    def __call__(self, store, leaf, x, v):
        h = mlp_apply(store, leaf, "tex", self.dims(), dc.concat([x, v], axis=1))
        return dc.sigmoid(h)


@dataclass
class OffsetField:
    enabled: bool = False
    pose_dim: int = 6  # 3 rotation params per toy bone
    hidden_width: int = 64
    hidden_layers: int = 2
    max_offset: float = 0.05

    def dims(self):
        return (3 + self.pose_dim, *([self.hidden_width] * self.hidden_layers), 3)

    def register(self, store, rng):
        if self.enabled:
            mlp_register(store, "off", self.dims(), rng, final_scale=1e-5)

    def __call__(self, store, leaf, x, theta):
        if not self.enabled:
            return dc.Var(np.zeros_like(x.data))
        h = mlp_apply(store, leaf, "off", self.dims(), dc.concat([x, theta], axis=1))
        return dc.mul(dc.tanh(h), self.max_offset)


@dataclass
class DensityParams:
    beta_init: float = 0.1
    beta_min: float = 1e-4

    def register(self, store, rng=None):
        store.add("density.rho", np.array([np.log(self.beta_init)]))

    def beta(self, store, leaf):
        b = dc.exp(store.slice_param(leaf, "density.rho"))
        return dc.where(b.data > self.beta_min, b,
                        dc.Var(np.full(1, self.beta_min, dtype=b.data.dtype)))

    def beta_value(self, store):
        return float(max(np.exp(store.view("density.rho")[0]), self.beta_min))


def density(d, beta):
    """Laplace-CDF density: sigma = alpha*(1/2 + sgn(-d)/2 * (1 - e^{-|d|/beta})).

    ``beta`` is a Var of shape (1,); alpha = 1/beta.  sgn(0) is 0, so
    density(0) is exactly alpha/2.
    """
    d = dc.as_var(d)
    alpha = dc.div(1.0, beta)
    s = np.sign(d.data)
    inner = dc.sub(1.0, dc.exp(dc.neg(dc.div(dc.abs_(d), beta))))
    return dc.mul(alpha, dc.add(0.5, dc.mul(dc.mul(dc.Var(-s), 0.5), inner)))


# ---------------------------------------------------------------------------
# whole-model bundle

@dataclass
class FieldConfig:
    grid: hashenc.HashGridConfig = field(default_factory=hashenc.HashGridConfig)
    pe: hashenc.HybridPEConfig = field(default_factory=hashenc.HybridPEConfig)
    geo_init_radius: float = 0.3
    offset_enabled: bool = False
    pose_dim: int = 6
    max_offset: float = 0.05
    beta_init: float = 0.1
    beta_min: float = 1e-4
    sdf_hidden_width: int = 64

    def to_dict(self):
        return {
            "grid": vars(self.grid) | {"box_min": list(self.grid.box_min),
                                       "box_max": list(self.grid.box_max)},
            "pe": dict(vars(self.pe)),
            "geo_init_radius": self.geo_init_radius,
            "offset_enabled": self.offset_enabled,
            "pose_dim": self.pose_dim,
            "max_offset": self.max_offset,
            "beta_init": self.beta_init,
            "beta_min": self.beta_min,
            "sdf_hidden_width": self.sdf_hidden_width,
        }

    @classmethod
    def from_dict(cls, d):
        g = dict(d["grid"])
        g["box_min"] = tuple(g["box_min"])
        g["box_max"] = tuple(g["box_max"])
        return cls(grid=hashenc.HashGridConfig(**g),
                   pe=hashenc.HybridPEConfig(**d["pe"]),
                   geo_init_radius=d["geo_init_radius"],
                   offset_enabled=d["offset_enabled"],
                   pose_dim=d["pose_dim"],
                   max_offset=d["max_offset"],
                   beta_init=d["beta_init"],
                   beta_min=d["beta_min"],
                   sdf_hidden_width=d.get("sdf_hidden_width", 64))


class CanonicalModel:
    """Parameter store plus the canonical fields bound to it."""

    def __init__(self, config=None, dtype=np.float32, seed=0):
        self.config = config or FieldConfig()
        self.store = dc.ParamStore(dtype=dtype)
        rng = np.random.default_rng(seed)
        c = self.config
        self.sdf_field = SdfField(encoder=c.grid, pe=c.pe,
                                  hidden_width=c.sdf_hidden_width,
                                  geo_init_radius=c.geo_init_radius)
        self.texture_field = TextureField()
        self.offset_field = OffsetField(enabled=c.offset_enabled,
                                        pose_dim=c.pose_dim,
                                        max_offset=c.max_offset)
        self.density_params = DensityParams(beta_init=c.beta_init,
                                            beta_min=c.beta_min)
        self.sdf_field.register(self.store, rng)
        self.texture_field.register(self.store, rng)
        self.offset_field.register(self.store, rng)
        self.density_params.register(self.store)

    # --- tape-building API ---

    def sdf(self, leaf, x):
        return self.sdf_field(self.store, leaf, x)

    def color(self, leaf, x, v):
        return self.texture_field(self.store, leaf, x, v)

    def offset(self, leaf, x, theta):
        return self.offset_field(self.store, leaf, x, theta)

    def beta(self, leaf):
        return self.density_params.beta(self.store, leaf)

    def density(self, leaf, d):
        return density(d, self.beta(leaf))

    # --- plain numpy conveniences (no tape) ---

    def sdf_np(self, x, chunk=65536):
        x = np.atleast_2d(np.asarray(x, dtype=self.store.dtype))
        out = np.empty(len(x), dtype=self.store.dtype)
        with dc.no_grad():
            leaf = self.store.leaf()
            for i in range(0, len(x), chunk):
                d, _ = self.sdf(leaf, dc.Var(x[i:i + chunk]))
                out[i:i + chunk] = d.data
        return out

    def density_np(self, d):
        with dc.no_grad():
            leaf = self.store.leaf()
            return density(dc.Var(np.asarray(d, dtype=self.store.dtype)),
                           self.beta(leaf)).data

    def beta_value(self):
        return self.density_params.beta_value(self.store)

    def alpha_value(self):
        return 1.0 / self.beta_value()

    def sdf_with_spatial_grad(self, x):
        """Numpy (d, grad) pair via the tape; x of shape (N, 3)."""
        x = np.atleast_2d(np.asarray(x, dtype=self.store.dtype))
        leaf = self.store.leaf()
        xv = dc.Var(x)
        d, _ = self.sdf(leaf, xv)
        g = dc.grad(d, [xv], seed=dc.Var(np.ones_like(d.data)))[0]
        return d.data, g.data

    def check_finite(self):
        bad = self.store.nonfinite_segment()
        if bad is not None:
            raise NumericFault(f"non-finite parameters in segment {bad!r}",
                               segment=bad)


# ---------------------------------------------------------------------------
# checkpoint container: text header + raw little-endian payload

_MAGIC = "GEOSDF-CKPT v1"


def save_checkpoint(path, store, meta=None):
    lines = [_MAGIC, "meta " + json.dumps(meta or {}, sort_keys=True)]
    for seg in store.segments:
        lines.append(f"segment {seg.name} {seg.offset} {seg.length} "
                     f"{store.dtype.name}")
    lines.append("data")
    header = ("\n".join(lines) + "\n").encode()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(store.values).tobytes())


def load_checkpoint(path):
    """Returns (store, meta).  Bit-exact inverse of save_checkpoint."""
    with open(path, "rb") as fh:
        blob = fh.read()
    nl = blob.find(b"\n")
    if blob[:nl].decode() != _MAGIC:
        raise DataError(f"{path}: not a geosdf checkpoint")
    pos = nl + 1
    meta = {}
    segs = []
    dtype = None
    while True:
        nl = blob.find(b"\n", pos)
        if nl < 0:
            raise DataError(f"{path}: truncated header")
        line = blob[pos:nl].decode()
        pos = nl + 1
        if line == "data":
            break
        if line.startswith("meta "):
            meta = json.loads(line[5:])
        elif line.startswith("segment "):
            _, name, off, length, dt = line.split(" ")
            segs.append((name, int(off), int(length)))
            dtype = np.dtype(dt)
        else:
            raise DataError(f"{path}: bad header line {line!r}")
    if dtype is None:
        raise DataError(f"{path}: checkpoint has no segments")
    total = sum(s[2] for s in segs)
    values = np.frombuffer(blob, dtype=dtype, count=total, offset=pos).copy()
    store = dc.ParamStore(dtype=dtype)
    for name, off, length in segs:
        seg = store.add(name, values[off:off + length])
        if seg.offset != off:
            raise DataError(f"{path}: segment offsets not contiguous")
    return store, meta
