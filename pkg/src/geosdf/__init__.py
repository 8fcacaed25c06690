"""geosdf: hash-grid SDF + texture fields trained by differentiable volume
rendering with a ray-wise normal-smoothing regularizer, evaluated against
analytic ground-truth scenes."""

__version__ = "0.1.0"
