"""Reverse-mode automatic differentiation over a flat parameter store.

Every value is a :class:`Var` wrapping a numpy array.  Operations append
nodes to an implicit tape (the Var DAG; creation order is a topological
order).  Each primitive's backward rule is itself written in terms of
primitives, so the output of :func:`grad` is again part of the tape and can
be differentiated once more.  That second pass is what the geometry losses
need: they are functions of spatial gradients, and training differentiates
them with respect to the parameters.

No broadcasting-general tensor framework is attempted; ops cover exactly
what the fields, encoder, renderer and losses use, with numpy broadcasting
semantics where the two operands have compatible shapes.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import NumericFault, UsageError

_uids = itertools.count()
_GRAD_ENABLED = True

# Primitives whose backward rules are themselves built from differentiable
# primitives.  Anything outside this set breaks the second backward pass.
_SECOND_ORDER_OK = {
    "leaf", "add", "sub", "mul", "div", "neg", "exp", "log", "sqrt",
    "sin", "cos", "tanh", "sigmoid", "softplus", "abs", "where",
    "sum", "broadcast_to", "cumsum", "flip", "concat", "slice",
    "unslice", "gather", "scatter_add", "matmul", "transpose", "reshape",
    "corner_mix", "corner_mix_w", "corner_mix_f",
}


class no_grad:
    """Context manager that records no edges; ops return constant Vars."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Var:
    """A node on the tape: a numpy array plus provenance."""

    __slots__ = ("data", "parents", "op", "vjp", "uid")

    def __init__(self, data, parents=(), op="leaf", vjp=None):
        self.data = np.asarray(data)
        self.parents = parents
        self.op = op
        self.vjp = vjp
        self.uid = next(_uids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return self.data.item()

    def __repr__(self):
        return f"Var(op={self.op!r}, shape={self.data.shape}, uid={self.uid})"

    # arithmetic sugar; scalars stay python floats so numpy's weak promotion
    # keeps float32 graphs in float32
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


def as_var(x, dtype=None):
    if isinstance(x, Var):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Var(arr)


def _lift(x, like):
    if isinstance(x, Var):
        return x
    if isinstance(x, (int, float)):
        return Var(np.asarray(x, dtype=like.data.dtype))
    return Var(np.asarray(x))


def _make(op, data, parents, vjp):
    # vjp is a factory out -> back(g); storing the factory instead of the
    # bound closure keeps nodes cycle-free, so the tape frees by refcount
    if not _GRAD_ENABLED:
        return Var(data)
    return Var(data, parents, op, vjp)


def _sum_to(g, shape):
    """Reduce a broadcast gradient back to ``shape`` (differentiably)."""
    shape = tuple(shape)
    if g.data.shape == shape:
        return g
    lead = g.data.ndim - len(shape)
    axes = list(range(lead))
    for i, s in enumerate(shape):
        if s == 1 and g.data.shape[lead + i] != 1:
            axes.append(lead + i)
    out = vsum(g, axis=tuple(axes), keepdims=False) if axes else g
    if out.data.shape != shape:
        out = reshape(out, shape)
    return out


# ---------------------------------------------------------------------------
# primitives
#
# Each op's vjp(g) returns one thunk per parent; grad() invokes only the
# thunks for parents that can reach a requested variable, so e.g. the
# feature-table side of an interpolation is never materialized when only
# spatial gradients are wanted.  Var data is treated as immutable; views are
# shared freely.

def add(a, b):
    if not isinstance(a, Var):
        a = _lift(a, b)
    b = _lift(b, a)

    def vjp(out):
        def back(g):
            return (lambda: _sum_to(g, a.data.shape),
                    lambda: _sum_to(g, b.data.shape))
        return back

    return _make("add", a.data + b.data, (a, b), vjp)


def sub(a, b):
    if not isinstance(a, Var):
        a = _lift(a, b)
    b = _lift(b, a)

    def vjp(out):
        def back(g):
            return (lambda: _sum_to(g, a.data.shape),
                    lambda: _sum_to(neg(g), b.data.shape))
        return back

    return _make("sub", a.data - b.data, (a, b), vjp)


def mul(a, b):
    if not isinstance(a, Var):
        a = _lift(a, b)
    b = _lift(b, a)

    def vjp(out):
        def back(g):
            return (lambda: _sum_to(mul(g, b), a.data.shape),
                    lambda: _sum_to(mul(g, a), b.data.shape))
        return back

    return _make("mul", a.data * b.data, (a, b), vjp)


def div(a, b):
    if not isinstance(a, Var):
        a = _lift(a, b)
    b = _lift(b, a)

    def vjp(out):
        def back(g):
            return (lambda: _sum_to(div(g, b), a.data.shape),
                    lambda: _sum_to(neg(div(mul(g, out), b)), b.data.shape))
        return back

    return _make("div", a.data / b.data, (a, b), vjp)


def neg(a):
    a = as_var(a)

    def vjp(out):
        def back(g):
            return (lambda: neg(g),)
        return back

    return _make("neg", -a.data, (a,), vjp)


def exp(a):
    a = as_var(a)

    def vjp(out):
        def back(g):
            return (lambda: mul(g, out),)
        return back

    return _make("exp", np.exp(a.data), (a,), vjp)


def log(a):
    a = as_var(a)

    def vjp(out):
        def back(g):
            return (lambda: div(g, a),)
        return back

    return _make("log", np.log(a.data), (a,), vjp)


def sqrt(a):
    a = as_var(a)

    def vjp(out):
        def back(g):
            return (lambda: div(mul(g, 0.5), out),)
        return back

    return _make("sqrt", np.sqrt(a.data), (a,), vjp)


def sin(a):
    a = as_var(a)

    def vjp(out):
        def back(g):
            return (lambda: mul(g, cos(a)),)
        return back

    return _make("sin", np.sin(a.data), (a,), vjp)


def cos(a):
    a = as_var(a)

    def vjp(out):
        def back(g):
            return (lambda: neg(mul(g, sin(a))),)
        return back

    return _make("cos", np.cos(a.data), (a,), vjp)


def tanh(a):
    a = as_var(a)

    def vjp(out):
        def back(g):
            return (lambda: mul(g, sub(1.0, mul(out, out))),)
        return back

    return _make("tanh", np.tanh(a.data), (a,), vjp)


def _sigmoid_np(x):
    # 0.5 * (1 + tanh(x/2)): stable and a single vectorized transcendental
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    a = as_var(a)

    def vjp(out):
        def back(g):
            return (lambda: mul(g, mul(out, sub(1.0, out))),)
        return back

    return _make("sigmoid", _sigmoid_np(a.data), (a,), vjp)


def _softplus_np(x, beta):
    # clipped log1p(exp(.)): equals logaddexp to f32 precision, avoids the
    # subnormal-underflow slow path that dominates wide activations
    z = x * beta
    zc = np.clip(z, -30.0, 30.0)
    return np.where(z > 30.0, z, np.log1p(np.exp(zc))) / beta


def softplus(a, beta=100.0):
    """softplus with sharpness beta: log(1 + exp(beta x)) / beta, stable."""
    a = as_var(a)
    data = _softplus_np(a.data, beta)
    cache = {}  # derivative node shared across backward traversals

    def vjp(out):
        def back(g):
            def run():
                if "s" not in cache:
                    cache["s"] = sigmoid(mul(a, beta))
                return mul(g, cache["s"])
            return (run,)
        return back

    return _make("softplus", data, (a,), vjp)


def abs_(a):
    a = as_var(a)
    s = np.sign(a.data)

    def vjp(out):
        def back(g):
            return (lambda: mul(g, Var(s)),)
        return back

    return _make("abs", np.abs(a.data), (a,), vjp)


def where(mask, a, b):
    """Select per element; mask is a plain boolean array, not differentiable."""
    mask = np.asarray(mask, dtype=bool)
    if not isinstance(a, Var):
        a = _lift(a, b)
    b = _lift(b, a)

    def vjp(out):
        def back(g):
            def da():
                ma = Var(mask.astype(a.data.dtype))
                return _sum_to(mul(g, ma), a.data.shape)

            def db():
                mb = Var((~mask).astype(b.data.dtype))
                return _sum_to(mul(g, mb), b.data.shape)
            return (da, db)
        return back

    return _make("where", np.where(mask, a.data, b.data), (a, b), vjp)


def step(a):
    """Heaviside step.  First-order gradient is zero; no second-order rule."""
    a = as_var(a)

    def vjp(out):
        def back(g):
            return (lambda: Var(np.zeros_like(a.data)),)
        return back

    return _make("step", (a.data > 0).astype(a.data.dtype), (a,), vjp)


def vsum(a, axis=None, keepdims=False):
    a = as_var(a)
    data = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(out):
        def back(g):
            def run():
                gg = g
                if not keepdims and axis is not None:
                    axes = (axis,) if isinstance(axis, int) else tuple(axis)
                    kshape = list(a.data.shape)
                    for ax in axes:
                        kshape[ax % a.data.ndim] = 1
                    gg = reshape(gg, tuple(kshape))
                return broadcast_to(gg, a.data.shape)
            return (run,)
        return back

    return _make("sum", data, (a,), vjp)


def broadcast_to(a, shape):
    a = as_var(a)
    shape = tuple(shape)

    def vjp(out):
        def back(g):
            return (lambda: _sum_to(g, a.data.shape),)
        return back

    return _make("broadcast_to", np.broadcast_to(a.data, shape), (a,), vjp)


def cumsum(a, axis):
    a = as_var(a)

    def vjp(out):
        def back(g):
            return (lambda: flip(cumsum(flip(g, axis), axis), axis),)
        return back

    return _make("cumsum", np.cumsum(a.data, axis=axis), (a,), vjp)


def flip(a, axis):
    a = as_var(a)

    def vjp(out):
        def back(g):
            return (lambda: flip(g, axis),)
        return back

    return _make("flip", np.flip(a.data, axis=axis), (a,), vjp)


def concat(parts, axis):
    parts = [as_var(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    offs = np.cumsum([0] + sizes)

    def vjp(out):
        def back(g):
            def thunk(i):
                def run():
                    key = [slice(None)] * g.data.ndim
                    key[axis] = slice(int(offs[i]), int(offs[i + 1]))
                    return slice_(g, tuple(key))
                return run
            return tuple(thunk(i) for i in range(len(parts)))
        return back

    return _make("concat", np.concatenate([p.data for p in parts], axis=axis),
                 tuple(parts), vjp)


def slice_(a, key):
    """Basic indexing (slices and ints only), differentiable."""
    a = as_var(a)
    if not isinstance(key, tuple):
        key = (key,)

    def vjp(out):
        def back(g):
            return (lambda: unslice(g, key, a.data.shape),)
        return back

    return _make("slice", a.data[key], (a,), vjp)


def unslice(g, key, shape):
    """Scatter ``g`` into a zero array of ``shape`` at basic index ``key``."""
    g = as_var(g)
    data = np.zeros(shape, dtype=g.data.dtype)
    data[key] = g.data

    def vjp(out):
        def back(gg):
            return (lambda: slice_(gg, key),)
        return back

    return _make("unslice", data, (g,), vjp)


def gather(a, idx):
    """Fancy-index a 1-D Var with an integer array of any shape."""
    a = as_var(a)
    idx = np.asarray(idx)

    def vjp(out):
        def back(g):
            return (lambda: scatter_add(g, idx, a.data.shape[0]),)
        return back

    return _make("gather", a.data[idx], (a,), vjp)


def scatter_add(values, idx, size):
    """Sum ``values`` into a zero vector of length ``size`` at ``idx``.

    Accumulation goes through a float64 bincount: deterministic order and
    full precision regardless of the working dtype.
    """
    values = as_var(values)
    idx = np.asarray(idx)
    acc = np.bincount(idx.ravel(), weights=values.data.ravel().astype(np.float64),
                      minlength=size)
    data = acc.astype(values.data.dtype)

    def vjp(out):
        def back(g):
            return (lambda: reshape(gather(g, idx.ravel()),
                                    values.data.shape),)
        return back

    return _make("scatter_add", data, (values,), vjp)


def corner_mix(w, f):
    """Weighted sum over interpolation corners: lnc,lncf->lnf.

    The trio corner_mix / corner_mix_w / corner_mix_f is closed under
    differentiation, so fused interpolation stays second-order capable.
    """
    w = as_var(w)
    f = as_var(f)
    data = np.einsum("lnc,lncf->lnf", w.data, f.data)

    def vjp(out):
        def back(g):
            return (lambda: corner_mix_w(g, f), lambda: corner_mix_f(w, g))
        return back

    return _make("corner_mix", data, (w, f), vjp)


def corner_mix_w(g, f):
    """lnf,lncf->lnc (gradient of corner_mix w.r.t. the weights)."""
    g = as_var(g)
    f = as_var(f)
    data = np.einsum("lnf,lncf->lnc", g.data, f.data)

    def vjp(out):
        def back(u):
            return (lambda: corner_mix(u, f), lambda: corner_mix_f(u, g))
        return back

    return _make("corner_mix_w", data, (g, f), vjp)


def corner_mix_f(w, g):
    """lnc,lnf->lncf (gradient of corner_mix w.r.t. the features)."""
    w = as_var(w)
    g = as_var(g)
    data = w.data[..., None] * g.data[:, :, None, :]

    def vjp(out):
        def back(u):
            return (lambda: corner_mix_w(g, u), lambda: corner_mix(w, u))
        return back

    return _make("corner_mix_f", data, (w, g), vjp)


def matmul(a, b):
    a = as_var(a)
    b = as_var(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise UsageError("matmul expects 2-D operands")

    def vjp(out):
        def back(g):
            return (lambda: matmul(g, transpose(b)),
                    lambda: matmul(transpose(a), g))
        return back

    return _make("matmul", a.data @ b.data, (a, b), vjp)


def transpose(a, axes=None):
    a = as_var(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = np.argsort(axes)

    def vjp(out):
        def back(g):
            return (lambda: transpose(g, tuple(int(i) for i in inv)),)
        return back

    return _make("transpose", np.transpose(a.data, axes), (a,), vjp)


def reshape(a, shape):
    a = as_var(a)
    shape = tuple(shape)

    def vjp(out):
        def back(g):
            return (lambda: reshape(g, a.data.shape),)
        return back

    return _make("reshape", a.data.reshape(shape), (a,), vjp)


# ---------------------------------------------------------------------------
# composites

def mean(a, axis=None):
    a = as_var(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(vsum(a, axis=axis), 1.0 / n)


def square(a):
    return mul(a, a)


def safe_norm(a, axis=-1, eps=1e-12):
    """L2 norm along ``axis`` with an epsilon inside the sqrt.

    Keeps the backward pass finite when the vector is exactly zero; the bias
    on nonzero vectors is below 1e-12 in float64.
    """
    return sqrt(add(vsum(square(a), axis=axis), eps))


def normalize(a, axis=-1, eps=1e-12):
    n = safe_norm(a, axis=axis, eps=eps)
    shape = list(a.data.shape)
    shape[axis % a.data.ndim] = 1
    return div(a, reshape(n, tuple(shape)))


def dot_rows(a, b):
    """Row-wise dot product of two (N, D) Vars -> (N,)."""
    return vsum(mul(a, b), axis=-1)


# ---------------------------------------------------------------------------
# reverse pass

def _ancestors(root):
    seen = set()
    order = []
    stack = [root]
    while stack:
        v = stack.pop()
        if v.uid in seen:
            continue
        seen.add(v.uid)
        order.append(v)
        stack.extend(v.parents)
    return order


def grad(out, wrt, seed=None, allow_unused=True):
    """Adjoints of ``out`` with respect to each Var in ``wrt``.

    The returned Vars live on the same tape, so they can be composed into
    further losses and differentiated again.  ``seed`` defaults to ones,
    which for a batch of per-point scalars yields per-point gradients in one
    pass.  Accumulation order is fixed by node creation order, making
    repeated runs bit-identical.
    """
    if seed is None:
        seed = Var(np.ones_like(out.data))
    wrt_ids = {w.uid for w in wrt}

    # useful = can reach some wrt following parent edges
    useful = {}

    def _useful(v):
        stack = [(v, 0)]
        while stack:
            node, state = stack.pop()
            if node.uid in useful:
                continue
            if node.uid in wrt_ids:
                useful[node.uid] = True
                continue
            if state == 0:
                stack.append((node, 1))
                for p in node.parents:
                    if p.uid not in useful:
                        stack.append((p, 0))
            else:
                useful[node.uid] = any(useful.get(p.uid, False)
                                       for p in node.parents)
    _useful(out)
    if not useful.get(out.uid, False):
        if allow_unused:
            return [None for _ in wrt]
        raise UsageError("output does not depend on any requested variable")

    nodes = [v for v in _ancestors(out) if useful.get(v.uid, False)]
    nodes.sort(key=lambda v: v.uid, reverse=True)

    adj = {out.uid: seed}
    for v in nodes:
        g = adj.get(v.uid)
        if g is None or v.vjp is None:
            continue
        thunks = v.vjp(v)(g)
        for p, thunk in zip(v.parents, thunks):
            if thunk is None or not useful.get(p.uid, False):
                continue
            pg = thunk()
            if p.uid in adj:
                adj[p.uid] = add(adj[p.uid], pg)
            else:
                adj[p.uid] = pg
        if v.uid not in wrt_ids:
            del adj[v.uid]  # processed adjoints free their buffers eagerly

    results = []
    for w in wrt:
        g = adj.get(w.uid)
        if g is None and not allow_unused:
            raise UsageError("no gradient path to a requested variable")
        results.append(g)
    return results


def collect_ops(root):
    """Set of primitive op names reachable from ``root``."""
    return {v.op for v in _ancestors(root)}


def second_order_supported(program, *probe_args):
    """True iff every primitive the program records has second-order rules.

    ``program`` is run once on the probe arguments (Vars or arrays) and the
    resulting tape is inspected.
    """
    args = [as_var(a) for a in probe_args]
    out = program(*args)
    return all(op in _SECOND_ORDER_OK for op in collect_ops(out))


# ---------------------------------------------------------------------------
# parameter store

@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    length: int


class ParamStore:
    """Flat, named, differentiable parameter vector plus its gradient."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.segments = []
        self._by_name = {}
        self.values = np.zeros(0, dtype=self.dtype)
        self.grads = np.zeros(0, dtype=self.dtype)
        self._leaf = None

    def add(self, name, init):
        if name in self._by_name:
            raise UsageError(f"duplicate parameter segment {name!r}")
        init = np.asarray(init, dtype=self.dtype).ravel()
        seg = Segment(name, len(self.values), len(init))
        self.segments.append(seg)
        self._by_name[name] = seg
        self.values = np.concatenate([self.values, init])
        self.grads = np.zeros(len(self.values), dtype=self.dtype)
        self._leaf = None
        return seg

    def segment(self, name):
        try:
            return self._by_name[name]
        except KeyError:
            raise UsageError(f"unknown parameter segment {name!r}") from None

    def view(self, name):
        seg = self.segment(name)
        return self.values[seg.offset:seg.offset + seg.length]

    def grad_view(self, name):
        seg = self.segment(name)
        return self.grads[seg.offset:seg.offset + seg.length]

    def set_values(self, values):
        values = np.asarray(values, dtype=self.dtype)
        if values.shape != self.values.shape:
            raise UsageError("parameter vector length mismatch")
        self.values = values.copy()
        self._leaf = None

    def zero_grads(self):
        self.grads[:] = 0

    def total(self):
        return len(self.values)

    def leaf(self):
        """Fresh tape leaf over the current values; remembered for backward.

        Leaves made under no_grad are for inference and are not remembered,
        so interleaved no-grad evaluations cannot steal the backward target.
        """
        v = Var(self.values)
        if _GRAD_ENABLED:
            self._leaf = v
        return v

    def slice_param(self, leaf, name):
        seg = self.segment(name)
        return slice_(leaf, (slice(seg.offset, seg.offset + seg.length),))

    def segment_of_index(self, i):
        for seg in self.segments:
            if seg.offset <= i < seg.offset + seg.length:
                return seg
        raise UsageError(f"index {i} outside every segment")

    def nonfinite_segment(self):
        bad = ~np.isfinite(self.values)
        if bad.any():
            return self.segment_of_index(int(np.argmax(bad))).name
        return None


def backward(loss, store):
    """Accumulate d(loss)/d(params) into ``store.grads``.

    ``loss`` must be a scalar Var built from the store's current leaf;
    repeated calls accumulate.  The reduction order is fixed, so repeated
    runs produce bit-identical gradients.
    """
    if not isinstance(loss, Var) or loss.data.size != 1:
        raise UsageError("backward expects a scalar Var")
    leaf = store._leaf
    if leaf is None:
        raise UsageError("no active parameter leaf; call store.leaf() first")
    g = grad(loss, [leaf], seed=Var(np.ones_like(loss.data)))[0]
    if g is None:
        raise UsageError("loss is detached from the parameter store")
    store.grads += g.data.astype(store.dtype, copy=False)


def eval_with_grad(f, x, store):
    """Value and exact spatial gradient of a scalar-field program.

    ``f(x_var, leaf) -> Var`` maps a batch of points (N, D) to per-point
    scalars (N,).  Returns numpy arrays; accepts a single point (D,) and
    returns unbatched results for it.
    """
    bad = store.nonfinite_segment()
    if bad is not None:
        raise NumericFault(f"non-finite parameters in segment {bad!r}", segment=bad)
    x = np.asarray(x, dtype=store.dtype)
    single = x.ndim == 1
    x2 = x[None] if single else x
    xv = Var(x2)
    leaf = store.leaf()
    out = f(xv, leaf)
    if out.data.shape != (x2.shape[0],):
        raise UsageError("scalar-field program must return one value per point")
    gx = grad(out, [xv], seed=Var(np.ones_like(out.data)))[0]
    gdata = np.zeros_like(x2) if gx is None else gx.data
    if not (np.isfinite(out.data).all() and np.isfinite(gdata).all()):
        raise NumericFault("non-finite field value or spatial gradient "
                           "(parameters are finite; fault is in the program output)")
    if single:
        return float(out.data[0]), gdata[0]
    return out.data, gdata


# ---------------------------------------------------------------------------
# finite-difference oracles (shared by tests and acceptance checks)

def fd_spatial_gradient(f, x, store, h=1e-4):
    """Central-difference spatial gradient of a scalar-field program."""
    x = np.asarray(x, dtype=store.dtype)
    single = x.ndim == 1
    x2 = x[None] if single else x
    n, d = x2.shape
    out = np.zeros((n, d), dtype=np.float64)
    with no_grad():
        leaf = store.leaf()
        for k in range(d):
            dx = np.zeros_like(x2)
            dx[:, k] = h
            fp = f(Var(x2 + dx), leaf).data.astype(np.float64)
            fm = f(Var(x2 - dx), leaf).data.astype(np.float64)
            out[:, k] = (fp - fm) / (2 * h)
    return out[0] if single else out


def fd_param_gradient(loss_fn, store, h=1e-5, indices=None):
    """Central-difference gradient of ``loss_fn()`` over store parameters.

    ``loss_fn`` must read ``store.values`` afresh on every call (build the
    graph inside it).  Returns a dense vector over ``indices`` (default:
    every parameter).
    """
    if indices is None:
        indices = range(store.total())
    base = store.values.copy()
    indices = list(indices)
    out = np.zeros(len(indices), dtype=np.float64)
    try:
        for j, i in enumerate(indices):
            store.values[i] = base[i] + h
            store._leaf = None
            fp = float(loss_fn())
            store.values[i] = base[i] - h
            store._leaf = None
            fm = float(loss_fn())
            store.values[i] = base[i]
            out[j] = (fp - fm) / (2 * h)
    finally:
        store.values[:] = base
        store._leaf = None
    return out


def relative_error(a, b, floor=1e-8):
    """Max elementwise |a-b| / max(|a|, |b|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
