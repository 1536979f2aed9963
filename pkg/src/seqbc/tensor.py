"""Dense tensors with a define-by-run reverse-mode tape.

Everything is numpy-backed. A Tape records one step's worth of operations;
backward() walks it once in reverse and returns gradients for the leaves.
Tapes are single-use: build, backward, throw away.

The compute dtype is a module-wide default (float32 out of the box; training
quality does not need doubles and singles are roughly twice as fast on every
path). Finite-difference gradient checking does need doubles, so tests switch
with set_default_dtype(np.float64). Set it before building models: tensors
are cast on construction and keep their dtype afterwards.
"""

from dataclasses import dataclass, field
import json
import numpy as np
from numba import njit

__all__ = [
    "Tensor", "Tape", "backward", "ShapeError", "NonFiniteError", "TapeError",
    "apply_primitive", "PRIMITIVES",
    "default_dtype", "set_default_dtype",
    "matmul", "add", "sub", "mul", "scale", "tanh", "exp", "softplus", "silu",
    "softmax_last_dim", "mean", "tsum", "concat_last_dim", "tslice", "reshape",
    "transpose_2d", "broadcast_to",
    "affine", "gather_rows", "layer_norm", "rms_norm", "gelu", "transpose_axes",
    "grad_check", "AdamState", "adam_step", "clip_grad_norm", "FusedAdam",
    "save_params", "load_params",
]

_dtype = np.float32


def default_dtype():
    return _dtype


def set_default_dtype(dt):
    """Set the dtype new tensors are cast to. float32 or float64 only."""
    global _dtype
    dt = np.dtype(dt).type
    if dt not in (np.float32, np.float64):
        raise ValueError(f"compute dtype must be float32 or float64, got {dt}")
    _dtype = dt


class ShapeError(ValueError):
    """Operands have shapes the requested op does not accept."""


class NonFiniteError(ArithmeticError):
    """A forward op produced NaN or Inf (overflow, bad inputs)."""


class TapeError(RuntimeError):
    """Backward requested on a detached value or an already-used tape."""


_active_tape = None
_generation = 0


class Tensor:
    """An ndarray (module default dtype) plus the bookkeeping to reach its
    gradient."""

    __slots__ = ("data", "requires_grad", "_node", "_gen", "_tape_ref")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=_dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._node = None
        self._gen = -1
        self._tape_ref = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


class Tape:
    """Recording context for one forward/backward cycle.

    Usage:
        with Tape() as tape:
            loss = ...
        grads = backward(loss)
    """

    def __init__(self):
        self._records = []      # (out_id, input_ids, backward_fn)
        self._leaves = {}       # node id -> leaf Tensor
        self._n_nodes = 0
        self._consumed = False
        self._gen = None

    def __enter__(self):
        global _active_tape, _generation
        if _active_tape is not None:
            raise TapeError("a tape is already recording; tapes do not nest")
        _generation += 1
        self._gen = _generation
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _active_tape
        _active_tape = None
        return False

    @property
    def n_records(self):
        return len(self._records)

    def _stamp(self, t, leaf):
        t._node = self._n_nodes
        t._gen = self._gen
        t._tape_ref = self
        self._n_nodes += 1
        if leaf:
            self._leaves[t._node] = t

    def _input_id(self, t):
        if not t.requires_grad:
            return None
        if t._gen != self._gen:
            # First time this tape sees the tensor: it is a leaf (a parameter
            # or an explicitly-tracked input), not the output of a recorded op.
            self._stamp(t, leaf=True)
        return t._node

    def _record(self, out, inputs, backward_fn):
        ids = tuple(self._input_id(t) for t in inputs)
        self._stamp(out, leaf=False)
        self._records.append((out._node, ids, backward_fn))


# Per-op finiteness checks stop at this size. Reading multi-megabyte
# activations every op costs more than the arithmetic they guard; large
# arrays are covered instead by the gradient-norm check in FusedAdam.apply
# and by the checks on the small tensors every forward pass ends in.
_CHECK_FINITE_MAX = 8192


def _check_finite(arr, op):
    if arr.size > _CHECK_FINITE_MAX:
        return
    # one streaming pass instead of isfinite().all()'s three: any inf or nan
    # makes the total non-finite (inf - inf is nan). Summing in the array's
    # own dtype keeps numpy on its fast reduce loop; nothing checked here
    # gets within orders of magnitude of overflow, including bulk attention
    # masks, which is why the mask constant stays at 1e9.
    if not np.isfinite(arr.sum()):
        raise NonFiniteError(f"{op} produced non-finite values")


def _finish(op, data, inputs, backward_fn):
    """Wrap op output, check finiteness, and record on the active tape."""
    _check_finite(data, op)
    out = Tensor(data)
    tape = _active_tape
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._record(out, inputs, backward_fn)
    return out


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _reduce_to(grad, shape):
    """Sum a gradient down to a broadcast operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    # No partial-axis broadcasting is allowed, so ranks now match exactly.
    return grad.reshape(shape)


def _broadcast_ok(sa, sb):
    """Allowed: equal shapes, scalars, or one shape a suffix of the other."""
    if sa == sb:
        return True
    small, big = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    return big[len(big) - len(small):] == small


# ---------------------------------------------------------------------------
# primitives


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-d or batched operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    if a.ndim != b.ndim and b.ndim != 2 and a.ndim != 2:
        raise ShapeError(f"matmul batch ranks disagree: {a.shape} @ {b.shape}")
    if a.ndim == b.ndim and a.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dims disagree: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ bd.swapaxes(-1, -2)
            ga = _reduce_to(ga, ad.shape)
        if b.requires_grad:
            gb = ad.swapaxes(-1, -2) @ g
            gb = _reduce_to(gb, bd.shape)
        return ga, gb

    return _finish("matmul", ad @ bd, (a, b), bwd)


def _elementwise_pair(op, a, b, fwd, da_fn, db_fn):
    a, b = _as_tensor(a), _as_tensor(b)
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"{op} cannot broadcast {a.shape} with {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        ga = _reduce_to(da_fn(g, ad, bd), ad.shape) if a.requires_grad else None
        gb = _reduce_to(db_fn(g, ad, bd), bd.shape) if b.requires_grad else None
        return ga, gb

    return _finish(op, fwd(ad, bd), (a, b), bwd)


def add(a, b):
    return _elementwise_pair("add", a, b, np.add,
                             lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _elementwise_pair("sub", a, b, np.subtract,
                             lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _elementwise_pair("mul", a, b, np.multiply,
                             lambda g, x, y: g * y, lambda g, x, y: g * x)


def scale(x, c):
    x = _as_tensor(x)
    c = float(c)
    return _finish("scale", x.data * c, (x,), lambda g: (g * c,))


def _elementwise_unary(op, x, fwd_fn, bwd_fn):
    x = _as_tensor(x)
    y = fwd_fn(x.data)
    return _finish(op, y, (x,), lambda g: (bwd_fn(g, x.data, y),))


def tanh(x):
    return _elementwise_unary("tanh", x, np.tanh,
                              lambda g, xd, y: g * (1.0 - y * y))


def exp(x):
    return _elementwise_unary("exp", x, np.exp, lambda g, xd, y: g * y)


def _softplus_np(x):
    # log(1 + e^x) computed without overflow for large |x|
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid_np(x):
    # the plain form is the fastest here; exp overflow at very negative x
    # gives inf and 1/(1+inf) = 0, which is the right limit
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


# Compiled single-pass loops for the hot activations. fastmath stays a
# conservative subset: no ninf/nnan (sigmoid-style kernels meet inf when exp
# overflows, and incoming gradients are never finiteness-checked) and no arcp
# (reciprocal approximations are too lossy for float32 sigmoids).
_FUSED_FM = {"contract", "reassoc", "nsz"}


@njit(cache=True, fastmath=_FUSED_FM)
def _sigmoid_mul_k(g, z, one, out):
    # out = g / (1 + z) where z = e^-x, possibly inf
    for i in range(g.size):
        out[i] = g[i] / (one + z[i])


@njit(cache=True, fastmath=_FUSED_FM)
def _silu_fwd_k(x, z, one, s, y):
    for i in range(x.size):
        sv = one / (one + z[i])
        s[i] = sv
        y[i] = x[i] * sv


@njit(cache=True, fastmath=_FUSED_FM)
def _silu_bwd_k(g, x, s, one, out):
    for i in range(g.size):
        sv = s[i]
        out[i] = g[i] * (sv * (one + x[i] * (one - sv)))


def _flat(a):
    # contiguous 1-d view for the kernels; copies only when strided
    return np.ascontiguousarray(a).reshape(-1)


def softplus(x):
    x = _as_tensor(x)
    xd = x.data
    y = np.maximum(xd, 0.0) + np.log1p(np.exp(-np.abs(xd)))

    def bwd(g):
        # d/dx softplus = sigmoid
        gx = np.empty(xd.shape, dtype=xd.dtype)
        z = np.negative(_flat(xd))
        with np.errstate(over="ignore"):
            np.exp(z, out=z)
        _sigmoid_mul_k(_flat(g), z, xd.dtype.type(1), gx.reshape(-1))
        return (gx,)

    return _finish("softplus", y, (x,), bwd)


def silu(x):
    x = _as_tensor(x)
    xd = x.data
    one = xd.dtype.type(1)
    xf = _flat(xd)
    z = np.negative(xf)
    with np.errstate(over="ignore"):
        np.exp(z, out=z)
    s = np.empty(xd.shape, dtype=xd.dtype)
    y = np.empty(xd.shape, dtype=xd.dtype)
    _silu_fwd_k(xf, z, one, s.reshape(-1), y.reshape(-1))

    def bwd(g):
        gx = np.empty(xd.shape, dtype=xd.dtype)
        _silu_bwd_k(_flat(g), xf, s.reshape(-1), one, gx.reshape(-1))
        return (gx,)

    return _finish("silu", y, (x,), bwd)


@njit(cache=True, fastmath=_FUSED_FM)
def _softmax_bwd_k(g, y, out):
    # out = y * (g - sum(g * y)) per row; rows are short, both sweeps cached
    n, d = g.shape
    for r in range(n):
        s = g[r, 0] - g[r, 0]
        for j in range(d):
            s += g[r, j] * y[r, j]
        for j in range(d):
            out[r, j] = y[r, j] * (g[r, j] - s)
    return out


def softmax_last_dim(x):
    x = _as_tensor(x)
    if x.ndim < 1:
        raise ShapeError("softmax-last-dim needs at least one axis")
    y = x.data - x.data.max(axis=-1, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)

    def bwd(g):
        d = y.shape[-1]
        gx = np.empty(y.shape, dtype=y.dtype)
        _softmax_bwd_k(_flat(g).reshape(-1, d), y.reshape(-1, d),
                       gx.reshape(-1, d))
        return (gx,)

    return _finish("softmax-last-dim", y, (x,), bwd)


def mean(x):
    x = _as_tensor(x)
    n = x.size
    if n == 0:
        raise ShapeError("mean of an empty tensor")
    shape = x.shape
    return _finish("mean", x.data.mean(), (x,),
                   lambda g: (np.broadcast_to(g / n, shape).copy(),))


def tsum(x):
    x = _as_tensor(x)
    shape = x.shape
    return _finish("sum", x.data.sum(), (x,),
                   lambda g: (np.broadcast_to(g, shape).copy(),))


def concat_last_dim(tensors):
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat-last-dim of nothing")
    lead = ts[0].shape[:-1]
    for t in ts:
        if t.ndim == 0 or t.shape[:-1] != lead:
            raise ShapeError(
                f"concat-last-dim needs equal leading dims, got {[t.shape for t in ts]}")
    widths = [t.shape[-1] for t in ts]
    offsets = np.cumsum([0] + widths)

    def bwd(g):
        return tuple(
            g[..., offsets[i]:offsets[i + 1]] if t.requires_grad else None
            for i, t in enumerate(ts))

    return _finish("concat-last-dim",
                   np.concatenate([t.data for t in ts], axis=-1), ts, bwd)


def tslice(x, key):
    """Basic slicing only (ints, slices, tuples thereof). Returns a copy."""
    x = _as_tensor(x)
    try:
        y = x.data[key]
    except IndexError as e:
        raise ShapeError(f"slice {key!r} invalid for shape {x.shape}") from e
    if not isinstance(y, np.ndarray):
        y = np.asarray(y)
    shape = x.shape

    def bwd(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[key] = g
        return (gx,)

    return _finish("slice", y.copy(), (x,), bwd)


def reshape(x, new_shape):
    x = _as_tensor(x)
    new_shape = tuple(int(d) for d in new_shape)
    if int(np.prod(new_shape, dtype=np.int64)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} to {new_shape}")
    old = x.shape
    return _finish("reshape", x.data.reshape(new_shape), (x,),
                   lambda g: (g.reshape(old),))


def transpose_2d(x):
    x = _as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"transpose-2d needs at least 2 axes, got {x.shape}")
    return _finish("transpose-2d", x.data.swapaxes(-1, -2).copy(), (x,),
                   lambda g: (g.swapaxes(-1, -2).copy(),))


def broadcast_to(x, shape):
    x = _as_tensor(x)
    shape = tuple(int(d) for d in shape)
    if not _broadcast_ok(x.shape, shape) or len(shape) < x.ndim:
        raise ShapeError(f"cannot broadcast {x.shape} to {shape}")
    old = x.shape
    return _finish("broadcast", np.broadcast_to(x.data, shape).copy(), (x,),
                   lambda g: (_reduce_to(g, old),))


PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "tanh": tanh,
    "exp": exp,
    "softplus": softplus,
    "silu": silu,
    "softmax-last-dim": softmax_last_dim,
    "mean": mean,
    "sum": tsum,
    "concat-last-dim": concat_last_dim,
    "slice": tslice,
    "reshape": reshape,
    "transpose-2d": transpose_2d,
    "broadcast": broadcast_to,
}


def apply_primitive(kind, inputs, **kwargs):
    """Dispatch by name. `inputs` is a sequence of Tensors/arrays."""
    fn = PRIMITIVES.get(kind)
    if fn is None:
        raise ValueError(f"unknown primitive {kind!r}; known: {sorted(PRIMITIVES)}")
    if kind == "concat-last-dim":
        return fn(list(inputs))
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# fused composite ops (hand-written backward, each covered by grad checks)


def affine(x, w, b=None):
    """x @ w (+ b). x: (..., d_in), w: (d_in, d_out), b: (d_out,)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"affine: {x.shape} @ {w.shape}")
    xd, wd = x.data, w.data
    d_in, d_out = wd.shape
    lead = xd.shape[:-1]
    # one flat GEMM beats a stack of small batched ones
    y = xd.reshape(-1, d_in) @ wd
    inputs = (x, w)
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (d_out,):
            raise ShapeError(f"affine bias {b.shape} vs out dim {d_out}")
        y += b.data
        inputs = (x, w, b)

    def bwd(g):
        g2 = g.reshape(-1, d_out)
        gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        gw = xd.reshape(-1, d_in).T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _finish("affine", y.reshape(lead + (d_out,)), inputs, bwd)


def gather_rows(table, idx):
    """table: (V, d); idx: int array (...,). Out: (..., d)."""
    table = _as_tensor(table)
    idx = np.asarray(idx)
    if table.ndim != 2 or not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("gather_rows needs a 2-d table and integer indices")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(
            f"gather_rows index out of range [0, {table.shape[0]}): "
            f"min={idx.min()}, max={idx.max()}")
    V, d = table.shape

    def bwd(g):
        gt = np.zeros((V, d), dtype=g.dtype)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, d))
        return (gt,)

    return _finish("gather_rows", table.data[idx], (table,), bwd)


@njit(cache=True, fastmath=_FUSED_FM)
def _layer_norm_fwd_k(x, gd, bd, eps, dinv, one, xhat, y, inv):
    # rows are short; the three sweeps (mean, variance, normalize) all hit
    # cache. dinv = 1/d arrives typed: dividing by the integer d would
    # promote float32 rows to float64
    n, d = x.shape
    for r in range(n):
        s = x[r, 0] - x[r, 0]
        for j in range(d):
            s += x[r, j]
        mu = s * dinv
        q = s - s
        for j in range(d):
            dv = x[r, j] - mu
            q += dv * dv
        iv = one / np.sqrt(q * dinv + eps)
        inv[r] = iv
        for j in range(d):
            xh = (x[r, j] - mu) * iv
            xhat[r, j] = xh
            y[r, j] = xh * gd[j] + bd[j]


@njit(cache=True, fastmath=_FUSED_FM)
def _layer_norm_bwd_k(g, xhat, inv, gd, gx, ggain, gbias):
    # gx = inv (gyg - mean(gyg) - xhat mean(gyg xhat)) with gyg = g * gain;
    # one row is a few hundred floats, so the two sweeps stay in cache
    n, d = g.shape
    for r in range(n):
        s1 = 0.0
        s2 = 0.0
        for j in range(d):
            gy = g[r, j] * gd[j]
            s1 += gy
            s2 += gy * xhat[r, j]
        iv = inv[r]
        m1 = s1 / d
        m2 = s2 / d
        for j in range(d):
            gv = g[r, j]
            xh = xhat[r, j]
            gx[r, j] = iv * (gv * gd[j] - m1 - xh * m2)
            ggain[j] += gv * xh
            gbias[j] += gv


def layer_norm(x, gain, bias, eps=1e-5):
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm params must be ({d},)")
    xd = x.data
    dt = xd.dtype
    if xd.ndim < 1 or d == 0:
        raise ShapeError(f"layer_norm needs a non-empty last axis, got {x.shape}")
    rows = xd.size // d
    gd = np.ascontiguousarray(gain.data)
    xhat = np.empty(xd.shape, dtype=dt)
    y = np.empty(xd.shape, dtype=dt)
    inv = np.empty(rows, dtype=dt)
    _layer_norm_fwd_k(_flat(xd).reshape(-1, d), gd,
                      np.ascontiguousarray(bias.data),
                      dt.type(eps), dt.type(1.0 / d), dt.type(1),
                      xhat.reshape(-1, d), y.reshape(-1, d), inv)

    def bwd(g):
        gx = np.empty(xd.shape, dtype=dt)
        ggain = np.zeros(d, dtype=dt)
        gbias = np.zeros(d, dtype=dt)
        _layer_norm_bwd_k(_flat(g).reshape(-1, d), xhat.reshape(-1, d), inv,
                          gd, gx.reshape(-1, d), ggain, gbias)
        return gx, ggain, gbias

    return _finish("layer_norm", y, (x, gain, bias), bwd)


def rms_norm(x, gain, eps=1e-8):
    x, gain = _as_tensor(x), _as_tensor(gain)
    d = x.shape[-1]
    if gain.shape != (d,):
        raise ShapeError(f"rms_norm gain must be ({d},)")
    inv = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    xd, gd = x.data, gain.data

    def bwd(g):
        gx = None
        if x.requires_grad:
            gyg = g * gd
            gx = inv * gyg - (xd * inv ** 3 / d) * (gyg * xd).sum(axis=-1, keepdims=True)
        ggain = (g * xd * inv).reshape(-1, d).sum(axis=0) if gain.requires_grad else None
        return gx, ggain

    return _finish("rms_norm", xd * inv * gd, (x, gain), bwd)


def transpose_axes(x, axis_a, axis_b):
    """Swap two axes (generalizes transpose-2d; backward is the same swap)."""
    x = _as_tensor(x)
    try:
        y = np.ascontiguousarray(x.data.swapaxes(axis_a, axis_b))
    except ValueError as e:
        raise ShapeError(f"cannot swap axes {axis_a},{axis_b} of {x.shape}") from e
    return _finish("transpose-axes", y, (x,),
                   lambda g: (np.ascontiguousarray(g.swapaxes(axis_a, axis_b)),))


_GELU_K = float(np.sqrt(2.0 / np.pi))  # plain float: numpy scalars upcast f32
_GELU_C = 0.044715


@njit(cache=True, fastmath=_FUSED_FM)
def _gelu_inner_k(x, k, c, out):
    for i in range(x.size):
        xv = x[i]
        out[i] = k * (xv + c * (xv * xv * xv))


@njit(cache=True, fastmath=_FUSED_FM)
def _gelu_finish_k(x, t, half, y):
    # 0.5 x (1 + t), written without a unit constant
    for i in range(x.size):
        xv = x[i]
        y[i] = half * (xv + xv * t[i])


@njit(cache=True, fastmath=_FUSED_FM)
def _gelu_bwd_k(g, x, t, k, c3, half, one, out):
    for i in range(g.size):
        xv = x[i]
        tv = t[i]
        dinner = k + c3 * (xv * xv)
        out[i] = g[i] * (half * (one + tv) + half * xv * (one - tv * tv) * dinner)


def gelu(x):
    """tanh-form gelu: 0.5 x (1 + tanh(k (x + 0.044715 x^3)))."""
    x = _as_tensor(x)
    xd = x.data
    dt = xd.dtype.type
    xf = _flat(xd)
    # only tanh itself goes through numpy; the polynomial halves before and
    # after it run as single compiled passes
    t = np.empty(xd.shape, dtype=xd.dtype)
    tf = t.reshape(-1)
    _gelu_inner_k(xf, dt(_GELU_K), dt(_GELU_C), tf)
    np.tanh(tf, out=tf)
    y = np.empty(xd.shape, dtype=xd.dtype)
    _gelu_finish_k(xf, tf, dt(0.5), y.reshape(-1))

    def bwd(g):
        gx = np.empty(xd.shape, dtype=xd.dtype)
        _gelu_bwd_k(_flat(g), xf, tf, dt(_GELU_K), dt(3.0 * _GELU_C * _GELU_K),
                    dt(0.5), dt(1), gx.reshape(-1))
        return (gx,)

    return _finish("gelu", y, (x,), bwd)


# ---------------------------------------------------------------------------
# backward


def backward(loss):
    """Run reverse-mode over loss's tape. Returns {leaf node id: grad Tensor}."""
    if not isinstance(loss, Tensor):
        raise TapeError("backward needs a Tensor")
    if loss.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = _find_tape(loss)
    if tape._consumed:
        raise TapeError("tape already consumed; record a fresh tape")
    tape._consumed = True

    grads = [None] * tape._n_nodes
    grads[loss._node] = np.ones((), dtype=loss.data.dtype)
    records = tape._records
    for i in range(len(records) - 1, -1, -1):
        out_id, input_ids, bwd = records[i]
        records[i] = None  # drop the closure and the arrays it captured
        g = grads[out_id]
        if g is None:
            continue
        for iid, gi in zip(input_ids, bwd(g)):
            if iid is None or gi is None:
                continue
            if grads[iid] is None:
                grads[iid] = gi
            else:
                grads[iid] = grads[iid] + gi
        grads[out_id] = None  # free intermediates as we go
    records.clear()

    out = {}
    for nid, leaf in tape._leaves.items():
        g = grads[nid]
        out[nid] = Tensor(g if g is not None
                          else np.zeros(leaf.shape, dtype=leaf.data.dtype))
    return out


def _find_tape(loss):
    # Recorded tensors carry a reference to their tape so backward can run
    # after the `with` block exits.
    if loss._tape_ref is not None and loss._gen == loss._tape_ref._gen:
        return loss._tape_ref
    raise TapeError("loss is not attached to a tape (was it recorded?)")


# ---------------------------------------------------------------------------
# numeric gradient checking


def grad_check(fn, x, h=1e-5, max_coords=None, rng=None):
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    `fn` maps a Tensor to a scalar Tensor; only `x` is varied. With
    `max_coords`, a random subset of coordinates is probed (for big inputs).
    """
    if _dtype is not np.float64:
        raise TapeError("grad_check needs float64 precision; call "
                        "set_default_dtype(np.float64) first")
    x = Tensor(np.asarray(x, dtype=np.float64).copy(), requires_grad=True)
    with Tape() as _:
        y = fn(x)
    grads = backward(y)
    if x._node not in grads:
        raise TapeError("fn does not depend on x")
    analytic = grads[x._node].data

    coords = list(np.ndindex(*x.shape)) if x.ndim else [()]
    if max_coords is not None and len(coords) > max_coords:
        rng = rng or np.random.default_rng(0)
        picks = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in picks]

    worst = 0.0
    base = x.data
    for idx in coords:
        xp = base.copy()
        xp[idx] += h
        xm = base.copy()
        xm[idx] -= h
        fp = fn(Tensor(xp)).item()
        fm = fn(Tensor(xm)).item()
        fd = (fp - fm) / (2.0 * h)
        a = analytic[idx] if analytic.ndim else float(analytic)
        err = abs(a - fd) / max(1.0, abs(a))
        if err > worst:
            worst = err
    return worst


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """Per-parameter first/second moment buffers plus the shared step count."""
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(m=[np.zeros(p.shape, dtype=p.data.dtype) for p in params],
                   v=[np.zeros(p.shape, dtype=p.data.dtype) for p in params],
                   beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update, in place.

    `params` is a list of leaf Tensors, `grads` the dict from backward().
    Every parameter must have a gradient entry; a missing one means the loss
    did not touch it, which is a wiring bug worth failing loudly on.
    """
    if len(state.m) != len(params):
        raise ValueError("AdamState was built for a different parameter list")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i, p in enumerate(params):
        if p._node is None or p._node not in grads:
            raise KeyError(f"no gradient recorded for parameter index {i} "
                           f"(shape {p.shape}); was it used in the loss?")
        g = grads[p._node].data
        m = state.m[i]
        v = state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_grad_norm(grads, max_norm):
    """Scale all grads so their joint L2 norm is at most max_norm."""
    total = 0.0
    for g in grads.values():
        total += float((g.data * g.data).sum())
    norm = np.sqrt(total)
    if norm > max_norm and norm > 0.0:
        s = max_norm / norm
        for g in grads.values():
            g.data *= s
    return norm


@njit(cache=True, fastmath=_FUSED_FM)
def _adam_k(g, m, v, cs, b1, a1, b2, a2, lric1, sc2, eps, upd):
    # bias correction folded into the scalars: lric1 = lr / (1 - b1^t),
    # sc2 = 1 / sqrt(1 - b2^t); cs applies gradient clipping on load
    for i in range(g.size):
        gv = g[i] * cs
        mv = b1 * m[i] + a1 * gv
        vv = b2 * v[i] + a2 * (gv * gv)
        m[i] = mv
        v[i] = vv
        upd[i] = lric1 * mv / (sc2 * np.sqrt(vv) + eps)


class FusedAdam:
    """Adam plus norm clipping over one flat gradient buffer.

    Numerically this matches clip_grad_norm followed by adam_step up to
    round-off (summation order and the bias-correction factoring differ), but
    the update is a single compiled pass instead of hundreds of small array
    ops. Deterministic for a fixed parameter order.

    Construction moves every parameter's storage into one flat array (each
    p.data becomes a view into it), so the update is a single subtraction.
    Tapes recorded before construction hold the old storage; build the
    optimizer before the first forward pass.
    """

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        if not self.params:
            raise ValueError("no parameters to optimize")
        dt = self.params[0].data.dtype
        spans = []
        n = 0
        for p in self.params:
            if p.data.dtype != dt:
                raise ValueError("parameters must share one dtype")
            spans.append((n, n + p.size))
            n += p.size
        self._spans = spans
        flat = np.empty(n, dtype=dt)
        for p, (lo, hi) in zip(self.params, spans):
            flat[lo:hi] = p.data.reshape(-1)
            p.data = flat[lo:hi].reshape(p.shape)
        self._flat = flat
        self.m = np.zeros(n, dtype=dt)
        self.v = np.zeros(n, dtype=dt)
        self._g = np.empty(n, dtype=dt)
        self._upd = np.empty(n, dtype=dt)
        self.step = 0
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def apply(self, grads, lr, max_norm=None):
        """Gather grads, clip to max_norm if given, update params in place.

        Returns the pre-clip gradient norm.
        """
        g = self._g
        for i, (p, (lo, hi)) in enumerate(zip(self.params, self._spans)):
            if p._node is None or p._node not in grads:
                raise KeyError(f"no gradient recorded for parameter index {i} "
                               f"(shape {p.shape}); was it used in the loss?")
            g[lo:hi] = grads[p._node].data.reshape(-1)
        norm = float(np.sqrt(np.dot(g, g)))
        if not np.isfinite(norm):
            # backstop for the size-capped per-op checks: any non-finite
            # activation poisons the gradients, so it is caught here at the
            # latest, before it can touch the parameters
            raise NonFiniteError("non-finite gradient norm")
        cs = 1.0
        if max_norm is not None and norm > max_norm > 0.0:
            cs = max_norm / norm
        self.step += 1
        dt = g.dtype.type
        c1 = 1.0 - self.beta1 ** self.step
        c2 = 1.0 - self.beta2 ** self.step
        _adam_k(g, self.m, self.v, dt(cs),
                dt(self.beta1), dt(1.0 - self.beta1),
                dt(self.beta2), dt(1.0 - self.beta2),
                dt(lr / c1), dt(1.0 / np.sqrt(c2)), dt(self.eps), self._upd)
        self._flat -= self._upd
        return norm


# ---------------------------------------------------------------------------
# flat parameter checkpoints


def save_params(named_params, path, header=None):
    """Write {"spec": header, "params": {name: {shape, data}}} as JSON.

    Parameter names are sorted so files are byte-stable for a given state.
    """
    blob = {"spec": header or {}, "params": {}}
    for name in sorted(named_params):
        p = named_params[name]
        arr = p.data if isinstance(p, Tensor) else np.asarray(p)
        blob["params"][name] = {
            "shape": list(arr.shape),
            "data": arr.reshape(-1).tolist(),
        }
    with open(path, "w") as f:
        json.dump(blob, f, sort_keys=True)


def load_params(path):
    """Read a checkpoint; returns (header dict, {name: Tensor})."""
    with open(path) as f:
        blob = json.load(f)
    if "params" not in blob:
        raise ValueError(f"{path} is not a parameter checkpoint")
    out = {}
    for name, rec in blob["params"].items():
        arr = np.asarray(rec["data"], dtype=_dtype).reshape(rec["shape"])
        out[name] = Tensor(arr, requires_grad=True)
    return blob.get("spec", {}), out
