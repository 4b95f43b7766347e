"""Dense tensors with a recording tape for reverse-mode differentiation.

Small by design: the primitive set below is exactly what the memory update
rules, the cache aggregation paths and the toy models need.  Data is stored
in float64 by default (float32 storage can be selected per run); all
arithmetic is carried out in float64 regardless of storage.  Every
primitive checks its output for NaN/Inf and fails hard.

A ``Tape`` records primitive applications in topological order.  ``backprop``
walks it in reverse and returns gradients for every watched leaf.  Tapes are
confined to one thread; independent tapes may run concurrently.
"""

from __future__ import annotations

import itertools
import math
import threading

import numpy as np

__all__ = [
    "Tensor",
    "IndexTensor",
    "Tape",
    "ShapeError",
    "NumericalError",
    "NonDifferentiableError",
    "tensor",
    "zeros",
    "set_storage_dtype",
    "get_storage_dtype",
    "backprop",
    "finite_difference_grad",
]

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715
_LN_EPS = 1e-5

_ids = itertools.count(1)

_tls = threading.local()


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""


class NumericalError(FloatingPointError):
    """A primitive produced NaN or Inf."""


class NonDifferentiableError(RuntimeError):
    """Gradient reached an op with no backward rule (top-k indices)."""


_storage_dtype = np.float64


def set_storage_dtype(dtype) -> None:
    """Select float64 (default) or float32 storage for new tensors."""
    global _storage_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"storage dtype must be float32 or float64, got {dtype}")
    _storage_dtype = dtype.type


def get_storage_dtype():
    return _storage_dtype


class Tensor:
    """Dense n-dimensional array of reals, identified by a tape-unique id."""

    __slots__ = ("id", "data")

    def __init__(self, data):
        self.id = next(_ids)
        self.data = data

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(id={self.id}, shape={self.data.shape})"

    # Light sugar for readability in the model code.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __neg__(self):
        return scale(self, -1.0)


class IndexTensor(Tensor):
    """Integer index output of top-k selection; carries no backward rule."""

    __slots__ = ()


def _store(arr: np.ndarray) -> np.ndarray:
    if arr.dtype != _storage_dtype:
        arr = arr.astype(_storage_dtype)
    return arr


def _f64(t: Tensor) -> np.ndarray:
    # Accumulation dtype is always float64 even under float32 storage.
    return np.asarray(t.data, dtype=np.float64)


def tensor(values, dtype=None) -> Tensor:
    """Create a leaf tensor (not recorded on any tape)."""
    arr = np.array(values, dtype=np.float64)
    out = Tensor(_store(arr) if dtype is None else arr.astype(dtype))
    if not np.all(np.isfinite(out.data)):
        raise NumericalError("leaf tensor contains NaN/Inf")
    return out


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_storage_dtype))


class _Node:
    __slots__ = ("op", "in_ids", "out_id", "aux", "vjp", "nondiff", "out_data")

    def __init__(self, op, in_ids, out_id, aux, vjp, nondiff, out_data):
        self.op = op
        self.in_ids = in_ids
        self.out_id = out_id
        self.aux = aux
        self.vjp = vjp
        self.nondiff = nondiff
        self.out_data = out_data


class _SparseSlice:
    """Gradient contribution targeting a slice of the input buffer."""

    __slots__ = ("shape", "index", "values")

    def __init__(self, shape, index, values):
        self.shape = shape
        self.index = index
        self.values = values


class Tape:
    """Ordered record of primitive applications on one thread."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.watched: dict[int, Tensor] = {}
        self._leaf_data: dict[int, np.ndarray] = {}

    def __enter__(self):
        stack = getattr(_tls, "stack", None)
        if stack is None:
            stack = _tls.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _tls.stack.pop()
        return False

    def watch(self, t: Tensor) -> Tensor:
        """Mark a leaf as trainable so backprop reports its gradient."""
        self.watched[t.id] = t
        return t

    def record(self, op, inputs, out, aux, vjp, nondiff=False):
        in_ids = tuple(t.id for t in inputs)
        for t in inputs:
            if t.id not in self._leaf_data:
                self._leaf_data.setdefault(t.id, t.data)
        self.nodes.append(_Node(op, in_ids, out.id, aux, vjp, nondiff, out.data))

    def replay(self) -> bool:
        """Re-run every recorded primitive from leaf values.

        Returns True when every recomputed output is bitwise identical to
        the recorded one.
        """
        env = dict(self._leaf_data)
        for node in self.nodes:
            args = [env[i] for i in node.in_ids]
            out = _RAW[node.op](args, node.aux)
            if out.dtype != node.out_data.dtype:
                out = out.astype(node.out_data.dtype)
            if not np.array_equal(out, node.out_data):
                return False
            env[node.out_id] = out
        return True


def active_tape() -> Tape | None:
    stack = getattr(_tls, "stack", None)
    if not stack:
        return None
    return stack[-1]


class suspend_tape:
    """Context manager that hides the active tape (finite differences etc.)."""

    def __enter__(self):
        stack = getattr(_tls, "stack", None)
        self._saved = stack
        _tls.stack = []
        return self

    def __exit__(self, *exc):
        _tls.stack = self._saved
        return False


def _emit(op, inputs, out_arr, aux, vjp, nondiff=False) -> Tensor:
    # One fast reduction: any NaN/Inf in the output poisons the sum.
    if not math.isfinite(float(out_arr.sum())) and not np.all(np.isfinite(out_arr)):
        shapes = [tuple(t.shape) for t in inputs]
        raise NumericalError(f"{op} produced NaN/Inf (operand shapes {shapes})")
    out = Tensor(_store(out_arr))
    tape = active_tape()
    if tape is not None:
        tape.record(op, inputs, out, aux, vjp, nondiff)
    return out


def _shape_err(op, *tensors):
    shapes = ", ".join(str(tuple(t.shape)) for t in tensors)
    return ShapeError(f"{op}: operand shapes do not conform: {shapes}")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g down to `shape` after numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# raw forward functions (shared by the primitives and by Tape.replay)
# ---------------------------------------------------------------------------

def _sigmoid_arr(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _gelu_arr(x):
    inner = _GELU_C * (x + _GELU_A * (x * x * x))
    return 0.5 * x * (1.0 + np.tanh(inner))


def _softmax_arr(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax_arr(x):
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _layer_norm_arr(x):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + _LN_EPS)


def _matvec_arr(a, x):
    if a.ndim == 2 and x.ndim == 1:
        return a @ x
    if a.ndim == 2 and x.ndim == 2:
        return x @ a.T
    if a.ndim == 3 and x.ndim == 1:
        return a @ x
    if a.ndim == 3 and x.ndim == 2:
        return np.matmul(a, x[:, :, None])[:, :, 0]
    if a.ndim == 4 and x.ndim == 2:
        b, s, n, m = a.shape
        return np.matmul(a.reshape(b, s * n, m), x[:, :, None]).reshape(b, s, n)
    if a.ndim == 4 and x.ndim == 3:
        return np.matmul(a, x[:, :, :, None])[:, :, :, 0]
    raise ShapeError(f"matvec: unsupported ranks {a.shape} x {x.shape}")


_RAW = {
    "matmul": lambda args, aux: np.matmul(args[0], args[1]),
    "matvec": lambda args, aux: _matvec_arr(args[0], args[1]),
    "transpose": lambda args, aux: np.swapaxes(args[0], -1, -2),
    "add": lambda args, aux: args[0] + args[1],
    "sub": lambda args, aux: args[0] - args[1],
    "mul": lambda args, aux: args[0] * args[1],
    "scale": lambda args, aux: args[0] * aux,
    "outer": lambda args, aux: (
        np.outer(args[0], args[1])
        if args[0].ndim == 1
        else args[0][:, :, None] * args[1][:, None, :]
    ),
    "dot": lambda args, aux: (
        np.array(np.dot(args[0], args[1]))
        if args[0].ndim == 1
        else (args[0] * args[1]).sum(axis=-1)
    ),
    "row_sum": lambda args, aux: args[0].sum(axis=-1),
    "row_mean": lambda args, aux: args[0].mean(axis=-1),
    "sum_all": lambda args, aux: np.array(args[0].sum()),
    "mean_all": lambda args, aux: np.array(args[0].mean()),
    "softmax": lambda args, aux: _softmax_arr(args[0]),
    "log_softmax": lambda args, aux: _log_softmax_arr(args[0]),
    "sigmoid": lambda args, aux: _sigmoid_arr(args[0]),
    "tanh": lambda args, aux: np.tanh(args[0]),
    "softplus": lambda args, aux: np.logaddexp(0.0, args[0]),
    "gelu": lambda args, aux: _gelu_arr(args[0]),
    "layer_norm": lambda args, aux: _layer_norm_arr(args[0]),
    "concat": lambda args, aux: np.concatenate(args, axis=aux),
    "narrow": lambda args, aux: args[0][
        tuple(slice(None) for _ in range(aux[0])) + (slice(aux[1], aux[1] + aux[2]),)
    ].copy(),
    "row_at": lambda args, aux: np.take(args[0], aux[1], axis=aux[0]),
    "reshape": lambda args, aux: args[0].reshape(aux),
    "expand_batch": lambda args, aux: np.broadcast_to(
        args[0], (aux,) + args[0].shape
    ).copy(),
    "gather_rows": lambda args, aux: args[0][aux],
    "take_along_last": lambda args, aux: np.take_along_axis(args[0], aux, axis=-1),
    "gather_axis": lambda args, aux: _gather_axis_arr(args[0], aux),
    "topk_indices": lambda args, aux: np.argsort(
        -args[0], axis=-1, kind="stable"
    )[..., : aux].astype(np.int64),
}


def _gather_axis_arr(a, idx):
    if a.ndim == 2 and idx.ndim == 1:
        return a[idx]
    if a.ndim == 3 and idx.ndim == 2:
        return np.take_along_axis(a, idx[:, :, None], axis=1)
    raise ShapeError(f"gather_axis: unsupported ranks {a.shape} idx {idx.shape}")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    da, db = _f64(a), _f64(b)
    if da.ndim < 2 or db.ndim < 2 or da.shape[-1] != db.shape[-2]:
        raise _shape_err("matmul", a, b)
    try:
        out = np.matmul(da, db)
    except ValueError as e:
        raise _shape_err("matmul", a, b) from e
    a_shape, b_shape = da.shape, db.shape

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(db, -1, -2)), a_shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(da, -1, -2), g), b_shape)
        return [(a.id, ga), (b.id, gb)]

    return _emit("matmul", (a, b), out, None, vjp)


def matvec(a: Tensor, x: Tensor) -> Tensor:
    """Contract the last axis of `a` with the vector(s) in `x`."""
    da, dx = _f64(a), _f64(x)
    if da.shape[-1] != dx.shape[-1]:
        raise _shape_err("matvec", a, x)
    key = (da.ndim, dx.ndim)
    try:
        out = _matvec_arr(da, dx)
    except ShapeError:
        raise _shape_err("matvec", a, x) from None

    def vjp(g):
        if key == (2, 1):
            return [(a.id, np.outer(g, dx)), (x.id, da.T @ g)]
        if key == (2, 2):
            return [(a.id, g.T @ dx), (x.id, g @ da)]
        if key == (3, 1):
            b, n, m = da.shape
            return [
                (a.id, g[:, :, None] * dx),
                (x.id, g.reshape(b * n) @ da.reshape(b * n, m)),
            ]
        if key == (3, 2):
            return [
                (a.id, g[:, :, None] * dx[:, None, :]),
                (x.id, np.matmul(g[:, None, :], da)[:, 0, :]),
            ]
        if key == (4, 2):
            b, s, n, m = da.shape
            return [
                (a.id, g[:, :, :, None] * dx[:, None, None, :]),
                (x.id, np.matmul(g.reshape(b, 1, s * n), da.reshape(b, s * n, m))[:, 0, :]),
            ]
        return [
            (a.id, g[:, :, :, None] * dx[:, :, None, :]),
            (x.id, np.matmul(g[:, :, None, :], da)[:, :, 0, :]),
        ]

    return _emit("matvec", (a, x), out, None, vjp)


def transpose(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise _shape_err("transpose", a)
    out = np.swapaxes(_f64(a), -1, -2)

    def vjp(g):
        return [(a.id, np.swapaxes(g, -1, -2))]

    return _emit("transpose", (a,), out, None, vjp)


def _binary(op, a, b, fwd):
    da, db = _f64(a), _f64(b)
    try:
        out = fwd(da, db)
    except ValueError as e:
        raise _shape_err(op, a, b) from e
    a_shape, b_shape = da.shape, db.shape
    return out, a_shape, b_shape


def add(a: Tensor, b: Tensor) -> Tensor:
    out, a_shape, b_shape = _binary("add", a, b, lambda x, y: x + y)

    def vjp(g):
        return [(a.id, _unbroadcast(g, a_shape)), (b.id, _unbroadcast(g, b_shape))]

    return _emit("add", (a, b), out, None, vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out, a_shape, b_shape = _binary("sub", a, b, lambda x, y: x - y)

    def vjp(g):
        return [(a.id, _unbroadcast(g, a_shape)), (b.id, _unbroadcast(-g, b_shape))]

    return _emit("sub", (a, b), out, None, vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    da, db = _f64(a), _f64(b)
    out, a_shape, b_shape = _binary("mul", a, b, lambda x, y: x * y)

    def vjp(g):
        return [
            (a.id, _unbroadcast(g * db, a_shape)),
            (b.id, _unbroadcast(g * da, b_shape)),
        ]

    return _emit("mul", (a, b), out, None, vjp)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = _f64(a) * c

    def vjp(g):
        return [(a.id, g * c)]

    return _emit("scale", (a,), out, c, vjp)


def outer(u: Tensor, v: Tensor) -> Tensor:
    du, dv = _f64(u), _f64(v)
    if du.ndim == 1 and dv.ndim == 1:
        out = np.outer(du, dv)
    elif du.ndim == 2 and dv.ndim == 2 and du.shape[0] == dv.shape[0]:
        out = du[:, :, None] * dv[:, None, :]
    else:
        raise _shape_err("outer", u, v)

    def vjp(g):
        if du.ndim == 1:
            return [(u.id, g @ dv), (v.id, g.T @ du)]
        return [
            (u.id, np.matmul(g, dv[:, :, None])[:, :, 0]),
            (v.id, np.matmul(du[:, None, :], g)[:, 0, :]),
        ]

    return _emit("outer", (u, v), out, None, vjp)


def dot(u: Tensor, v: Tensor) -> Tensor:
    du, dv = _f64(u), _f64(v)
    if du.shape != dv.shape or du.ndim not in (1, 2):
        raise _shape_err("dot", u, v)
    out = np.array(np.dot(du, dv)) if du.ndim == 1 else (du * dv).sum(axis=-1)

    def vjp(g):
        gg = g if du.ndim == 1 else g[:, None]
        return [(u.id, gg * dv), (v.id, gg * du)]

    return _emit("dot", (u, v), out, None, vjp)


def row_sum(a: Tensor) -> Tensor:
    da = _f64(a)
    out = da.sum(axis=-1)

    def vjp(g):
        return [(a.id, np.broadcast_to(g[..., None], da.shape).copy())]

    return _emit("row_sum", (a,), out, None, vjp)


def row_mean(a: Tensor) -> Tensor:
    da = _f64(a)
    n = da.shape[-1]
    out = da.mean(axis=-1)

    def vjp(g):
        return [(a.id, np.broadcast_to(g[..., None] / n, da.shape).copy())]

    return _emit("row_mean", (a,), out, None, vjp)


def sum_all(a: Tensor) -> Tensor:
    da = _f64(a)
    out = np.array(da.sum())

    def vjp(g):
        return [(a.id, np.full(da.shape, float(g)))]

    return _emit("sum_all", (a,), out, None, vjp)


def mean_all(a: Tensor) -> Tensor:
    da = _f64(a)
    out = np.array(da.mean())
    n = da.size

    def vjp(g):
        return [(a.id, np.full(da.shape, float(g) / n))]

    return _emit("mean_all", (a,), out, None, vjp)


def softmax(a: Tensor) -> Tensor:
    s = _softmax_arr(_f64(a))

    def vjp(g):
        inner = (g * s).sum(axis=-1, keepdims=True)
        return [(a.id, s * (g - inner))]

    return _emit("softmax", (a,), s, None, vjp)


def log_softmax(a: Tensor) -> Tensor:
    da = _f64(a)
    out = _log_softmax_arr(da)
    s = np.exp(out)

    def vjp(g):
        return [(a.id, g - s * g.sum(axis=-1, keepdims=True))]

    return _emit("log_softmax", (a,), out, None, vjp)


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid_arr(_f64(a))

    def vjp(g):
        return [(a.id, g * s * (1.0 - s))]

    return _emit("sigmoid", (a,), s, None, vjp)


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(_f64(a))

    def vjp(g):
        return [(a.id, g * (1.0 - t * t))]

    return _emit("tanh", (a,), t, None, vjp)


def softplus(a: Tensor) -> Tensor:
    da = _f64(a)
    out = np.logaddexp(0.0, da)

    def vjp(g):
        return [(a.id, g * _sigmoid_arr(da))]

    return _emit("softplus", (a,), out, None, vjp)


def gelu(a: Tensor) -> Tensor:
    da = _f64(a)
    da2 = da * da
    t = np.tanh(_GELU_C * (da + _GELU_A * (da2 * da)))
    out = 0.5 * da * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * da2)
        dgelu = 0.5 * (1.0 + t) + 0.5 * da * (1.0 - t * t) * dinner
        return [(a.id, g * dgelu)]

    return _emit("gelu", (a,), out, None, vjp)


def layer_norm(a: Tensor) -> Tensor:
    """Normalize over the last axis (no affine; epsilon inside the sqrt)."""
    da = _f64(a)
    n = da.shape[-1]
    mu = da.mean(axis=-1, keepdims=True)
    xc = da - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return [(a.id, inv * (g - gm - xhat * gx))]

    return _emit("layer_norm", (a,), xhat, (n,), vjp)


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    datas = [_f64(t) for t in tensors]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError as e:
        raise _shape_err("concat", *tensors) from e
    sizes = [d.shape[axis] for d in datas]

    def vjp(g):
        pieces = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        return [(t.id, p) for t, p in zip(tensors, pieces)]

    return _emit("concat", tuple(tensors), out, axis, vjp)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice `length` entries from `start` along `axis` (axis kept)."""
    da = _f64(a)
    if axis < 0:
        axis += da.ndim
    if not (0 <= start and start + length <= da.shape[axis]):
        raise ShapeError(
            f"narrow: [{start}:{start + length}] out of range for axis {axis} "
            f"of shape {tuple(da.shape)}"
        )
    index = tuple(slice(None) for _ in range(axis)) + (slice(start, start + length),)
    out = da[index]
    shape = da.shape

    def vjp(g):
        return [(a.id, _SparseSlice(shape, index, g))]

    return _emit("narrow", (a,), out, (axis, start, length), vjp)


def row_at(a: Tensor, index: int, axis: int) -> Tensor:
    """Take one index along `axis`, dropping that axis."""
    da = _f64(a)
    if axis < 0:
        axis += da.ndim
    if not 0 <= index < da.shape[axis]:
        raise ShapeError(
            f"row_at: index {index} out of range for axis {axis} of "
            f"shape {tuple(da.shape)}"
        )
    sl = tuple(slice(None) for _ in range(axis)) + (index,)
    out = da[sl]
    shape = da.shape

    def vjp(g):
        return [(a.id, _SparseSlice(shape, sl, g))]

    return _emit("row_at", (a,), out, (axis, index), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    da = _f64(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = da.reshape(shape)
    except ValueError as e:
        raise _shape_err("reshape", a) from e
    old = da.shape

    def vjp(g):
        return [(a.id, g.reshape(old))]

    return _emit("reshape", (a,), out, shape, vjp)


def expand_batch(a: Tensor, batch: int) -> Tensor:
    """Prepend a batch axis of size `batch`; gradient sums it back out."""
    da = _f64(a)
    out = np.broadcast_to(da, (batch,) + da.shape).copy()

    def vjp(g):
        return [(a.id, g.sum(axis=0))]

    return _emit("expand_batch", (a,), out, batch, vjp)


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Embedding lookup: rows of `table` selected by an integer array."""
    dt = _f64(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= dt.shape[0]):
        raise ShapeError(
            f"gather_rows: id out of range [0, {dt.shape[0]}) "
            f"(got min {ids.min()}, max {ids.max()})"
        )
    out = dt[ids]
    shape = dt.shape

    def vjp(g):
        buf = np.zeros(shape)
        np.add.at(buf, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return [(table.id, buf)]

    return _emit("gather_rows", (table,), out, ids, vjp)


def _as_index_array(idx):
    if isinstance(idx, IndexTensor):
        return idx.data
    return np.asarray(idx, dtype=np.int64)


def take_along_last(a: Tensor, idx) -> Tensor:
    """Gather entries of the last axis; `idx` broadcasts against the rest."""
    da = _f64(a)
    iarr = _as_index_array(idx)
    if iarr.ndim != da.ndim:
        raise _shape_err("take_along_last", a)
    out = np.take_along_axis(da, iarr, axis=-1)
    shape = da.shape

    def vjp(g):
        buf = np.zeros(shape)
        flat = buf.reshape(-1, shape[-1])
        rows = np.repeat(np.arange(flat.shape[0]), iarr.shape[-1])
        np.add.at(flat, (rows, iarr.reshape(-1)), g.reshape(-1))
        return [(a.id, buf)]

    return _emit("take_along_last", (a,), out, iarr, vjp)


def gather_axis(a: Tensor, idx) -> Tensor:
    """Select rows of the second-to-last grouping axis.

    (s, P) with idx (k,) -> (k, P); (B, s, P) with idx (B, k) -> (B, k, P).
    The gradient scatter-adds back into the selected rows only.
    """
    da = _f64(a)
    iarr = _as_index_array(idx)
    out = _gather_axis_arr(da, iarr)
    shape = da.shape

    def vjp(g):
        buf = np.zeros(shape)
        if da.ndim == 2:
            np.add.at(buf, iarr, g)
        else:
            b = shape[0]
            rows = np.repeat(np.arange(b), iarr.shape[1])
            np.add.at(buf, (rows, iarr.reshape(-1)), g.reshape(-1, shape[-1]))
        return [(a.id, buf)]

    return _emit("gather_axis", (a,), out, iarr, vjp)


def topk_indices(a: Tensor, k: int) -> IndexTensor:
    """Indices of the k largest entries of the last axis, descending.

    Ties break toward the smaller index.  The op has no backward rule:
    any gradient arriving here is a hard error rather than a silent zero.
    """
    da = _f64(a)
    k = int(k)
    if k < 0 or k > da.shape[-1]:
        raise ShapeError(f"topk_indices: k={k} out of range for shape {da.shape}")
    idx = np.argsort(-da, axis=-1, kind="stable")[..., :k].astype(np.int64)
    out = IndexTensor(idx)
    tape = active_tape()
    if tape is not None:
        tape.record("topk_indices", (a,), out, k, None, nondiff=True)
    return out


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def backprop(tape: Tape, loss: Tensor) -> dict[int, Tensor]:
    """Gradients of a scalar `loss` with respect to every watched leaf.

    Leaves the loss does not reach get zero gradients of matching shape.
    """
    if loss.size != 1:
        raise ShapeError(f"backprop: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(np.asarray(loss.data, dtype=np.float64))}
    # Buffers stored straight from a vjp may alias each other (e.g. `add`
    # hands the same array to both operands); copy before the first in-place
    # accumulation.
    borrowed: set[int] = set()

    def accumulate(tid, contrib):
        buf = grads.get(tid)
        if isinstance(contrib, _SparseSlice):
            if buf is None:
                buf = grads[tid] = np.zeros(contrib.shape)
            elif tid in borrowed:
                buf = grads[tid] = buf.copy()
                borrowed.discard(tid)
            buf[contrib.index] += contrib.values
        else:
            contrib = np.asarray(contrib, dtype=np.float64)
            if buf is None:
                grads[tid] = contrib
                borrowed.add(tid)
            else:
                if tid in borrowed:
                    buf = grads[tid] = buf.copy()
                    borrowed.discard(tid)
                buf += contrib

    for node in reversed(tape.nodes):
        g = grads.pop(node.out_id, None)
        if g is None:
            continue
        if node.nondiff:
            raise NonDifferentiableError(
                f"gradient reached non-differentiable op {node.op!r}"
            )
        g = g.reshape(node.out_data.shape)
        for tid, contrib in node.vjp(g):
            accumulate(tid, contrib)

    out = {}
    for tid, leaf in tape.watched.items():
        g = grads.get(tid)
        if g is None:
            g = np.zeros(leaf.shape)
        out[tid] = Tensor(_store(np.asarray(g, dtype=np.float64)))
    return out


def finite_difference_grad(f, x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of scalar f at x, entry by entry.

    The independent oracle for every gradient check in the suite; evaluates
    f with any active tape suspended, always in float64.
    """
    if h <= 0:
        raise ValueError("finite_difference_grad: h must be positive")
    base = np.asarray(x.data, dtype=np.float64).copy()
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)

    def eval_at(values):
        x.data = values.reshape(base.shape)
        out = f(x)
        val = out.item() if isinstance(out, Tensor) else float(out)
        return val

    with suspend_tape():
        try:
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = eval_at(flat)
                flat[i] = orig - h
                fm = eval_at(flat)
                flat[i] = orig
                gflat[i] = (fp - fm) / (2.0 * h)
        finally:
            x.data = _store(base)
    return Tensor(grad)
