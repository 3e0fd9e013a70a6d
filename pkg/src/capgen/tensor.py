"""Dense tensors with reverse-mode automatic differentiation.

Computation is define-by-run: while a :class:`Tape` is active (``with Tape()``),
every operation whose inputs require gradients appends a node holding its
inputs and a closure over the activations it saved.  ``backward`` walks the
nodes in reverse id order, so each node is visited once.  Outside a tape the
ops run as plain numpy and nothing is recorded, which is what inference uses.

There is no implicit broadcasting: binary ops accept identical shapes or a
scalar operand.  Use :func:`expand` to repeat a tensor explicitly.
"""

from __future__ import annotations

import contextlib
import io
import os
import struct
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import DomainError, NumericError, ShapeError, UsageError

_default_dtype: type = np.float32
_debug = os.environ.get("CAPGEN_DEBUG", "") not in ("", "0")
_tapes: list["Tape"] = []


def get_default_dtype() -> type:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise UsageError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _default_dtype = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype of newly created tensors (float64 for gradcheck)."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def set_debug(flag: bool) -> None:
    """Enable NaN/Inf assertions after every op."""
    global _debug
    _debug = bool(flag)


def debug_enabled() -> bool:
    return _debug


class Tensor:
    """Array value plus an optional gradient slot.

    Leaves created by the user carry ``node_id = None``; tensors produced by an
    op under an active tape carry the id of the node that made them.
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id", "tape")
    __array_priority__ = 1000  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=_default_dtype if dtype is None else dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self.tape: Tape | None = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = False
        out.grad = None
        out.node_id = None
        out.tape = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("division is only supported by a Python scalar")
        return div_scalar(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


@dataclass
class _Node:
    kind: str
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Append-only record of the ops executed while it is active."""

    def __init__(self):
        self.nodes: list[_Node] = []

    @property
    def next_id(self) -> int:
        return len(self.nodes)

    def record(self, kind, inputs, out: Tensor, backward_fn) -> None:
        out.node_id = len(self.nodes)
        out.tape = self
        out.requires_grad = True
        self.nodes.append(_Node(kind, tuple(inputs), backward_fn))

    def backward(self, loss: Tensor) -> None:
        if loss.tape is not self:
            raise UsageError("loss was not recorded on this tape")
        backward(loss)

    def __enter__(self) -> "Tape":
        _tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tapes.remove(self)


def active_tape() -> Tape | None:
    return _tapes[-1] if _tapes else None


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording on every active tape."""
    saved = list(_tapes)
    _tapes.clear()
    try:
        yield
    finally:
        _tapes.extend(saved)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires gradients.

    Leaf gradients accumulate across calls and across multiple uses of the
    same leaf; reset them with :meth:`Tensor.zero_grad` between steps.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node_id is None:
        if loss.requires_grad:
            _accumulate_leaf(loss, np.ones_like(loss.data))
            return
        raise UsageError("backward called on a tensor that was not produced by a tape")
    tape = loss.tape
    pending = {loss.node_id: np.ones_like(loss.data)}
    for nid in range(loss.node_id, -1, -1):
        g = pending.pop(nid, None)
        if g is None:
            continue
        node = tape.nodes[nid]
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.tape is tape and t.node_id is not None:
                prev = pending.get(t.node_id)
                pending[t.node_id] = gi if prev is None else prev + gi
            else:
                _accumulate_leaf(t, gi)


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def _emit(kind: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    if _debug and not np.all(np.isfinite(data)):
        raise NumericError(f"{kind} produced non-finite values")
    out = Tensor._wrap(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(kind, inputs, out, backward_fn)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def _check_same(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}")


def _fit(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    return g if g.shape == shape else np.sum(g).reshape(shape)


# -- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    if _is_scalar(b):
        a = as_tensor(a)
        return _emit("add", a.data + b, (a,), lambda g: (g,))
    if _is_scalar(a):
        return add(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "add")
    return _emit("add", a.data + b.data, (a, b), lambda g: (_fit(g, a.shape), _fit(g, b.shape)))


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        a = as_tensor(a)
        return _emit("sub", a.data - b, (a,), lambda g: (g,))
    if _is_scalar(a):
        b = as_tensor(b)
        return _emit("sub", a - b.data, (b,), lambda g: (-g,))
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "sub")
    return _emit("sub", a.data - b.data, (a, b), lambda g: (_fit(g, a.shape), _fit(-g, b.shape)))


def mul(a, b) -> Tensor:
    if _is_scalar(b):
        return scale(a, b)
    if _is_scalar(a):
        return scale(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b), lambda g: (_fit(g * bd, a.shape), _fit(g * ad, b.shape)))


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    return _emit("scale", x.data * c, (x,), lambda g: (g * c,))


def div_scalar(x, c: float) -> Tensor:
    x = as_tensor(x)
    return _emit("div", x.data / c, (x,), lambda g: (g / c,))


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _emit("neg", -x.data, (x,), lambda g: (-g,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _emit("exp", out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log of a non-positive value")
    xd = x.data
    return _emit("log", np.log(xd), (x,), lambda g: (g / xd,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _emit("tanh", out, (x,), lambda g: (g * (1 - out * out),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(-np.logaddexp(0, -x.data)).astype(x.dtype, copy=False)
    return _emit("sigmoid", out, (x,), lambda g: (g * out * (1 - out),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1 + t)

    def grad(g):
        dinner = _GELU_C * (1 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1 + t) + 0.5 * xd * (1 - t * t) * dinner),)

    return _emit("gelu", out, (x,), grad)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def grad(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _emit("matmul", ad @ bd, (a, b), grad)


# -- reductions and normalisers ----------------------------------------------


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape

    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", np.sum(x.data, axis=axis, keepdims=keepdims), (x,), grad)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return div_scalar(sum(x, axis=axis, keepdims=keepdims), float(n))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for shape {x.shape}")
    e = np.exp(x.data - np.max(x.data, axis=axis, keepdims=True))
    out = e / np.sum(e, axis=axis, keepdims=True)

    def grad(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _emit("softmax", out, (x,), grad)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    out = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))

    def grad(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return _emit("log_softmax", out, (x,), grad)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply per-channel gain and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gain/shift {gamma.shape}, {beta.shape} do not fit {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    rstd = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * rstd
    out = xhat * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def grad(g):
        dxhat = g * gamma.data
        dx = rstd * (
            dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, np.sum(g * xhat, axis=lead), np.sum(g, axis=lead)

    return _emit("layer_norm", out, (x, gamma, beta), grad)


# -- shape manipulation ------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from e
    return _emit("reshape", out, (x,), lambda g: (g.reshape(src),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inverse = np.argsort(axes)
    return _emit("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def roll(x, shift, axis) -> Tensor:
    """Circular shift (``numpy.roll`` semantics)."""
    x = as_tensor(x)
    back = tuple(-s for s in shift) if isinstance(shift, (tuple, list)) else -shift
    return _emit("roll", np.roll(x.data, shift, axis), (x,), lambda g: (np.roll(g, back, axis),))


def expand(x, shape) -> Tensor:
    """Explicitly repeat ``x`` to ``shape``; size-1 or missing leading axes are tiled."""
    x = as_tensor(x)
    shape = tuple(shape)
    lead = len(shape) - x.ndim
    if lead < 0 or any(s not in (1, t) for s, t in zip(x.shape, shape[lead:])):
        raise ShapeError(f"expand: cannot repeat {x.shape} to {shape}")
    src = x.shape

    def grad(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, s in enumerate(src) if s == 1 and g.shape[i] != 1)
        return (g.sum(axis=axes, keepdims=True) if axes else g,)

    return _emit("expand", np.broadcast_to(x.data, shape).copy(), (x,), grad)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or t.shape[:ax] + t.shape[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def grad(g):
        return tuple(np.split(g, splits, axis=ax))

    return _emit("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, grad)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shapes differ: {sorted(shapes)}")
    n = len(tensors)

    def grad(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _emit("stack", np.stack([t.data for t in tensors], axis=axis), tensors, grad)


def getitem(x, index) -> Tensor:
    """Basic (slice/int) indexing; the gradient scatters back into a zero buffer."""
    x = as_tensor(x)
    src, dtype = x.shape, x.dtype

    def grad(g):
        buf = np.zeros(src, dtype=dtype)
        buf[index] = g
        return (buf,)

    return _emit("slice", np.array(x.data[index]), (x,), grad)


def take(table, indices) -> Tensor:
    """Row lookup ``table[indices]`` (embedding lookup); gradients scatter-add into rows."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    n = table.shape[0]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise ShapeError(f"take: index out of range for table of shape {table.shape}")
    src, dtype = table.shape, table.dtype

    def grad(g):
        buf = np.zeros(src, dtype=dtype)
        np.add.at(buf, idx, g)
        return (buf,)

    return _emit("take", table.data[idx], (table,), grad)


def gather(x, indices) -> Tensor:
    """Pick ``x[..., indices[...]]`` along the last axis."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.shape != x.shape[:-1]:
        raise ShapeError(f"gather: index shape {idx.shape} does not match {x.shape[:-1]}")
    src, dtype = x.shape, x.dtype
    out = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def grad(g):
        buf = np.zeros(src, dtype=dtype)
        np.put_along_axis(buf, idx[..., None], g[..., None], axis=-1)
        return (buf,)

    return _emit("gather", out, (x,), grad)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` applied over the last axis of ``x`` (any leading shape)."""
    x, weight = as_tensor(x), as_tensor(weight)
    lead = x.shape[:-1]
    y = matmul(reshape(x, (-1, x.shape[-1])), weight)
    if bias is not None:
        y = add(y, expand(bias, y.shape))
    return reshape(y, lead + (weight.shape[-1],))


# -- gradient checking -------------------------------------------------------


@dataclass
class GradcheckReport:
    max_abs_err: float
    max_rel_err: float
    worst_ratio: float  # |err| / allowed; <= 1 means pass
    checked: int

    @property
    def ok(self) -> bool:
        return self.worst_ratio <= 1.0


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    rtol: float = 1e-6,
    atol: float = 1e-8,
    max_per_input: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradcheckReport:
    """Compare tape gradients of scalar ``fn(*inputs)`` with central differences.

    An element passes when ``|analytic - numeric| <= max(rtol * max(|a|, |n|), atol)``.
    ``max_per_input`` samples that many coordinates per input instead of all.
    """
    for t in inputs:
        t.grad = None
        t.requires_grad = True
    with Tape():
        out = fn(*inputs)
        backward(out)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]
    rng = rng or np.random.default_rng(0)
    worst = max_abs = max_rel = 0.0
    checked = 0
    with no_grad():
        for t, ga in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_per_input is not None and flat.size > max_per_input:
                coords = rng.choice(flat.size, size=max_per_input, replace=False)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + h
                fp = float(fn(*inputs).data.sum())
                flat[i] = orig - h
                fm = float(fn(*inputs).data.sum())
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                ana = float(ga.reshape(-1)[i])
                err = abs(ana - num)
                mag = max(abs(ana), abs(num))
                max_abs = max(max_abs, err)
                if mag > 0:
                    max_rel = max(max_rel, err / mag)
                worst = max(worst, err / max(rtol * mag, atol))
                checked += 1
    for t in inputs:
        t.grad = None
    return GradcheckReport(max_abs, max_rel, worst, checked)


# -- binary format -----------------------------------------------------------

TENSOR_MAGIC = b"VCAP"
TENSOR_VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4")}


def write_tensor(stream, array) -> None:
    """Serialise as magic, u32 version, u8 dtype, u8 rank, u32 extents, f32 payload (all LE)."""
    arr = np.asarray(array.data if isinstance(array, Tensor) else array, dtype="<f4")
    if arr.ndim > 255:
        raise ShapeError(f"rank {arr.ndim} does not fit the tensor header")
    stream.write(TENSOR_MAGIC)
    stream.write(struct.pack("<IBB", TENSOR_VERSION, 0, arr.ndim))
    stream.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    stream.write(arr.tobytes(order="C"))


def read_tensor(stream) -> np.ndarray:
    start = stream.tell() if stream.seekable() else 0

    def need(n: int) -> bytes:
        buf = stream.read(n)
        if len(buf) != n:
            raise UsageError(f"truncated tensor record starting at byte {start}")
        return buf

    if need(4) != TENSOR_MAGIC:
        raise UsageError(f"bad tensor magic at byte {start}")
    version, code, rank = struct.unpack("<IBB", need(6))
    if version != TENSOR_VERSION or code not in _DTYPE_CODES:
        raise UsageError(f"unsupported tensor version {version} / dtype {code}")
    shape = struct.unpack(f"<{rank}I", need(4 * rank))
    dtype = _DTYPE_CODES[code]
    count = int(np.prod(shape, dtype=np.int64))
    payload = need(count * dtype.itemsize)
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(np.float32)


def tensor_to_bytes(array) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()


def tensor_from_bytes(payload: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(payload))
