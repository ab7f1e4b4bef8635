"""
Tensor Autodiff
===============

Minimal dense-tensor library with reverse-mode automatic differentiation.

Ops are `Function` subclasses: `forward` works on raw numpy arrays, `backward`
maps the upstream gradient to one gradient per input. Every op applied to a
tensor that requires grad is appended to the thread's active `Tape`;
`backward(loss)` walks that tape in strict reverse order.
"""

import math
import threading
from contextlib import contextmanager
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import NonFiniteError, ShapeError, TapeError

ArrayLike = Union[np.ndarray, float, int, Sequence[float], Sequence[Sequence[float]]]

LAYER_NORM_EPS = 1e-6
GELU_C = math.sqrt(2.0 / math.pi)

_state = threading.local()


def _thread_state():
    if not hasattr(_state, "dtype"):
        _state.dtype = np.float32
        _state.grad_enabled = True
        _state.tape = Tape()
    return _state


def get_default_dtype():
    return _thread_state().dtype


@contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (float64 for gradient checks)"""
    st = _thread_state()
    previous = st.dtype
    st.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        st.dtype = previous


@contextmanager
def no_grad():
    """Disable recording; used for evaluation and parameter updates"""
    st = _thread_state()
    previous = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = previous


def active_tape() -> "Tape":
    return _thread_state().tape


class Tape:
    """Ordered record of executed ops for one backward pass"""

    def __init__(self):
        self.records: List["Function"] = []
        self.consumed = False

    def record(self, fn: "Function"):
        if self.consumed:
            raise TapeError("cannot record on a consumed tape; call reset()")
        self.records.append(fn)

    def reset(self):
        self.records = []
        self.consumed = False

    def __len__(self):
        return len(self.records)


def _check_finite(arr: np.ndarray, where: str):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {where}")


def unbroadcast(grad: np.ndarray, to_shape: Tuple[int, ...]) -> np.ndarray:
    """Sum out broadcast dimensions so grad matches to_shape"""
    if grad.shape == tuple(to_shape):
        return grad
    while grad.ndim > len(to_shape):
        grad = grad.sum(axis=0)
    for dim, extent in enumerate(to_shape):
        if extent == 1 and grad.shape[dim] != 1:
            grad = grad.sum(axis=dim, keepdims=True)
    return grad


class Function:
    """Base class for differentiable operations"""

    def __init__(self, *tensors: "Tensor"):
        self.inputs = tensors
        self.output: Optional["Tensor"] = None

    def forward(self, *args: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError("Forward pass not implemented for this function")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError("Backward pass not implemented for this function")

    @classmethod
    def apply(cls, *tensors: "Tensor", **kwargs: Any) -> "Tensor":
        func = cls(*tensors)
        out_data = func.forward(*(t.data for t in tensors), **kwargs)
        _check_finite(out_data, cls.__name__)

        st = _thread_state()
        requires_grad = st.grad_enabled and any(t.requires_grad for t in tensors)
        out = Tensor(out_data, requires_grad=requires_grad, dtype=out_data.dtype)
        if requires_grad:
            out.creator = func
            func.output = out
            st.tape.record(func)
            out.tape = st.tape
        return out


class Tensor:
    """Dense n-dimensional array with an optional gradient"""

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or get_default_dtype())
        if self.data.ndim == 0:
            self.data = self.data.reshape(())
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.creator: Optional[Function] = None
        self.tape: Optional[Tape] = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.__name__}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype.type

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(other, dtype=self.data.dtype)

    def __add__(self, other):
        return Add.apply(self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return Sub.apply(self, self._lift(other))

    def __rsub__(self, other):
        return Sub.apply(self._lift(other), self)

    def __mul__(self, other):
        return Mul.apply(self, self._lift(other))

    __rmul__ = __mul__

    def __truediv__(self, scalar: float):
        return Mul.apply(self, self._lift(1.0 / scalar))

    def __neg__(self):
        return Mul.apply(self, self._lift(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes or None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)


def parameter(data: ArrayLike, dtype=None) -> Tensor:
    """Leaf tensor that collects gradients"""
    return Tensor(data, requires_grad=True, dtype=dtype)


# ============================================================================
# ELEMENT-WISE
# ============================================================================

class Add(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return unbroadcast(grad * self.b, self.a.shape), unbroadcast(grad * self.a, self.b.shape)


class Gelu(Function):
    """tanh approximation of GELU"""

    def forward(self, x):
        self.x = x
        self.t = np.tanh(GELU_C * (x + 0.044715 * x ** 3))
        return 0.5 * x * (1.0 + self.t)

    def backward(self, grad):
        x, t = self.x, self.t
        dinner = GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (grad * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * dinner),)


class Softplus(Function):
    """log(1 + e^x), computed without overflow"""

    def forward(self, x):
        self.x = x
        return np.logaddexp(0.0, x).astype(x.dtype, copy=False)

    def backward(self, grad):
        sig = 0.5 * (1.0 + np.tanh(0.5 * self.x))
        return (grad * sig,)


# ============================================================================
# SHAPE
# ============================================================================

class Reshape(Function):
    def forward(self, x, shape):
        self.in_shape = x.shape
        return x.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class Transpose(Function):
    def forward(self, x, axes=None):
        self.axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
        return np.transpose(x, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class Concat(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        self.sizes = [a.shape[axis] for a in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        cuts = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, cuts, axis=self.axis))


class Sum(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.in_shape = x.shape
        self.axis = axis
        self.keepdims = keepdims
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            axes = [a % len(self.in_shape) for a in np.atleast_1d(self.axis)]
            for a in sorted(axes):
                grad = np.expand_dims(grad, a)
        return (np.broadcast_to(grad, self.in_shape).copy(),)


class GatherRows(Function):
    """
    Row gather along axis 0, or per-batch along axis 1 when x is (B, N, D)
    and idx is (B, k). Backward is a scatter-add.
    """

    def forward(self, x, idx):
        self.in_shape = x.shape
        self.idx = idx
        self.batched = x.ndim == 3 and idx.ndim == 2 and idx.shape[0] == x.shape[0]
        if self.batched:
            return np.take_along_axis(x, idx[:, :, None], axis=1)
        return np.take(x, idx, axis=0)

    def backward(self, grad):
        out = np.zeros(self.in_shape, dtype=grad.dtype)
        if self.batched:
            rows = np.arange(self.in_shape[0])[:, None]
            np.add.at(out, (rows, self.idx), grad)
        else:
            np.add.at(out, self.idx, grad)
        return (out,)


class Select(Function):
    """x[..., index, ...] along one axis, dropping that axis"""

    def forward(self, x, index, axis):
        self.in_shape = x.shape
        self.index = index
        self.axis = axis
        return np.take(x, index, axis=axis)

    def backward(self, grad):
        out = np.zeros(self.in_shape, dtype=grad.dtype)
        view = np.moveaxis(out, self.axis, 0)
        view[self.index] = grad
        return (out,)


# ============================================================================
# LINEAR ALGEBRA AND NORMALIZATION
# ============================================================================

class MatMul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad):
        ga = np.matmul(grad, np.swapaxes(self.b, -1, -2))
        gb = np.matmul(np.swapaxes(self.a, -1, -2), grad)
        return unbroadcast(ga, self.a.shape), unbroadcast(gb, self.b.shape)


class Softmax(Function):
    def forward(self, x, axis=-1):
        self.axis = axis
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        self.y = e / e.sum(axis=axis, keepdims=True)
        return self.y

    def backward(self, grad):
        y = self.y
        return (y * (grad - (grad * y).sum(axis=self.axis, keepdims=True)),)


class LayerNorm(Function):
    def forward(self, x, gain, bias, eps=LAYER_NORM_EPS):
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mu) * self.inv_std
        self.gain = gain
        return self.xhat * gain + bias

    def backward(self, grad):
        xhat = self.xhat
        dxhat = grad * self.gain
        dx = self.inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(grad.ndim - 1))
        return dx, (grad * xhat).sum(axis=lead), grad.sum(axis=lead)


class L2Normalize(Function):
    def forward(self, x):
        norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
        if np.any(norm == 0):
            raise ValueError("l2_normalize: zero-norm vector")
        self.norm = norm
        self.y = x / norm
        return self.y

    def backward(self, grad):
        y = self.y
        return ((grad - y * (grad * y).sum(axis=-1, keepdims=True)) / self.norm,)


# ============================================================================
# PUBLIC OPS
# ============================================================================

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    return MatMul.apply(a, b)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    return Softmax.apply(x, axis=axis)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: last dim {d} vs gain {gain.shape} / bias {bias.shape}")
    return LayerNorm.apply(x, gain, bias, eps=eps)


def gelu(x: Tensor) -> Tensor:
    return Gelu.apply(x)


def softplus(x: Tensor) -> Tensor:
    return Softplus.apply(x)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def gather_rows(x: Tensor, idx) -> Tensor:
    """Rows of x in the order of idx; idx may be (B, k) when x is (B, N, D)"""
    idx = np.asarray(idx, dtype=np.int64)
    batched = x.ndim == 3 and idx.ndim == 2 and idx.shape[0] == x.shape[0]
    limit = x.shape[1] if batched else x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= limit):
        raise IndexError(f"gather_rows: index out of range [0, {limit})")
    return GatherRows.apply(x, Tensor(idx, dtype=np.int64))


def select(x: Tensor, index: int, axis: int = 0) -> Tensor:
    if not -x.shape[axis] <= index < x.shape[axis]:
        raise IndexError(f"select: index {index} out of range for axis {axis}")
    return Select.apply(x, index=index, axis=axis)


def l2_normalize(x: Tensor) -> Tensor:
    return L2Normalize.apply(x)


# ============================================================================
# BACKWARD
# ============================================================================

def backward(loss: Tensor):
    """Populate .grad on every requires_grad leaf reachable from loss"""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    if tape is None or loss.creator is None:
        raise TapeError("loss was not produced on a tape")
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward")

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[int, Tensor] = {}
    for fn in reversed(tape.records):
        g = grads.pop(id(fn.output), None)
        if g is None:
            continue
        input_grads = fn.backward(g)
        for inp, ig in zip(fn.inputs, input_grads):
            if ig is None or not inp.requires_grad:
                continue
            if inp.creator is None:
                leaves[id(inp)] = inp
                inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
            else:
                prev = grads.get(id(inp))
                grads[id(inp)] = ig if prev is None else prev + ig

    for fn in tape.records:
        for inp in fn.inputs:
            if inp.requires_grad and inp.creator is None and inp.grad is None:
                inp.grad = np.zeros_like(inp.data)
    for leaf in leaves.values():
        _check_finite(leaf.grad, "backward")

    tape.consumed = True
    tape.records = []
    st = _thread_state()
    if st.tape is tape:
        st.tape = Tape()


# ============================================================================
# GRADIENT CHECKING
# ============================================================================

def numerical_gradient(fn: Callable[[], Tensor], t: Tensor, h: float = 1e-5,
                       indices: Optional[np.ndarray] = None) -> np.ndarray:
    """Central differences of the scalar fn() w.r.t. selected entries of t"""
    flat = t.data.reshape(-1)
    if not np.shares_memory(flat, t.data):
        raise ValueError("numerical_gradient needs a contiguous tensor")
    out = np.zeros(flat.size, dtype=np.float64)
    indices = np.arange(flat.size) if indices is None else indices
    with no_grad():
        for i in indices:
            orig = flat[i]
            flat[i] = orig + h
            plus = fn().item()
            flat[i] = orig - h
            minus = fn().item()
            flat[i] = orig
            out[i] = (plus - minus) / (2 * h)
    return out.reshape(t.shape)


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
              max_entries: Optional[int] = None, seed: int = 0) -> float:
    """
    Compare analytic and numerical gradients of fn() w.r.t. inputs.

    Returns the max error |a - n| / max(1, |a|, |n|) over checked entries.
    With max_entries set, a seeded random subset of each input is checked.
    """
    for t in inputs:
        t.zero_grad()
    backward(fn())
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in inputs:
        analytic = t.grad.reshape(-1)
        idx = np.arange(t.size)
        if max_entries is not None and t.size > max_entries:
            idx = rng.choice(t.size, size=max_entries, replace=False)
        numeric = numerical_gradient(fn, t, h=h, indices=idx).reshape(-1)
        a, n = analytic[idx], numeric[idx]
        err = np.abs(a - n) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
        worst = max(worst, float(err.max()) if err.size else 0.0)
    return worst
