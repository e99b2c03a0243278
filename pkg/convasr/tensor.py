"""
Dense tensors with a reverse-mode gradient tape.

A `Tensor` wraps a NumPy array. Every differentiable primitive is a `Function`
subclass with a NumPy `forward` and an analytic `backward`; applying one while
gradients are enabled links the output to the function, and `Tape.record` walks
those links back from a scalar loss to get the executed primitives in the order
they ran. `Tape.backward` then replays their adjoints in reverse.

Precision is a process-wide mode (float32 for training, float64 for gradient
checks) so that every parameter, and therefore every checkpoint, has one dtype.
Only same-shape operands or explicit leading-batch broadcast (one shape is a
suffix of the other) are accepted.
"""

import contextlib
import contextvars
import itertools
import logging
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractError, DimensionError

logger = logging.getLogger(__name__)

MASK_SENTINEL = -np.inf

_PRECISIONS = {"float32": np.float32, "float64": np.float64}
_dtype = np.float32
_grad_enabled: contextvars.ContextVar = contextvars.ContextVar("convasr_grad_enabled", default=True)
_op_counter = itertools.count()

ArrayLike = Union[np.ndarray, float, int, Sequence]


def set_precision(name: str) -> None:
    global _dtype
    if name not in _PRECISIONS:
        raise ValueError(f"Unknown precision '{name}', expected one of {sorted(_PRECISIONS)}")
    _dtype = _PRECISIONS[name]


def get_dtype() -> type:
    return _dtype


def precision_name() -> str:
    return "float64" if _dtype is np.float64 else "float32"


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch the global float mode."""
    previous = precision_name()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run primitives without linking them into a tape (inference)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


def _check_batch_broadcast(a: Tuple[int, ...], b: Tuple[int, ...], op: str) -> None:
    if a == b:
        return
    shorter, longer = (a, b) if len(a) <= len(b) else (b, a)
    if len(shorter) == 0 or longer[len(longer) - len(shorter):] == shorter:
        return
    raise DimensionError(f"{op}: shapes {a} and {b} are neither equal nor leading-batch broadcastable")


def _reduce_to(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead))).reshape(shape)


def _normalize_axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"{op}: axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


class Function:
    """
    Base class for differentiable primitives.

    `forward` receives the input arrays and returns the output array; `backward`
    receives dLoss/dOutput and returns one dLoss/dInput per input (None when an
    input takes no gradient).
    """

    def __init__(self, *inputs: "Tensor"):
        self.inputs = inputs
        self.seq = next(_op_counter)

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError("Forward pass not implemented for this function")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError("Backward pass not implemented for this function")

    @classmethod
    def apply(cls, *inputs: "Tensor", **kwargs) -> "Tensor":
        func = cls(*inputs)
        out = func.forward(*(t.data for t in inputs), **kwargs)
        requires_grad = is_grad_enabled() and any(t.requires_grad for t in inputs)
        return Tensor._from_op(out, func if requires_grad else None, requires_grad)


class Tensor:
    """
    A dense array taking part in reverse-mode differentiation.

    Leaves are created directly; non-leaves remember the `Function` that produced
    them. `grad` is populated on leaves by `backward()` and has the leaf's shape.
    """

    __array_priority__ = 1000

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=get_dtype())
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._ctx: Optional[Function] = None

    @classmethod
    def _from_op(cls, data: np.ndarray, ctx: Optional[Function], requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out.grad = None
        out._ctx = ctx
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._from_op(self.data, None, False)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, grad: np.ndarray) -> None:
        if grad.shape != self.data.shape:
            raise DimensionError(f"gradient shape {grad.shape} does not match tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype, copy=True)
        else:
            self.grad = self.grad + grad

    def backward(self) -> "Tape":
        """Populate `grad` on every requires_grad leaf reachable from this scalar."""
        tape = Tape.record(self)
        tape.backward(self)
        return tape

    def __add__(self, other: Union["Tensor", float]) -> "Tensor":
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other: Union["Tensor", float]) -> "Tensor":
        return add(self, scale(_as_tensor(other), -1.0))

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __mul__(self, other: Union["Tensor", float]) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other: float) -> "Tensor":
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self) -> "Tensor":
        return scale(tensor_sum(self), 1.0 / max(self.data.size, 1))

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes: int) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def relu(self) -> "Tensor":
        return relu(self)


def _as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class Tape:
    """
    Executed primitives reachable from a root, in execution order.

    Execution order is a topological order: an op can only run after the ops that
    produced its inputs. Replaying adjoints in reverse therefore sees every
    output adjoint complete before it is pushed to the inputs.
    """

    def __init__(self, ops: List[Function]):
        self.ops = ops

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        ops: List[Function] = []
        seen = set()
        stack = [root._ctx] if root._ctx is not None else []
        while stack:
            func = stack.pop()
            if id(func) in seen:
                continue
            seen.add(id(func))
            ops.append(func)
            for inp in func.inputs:
                if inp._ctx is not None and id(inp._ctx) not in seen:
                    stack.append(inp._ctx)
        ops.sort(key=lambda f: f.seq)
        return cls(ops)

    def leaves(self) -> List[Tensor]:
        found: Dict[int, Tensor] = {}
        for func in self.ops:
            for inp in func.inputs:
                if inp.requires_grad and inp._ctx is None:
                    found.setdefault(id(inp), inp)
        return list(found.values())

    def backward(self, root: Tensor) -> None:
        if root.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {root.shape}")
        if not root.requires_grad:
            raise ContractError("loss does not depend on any tensor with requires_grad=True")
        seed = np.ones_like(root.data)
        if root._ctx is None:
            root._accumulate(seed)
            return
        adjoints: Dict[int, np.ndarray] = {id(root._ctx): seed}
        for func in reversed(self.ops):
            grad = adjoints.pop(id(func), None)
            if grad is None:
                continue
            for inp, inp_grad in zip(func.inputs, func.backward(grad)):
                if inp_grad is None or not inp.requires_grad:
                    continue
                if inp._ctx is None:
                    inp._accumulate(inp_grad)
                    continue
                key = id(inp._ctx)
                adjoints[key] = adjoints[key] + inp_grad if key in adjoints else inp_grad

    def replay(self, root: Tensor) -> None:
        """Reset leaf grads and run the adjoints again."""
        for leaf in self.leaves():
            leaf.zero_grad()
        self.backward(root)


# ---------------------------------------------------------------------------
# Elementwise and structural primitives
# ---------------------------------------------------------------------------


class Add(Function):
    def forward(self, a, b):
        _check_batch_broadcast(a.shape, b.shape, "add")
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return _reduce_to(grad, self.shapes[0]), _reduce_to(grad, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        _check_batch_broadcast(a.shape, b.shape, "mul")
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return _reduce_to(grad * self.b, self.a.shape), _reduce_to(grad * self.a, self.b.shape)


class Scale(Function):
    def forward(self, a, factor: float = 1.0):
        self.factor = factor
        return a * a.dtype.type(factor)

    def backward(self, grad):
        return (grad * grad.dtype.type(self.factor),)


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise DimensionError(f"matmul: operands must be at least 2-d, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
        if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
            raise DimensionError(f"matmul: leading batch dimensions differ for shapes {a.shape} and {b.shape}")
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad):
        a, b = self.a, self.b
        grad_a = np.matmul(grad, np.swapaxes(b, -1, -2))
        if b.ndim == 2 and a.ndim > 2:
            grad_b = a.reshape(-1, a.shape[-1]).T @ grad.reshape(-1, grad.shape[-1])
        else:
            grad_b = np.matmul(np.swapaxes(a, -1, -2), grad)
        return grad_a, grad_b


class ReLU(Function):
    def forward(self, a):
        self.mask = a > 0
        return a * self.mask

    def backward(self, grad):
        return (grad * self.mask,)


class Softmax(Function):
    def forward(self, x, axis: int = -1):
        axis = _normalize_axis(axis, x.ndim, "softmax")
        blocked = np.isneginf(x)
        if blocked.any() and np.all(blocked, axis=axis).any():
            raise ContractError("softmax: a slice is entirely masked; every row needs one attendable entry")
        shifted = x - np.max(x, axis=axis, keepdims=True)
        exp = np.exp(shifted)
        self.axis = axis
        self.y = exp / np.sum(exp, axis=axis, keepdims=True)
        return self.y

    def backward(self, grad):
        y = self.y
        return (y * (grad - np.sum(grad * y, axis=self.axis, keepdims=True)),)


class LogSoftmax(Function):
    def forward(self, x, axis: int = -1):
        axis = _normalize_axis(axis, x.ndim, "log_softmax")
        shifted = x - np.max(x, axis=axis, keepdims=True)
        self.axis = axis
        self.y = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
        return self.y

    def backward(self, grad):
        return (grad - np.exp(self.y) * np.sum(grad, axis=self.axis, keepdims=True),)


class Sum(Function):
    def forward(self, x, axis=None, keepdims: bool = False):
        self.shape = x.shape
        if axis is None:
            self.axes = tuple(range(x.ndim))
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            self.axes = tuple(sorted(_normalize_axis(a, x.ndim, "sum") for a in axes))
        self.keepdims = keepdims
        return np.sum(x, axis=self.axes, keepdims=keepdims)

    def backward(self, grad):
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Transpose(Function):
    def forward(self, x, axes: Tuple[int, ...] = ()):
        axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
        if sorted(axes) != list(range(x.ndim)):
            raise DimensionError(f"transpose: {axes} is not a permutation of the axes of shape {x.shape}")
        self.inverse = tuple(np.argsort(axes))
        return np.transpose(x, axes)

    def backward(self, grad):
        return (np.transpose(grad, self.inverse),)


class Reshape(Function):
    def forward(self, x, shape: Tuple[int, ...] = ()):
        self.shape = x.shape
        try:
            return x.reshape(shape)
        except ValueError as exc:
            raise DimensionError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from exc

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Concat(Function):
    def forward(self, *arrays, axis: int = -1):
        ndim = arrays[0].ndim
        axis = _normalize_axis(axis, ndim, "concat")
        for arr in arrays[1:]:
            if arr.ndim != ndim or any(arr.shape[d] != arrays[0].shape[d] for d in range(ndim) if d != axis):
                raise DimensionError(
                    f"concat: shapes {[a.shape for a in arrays]} differ outside axis {axis}"
                )
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


class Gather(Function):
    """Pick one entry per row along the last axis (token log-probabilities)."""

    def forward(self, x, index: np.ndarray = None):
        if index.shape != x.shape[:-1]:
            raise DimensionError(f"gather: index shape {index.shape} does not match {x.shape[:-1]}")
        self.shape = x.shape
        self.index = index[..., None]
        return np.take_along_axis(x, self.index, axis=-1)[..., 0]

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=grad.dtype)
        np.put_along_axis(out, self.index, grad[..., None], axis=-1)
        return (out,)


class EmbeddingLookup(Function):
    def forward(self, weight, ids: np.ndarray = None):
        self.shape = weight.shape
        self.ids = ids
        return weight[ids]

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=grad.dtype)
        np.add.at(out, self.ids, grad)
        return (out,)


class LayerNormOp(Function):
    """Normalize over the last axis, then apply gain and bias."""

    def forward(self, x, gain, bias, eps: float = 1e-5):
        if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
            raise DimensionError(
                f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match last axis of {x.shape}"
            )
        centered = x - x.mean(axis=-1, keepdims=True)
        var = np.mean(centered * centered, axis=-1, keepdims=True)
        self.inv = 1.0 / np.sqrt(var + eps)
        self.xhat = centered * self.inv
        self.gain = gain
        return self.xhat * gain + bias

    def backward(self, grad):
        n = self.xhat.shape[-1]
        dxhat = grad * self.gain
        dx = (self.inv / n) * (
            n * dxhat
            - np.sum(dxhat, axis=-1, keepdims=True)
            - self.xhat * np.sum(dxhat * self.xhat, axis=-1, keepdims=True)
        )
        dgain = _reduce_to(grad * self.xhat, self.gain.shape)
        dbias = _reduce_to(grad, self.gain.shape)
        return dx, dgain, dbias


class Conv2dOp(Function):
    """Same-padded 2-D convolution, x [B, C, H, W], weight [O, C, kh, kw], bias [O]."""

    def forward(self, x, weight, bias):
        if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1] or bias.shape != (weight.shape[0],):
            raise DimensionError(f"conv2d: input {x.shape}, weight {weight.shape}, bias {bias.shape} disagree")
        kh, kw = weight.shape[2:]
        top, left = (kh - 1) // 2, (kw - 1) // 2
        padded = np.pad(x, ((0, 0), (0, 0), (top, kh - 1 - top), (left, kw - 1 - left)))
        h, w = x.shape[2:]
        out = np.zeros((x.shape[0], h, w, weight.shape[0]), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                out += np.tensordot(padded[:, :, i:i + h, j:j + w], weight[:, :, i, j], axes=([1], [1]))
        self.padded, self.weight, self.pads = padded, weight, (top, left)
        return out.transpose(0, 3, 1, 2) + bias[None, :, None, None]

    def backward(self, grad):
        padded, weight = self.padded, self.weight
        kh, kw = weight.shape[2:]
        h, w = grad.shape[2:]
        grad_t = grad.transpose(0, 2, 3, 1)
        grad_padded = np.zeros_like(padded)
        grad_weight = np.zeros_like(weight)
        for i in range(kh):
            for j in range(kw):
                window = padded[:, :, i:i + h, j:j + w]
                grad_padded[:, :, i:i + h, j:j + w] += np.tensordot(
                    grad_t, weight[:, :, i, j], axes=([3], [0])
                ).transpose(0, 3, 1, 2)
                grad_weight[:, :, i, j] = np.tensordot(grad_t, window, axes=([0, 1, 2], [0, 2, 3]))
        top, left = self.pads
        grad_x = grad_padded[:, :, top:top + h, left:left + w]
        return grad_x, grad_weight, grad.sum(axis=(0, 2, 3))


class CausalConv1dOp(Function):
    """Left-padded 1-D convolution over time, x [B, T, C], weight [O, C, k], bias [O].

    Output step t reads inputs t-k+1..t; weight[..., k-1] multiplies the current step.
    """

    def forward(self, x, weight, bias):
        if x.ndim != 3 or weight.ndim != 3 or x.shape[2] != weight.shape[1] or bias.shape != (weight.shape[0],):
            raise DimensionError(f"causal_conv1d: input {x.shape}, weight {weight.shape}, bias {bias.shape} disagree")
        k = weight.shape[2]
        steps = x.shape[1]
        padded = np.pad(x, ((0, 0), (k - 1, 0), (0, 0)))
        out = np.zeros((x.shape[0], steps, weight.shape[0]), dtype=x.dtype)
        for j in range(k):
            out += padded[:, j:j + steps, :] @ weight[:, :, j].T
        self.padded, self.weight = padded, weight
        return out + bias

    def backward(self, grad):
        padded, weight = self.padded, self.weight
        k = weight.shape[2]
        steps = grad.shape[1]
        grad_padded = np.zeros_like(padded)
        grad_weight = np.zeros_like(weight)
        for j in range(k):
            grad_padded[:, j:j + steps, :] += grad @ weight[:, :, j]
            grad_weight[:, :, j] = np.tensordot(grad, padded[:, j:j + steps, :], axes=([0, 1], [0, 1]))
        return grad_padded[:, k - 1:, :], grad_weight, grad.sum(axis=(0, 1))


class MaxPool2dOp(Function):
    """Non-overlapping max pool over the last two axes, ceil mode (partial windows kept)."""

    def forward(self, x, size: int = 2):
        b, c, h, w = x.shape
        out_h, out_w = -(-h // size), -(-w // size)
        padded = np.pad(
            x, ((0, 0), (0, 0), (0, out_h * size - h), (0, out_w * size - w)), constant_values=-np.inf
        )
        windows = (
            padded.reshape(b, c, out_h, size, out_w, size)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(b, c, out_h, out_w, size * size)
        )
        self.index = np.argmax(windows, axis=-1)[..., None]
        self.shape, self.size = x.shape, size
        return np.take_along_axis(windows, self.index, axis=-1)[..., 0]

    def backward(self, grad):
        b, c, h, w = self.shape
        size = self.size
        out_h, out_w = grad.shape[2:]
        windows = np.zeros((b, c, out_h, out_w, size * size), dtype=grad.dtype)
        np.put_along_axis(windows, self.index, grad[..., None], axis=-1)
        full = (
            windows.reshape(b, c, out_h, out_w, size, size)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(b, c, out_h * size, out_w * size)
        )
        return (full[:, :, :h, :w],)


# ---------------------------------------------------------------------------
# Functional surface
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Mul.apply(a, b)


def scale(a: Tensor, factor: float) -> Tensor:
    return Scale.apply(a, factor=factor)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def relu(a: Tensor) -> Tensor:
    return ReLU.apply(a)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return LogSoftmax.apply(x, axis=axis)


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def transpose(x: Tensor, axes: Sequence[int] = ()) -> Tensor:
    return Transpose.apply(x, axes=tuple(axes))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise DimensionError("concat: nothing to concatenate")
    return Concat.apply(*tensors, axis=axis)


def gather(x: Tensor, index: np.ndarray) -> Tensor:
    return Gather.apply(x, index=np.asarray(index, dtype=np.int64))


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    return EmbeddingLookup.apply(weight, ids=np.asarray(ids, dtype=np.int64))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    return LayerNormOp.apply(x, gain, bias, eps=eps)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return Conv2dOp.apply(x, weight, bias)


def causal_conv1d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return CausalConv1dOp.apply(x, weight, bias)


def max_pool2d(x: Tensor, size: int) -> Tensor:
    return MaxPool2dOp.apply(x, size=size)


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    max_checks: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    floor: float = 1e-3,
) -> float:
    """
    Compare analytic gradients of the scalar `fn(*inputs)` with central differences.

    Returns the largest |analytic - numeric| / max(|analytic|, |numeric|, floor) over
    the checked coordinates. `max_checks` limits the coordinates perturbed per input
    (sampled with `rng`); by default every coordinate is perturbed. Run under
    `precision("float64")` for meaningful results.
    """
    for t in inputs:
        t.zero_grad()
    fn(*inputs).backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]
    rng = rng if rng is not None else np.random.default_rng(0)

    worst = 0.0
    for t, grad in zip(inputs, analytic):
        t.data = np.ascontiguousarray(t.data)
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_checks is not None and flat.size > max_checks:
            coords = np.sort(rng.choice(flat.size, size=max_checks, replace=False))
        for idx in coords:
            original = flat[idx]
            with no_grad():
                flat[idx] = original + eps
                plus = fn(*inputs).item()
                flat[idx] = original - eps
                minus = fn(*inputs).item()
            flat[idx] = original
            numeric = (plus - minus) / (2.0 * eps)
            exact = float(grad.reshape(-1)[idx])
            err = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
            worst = max(worst, err)
    return worst
