"""
Dense N x C x H x W tensors with reverse-mode automatic differentiation.

Operations are recorded on the thread's active `Tape` only when one of their
inputs requires a gradient; outside a tape every op is a plain, reentrant numpy
computation. Backward replays the tape in exact reverse execution order and
consumes it.
"""

import logging
import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from roicodec.base.exceptions import ContractError, DimensionError, NumericError, ParameterError

logger = logging.getLogger(__name__)

Number = Union[int, float]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_local = threading.local()

BINARY_OPS = ("add", "sub", "mul", "div")
UNARY_OPS = ("relu", "softplus", "clamp_min", "sigmoid", "tanh", "exp", "log", "abs", "square", "neg", "normal_cdf")
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def get_dtype() -> np.dtype:
    return getattr(_local, "dtype", np.float32)


@contextmanager
def dtype_scope(dtype) -> Iterator[None]:
    """Temporarily change the float type of newly created tensors (gradient checks run in float64)."""
    previous = get_dtype()
    _local.dtype = dtype
    try:
        yield
    finally:
        _local.dtype = previous


def _tape_stack() -> list["Tape"]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording inside an enclosing tape."""
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


class Tensor:
    """A 4-D float array with optional gradient tracking."""

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=get_dtype(), copy=True) if not isinstance(data, np.ndarray) else data
        if arr.dtype != get_dtype():
            arr = arr.astype(get_dtype())
        if arr.ndim != 4:
            raise DimensionError(f"Tensor must be 4-D (n, c, h, w), got shape {arr.shape}")
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional["_Node"] = None

    @classmethod
    def zeros(cls, shape, requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros(shape, dtype=get_dtype()), requires_grad=requires_grad)

    @classmethod
    def ones(cls, shape, requires_grad: bool = False) -> "Tensor":
        return cls(np.ones(shape, dtype=get_dtype()), requires_grad=requires_grad)

    @classmethod
    def scalar(cls, value: Number) -> "Tensor":
        return cls(np.full((1, 1, 1, 1), value, dtype=get_dtype()))

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other):
        return elementwise("add", self, _as_tensor(other))

    def __radd__(self, other):
        return elementwise("add", _as_tensor(other), self)

    def __sub__(self, other):
        return elementwise("sub", self, _as_tensor(other))

    def __rsub__(self, other):
        return elementwise("sub", _as_tensor(other), self)

    def __mul__(self, other):
        return elementwise("mul", self, _as_tensor(other))

    def __rmul__(self, other):
        return elementwise("mul", _as_tensor(other), self)

    def __truediv__(self, other):
        return elementwise("div", self, _as_tensor(other))

    def __rtruediv__(self, other):
        return elementwise("div", _as_tensor(other), self)

    def __neg__(self):
        return elementwise("neg", self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if isinstance(value, np.ndarray):
        return Tensor(value)
    return Tensor.scalar(value)


class _Node:
    __slots__ = ("name", "inputs", "output", "backward", "tape")

    def __init__(self, name: str, inputs: tuple[Tensor, ...], output: Tensor, backward: BackwardFn, tape: "Tape"):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward = backward
        self.tape = tape


class Tape:
    """Ordered record of executed ops. Confined to the thread that entered it."""

    def __init__(self):
        self.entries: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, node: _Node) -> None:
        if self.consumed:
            raise ContractError("Cannot record on a tape that was already consumed by backward()")
        self.entries.append(node)

    def clear(self) -> None:
        """Drop every saved activation."""
        for node in self.entries:
            node.output.node = None
        self.entries.clear()

    def backward(self, loss: Tensor) -> None:
        if loss.shape != (1, 1, 1, 1):
            raise ContractError(f"backward() needs a scalar loss of shape (1, 1, 1, 1), got {loss.shape}")
        if self.consumed:
            raise ContractError("Tape already consumed; run the forward pass again before calling backward()")
        if loss.node is None or loss.node.tape is not self:
            raise ContractError("Loss was not produced on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.entries):
            grad_out = grads.pop(id(node.output), None)
            if grad_out is None:
                continue
            input_grads = node.backward(grad_out)
            for inp, grad in zip(node.inputs, input_grads):
                if grad is None or not inp.requires_grad:
                    continue
                grad = _unbroadcast(grad, inp.shape).astype(inp.data.dtype, copy=False)
                if inp.node is None:
                    inp.grad = grad.copy() if inp.grad is None else inp.grad + grad
                elif id(inp) in grads:
                    grads[id(inp)] = grads[id(inp)] + grad
                else:
                    grads[id(inp)] = grad
        self.consumed = True
        self.clear()


def backward(loss: Tensor) -> None:
    """Populate `.grad` on every requires_grad leaf reachable from `loss` and consume its tape."""
    if loss.node is None:
        raise ContractError("backward() called on a tensor that is not on an active tape (or whose tape was consumed)")
    loss.node.tape.backward(loss)


def custom_op(name: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap the result of a numpy computation and record it on the active tape when needed.

    `backward_fn` receives the output gradient and returns one gradient (or None) per input.
    Other operator packages build their differentiable ops through this hook.
    """
    if not np.isfinite(data).all():
        raise NumericError(f"Non-finite values produced by op '{name}'")
    out = Tensor(np.asarray(data, dtype=get_dtype()))
    tape = active_tape()
    if tape is not None and any(inp.requires_grad for inp in inputs):
        out.requires_grad = True
        node = _Node(name, tuple(inputs), out, backward_fn, tape)
        tape.record(node)
        out.node = node
    return out


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    shape = []
    for da, db in zip(a, b):
        if da != db and da != 1 and db != 1:
            raise DimensionError(f"Shapes {a} and {b} are not broadcastable")
        shape.append(max(da, db))
    return tuple(shape)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True)


def elementwise(op: str, a: Tensor, b: Optional[Tensor] = None, threshold: Optional[float] = None) -> Tensor:
    """Elementwise arithmetic and activations. Binary ops broadcast size-1 dims (e.g. a mask over channels)."""
    if op in BINARY_OPS:
        if b is None:
            raise ParameterError(f"Op '{op}' needs two operands")
        _broadcast_shape(a.shape, b.shape)
        x, y = a.data, b.data
        if op == "add":
            return custom_op(op, x + y, (a, b), lambda g: (g, g))
        if op == "sub":
            return custom_op(op, x - y, (a, b), lambda g: (g, -g))
        if op == "mul":
            return custom_op(op, x * y, (a, b), lambda g: (g * y, g * x))
        if np.any(y == 0):
            raise NumericError("Division by zero")
        return custom_op(op, x / y, (a, b), lambda g: (g / y, -g * x / (y * y)))

    if op not in UNARY_OPS:
        raise ParameterError(f"Unknown elementwise op '{op}'")
    x = a.data
    if op == "relu":
        return custom_op(op, np.maximum(x, 0), (a,), lambda g: (g * (x > 0),))
    if op == "softplus":
        return custom_op(op, np.logaddexp(0, x), (a,), lambda g: (g * special.expit(x),))
    if op == "clamp_min":
        if threshold is None:
            raise ParameterError("clamp_min needs a threshold")
        return custom_op(op, np.maximum(x, threshold), (a,), lambda g: (g * (x > threshold),))
    if op == "sigmoid":
        s = special.expit(x)
        return custom_op(op, s, (a,), lambda g: (g * s * (1 - s),))
    if op == "tanh":
        t = np.tanh(x)
        return custom_op(op, t, (a,), lambda g: (g * (1 - t * t),))
    if op == "exp":
        e = np.exp(x)
        return custom_op(op, e, (a,), lambda g: (g * e,))
    if op == "log":
        if np.any(x <= 0):
            raise NumericError("log of a non-positive value")
        return custom_op(op, np.log(x), (a,), lambda g: (g / x,))
    if op == "abs":
        return custom_op(op, np.abs(x), (a,), lambda g: (g * np.sign(x),))
    if op == "square":
        return custom_op(op, x * x, (a,), lambda g: (2 * g * x,))
    if op == "neg":
        return custom_op(op, -x, (a,), lambda g: (-g,))
    # normal_cdf
    return custom_op(op, special.ndtr(x), (a,), lambda g: (g * np.exp(-0.5 * x * x) * _INV_SQRT_2PI,))


def relu(x: Tensor) -> Tensor:
    return elementwise("relu", x)


def softplus(x: Tensor) -> Tensor:
    return elementwise("softplus", x)


def sigmoid(x: Tensor) -> Tensor:
    return elementwise("sigmoid", x)


def tanh(x: Tensor) -> Tensor:
    return elementwise("tanh", x)


def clamp_min(x: Tensor, threshold: float) -> Tensor:
    return elementwise("clamp_min", x, threshold=threshold)


def log(x: Tensor) -> Tensor:
    return elementwise("log", x)


def square(x: Tensor) -> Tensor:
    return elementwise("square", x)


def abs_(x: Tensor) -> Tensor:
    return elementwise("abs", x)


def normal_cdf(x: Tensor) -> Tensor:
    return elementwise("normal_cdf", x)


def _check_axes(over) -> tuple[int, ...]:
    axes = tuple(sorted(set(over)))
    if not axes:
        raise ParameterError("Reduction needs at least one axis")
    if any(ax < 0 or ax > 3 for ax in axes):
        raise ParameterError(f"Invalid reduction axes {over}")
    return axes


def reduce_mean(x: Tensor, over=(0, 1, 2, 3)) -> Tensor:
    axes = _check_axes(over)
    count = int(np.prod([x.shape[ax] for ax in axes]))
    shape = x.shape
    return custom_op(
        "reduce_mean",
        x.data.mean(axis=axes, keepdims=True),
        (x,),
        lambda g: (np.broadcast_to(g / count, shape),),
    )


def reduce_sum(x: Tensor, over=(0, 1, 2, 3)) -> Tensor:
    axes = _check_axes(over)
    shape = x.shape
    return custom_op("reduce_sum", x.data.sum(axis=axes, keepdims=True), (x,), lambda g: (np.broadcast_to(g, shape),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ParameterError("concat needs at least one tensor")
    for t in tensors[1:]:
        for ax in range(4):
            if ax != axis and t.shape[ax] != tensors[0].shape[ax]:
                raise DimensionError(f"Cannot concat shapes {tensors[0].shape} and {t.shape} along axis {axis}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward_fn(g):
        index = [slice(None)] * 4
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[axis] = slice(lo, hi)
            grads.append(g[tuple(index)])
        return grads

    return custom_op("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, backward_fn)


def crop(x: Tensor, c: Optional[tuple] = None, h: Optional[tuple] = None, w: Optional[tuple] = None) -> Tensor:
    """Take a sub-block along channel/height/width; ranges are (start, stop)."""
    index = (slice(None),) + tuple(slice(*r) if r is not None else slice(None) for r in (c, h, w))
    shape = x.shape

    def backward_fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return custom_op("crop", x.data[index], (x,), backward_fn)


def _conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(input: Tensor, weight: Tensor, bias: Optional[Tensor], stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding. weight: (c_out, c_in, k, k); bias: (1, c_out, 1, 1)."""
    c_out, c_in, k, k2 = weight.shape
    n, c, h, w = input.shape
    if k != k2:
        raise DimensionError(f"Kernel must be square, got {weight.shape}")
    if c != c_in:
        raise DimensionError(f"Input has {c} channels, weight expects {c_in}")
    if bias is not None and bias.shape != (1, c_out, 1, 1):
        raise DimensionError(f"Bias shape {bias.shape} does not match {c_out} output channels")
    if stride < 1 or padding < 0:
        raise ParameterError(f"Invalid stride {stride} or padding {padding}")
    oh, ow = _conv_output_size(h, k, stride, padding), _conv_output_size(w, k, stride, padding)
    if oh < 1 or ow < 1:
        raise DimensionError(f"Input {input.shape} too small for kernel {k} with padding {padding}")

    x_pad = np.pad(input.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = sliding_window_view(x_pad, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    wd = weight.data
    out = np.einsum("nchwij,ocij->nohw", cols, wd, optimize=True)
    if bias is not None:
        out = out + bias.data

    def backward_fn(g):
        grad_w = np.einsum("nohw,nchwij->ocij", g, cols, optimize=True)
        grad_x = np.zeros_like(x_pad)
        for i in range(k):
            for j in range(k):
                grad_x[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += np.einsum(
                    "nohw,oc->nchw", g, wd[:, :, i, j], optimize=True
                )
        grad_x = grad_x[:, :, padding : padding + h, padding : padding + w]
        grad_b = g.sum(axis=(0, 2, 3), keepdims=True) if bias is not None else None
        return grad_x, grad_w, grad_b

    inputs = (input, weight, bias) if bias is not None else (input, weight)
    return custom_op("conv2d", out, inputs, backward_fn)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ParameterError(f"Upsampling factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)
    return custom_op(
        "upsample_nearest",
        out,
        (x,),
        lambda g: (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),),
    )


def upsample_conv2d(input: Tensor, weight: Tensor, bias: Optional[Tensor], factor: int) -> Tensor:
    """Nearest-neighbour upsampling by `factor` followed by a same-padded stride-1 convolution."""
    if factor < 1:
        raise ParameterError(f"Upsampling factor must be >= 1, got {factor}")
    k = weight.shape[-1]
    return conv2d(upsample_nearest(input, factor), weight, bias, stride=1, padding=k // 2)


def check_finite(x: Union[Tensor, np.ndarray], what: str) -> None:
    data = x.data if isinstance(x, Tensor) else x
    if not np.isfinite(data).all():
        raise NumericError(f"Non-finite values in {what}")
