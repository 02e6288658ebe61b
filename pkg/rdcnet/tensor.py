"""
Tensor Engine
Dense numpy-backed tensors with reverse-mode differentiation.

Each differentiable operation is a `Function` subclass with a `forward` over
raw arrays and a `backward` returning one gradient per input. `Function.apply`
wraps the result in a `Tensor` that remembers its creator, so `backward()` can
walk the graph in reverse topological order.
"""

import logging
import weakref
from contextlib import contextmanager
from typing import Any, Iterator, Optional, Sequence, Tuple, Union

import numpy as np

from rdcnet.errors import UsageError

logger = logging.getLogger(__name__)

_default_dtype = np.float32
_grad_enabled = True


# ============== Modes ==============

def default_dtype() -> type:
    """Floating type new tensors are created with."""
    return _default_dtype


def set_default_dtype(dtype) -> None:
    """Switch between 32-bit (training) and 64-bit (gradient checks) mode."""
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise UsageError(f"unsupported dtype {dtype}; use float32 or float64")
    _default_dtype = dtype


@contextmanager
def float64_mode() -> Iterator[None]:
    """Run the enclosed block in 64-bit mode."""
    previous = _default_dtype
    set_default_dtype(np.float64)
    try:
        yield
    finally:
        set_default_dtype(previous)


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording; intermediate buffers are freed as soon as they are unused."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """
    Counter-based (Philox) generator keyed by a base seed and stream indices.
    The same (seed, *stream) always yields the same sequence.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, stream)])))


# ============== Allocation Tracking ==============

class AllocationTracker:
    """Counts bytes held by live tensor buffers and their high-water mark."""

    def __init__(self):
        self.live_bytes = 0
        self.peak_bytes = 0

    def allocate(self, nbytes: int) -> None:
        self.live_bytes += nbytes
        if self.live_bytes > self.peak_bytes:
            self.peak_bytes = self.live_bytes

    def release(self, nbytes: int) -> None:
        self.live_bytes -= nbytes

    def reset_peak(self) -> None:
        self.peak_bytes = self.live_bytes


tracker = AllocationTracker()


# ============== Tensor ==============

class Tensor:
    """
    Dense n-dimensional array participating in reverse-mode differentiation.

    Leaf tensors created with `track_grad=True` carry a zero-initialised `grad`
    accumulator of the same shape. Tensors are treated as immutable; only
    `grad` changes after creation.
    """

    def __init__(self, data: Any, track_grad: bool = False, creator: Optional["Function"] = None,
                 name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype != _default_dtype:
            arr = arr.astype(_default_dtype)
        if any(extent <= 0 for extent in arr.shape):
            raise UsageError(f"tensor extents must be positive, got shape {arr.shape}")
        self.data = arr
        self.track_grad = bool(track_grad)
        self.creator = creator
        self.name = name
        self.grad: Optional[np.ndarray] = None
        if self.track_grad and creator is None:
            self.grad = np.zeros_like(arr)

        nbytes = arr.nbytes if arr.flags.owndata else 0
        if nbytes:
            tracker.allocate(nbytes)
            weakref.finalize(self, tracker.release, nbytes)

    # ---- introspection ----

    @property
    def shape(self) -> Tuple[int, ...]:
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

    @property
    def is_leaf(self) -> bool:
        return self.creator is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Same values, cut from the graph."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.track_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"<Tensor shape={self.shape} dtype={self.dtype}{label} track_grad={self.track_grad}>"

    # ---- graph ----

    def backward(self) -> None:
        backward(self)

    # ---- operators ----

    def __add__(self, other):
        return Add.apply(self, other)

    def __radd__(self, other):
        return Add.apply(other, self)

    def __sub__(self, other):
        return Sub.apply(self, other)

    def __rsub__(self, other):
        return Sub.apply(other, self)

    def __mul__(self, other):
        return Mul.apply(self, other)

    def __rmul__(self, other):
        return Mul.apply(other, self)

    def __truediv__(self, other):
        return Div.apply(self, other)

    def __rtruediv__(self, other):
        return Div.apply(other, self)

    def __neg__(self):
        return Mul.apply(self, -1.0)

    def __pow__(self, exponent: float):
        return Pow.apply(self, exponent=float(exponent))

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    def exp(self) -> "Tensor":
        return Exp.apply(self)

    def sum(self, axis: Union[None, int, Tuple[int, ...]] = None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Union[None, int, Tuple[int, ...]] = None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) / float(count)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)


def as_tensor(value: Any) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def zeros(shape: Sequence[int], track_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=_default_dtype), track_grad=track_grad)


# ============== Function ==============

class Function:
    """Base class for differentiable operations."""

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no forward pass")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{type(self).__name__} has no backward pass")

    @classmethod
    def apply(cls, *inputs: Any, **kwargs: Any) -> Tensor:
        tensors = tuple(as_tensor(x) for x in inputs)
        func = cls(*tensors)
        out = func.forward(*(t.data for t in tensors), **kwargs)
        track = _grad_enabled and any(t.track_grad for t in tensors)
        return Tensor(out, track_grad=track, creator=func if track else None)


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for dim, extent in enumerate(shape):
        if extent == 1 and grad.shape[dim] != 1:
            grad = grad.sum(axis=dim, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into the `grad` of every reachable tracked leaf."""
    if loss.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.track_grad:
        return

    # iterative post-order traversal
    order = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if id(node) in visited:
            continue
        if expanded:
            visited.add(id(node))
            order.append(node)
            continue
        stack.append((node, True))
        if node.creator is not None:
            for parent in node.creator.inputs:
                if parent.track_grad and id(parent) not in visited:
                    stack.append((parent, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node.creator is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += grad.astype(node.data.dtype, copy=False)
            continue
        input_grads = node.creator.backward(grad)
        for parent, parent_grad in zip(node.creator.inputs, input_grads):
            if parent_grad is None or not parent.track_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + parent_grad
            else:
                grads[key] = parent_grad


# ============== Elementwise & Shape Functions ==============

class Add(Function):
    def forward(self, x, y):
        self.shapes = (x.shape, y.shape)
        return x + y

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, x, y):
        self.shapes = (x.shape, y.shape)
        return x - y

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, x, y):
        self.x, self.y = x, y
        return x * y

    def backward(self, grad):
        return unbroadcast(grad * self.y, self.x.shape), unbroadcast(grad * self.x, self.y.shape)


class Div(Function):
    def forward(self, x, y):
        self.x, self.y = x, y
        return x / y

    def backward(self, grad):
        gx = grad / self.y
        gy = -grad * self.x / (self.y * self.y)
        return unbroadcast(gx, self.x.shape), unbroadcast(gy, self.y.shape)


class Pow(Function):
    def forward(self, x, exponent: float):
        self.x, self.exponent = x, exponent
        return x ** exponent

    def backward(self, grad):
        return (grad * self.exponent * self.x ** (self.exponent - 1),)


class Exp(Function):
    def forward(self, x):
        self.out = np.exp(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Sum(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = x.shape, axis, keepdims
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        elif self.axis is None and not self.keepdims:
            grad = np.reshape(grad, (1,) * len(self.shape))
        return (np.broadcast_to(grad, self.shape).copy(),)


class Reshape(Function):
    def forward(self, x, shape):
        self.shape = x.shape
        return x.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class GetItem(Function):
    """Basic (slice/int) indexing."""

    def forward(self, x, index):
        self.shape, self.dtype, self.index = x.shape, x.dtype, index
        return np.array(x[index])

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=grad.dtype)
        out[self.index] += grad
        return (out,)


class Concat(Function):
    def forward(self, *arrays, axis=1):
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along `axis` (channels by default)."""
    if len(tensors) == 1:
        return tensors[0]
    return Concat.apply(*tensors, axis=axis)
