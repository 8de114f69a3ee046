"""
Autograd
Define-by-run reverse-mode differentiation over dense float64 arrays

Every differentiable operation appends a Node to the calling thread's Graph.
backward() walks that Graph in exact reverse insertion order and then resets it,
so each training step builds a fresh graph.
"""

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from services.errors import ContractError, DimensionError, NumericError, ParameterError


Number = Union[int, float]
GradFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

DROPOUT_MODES = ('train', 'infer', 'mc')
UNARY_OPS = ('relu', 'sigmoid', 'tanh')
REDUCE_OPS = ('sum', 'mean', 'max')

# sigmoid outputs are kept strictly inside (0, 1)
_SIGMOID_LOW = np.finfo(np.float64).tiny
_SIGMOID_HIGH = np.nextafter(1.0, 0.0)

BCE_CLAMP = 1e-7


class Tensor:
    """Dense float64 array participating in the differentiation graph"""

    def __init__(self, values, requires_grad: bool = False, name: Optional[str] = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return int(self.values.size)

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values

    def detach(self) -> 'Tensor':
        return Tensor(self.values.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # operator sugar, all routed through the recorded ops below
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis: Optional[int] = None) -> 'Tensor':
        return reduce('sum', self, axis)

    def mean(self, axis: Optional[int] = None) -> 'Tensor':
        return reduce('mean', self, axis)

    def max(self, axis: Optional[int] = None) -> 'Tensor':
        return reduce('max', self, axis)

    def reshape(self, *shape) -> 'Tensor':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self) -> 'Tensor':
        return unary('relu', self)

    def sigmoid(self) -> 'Tensor':
        return unary('sigmoid', self)

    def tanh(self) -> 'Tensor':
        return unary('tanh', self)


@dataclass
class Node:
    """One recorded operation: kind, inputs, output and its local gradient rule"""
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    grad_fn: GradFn


class Graph:
    """Append-only operation record; insertion order is a topological order"""

    def __init__(self):
        self.nodes: List[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node):
        self.nodes.append(node)

    def reset(self):
        self.nodes = []

    def backward(self, loss: Tensor, seed: np.ndarray):
        """
        Propagate gradients from loss through every recorded node

        Args:
            loss: Scalar output tensor
            seed: Initial gradient for loss (ones of its shape)
        """
        pending = {id(loss): seed}
        tensors = {id(loss): loss}

        for node in reversed(self.nodes):
            out_grad = pending.pop(id(node.output), None)
            if out_grad is None:
                continue
            node.output.grad = out_grad
            for tensor, grad in zip(node.inputs, node.grad_fn(out_grad)):
                if grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                tensors[key] = tensor
                if key in pending:
                    pending[key] = pending[key] + grad
                else:
                    pending[key] = grad

        # whatever is left never appeared as a node output: leaves
        for key, grad in pending.items():
            tensor = tensors[key]
            grad = np.asarray(grad, dtype=np.float64).reshape(tensor.shape)
            tensor.grad = grad if tensor.grad is None else np.asarray(tensor.grad + grad)


_local = threading.local()


def get_graph() -> Graph:
    """Return the graph owned by the calling thread"""
    graph = getattr(_local, 'graph', None)
    if graph is None:
        graph = Graph()
        _local.graph = graph
    return graph


def reset_graph():
    get_graph().reset()


def is_recording() -> bool:
    return getattr(_local, 'recording', True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Run forward ops without recording them"""
    previous = is_recording()
    _local.recording = False
    try:
        yield
    finally:
        _local.recording = previous


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _emit(op: str, values, inputs: Sequence[Tensor], grad_fn: GradFn) -> Tensor:
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise NumericError(f"{op} produced non-finite values")

    out = Tensor(values)
    if is_recording() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        get_graph().record(Node(op, tuple(inputs), out, grad_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape"""
    grad = np.asarray(grad)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product of a (m x k) and b (k x n)

    Raises:
        DimensionError: operands are not 2-D or inner dimensions differ
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} vs {b.shape}")

    av, bv = a.values, b.values

    def grad_fn(g):
        return g @ bv.T, av.T @ g

    return _emit('matmul', av @ bv, (a, b), grad_fn)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast('add', a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit('add', a.values + b.values, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast('sub', a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit('sub', a.values - b.values, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast('mul', a, b)
    av, bv = a.values, b.values

    def grad_fn(g):
        return _unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)

    return _emit('mul', av * bv, (a, b), grad_fn)


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _emit('neg', -x.values, (x,), lambda g: (-g,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(v))
    s = np.where(v >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return np.clip(s, _SIGMOID_LOW, _SIGMOID_HIGH)


def unary(op: str, x: Tensor) -> Tensor:
    """
    Elementwise relu / sigmoid / tanh

    relu'(0) is taken as 0.
    """
    x = as_tensor(x)
    v = x.values

    if op == 'relu':
        mask = v > 0
        return _emit('relu', np.where(mask, v, 0.0), (x,), lambda g: (g * mask,))
    if op == 'sigmoid':
        s = _sigmoid(v)
        return _emit('sigmoid', s, (x,), lambda g: (g * s * (1.0 - s),))
    if op == 'tanh':
        t = np.tanh(v)
        return _emit('tanh', t, (x,), lambda g: (g * (1.0 - t * t),))

    raise ParameterError(f"Unknown unary op '{op}', expected one of {UNARY_OPS}")


def relu(x: Tensor) -> Tensor:
    return unary('relu', x)


def sigmoid(x: Tensor) -> Tensor:
    return unary('sigmoid', x)


def tanh(x: Tensor) -> Tensor:
    return unary('tanh', x)


def dropout(x: Tensor, p: float, mode: str, rng: Optional[np.random.Generator] = None) -> Tensor:
    """
    Inverted dropout

    Args:
        x: Input tensor
        p: Drop probability in [0, 1)
        mode: 'infer' is the identity; 'train' and 'mc' zero each element with
              probability p and scale survivors by 1/(1-p)
        rng: Mask source, required for 'train' and 'mc' when p > 0

    Returns:
        Output tensor (x itself when no masking applies)
    """
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    if mode not in DROPOUT_MODES:
        raise ParameterError(f"Unknown dropout mode '{mode}', expected one of {DROPOUT_MODES}")

    x = as_tensor(x)
    if mode == 'infer' or p == 0.0:
        return x
    if rng is None:
        raise ParameterError(f"dropout mode '{mode}' needs an rng stream")

    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return _emit('dropout', x.values * mask, (x,), lambda g: (g * mask,))


def _normalize_axis(x: Tensor, axis: Optional[int]) -> Optional[int]:
    if axis is None:
        return None
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} is invalid for shape {x.shape}")
    return axis % x.ndim


def reduce(op: str, x: Tensor, axis: Optional[int] = None) -> Tensor:
    """
    sum / mean / max over one axis or over everything (axis=None)

    max routes its gradient to the first attaining index in storage order.
    """
    if op not in REDUCE_OPS:
        raise ParameterError(f"Unknown reduction '{op}', expected one of {REDUCE_OPS}")
    x = as_tensor(x)
    axis = _normalize_axis(x, axis)
    count = x.size if axis is None else x.shape[axis]
    if count == 0:
        raise DimensionError(f"cannot {op}-reduce an empty axis of shape {x.shape}")

    v = x.values
    shape = x.shape

    def expand(g):
        g = np.asarray(g)
        return g if axis is None else np.expand_dims(g, axis)

    if op == 'sum':
        return _emit('sum', v.sum(axis=axis), (x,),
                     lambda g: (np.broadcast_to(expand(g), shape).copy(),))

    if op == 'mean':
        return _emit('mean', v.mean(axis=axis), (x,),
                     lambda g: (np.broadcast_to(expand(g) / count, shape).copy(),))

    if axis is None:
        flat_index = int(np.argmax(v))

        def grad_max(g):
            grad = np.zeros(v.size)
            grad[flat_index] = float(np.asarray(g).reshape(-1)[0])
            return (grad.reshape(shape),)

        return _emit('max', v.reshape(-1)[flat_index], (x,), grad_max)

    index = np.expand_dims(np.argmax(v, axis=axis), axis)

    def grad_max_axis(g):
        grad = np.zeros(shape)
        np.put_along_axis(grad, index, expand(g), axis=axis)
        return (grad,)

    return _emit('max', np.take_along_axis(v, index, axis=axis).squeeze(axis), (x,), grad_max_axis)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    original = x.shape
    try:
        values = x.values.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"cannot reshape {original} into {tuple(shape)}") from None
    return _emit('reshape', values, (x,), lambda g: (np.asarray(g).reshape(original),))


def take(x: Tensor, index: int) -> Tensor:
    """Select entry (or row) `index` along the first axis"""
    x = as_tensor(x)
    if x.ndim == 0 or not 0 <= index < x.shape[0]:
        raise DimensionError(f"index {index} out of range for shape {x.shape}")
    shape = x.shape

    def grad_fn(g):
        grad = np.zeros(shape)
        grad[index] = g
        return (grad,)

    return _emit('take', x.values[index], (x,), grad_fn)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _normalize_axis(x, axis)
    if x.shape[axis] == 0:
        raise DimensionError(f"softmax over an empty axis of shape {x.shape}")

    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _emit('softmax', s, (x,), grad_fn)


def binary_cross_entropy(z: Tensor, target: float) -> Tensor:
    """
    -[Y log(z) + (1-Y) log(1-z)] with z clamped to [1e-7, 1-1e-7]

    The gradient is zero where the clamp is active.
    """
    z = as_tensor(z)
    if z.size != 1:
        raise ContractError(f"binary cross-entropy needs a scalar prediction, got shape {z.shape}")

    raw = z.values
    zc = np.clip(raw, BCE_CLAMP, 1.0 - BCE_CLAMP)
    y = float(target)
    loss = -(y * np.log(zc) + (1.0 - y) * np.log(1.0 - zc))
    inside = (raw >= BCE_CLAMP) & (raw <= 1.0 - BCE_CLAMP)

    def grad_fn(g):
        local = -y / zc + (1.0 - y) / (1.0 - zc)
        return (g * local * inside,)

    return _emit('bce', loss, (z,), grad_fn)


def backward(loss: Tensor):
    """
    Populate .grad on every requires_grad tensor reachable from loss

    Gradients accumulate additively into leaves; the thread's graph is reset
    afterwards.

    Raises:
        ContractError: loss is not scalar, or nothing was recorded
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")

    graph = get_graph()
    seed = np.ones(loss.shape)

    if len(graph) == 0:
        if loss.requires_grad:
            loss.grad = seed if loss.grad is None else np.asarray(loss.grad + seed)
            return
        raise ContractError("backward called with an empty graph")

    try:
        graph.backward(loss, seed)
    finally:
        graph.reset()


def gradcheck(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    floor: float = 1e-7
) -> float:
    """
    Compare analytic gradients against central finite differences

    Args:
        fn: Closure rebuilding the scalar output from `inputs`; it must be
            deterministic (re-seed any dropout rng inside it)
        inputs: Tensors to perturb; their .grad is overwritten
        h: Finite-difference step
        floor: Denominator floor so near-zero gradients compare absolutely

    Returns:
        Largest elementwise relative error over all inputs
    """
    for tensor in inputs:
        tensor.grad = None
    reset_graph()
    out = fn()
    backward(out)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    with no_grad():
        for tensor, grad in zip(inputs, analytic):
            # perturbation writes through a flat view
            if not tensor.values.flags.c_contiguous:
                tensor.values = np.ascontiguousarray(tensor.values)
            flat = tensor.values.reshape(-1)
            numeric = np.zeros(flat.size)
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + h
                up = fn().item()
                flat[i] = original - h
                down = fn().item()
                flat[i] = original
                numeric[i] = (up - down) / (2.0 * h)
            a = grad.reshape(-1)
            denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
            worst = max(worst, float(np.max(np.abs(a - numeric) / denom)))
    return worst
