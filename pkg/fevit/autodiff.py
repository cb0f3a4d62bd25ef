"""
Minimal dense tensor library with reverse-mode automatic differentiation.

Operations are `Function` subclasses. A forward call records a graph node only if at least one
input requires a gradient, so a frozen subgraph leaves no trace: no node, no saved activations
and no gradient buffers. Backward visits the recorded nodes in reverse creation order.
"""

import contextlib
import itertools
import logging
import math
import threading
import weakref
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from .errors import ConfigError, GradCheckError, GraphConsumedError, LabelError, ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[Any]]

PRECISIONS = {'f32': np.float32, 'f64': np.float64}
_precision = 'f32'
_local = threading.local()
_sequence = itertools.count()


def set_precision(name: str) -> None:
    """
    Select the process-wide floating point precision for newly created tensors.

    :param name: 'f32' (training default) or 'f64' (verification)
    """
    global _precision
    if name not in PRECISIONS:
        raise ConfigError(f"Unknown precision {name!r}, expected one of {sorted(PRECISIONS)}")
    _precision = name


def get_precision() -> str:
    return _precision


def default_dtype() -> np.dtype:
    return np.dtype(PRECISIONS[_precision])


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch precision, e.g. `with precision('f64'): ...`"""
    previous = get_precision()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


def is_grad_enabled() -> bool:
    return getattr(_local, 'grad_enabled', True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording on the current thread."""
    previous = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


class Node:
    """One recorded operation: the function (holding what backward needs), its inputs and its output."""

    __slots__ = ('function', 'inputs', 'output', 'seq', 'consumed')

    def __init__(self, function: 'Function', inputs: Tuple['Tensor', ...], output: 'Tensor') -> None:
        self.function: Optional[Function] = function
        self.inputs = inputs
        self.output = weakref.ref(output)
        self.seq = next(_sequence)
        self.consumed = False

    def __repr__(self) -> str:
        name = type(self.function).__name__ if self.function is not None else 'consumed'
        return f'Node({name}, seq={self.seq})'


class Tensor:
    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None) -> None:
        """
        Dense tensor. Data is stored as a contiguous numpy array in the active precision.

        :param data: values
        :param requires_grad: accumulate a gradient for this tensor on backward
        :param name: optional label used in error messages and gradient check reports
        """
        array = np.ascontiguousarray(data, dtype=default_dtype())
        if array.ndim > 0 and any(d <= 0 for d in array.shape):
            raise ShapeError(f'Tensor dimensions must be positive, got {array.shape}')
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[Node] = None

    def __repr__(self) -> str:
        label = f", name='{self.name}'" if self.name else ''
        return f'Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad}{label})'

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
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> 'Tensor':
        return Tensor(self.data.copy(), requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # Operators
    def __add__(self, other: Any) -> 'Tensor':
        return Add.apply(self, as_tensor(other))

    def __radd__(self, other: Any) -> 'Tensor':
        return Add.apply(as_tensor(other), self)

    def __sub__(self, other: Any) -> 'Tensor':
        return Sub.apply(self, as_tensor(other))

    def __rsub__(self, other: Any) -> 'Tensor':
        return Sub.apply(as_tensor(other), self)

    def __mul__(self, other: Any) -> 'Tensor':
        return Mul.apply(self, as_tensor(other))

    def __rmul__(self, other: Any) -> 'Tensor':
        return Mul.apply(as_tensor(other), self)

    def __truediv__(self, other: Any) -> 'Tensor':
        return Div.apply(self, as_tensor(other))

    def __neg__(self) -> 'Tensor':
        return Neg.apply(self)

    def __matmul__(self, other: 'Tensor') -> 'Tensor':
        return matmul(self, other)

    def __getitem__(self, index: Any) -> 'Tensor':
        return GetItem.apply(self, index=index)

    def reshape(self, *shape: Any) -> 'Tensor':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes: int) -> 'Tensor':
        return Transpose.apply(self, axes=axes)

    def sum(self, axis: Union[None, int, Tuple[int, ...]] = None, keepdims: bool = False) -> 'Tensor':
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Union[None, int, Tuple[int, ...]] = None, keepdims: bool = False) -> 'Tensor':
        return Mean.apply(self, axis=axis, keepdims=keepdims)


def as_tensor(value: Any) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum out broadcast dimensions so that <grad> matches <shape>."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Function:
    """
    Base class for differentiable operations.

    Subclasses implement `forward` on raw arrays (saving on `self` whatever backward needs) and
    `backward`, which maps the gradient w.r.t. the output to one gradient (or None) per input.
    `needs_input_grad` tells backward which input gradients will actually be used.
    """

    needs_input_grad: Tuple[bool, ...] = ()

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *tensors: Tensor, **kwargs: Any) -> Tensor:
        func = cls()
        func.needs_input_grad = tuple(t.requires_grad for t in tensors)
        out_data = func.forward(*(t.data for t in tensors), **kwargs)
        out = Tensor.__new__(Tensor)
        out.data = np.ascontiguousarray(out_data, dtype=default_dtype())
        out.grad = None
        out.name = None
        out._node = None
        out.requires_grad = is_grad_enabled() and any(t.requires_grad for t in tensors)
        if out.requires_grad:
            out._node = Node(func, tensors, out)
        return out


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
        need_a, need_b = self.needs_input_grad
        grad_a = unbroadcast(grad * self.b, self.a.shape) if need_a else None
        grad_b = unbroadcast(grad * self.a, self.b.shape) if need_b else None
        return grad_a, grad_b


class Div(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        grad_a = grad / self.b
        grad_b = -grad * self.a / (self.b * self.b)
        return unbroadcast(grad_a, self.a.shape), unbroadcast(grad_b, self.b.shape)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad, )


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f'matmul shape mismatch: {a.shape} @ {b.shape}')
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad):
        a, b = self.a, self.b
        need_a, need_b = self.needs_input_grad
        grad_a = grad_b = None
        if need_a:
            grad_a = unbroadcast(np.matmul(grad, np.swapaxes(b, -1, -2)), a.shape)
        if need_b:
            if b.ndim == 2:
                # Shared weight matrix: fold all leading dimensions into one product
                grad_b = a.reshape(-1, a.shape[-1]).T @ grad.reshape(-1, grad.shape[-1])
            else:
                grad_b = unbroadcast(np.matmul(np.swapaxes(a, -1, -2), grad), b.shape)
        return grad_a, grad_b


def _normalize_axis(axis: Union[None, int, Tuple[int, ...]], ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis, )
    return tuple(a % ndim for a in axis)


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape = a.shape
        self.axes = _normalize_axis(axis, a.ndim)
        self.keepdims = keepdims
        return np.sum(a, axis=self.axes, keepdims=keepdims)

    def backward(self, grad):
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        return (np.broadcast_to(grad, self.shape).copy(), )


class Mean(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape = a.shape
        self.axes = _normalize_axis(axis, a.ndim)
        self.keepdims = keepdims
        self.count = int(np.prod([a.shape[i] for i in self.axes]))
        return np.mean(a, axis=self.axes, keepdims=keepdims)

    def backward(self, grad):
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        return (np.broadcast_to(grad / self.count, self.shape).copy(), )


class Reshape(Function):
    def forward(self, a, shape):
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.shape), )


class Transpose(Function):
    def forward(self, a, axes):
        self.axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
        return np.transpose(a, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)), )


class GetItem(Function):
    def forward(self, a, index):
        self.shape = a.shape
        self.index = index
        return a[index]

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=grad.dtype)
        np.add.at(out, self.index, grad)
        return (out, )


class BroadcastTo(Function):
    def forward(self, a, shape):
        self.shape = a.shape
        return np.broadcast_to(a, shape)

    def backward(self, grad):
        return (unbroadcast(grad, self.shape), )


class Concat(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        self.sizes = [a.shape[axis] for a in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        boundaries = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, boundaries, axis=self.axis))


class Softmax(Function):
    def forward(self, x, axis=-1):
        self.axis = axis
        shifted = x - np.max(x, axis=axis, keepdims=True)
        e = np.exp(shifted)
        self.y = e / np.sum(e, axis=axis, keepdims=True)
        return self.y

    def backward(self, grad):
        y = self.y
        return (y * (grad - np.sum(grad * y, axis=self.axis, keepdims=True)), )


class LayerNorm(Function):
    def forward(self, x, gamma, beta, eps=1e-6):
        mu = np.mean(x, axis=-1, keepdims=True)
        centered = x - mu
        var = np.mean(centered * centered, axis=-1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.x_hat = centered * self.inv_std
        self.gamma = gamma
        return gamma * self.x_hat + beta

    def backward(self, grad):
        x_hat = self.x_hat
        lead = tuple(range(grad.ndim - 1))
        grad_gamma = np.sum(grad * x_hat, axis=lead)
        grad_beta = np.sum(grad, axis=lead)
        d_hat = grad * self.gamma
        grad_x = self.inv_std * (d_hat - np.mean(d_hat, axis=-1, keepdims=True) -
                                 x_hat * np.mean(d_hat * x_hat, axis=-1, keepdims=True))
        return grad_x, grad_gamma, grad_beta


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Gelu(Function):
    """Exact form x * Phi(x)."""
    def forward(self, x):
        self.x = x
        self.cdf = 0.5 * (1.0 + special.erf(x * _INV_SQRT2))
        return x * self.cdf

    def backward(self, grad):
        x = self.x
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (grad * (self.cdf + x * pdf), )


class CrossEntropy(Function):
    def forward(self, logits, labels, label_smoothing=0.0):
        batch, num_classes = logits.shape
        shifted = logits - np.max(logits, axis=-1, keepdims=True)
        log_z = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
        log_probs = shifted - log_z
        target = np.full(logits.shape, label_smoothing / num_classes, dtype=logits.dtype)
        target[np.arange(batch), labels] += 1.0 - label_smoothing
        self.probs = np.exp(log_probs)
        self.target = target
        self.batch = batch
        return np.asarray(-np.sum(target * log_probs) / batch)

    def backward(self, grad):
        return (grad * (self.probs - self.target) / self.batch, )


# Functional interface


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product with numpy broadcasting over leading dimensions.

    :param a: tensor [..., m, k]
    :param b: tensor [..., k, n]
    :return: tensor [..., m, n]
    """
    return MatMul.apply(a, b)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along <axis>, stabilized by subtracting the maximum."""
    return Softmax.apply(x, axis=axis)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then apply gamma * x_hat + beta."""
    if x.shape[-1] != gamma.shape[-1] or gamma.shape != beta.shape:
        raise ShapeError(f'layer_norm shape mismatch: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}')
    return LayerNorm.apply(x, gamma, beta, eps=eps)


def gelu(x: Tensor) -> Tensor:
    return Gelu.apply(x)


def cross_entropy(logits: Tensor, labels: Union[np.ndarray, Sequence[int]], label_smoothing: float = 0.0) -> Tensor:
    """
    Mean negative log-likelihood of <labels> under softmax(<logits>).

    :param logits: tensor [B, C]
    :param labels: integer labels of length B
    :param label_smoothing: mass spread uniformly over all classes
    :return: scalar tensor
    """
    if logits.ndim != 2:
        raise ShapeError(f'cross_entropy expects logits [B, C], got {logits.shape}')
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    batch, num_classes = logits.shape
    if labels.shape[0] != batch:
        raise ShapeError(f'cross_entropy got {labels.shape[0]} labels for {batch} rows')
    for i, label in enumerate(labels):
        if not 0 <= label < num_classes:
            raise LabelError(f'Label {int(label)} at index {i} is outside [0, {num_classes})')
    return CrossEntropy.apply(logits, labels=labels, label_smoothing=label_smoothing)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def broadcast_to(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    return BroadcastTo.apply(x, shape=tuple(shape))


def linear(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ kernel + bias on the last axis."""
    y = matmul(x, kernel)
    return y if bias is None else y + bias


@dataclass
class Graph:
    """Recorded operations reachable from one output, in creation order."""
    nodes: List[Node] = field(default_factory=list)

    @classmethod
    def trace(cls, output: Tensor) -> 'Graph':
        if output._node is None:
            return cls()
        seen: Dict[int, Node] = {}
        stack = [output._node]
        while stack:
            node = stack.pop()
            if node.seq in seen:
                continue
            if node.consumed:
                raise GraphConsumedError('Graph has already been consumed by a previous backward pass')
            seen[node.seq] = node
            stack.extend(t._node for t in node.inputs if t._node is not None)
        return cls(nodes=[seen[seq] for seq in sorted(seen)])

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> None:
    """
    Populate `.grad` on every tensor reachable from <loss> that requires a gradient, then release the
    graph. Tensors in frozen subgraphs were never recorded and are not visited.

    :param loss: scalar tensor
    """
    if loss.size != 1:
        raise ShapeError(f'backward expects a scalar loss, got shape {loss.shape}')
    if loss._node is not None and loss._node.consumed:
        raise GraphConsumedError('backward called twice on the same graph')
    if not loss.requires_grad:
        logger.debug('backward on a loss without recorded graph: nothing to do')
        return
    if loss._node is None:
        loss.grad = np.ones_like(loss.data)
        return

    graph = Graph.trace(loss)
    grads: Dict[int, np.ndarray] = {loss._node.seq: np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        grad = grads.pop(node.seq, None)
        if grad is None:
            continue
        output = node.output()
        if output is not None:
            output.grad = grad
        assert node.function is not None
        input_grads = node.function.backward(grad)
        for tensor, input_grad in zip(node.inputs, input_grads):
            if input_grad is None or not tensor.requires_grad:
                continue
            input_grad = np.asarray(input_grad, dtype=tensor.data.dtype)
            if tensor._node is not None:
                seq = tensor._node.seq
                grads[seq] = grads[seq] + input_grad if seq in grads else input_grad
            else:
                tensor.grad = input_grad.copy() if tensor.grad is None else tensor.grad + input_grad

    for node in graph.nodes:
        node.consumed = True
        node.function = None
        node.inputs = ()
    logger.debug(f'backward visited {len(graph)} nodes')


@dataclass
class GradCheckReport:
    """Maximum relative error per checked input."""
    errors: Dict[str, float]
    tol: float

    @property
    def passed(self) -> bool:
        return all(err <= self.tol for err in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def __bool__(self) -> bool:
        return self.passed


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-5,
    tol: float = 1e-5,
    samples_per_input: Optional[int] = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """
    Compare the analytic gradient of f(*inputs) with central finite differences.

    The relative error of an input is max|analytic - numeric| / max(max|analytic|, max|numeric|, floor).

    :param f: function mapping <inputs> to a scalar tensor
    :param inputs: tensors to check (all must require gradients)
    :param step: finite difference step
    :param tol: pass threshold on the relative error
    :param samples_per_input: check only this many (seeded) random entries per input, None means all
    :param seed: seed for entry sampling
    :param floor: lower bound of the error denominator
    :return: report with one error per input
    """
    if get_precision() != 'f64':
        raise GradCheckError("grad_check requires 64-bit precision, use `with precision('f64')`")
    names = [t.name or f'input[{i}]' for i, t in enumerate(inputs)]

    for t in inputs:
        t.grad = None
    out = f(*inputs)
    backward(out)

    rng = np.random.default_rng(seed)
    errors: Dict[str, float] = {}
    for name, t in zip(names, inputs):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.all(np.isfinite(analytic)):
            raise GradCheckError(f'Non-finite analytic gradient for {name}')

        flat_indices = np.arange(t.size)
        if samples_per_input is not None and samples_per_input < t.size:
            flat_indices = np.sort(rng.choice(t.size, size=samples_per_input, replace=False))

        numeric = np.zeros(len(flat_indices))
        flat = t.data.reshape(-1)  # view
        with no_grad():
            for j, flat_index in enumerate(flat_indices):
                original = flat[flat_index]
                flat[flat_index] = original + step
                f_plus = f(*inputs).item()
                flat[flat_index] = original - step
                f_minus = f(*inputs).item()
                flat[flat_index] = original
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    raise GradCheckError(f'Non-finite function value while perturbing {name}')
                numeric[j] = (f_plus - f_minus) / (2.0 * step)

        selected = analytic.reshape(-1)[flat_indices]
        scale = max(float(np.max(np.abs(selected), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), floor)
        errors[name] = float(np.max(np.abs(selected - numeric), initial=0.0)) / scale

    report = GradCheckReport(errors=errors, tol=tol)
    logger.debug(f'grad_check max error {report.max_error:.3g} (tol {tol:g})')
    return report
