"""
Reverse-mode automatic differentiation over float64 numpy tensors.

Every differentiable quantity in the lab is a `Tensor`, which doubles as a node of
the computation graph. Operations are evaluated eagerly when the node is built (so
data-dependent routing can inspect values), and each node records its primitive so
`forward()` can re-evaluate the whole graph from its leaves. Integer arguments such
as gather or top-k indices are captured at build time and held constant on
re-evaluation and in backward.
"""

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from .errors import GradientCheckError, NonFiniteError, ShapeError

logger = structlog.get_logger()

LAYERNORM_EPS = 1e-6
_GELU_C = np.sqrt(2.0 / np.pi)

_grad_enabled = True


class Tensor:
    """Dense float64 value plus the graph bookkeeping needed for backward.

    Leaves have op == "leaf". A node built by `stop_gradient` has stop_grad set and
    never passes gradient to its inputs.
    """

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 op: str = "leaf", inputs: Tuple["Tensor", ...] = (), attrs: Optional[dict] = None,
                 stop_grad: bool = False):
        if op == "leaf":
            self.data = np.array(data, dtype=np.float64)
        else:
            self.data = data
        self.requires_grad = requires_grad
        self.name = name
        self.op = op
        self.inputs = inputs
        self.attrs = attrs or {}
        self.stop_grad = stop_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def value(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(op={self.op}{label}, shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar. Python scalars become constants (or a scale, for products).
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return add(self, neg(other))
    def __rsub__(self, other): return add(other, neg(self))
    def __neg__(self): return scale(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("Tensor division is only defined for scalar divisors")
        return scale(self, 1.0 / float(other))


GraphNode = Tensor
TensorLike = Union[Tensor, float, int, np.ndarray]


@dataclass(frozen=True)
class Primitive:
    """A registered op: forward(values, attrs) and backward(g, values, out, attrs)."""
    name: str
    forward: Callable
    backward: Callable


PRIMITIVES: Dict[str, Primitive] = {}


def primitive(name: str) -> Callable:
    """Class decorator registering a primitive's static forward/backward pair."""
    def decorator(cls):
        PRIMITIVES[name] = Primitive(name=name, forward=cls.forward, backward=cls.backward)
        return cls
    return decorator


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Build nodes without gradient tracking (evaluation passes)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def as_tensor(value: TensorLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=False)


def _check_finite(op: str, out: np.ndarray, name: Optional[str] = None) -> None:
    if not np.all(np.isfinite(out)):
        where = f" (node {name})" if name else ""
        raise NonFiniteError(f"non-finite output from primitive '{op}'{where}")


def _evaluate(op: str, values: Sequence[np.ndarray], attrs: dict) -> np.ndarray:
    prim = PRIMITIVES[op]
    try:
        with np.errstate(all='ignore'):
            out = prim.forward(values, attrs)
    except (ValueError, IndexError) as e:
        shapes = ", ".join(str(v.shape) for v in values)
        raise ShapeError(f"primitive '{op}' rejected inputs of shape {shapes}: {e}") from e
    return np.asarray(out, dtype=np.float64)


def _apply(op: str, *inputs: TensorLike, **attrs) -> Tensor:
    nodes = tuple(as_tensor(x) for x in inputs)
    out = _evaluate(op, [n.data for n in nodes], attrs)
    _check_finite(op, out)
    is_stop = op == "stop_grad"
    requires_grad = _grad_enabled and not is_stop and any(n.requires_grad for n in nodes)
    return Tensor(out, requires_grad=requires_grad, op=op, inputs=nodes, attrs=attrs, stop_grad=is_stop)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum-reduce grad over axes that were broadcast to reach it from shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _expand_reduced(grad: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        grad = np.expand_dims(grad, axis)
    return np.broadcast_to(grad, shape)


def _reduced_count(shape: Tuple[int, ...], axis) -> int:
    if axis is None:
        return int(np.prod(shape)) if shape else 1
    axes = axis if isinstance(axis, tuple) else (axis,)
    return int(np.prod([shape[a] for a in axes]))


# --- primitive definitions -------------------------------------------------

@primitive("add")
class _Add:
    @staticmethod
    def forward(values, attrs):
        return values[0] + values[1]

    @staticmethod
    def backward(g, values, out, attrs):
        return _unbroadcast(g, values[0].shape), _unbroadcast(g, values[1].shape)


@primitive("mul")
class _Mul:
    @staticmethod
    def forward(values, attrs):
        return values[0] * values[1]

    @staticmethod
    def backward(g, values, out, attrs):
        a, b = values
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


@primitive("scale")
class _Scale:
    @staticmethod
    def forward(values, attrs):
        return values[0] * attrs['factor']

    @staticmethod
    def backward(g, values, out, attrs):
        return (g * attrs['factor'],)


@primitive("matmul")
class _MatMul:
    @staticmethod
    def forward(values, attrs):
        a, b = values
        if a.ndim < 2 or b.ndim < 2:
            raise ValueError("matmul operands must have rank >= 2")
        return np.matmul(a, b)

    @staticmethod
    def backward(g, values, out, attrs):
        a, b = values
        grad_a = np.matmul(g, np.swapaxes(b, -1, -2))
        grad_b = np.matmul(np.swapaxes(a, -1, -2), g)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)


@primitive("relu")
class _Relu:
    @staticmethod
    def forward(values, attrs):
        return np.maximum(values[0], 0.0)

    @staticmethod
    def backward(g, values, out, attrs):
        return (g * (values[0] > 0),)


@primitive("gelu")
class _Gelu:
    """Tanh approximation of GELU."""

    @staticmethod
    def forward(values, attrs):
        x = values[0]
        return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x ** 3)))

    @staticmethod
    def backward(g, values, out, attrs):
        x = values[0]
        t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
        dt = (1.0 - t ** 2) * _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)


@primitive("layernorm")
class _LayerNorm:
    """Normalisation over the last axis, without affine parameters."""

    @staticmethod
    def forward(values, attrs):
        x = values[0]
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        return (x - mu) / np.sqrt(var + LAYERNORM_EPS)

    @staticmethod
    def backward(g, values, out, attrs):
        x = values[0]
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + LAYERNORM_EPS)
        xhat = out
        g_mean = g.mean(axis=-1, keepdims=True)
        gx_mean = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv_std * (g - g_mean - xhat * gx_mean),)


@primitive("softmax")
class _Softmax:
    @staticmethod
    def forward(values, attrs):
        x = values[0]
        shifted = np.exp(x - x.max(axis=-1, keepdims=True))
        return shifted / shifted.sum(axis=-1, keepdims=True)

    @staticmethod
    def backward(g, values, out, attrs):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


@primitive("log")
class _Log:
    @staticmethod
    def forward(values, attrs):
        return np.log(values[0])

    @staticmethod
    def backward(g, values, out, attrs):
        return (g / values[0],)


@primitive("exp")
class _Exp:
    @staticmethod
    def forward(values, attrs):
        return np.exp(values[0])

    @staticmethod
    def backward(g, values, out, attrs):
        return (g * out,)


@primitive("sum")
class _Sum:
    @staticmethod
    def forward(values, attrs):
        return values[0].sum(axis=attrs['axis'], keepdims=attrs['keepdims'])

    @staticmethod
    def backward(g, values, out, attrs):
        return (_expand_reduced(g, values[0].shape, attrs['axis'], attrs['keepdims']).copy(),)


@primitive("mean")
class _Mean:
    @staticmethod
    def forward(values, attrs):
        return values[0].mean(axis=attrs['axis'], keepdims=attrs['keepdims'])

    @staticmethod
    def backward(g, values, out, attrs):
        n = _reduced_count(values[0].shape, attrs['axis'])
        return (_expand_reduced(g, values[0].shape, attrs['axis'], attrs['keepdims']) / n,)


@primitive("var")
class _Var:
    """Population variance."""

    @staticmethod
    def forward(values, attrs):
        return values[0].var(axis=attrs['axis'], keepdims=attrs['keepdims'])

    @staticmethod
    def backward(g, values, out, attrs):
        x = values[0]
        axis = attrs['axis']
        n = _reduced_count(x.shape, axis)
        centered = x - x.mean(axis=axis, keepdims=True)
        return (_expand_reduced(g, x.shape, axis, attrs['keepdims']) * 2.0 * centered / n,)


@primitive("gather_rows")
class _GatherRows:
    @staticmethod
    def forward(values, attrs):
        return values[0][attrs['indices']]

    @staticmethod
    def backward(g, values, out, attrs):
        grad = np.zeros_like(values[0])
        np.add.at(grad, attrs['indices'], g)
        return (grad,)


@primitive("scatter_add_rows")
class _ScatterAddRows:
    @staticmethod
    def forward(values, attrs):
        x = values[0]
        out = np.zeros((attrs['num_rows'],) + x.shape[1:], dtype=np.float64)
        np.add.at(out, attrs['indices'], x)
        return out

    @staticmethod
    def backward(g, values, out, attrs):
        return (g[attrs['indices']],)


@primitive("concat")
class _Concat:
    @staticmethod
    def forward(values, attrs):
        return np.concatenate(values, axis=attrs['axis'])

    @staticmethod
    def backward(g, values, out, attrs):
        sizes = np.cumsum([v.shape[attrs['axis']] for v in values])[:-1]
        return tuple(np.split(g, sizes, axis=attrs['axis']))


@primitive("slice")
class _Slice:
    @staticmethod
    def forward(values, attrs):
        index = [slice(None)] * values[0].ndim
        index[attrs['axis']] = slice(attrs['start'], attrs['stop'])
        return values[0][tuple(index)]

    @staticmethod
    def backward(g, values, out, attrs):
        grad = np.zeros_like(values[0])
        index = [slice(None)] * values[0].ndim
        index[attrs['axis']] = slice(attrs['start'], attrs['stop'])
        grad[tuple(index)] = g
        return (grad,)


@primitive("transpose")
class _Transpose:
    @staticmethod
    def forward(values, attrs):
        return np.transpose(values[0], attrs['axes'])

    @staticmethod
    def backward(g, values, out, attrs):
        return (np.transpose(g, np.argsort(attrs['axes'])),)


@primitive("reshape")
class _Reshape:
    @staticmethod
    def forward(values, attrs):
        return values[0].reshape(attrs['shape'])

    @staticmethod
    def backward(g, values, out, attrs):
        return (g.reshape(values[0].shape),)


@primitive("cross_entropy")
class _CrossEntropy:
    """Mean cross-entropy of [B, C] logits against integer labels."""

    @staticmethod
    def forward(values, attrs):
        logits = values[0]
        labels = attrs['labels']
        shifted = logits - logits.max(axis=-1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        return -log_probs[np.arange(len(labels)), labels].mean()

    @staticmethod
    def backward(g, values, out, attrs):
        logits = values[0]
        labels = attrs['labels']
        shifted = np.exp(logits - logits.max(axis=-1, keepdims=True))
        probs = shifted / shifted.sum(axis=-1, keepdims=True)
        probs[np.arange(len(labels)), labels] -= 1.0
        return (g * probs / len(labels),)


@primitive("stop_grad")
class _StopGrad:
    @staticmethod
    def forward(values, attrs):
        return values[0].copy()

    @staticmethod
    def backward(g, values, out, attrs):
        return (None,)


@primitive("take_along_last")
class _TakeAlongLast:
    """Gather entries along the last axis with constant integer indices."""

    @staticmethod
    def forward(values, attrs):
        return np.take_along_axis(values[0], attrs['indices'], axis=-1)

    @staticmethod
    def backward(g, values, out, attrs):
        grad = np.zeros_like(values[0])
        np.put_along_axis(grad, attrs['indices'], g, axis=-1)
        return (grad,)


@primitive("topk_select")
class _TopKSelect:
    """Values of the K largest entries per row; indices are constants in backward."""

    @staticmethod
    def forward(values, attrs):
        return np.take_along_axis(values[0], attrs['indices'], axis=-1)

    @staticmethod
    def backward(g, values, out, attrs):
        grad = np.zeros_like(values[0])
        np.put_along_axis(grad, attrs['indices'], g, axis=-1)
        return (grad,)


# --- functional API --------------------------------------------------------

def add(a: TensorLike, b: TensorLike) -> Tensor:
    return _apply("add", a, b)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    return _apply("mul", a, b)


def scale(x: TensorLike, factor: float) -> Tensor:
    return _apply("scale", x, factor=float(factor))


def neg(x: TensorLike) -> Tensor:
    return scale(x, -1.0)


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    return _apply("matmul", a, b)


def relu(x: TensorLike) -> Tensor:
    return _apply("relu", x)


def gelu(x: TensorLike) -> Tensor:
    return _apply("gelu", x)


def layernorm(x: TensorLike) -> Tensor:
    return _apply("layernorm", x)


def softmax(x: TensorLike) -> Tensor:
    """Softmax over the last axis."""
    return _apply("softmax", x)


def log(x: TensorLike) -> Tensor:
    return _apply("log", x)


def exp(x: TensorLike) -> Tensor:
    return _apply("exp", x)


def reduce_sum(x: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    return _apply("sum", x, axis=axis, keepdims=keepdims)


def reduce_mean(x: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    return _apply("mean", x, axis=axis, keepdims=keepdims)


def reduce_var(x: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    return _apply("var", x, axis=axis, keepdims=keepdims)


def gather_rows(x: TensorLike, indices) -> Tensor:
    return _apply("gather_rows", x, indices=np.asarray(indices, dtype=np.int64))


def scatter_add_rows(x: TensorLike, indices, num_rows: int) -> Tensor:
    return _apply("scatter_add_rows", x, indices=np.asarray(indices, dtype=np.int64), num_rows=int(num_rows))


def concat(tensors: Sequence[TensorLike], axis: int = 0) -> Tensor:
    return _apply("concat", *tensors, axis=axis)


def slice_axis(x: TensorLike, axis: int, start: int, stop: int) -> Tensor:
    return _apply("slice", x, axis=axis, start=start, stop=stop)


def transpose(x: TensorLike, axes: Sequence[int]) -> Tensor:
    return _apply("transpose", x, axes=tuple(axes))


def reshape(x: TensorLike, shape: Sequence[int]) -> Tensor:
    return _apply("reshape", x, shape=tuple(shape))


def cross_entropy_with_logits(logits: TensorLike, labels) -> Tensor:
    return _apply("cross_entropy", logits, labels=np.asarray(labels, dtype=np.int64))


def stop_gradient(x: TensorLike) -> Tensor:
    """Identity in forward; contributes zero gradient to every ancestor."""
    return _apply("stop_grad", x)


def take_along_last(x: TensorLike, indices) -> Tensor:
    return _apply("take_along_last", x, indices=np.asarray(indices, dtype=np.int64))


def topk_indices(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries per row, descending, ties to the lower index."""
    order = np.argsort(-values, axis=-1, kind='stable')
    return order[..., :k]


def topk_select(x: TensorLike, k: int) -> Tensor:
    x = as_tensor(x)
    return _apply("topk_select", x, indices=topk_indices(x.data, k))


# --- graph evaluation ------------------------------------------------------

def topological_order(root: Tensor) -> List[Tensor]:
    """Nodes reachable from root, parents before children."""
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node.inputs):
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def forward(graph_root: Tensor) -> np.ndarray:
    """Re-evaluate every node from the current leaf values, once each, in topological order."""
    for node in topological_order(graph_root):
        if node.op == "leaf":
            continue
        out = _evaluate(node.op, [n.data for n in node.inputs], node.attrs)
        _check_finite(node.op, out, node.name)
        node.data = out
    return graph_root.data


def backward(graph_root: Tensor) -> Dict[Tensor, np.ndarray]:
    """Populate .grad on every node below a scalar root.

    Returns:
        Map from each requires_grad leaf to its gradient; leaves reachable only
        through stop-gradient nodes map to exact zeros.
    """
    if graph_root.data.size != 1:
        raise ShapeError(f"backward requires a scalar root, got shape {graph_root.shape}")

    order = topological_order(graph_root)
    for node in order:
        node.grad = np.zeros_like(node.data) if node.requires_grad or node.op == "leaf" else None

    if graph_root.requires_grad:
        graph_root.grad = np.ones_like(graph_root.data)
        for node in reversed(order):
            if node.op == "leaf" or not node.requires_grad:
                continue
            prim = PRIMITIVES[node.op]
            with np.errstate(all='ignore'):
                grads = prim.backward(node.grad, [n.data for n in node.inputs], node.data, node.attrs)
            for parent, grad in zip(node.inputs, grads):
                if grad is None or not parent.requires_grad:
                    continue
                parent.grad = parent.grad + grad

    return {node: node.grad for node in order if node.op == "leaf" and node.requires_grad}


# --- finite-difference oracle ----------------------------------------------

@dataclass
class GradCheckReport:
    """Per-parameter max relative error between backward() and central differences."""
    epsilon: float
    per_parameter: Dict[str, float] = field(default_factory=dict)

    @property
    def max_relative_error(self) -> float:
        return max(self.per_parameter.values(), default=0.0)

    def passed(self, tolerance: float) -> bool:
        return self.max_relative_error <= tolerance


def finite_difference_check(scalar_fn: Callable[[], Tensor],
                            params: Union[Mapping[str, Tensor], Sequence[Tensor]],
                            epsilon: float = 1e-5) -> GradCheckReport:
    """
    Compare analytic gradients against (f(x+eps) - f(x-eps)) / 2eps elementwise.

    Args:
        scalar_fn: Zero-argument callable rebuilding the scalar graph from params
        params: Leaf tensors to perturb (a name->Tensor mapping or a sequence)
        epsilon: Central-difference step

    Returns:
        GradCheckReport with the max relative error per parameter, using the
        denominator max(|analytic|, |numeric|, 1e-8)
    """
    if epsilon <= 0:
        raise GradientCheckError(f"epsilon must be positive, got {epsilon}")
    if isinstance(params, Mapping):
        named = list(params.items())
    else:
        named = [(p.name or f"param{i}", p) for i, p in enumerate(params)]

    first = scalar_fn()
    second = scalar_fn()
    if first.data.tobytes() != second.data.tobytes():
        raise GradientCheckError("scalar_fn is not deterministic: repeated evaluation differs")

    grads = backward(first)
    report = GradCheckReport(epsilon=epsilon)
    for name, param in named:
        analytic = grads.get(param)
        if analytic is None:
            analytic = np.zeros_like(param.data)
        numeric = np.zeros_like(param.data)
        for index in np.ndindex(param.data.shape):
            original = param.data[index]
            param.data[index] = original + epsilon
            f_plus = scalar_fn().item()
            param.data[index] = original - epsilon
            f_minus = scalar_fn().item()
            param.data[index] = original
            numeric[index] = (f_plus - f_minus) / (2.0 * epsilon)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        report.per_parameter[name] = float(np.max(np.abs(analytic - numeric) / denom)) if param.data.size else 0.0

    logger.debug("gradient check complete", max_relative_error=report.max_relative_error)
    return report
