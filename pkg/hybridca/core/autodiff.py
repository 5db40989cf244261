""" Dense tensors with reverse-mode automatic differentiation.

Values are 64-bit numpy arrays. A ``Graph`` records one node per operation in
append order, so a node's parents always carry smaller ids and the append order is
already a topological order. ``backward`` walks that order in reverse.

Tensors without a graph are plain constants: operations on them compute values only
and record nothing, which is how inference and finite differences run.

Broadcasting is restricted to the bias-style case: one operand's shape must be a
suffix of the other's (a bias of shape ``[d]`` against ``[..., d]``).
"""
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
from loguru import logger as log
from scipy.special import expit

from hybridca.core.errors import (
    ContractError,
    DimensionError,
    NumericalError,
    ParameterError,
)

ArrayLike = Union[np.ndarray, float, int, Sequence]

VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
""" Maps the output gradient to one gradient per operand (None for no contribution) """

LAYER_NORM_EPS = 1e-5


@dataclass(frozen=True)
class Node:
    op: str
    """ Operation kind, e.g. 'matmul' """
    parents: tuple[int, ...]
    """ Node ids of the recorded operands """
    slots: tuple[int, ...]
    """ Position of each recorded operand in the vjp output """
    vjp: Optional[VJP]
    """ Vector-Jacobian product closure over saved forward values, None for leaves """
    shape: tuple[int, ...]


class Graph:
    """Append-only record of operations."""

    def __init__(self):
        self.nodes: list[Node] = list()

    def __len__(self) -> int:
        return len(self.nodes)

    def _append(
        self,
        op: str,
        parents: tuple[int, ...],
        slots: tuple[int, ...],
        vjp: Optional[VJP],
        shape: tuple[int, ...],
    ) -> int:
        node_id = len(self.nodes)
        assert all(
            parent < node_id for parent in parents
        ), f"Parents {parents} of node {node_id} must precede it"
        self.nodes.append(
            Node(op=op, parents=parents, slots=slots, vjp=vjp, shape=shape)
        )
        return node_id

    def leaf(self, data: ArrayLike) -> "Tensor":
        """Create a grad-enabled input tensor recorded in this graph."""
        value = _frozen(np.array(data, dtype=np.float64))
        _check_finite(value, "leaf")
        node_id = self._append("leaf", (), (), None, value.shape)
        return Tensor._from_value(value, graph=self, node_id=node_id)

    @property
    def leaf_ids(self) -> list[int]:
        return [i for i, node in enumerate(self.nodes) if node.vjp is None]


class Tensor:
    """An immutable 64-bit array, optionally attached to a graph node."""

    __slots__ = ("data", "graph", "node_id")

    def __init__(self, data: ArrayLike):
        value = _frozen(np.array(data, dtype=np.float64))
        _check_finite(value, "tensor")
        self.data: np.ndarray = value
        self.graph: Optional[Graph] = None
        self.node_id: Optional[int] = None

    @classmethod
    def _from_value(
        cls, value: np.ndarray, graph: Optional[Graph] = None, node_id: Optional[int] = None
    ) -> "Tensor":
        t = cls.__new__(cls)
        t.data = value
        t.graph = graph
        t.node_id = node_id
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def grad_enabled(self) -> bool:
        return self.node_id is not None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        """A writable copy of the values."""
        return np.array(self.data)

    def detach(self) -> "Tensor":
        return Tensor._from_value(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad_enabled={self.grad_enabled})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


class GradientMap(dict):
    """node_id -> Tensor gradient. Also indexable by the leaf tensor itself."""

    def __getitem__(self, key):
        if isinstance(key, Tensor):
            key = key.node_id
        return super().__getitem__(key)

    def wrt(self, t: Tensor) -> np.ndarray:
        return self[t].data


#########################################################################
# RECORDING HELPERS
#########################################################################


def _frozen(value: np.ndarray) -> np.ndarray:
    value.flags.writeable = False
    return value


def _check_finite(value: np.ndarray, op: str):
    if not np.isfinite(value).all():
        raise NumericalError(f"Operation '{op}' produced non-finite values")


def as_tensor(x: Union[Tensor, ArrayLike]) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def apply(op: str, value: np.ndarray, operands: Sequence[Tensor], vjp: VJP) -> Tensor:
    """Wrap a computed value as the output of a differentiable primitive.

    The node is recorded only when at least one operand is grad-enabled; all
    grad-enabled operands must belong to the same graph.
    """
    value = _frozen(np.asarray(value, dtype=np.float64))
    _check_finite(value, op)
    recorded = [(slot, t) for slot, t in enumerate(operands) if t.grad_enabled]
    if not recorded:
        return Tensor._from_value(value)
    graph = recorded[0][1].graph
    if any(t.graph is not graph for _, t in recorded):
        raise ContractError(f"Operands of '{op}' belong to different graphs")
    node_id = graph._append(
        op,
        parents=tuple(t.node_id for _, t in recorded),
        slots=tuple(slot for slot, _ in recorded),
        vjp=vjp,
        shape=value.shape,
    )
    return Tensor._from_value(value, graph=graph, node_id=node_id)


def _is_suffix(short: tuple[int, ...], long: tuple[int, ...]) -> bool:
    return len(short) <= len(long) and long[len(long) - len(short) :] == short


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    if not (_is_suffix(a.shape, b.shape) or _is_suffix(b.shape, a.shape)):
        raise DimensionError(
            f"'{op}' operands {a.shape} and {b.shape} are not bias-broadcastable"
        )


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the leading axes that broadcasting added."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad.reshape(shape)


#########################################################################
# PRIMITIVES
#########################################################################


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, kind)
    x, y = a.data, b.data
    match kind:
        case "add":
            value = x + y

            def vjp(g):
                return unbroadcast(g, x.shape), unbroadcast(g, y.shape)

        case "sub":
            value = x - y

            def vjp(g):
                return unbroadcast(g, x.shape), unbroadcast(-g, y.shape)

        case "mul":
            value = x * y

            def vjp(g):
                return unbroadcast(g * y, x.shape), unbroadcast(g * x, y.shape)

        case _:
            raise ParameterError(f"Unknown elementwise kind '{kind}'")
    return apply(kind, value, (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return apply("scale", a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Leading batch axes must agree, or one operand is a plain matrix shared by
    every batch element.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner extents differ: {a.shape} x {b.shape}"
        )
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(
            f"matmul batch axes differ: {a.shape[:-2]} vs {b.shape[:-2]}"
        )
    x, y = a.data, b.data

    def vjp(g):
        return (
            unbroadcast(g @ np.swapaxes(y, -1, -2), x.shape),
            unbroadcast(np.swapaxes(x, -1, -2) @ g, y.shape),
        )

    return apply("matmul", x @ y, (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise DimensionError(f"transpose needs at least 2 axes, got {a.shape}")
    return apply(
        "transpose",
        np.swapaxes(a.data, -1, -2),
        (a,),
        lambda g: (np.swapaxes(g, -1, -2),),
    )


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return apply(
        "permute",
        np.transpose(a.data, axes),
        (a,),
        lambda g: (np.transpose(g, inverse),),
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    original = a.shape
    try:
        value = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"Cannot reshape {original} into {tuple(shape)}") from exc
    return apply("reshape", value, (a,), lambda g: (g.reshape(original),))


def expand(a: Tensor, lead: Sequence[int]) -> Tensor:
    """Repeat ``a`` over new leading axes, e.g. one query set for every batch element."""
    lead = tuple(lead)
    value = np.broadcast_to(a.data, lead + a.shape).copy()
    return apply("expand", value, (a,), lambda g: (unbroadcast(g, a.shape),))


def relu(a: Tensor) -> Tensor:
    x = a.data
    return apply("relu", np.maximum(x, 0.0), (a,), lambda g: (g * (x > 0),))


def sigmoid(a: Tensor) -> Tensor:
    s = expit(a.data)
    return apply("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ParameterError("concat needs at least one tensor")
    try:
        value = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat shape mismatch: {[t.shape for t in tensors]}") from exc
    boundaries = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, boundaries, axis=axis))

    return apply("concat", value, tensors, vjp)


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    x = a.data
    count = x.size if axis is None else x.shape[axis]

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape) / count,)

    return apply("mean", x.mean(axis=axis), (a,), vjp)


def total(a: Tensor, axis: Optional[int] = None) -> Tensor:
    x = a.data

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return apply("sum", x.sum(axis=axis), (a,), vjp)


def softmax(x: Tensor, temperature: float = 1.0) -> Tensor:
    """softmax(x / temperature) along the last axis, max-stabilised."""
    if not temperature > 0:
        raise ParameterError(f"softmax temperature must be positive, got {temperature}")
    z = x.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)) / temperature,)

    return apply("softmax", s, (x,), vjp)


def lse(beta: float, v: Tensor) -> Tensor:
    """beta^-1 log sum_i exp(beta v_i) over the last axis, max-stabilised."""
    if not beta > 0:
        raise ParameterError(f"lse inverse temperature must be positive, got {beta}")
    x = v.data
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ParameterError("lse needs a non-empty vector")
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(beta * (x - m))
    value = m[..., 0] + np.log(e.sum(axis=-1)) / beta
    weights = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (np.expand_dims(g, -1) * weights,)

    return apply("lse", value, (v,), vjp)


def layer_norm(
    x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS
) -> Tensor:
    """Normalise each last-axis slice to zero mean and unit variance, then gain/bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm gain {gain.shape} / bias {bias.shape} must be ({d},)"
        )
    centred = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centred**2).mean(axis=-1, keepdims=True) + eps)
    x_hat = centred * inv_std
    w = gain.data

    def vjp(g):
        g_hat = g * w
        gx = inv_std * (
            g_hat
            - g_hat.mean(axis=-1, keepdims=True)
            - x_hat * (g_hat * x_hat).mean(axis=-1, keepdims=True)
        )
        return gx, unbroadcast(g * x_hat, (d,)), unbroadcast(g, (d,))

    return apply("layer_norm", x_hat * w + bias.data, (x, gain, bias), vjp)


def dropout(a: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity when rate is 0 or no random stream is given."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return apply("dropout", a.data * keep, (a,), lambda g: (g * keep,))


#########################################################################
# DIFFERENTIATION
#########################################################################


def backward(output: Tensor) -> GradientMap:
    """Gradients of a scalar output w.r.t. every leaf of its graph.

    Leaves the output does not depend on receive zero gradients.
    """
    if output.ndim != 0:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    if not output.grad_enabled:
        raise ContractError("backward needs an output recorded in a graph")
    graph = output.graph
    grads: dict[int, np.ndarray] = {output.node_id: np.ones(())}

    for node_id in range(output.node_id, -1, -1):
        node = graph.nodes[node_id]
        if node.vjp is None or node_id not in grads:
            continue
        operand_grads = node.vjp(grads.pop(node_id))
        for parent, slot in zip(node.parents, node.slots):
            g = operand_grads[slot]
            if g is None:
                continue
            grads[parent] = grads[parent] + g if parent in grads else g

    gradient_map = GradientMap()
    for leaf_id in graph.leaf_ids:
        shape = graph.nodes[leaf_id].shape
        g = grads.get(leaf_id)
        g = np.zeros(shape) if g is None else np.asarray(g, dtype=np.float64).reshape(shape)
        gradient_map[leaf_id] = Tensor._from_value(_frozen(g))
    log.trace(f"backward over {output.node_id + 1} nodes, {len(gradient_map)} leaves")
    return gradient_map


def _recorded_pass(f: Callable[[Tensor], Tensor], x0: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    graph = Graph()
    leaf = graph.leaf(x0)
    out = f(leaf)
    return out.data, backward(out).wrt(leaf)


def grad_check(
    f: Callable[[Tensor], Tensor], x: Union[Tensor, ArrayLike], step: float = 1e-5
) -> float:
    """Largest relative error between backward and central differences.

    The relative error of each element is |a - n| / max(|a|, |n|, 1e-8).
    ``f`` must be deterministic: two recorded passes on the same input must
    agree in value and in gradient, otherwise ContractError (e.g. active dropout).
    """
    if not step > 0:
        raise ParameterError(f"grad_check step must be positive, got {step}")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)

    (value, analytic), (value_again, analytic_again) = _recorded_pass(f, x0), _recorded_pass(f, x0)
    if not (np.array_equal(value, value_again) and np.array_equal(analytic, analytic_again)):
        raise ContractError("grad_check needs a deterministic function")

    numeric = np.empty_like(x0)
    for idx in np.ndindex(x0.shape):
        plus, minus = x0.copy(), x0.copy()
        plus[idx] += step
        minus[idx] -= step
        numeric[idx] = (f(Tensor(plus)).item() - f(Tensor(minus)).item()) / (2 * step)

    if x0.size == 0:
        return 0.0
    denominator = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denominator))
