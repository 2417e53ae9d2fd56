"""Dense tensors with reverse-mode automatic differentiation.

Every operation appends a TapeNode to an implicit DAG (tensors point at the
node that produced them), and ``backward`` walks that DAG once in reverse
topological order. This is the reference gradient path: the fused kernels in
``kernels.py`` are validated against it.

Gradient accumulation is additive; callers zero grads between steps.
Default precision is float64; float32 inputs are propagated unchanged.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DataError, DimensionError

DEFAULT_DTYPE = np.float64

LAYNORM_EPS = 1e-5

_GELU_C0 = 0.7978845608028654  # sqrt(2/pi)
_GELU_C1 = 0.044715


class TapeNode:
    """One recorded operation: op kind, inputs, and its backward rule.

    ``backward`` maps the output gradient to a tuple of gradients aligned
    with ``inputs`` (``None`` for inputs that need no gradient).
    """

    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op: str, inputs: tuple["Tensor", ...],
                 backward: Callable[[np.ndarray], tuple]):
        self.op = op
        self.inputs = inputs
        self.backward = backward


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "tid")

    _ids = itertools.count()

    def __init__(self, data, requires_grad: bool = False, node: TapeNode | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node = node
        self.tid = next(Tensor._ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _wrap(other))

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DEFAULT_DTYPE))


def _needs_tape(*tensors: Tensor) -> bool:
    return any(t.requires_grad or t.node is not None for t in tensors)


def _make(data: np.ndarray, op: str, inputs: tuple[Tensor, ...], backward) -> Tensor:
    if _needs_tape(*inputs):
        node = TapeNode(op, inputs, backward)
        return Tensor(data, requires_grad=False, node=node)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(out, "add", (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(out, "sub", (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bwd(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _make(out, "mul", (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(a.data * s, "scale", (a,), lambda g: (g * s,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul expects 2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}")
    out = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, "matmul", (a, b), bwd)


def batched_matmul(a: Tensor, b: Tensor) -> Tensor:
    """[n, p, k] @ [n, k, q] -> [n, p, q]."""
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise DimensionError(
            f"batched_matmul expects 3-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2] != b.data.shape[1]:
        raise DimensionError(
            f"batched_matmul shapes disagree: {a.data.shape} x {b.data.shape}")
    out = a.data @ b.data

    def bwd(g):
        return g @ np.swapaxes(b.data, 1, 2), np.swapaxes(a.data, 1, 2) @ g

    return _make(out, "batched_matmul", (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a 2-D tensor, got {a.data.shape}")
    return _make(a.data.T.copy(), "transpose", (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.data.shape
    return _make(a.data.reshape(shape), "reshape", (a,),
                 lambda g: (g.reshape(old),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    out = np.swapaxes(a.data, i, j).copy()
    return _make(out, "swapaxes", (a,), lambda g: (np.swapaxes(g, i, j),))


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def bwd(g):
        return (g * (a.data > 0),)

    return _make(out, "relu", (a,), bwd)


def gelu(a: Tensor) -> Tensor:
    # tanh approximation; matches the fused kernels
    x = a.data
    inner = _GELU_C0 * (x + _GELU_C1 * x * x * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bwd(g):
        dinner = _GELU_C0 * (1.0 + 3.0 * _GELU_C1 * x * x)
        dx = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return (g * dx,)

    return _make(out, "gelu", (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _make(out, "sigmoid", (a,), bwd)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # stable: never exponentiates a large positive number
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DataError("log of non-positive input")
    out = np.log(a.data)
    return _make(out, "log", (a,), lambda g: (g / a.data,))


def softmax_last(a: Tensor) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _make(out, "softmax", (a,), bwd)


def layer_norm_last(a: Tensor, eps: float = LAYNORM_EPS) -> Tensor:
    x = a.data
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    out = centered * rstd

    def bwd(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * out).mean(axis=-1, keepdims=True)
        return (rstd * (g - gm - out * gym),)

    return _make(out, "layer_norm", (a,), bwd)


# ---------------------------------------------------------------------------
# reductions


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum())

    def bwd(g):
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _make(out, "sum", (a,), bwd)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.mean())

    def bwd(g):
        return (np.broadcast_to(g / n, a.data.shape).copy(),)

    return _make(out, "mean", (a,), bwd)


def sum_axis(a: Tensor, axis: int) -> Tensor:
    out = a.data.sum(axis=axis)

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy(),)

    return _make(out, "sum_axis", (a,), bwd)


def mean_axis(a: Tensor, axis: int) -> Tensor:
    n = a.data.shape[axis]
    out = a.data.mean(axis=axis)

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g / n, axis), a.data.shape).copy(),)

    return _make(out, "mean_axis", (a,), bwd)


# ---------------------------------------------------------------------------
# lookup / loss


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    out = table.data[ids]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(out, "embedding", (table,), bwd)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate == 0."""
    if rate == 0.0:
        return a
    keep = (rng.random(a.data.shape) >= rate) / (1.0 - rate)
    out = a.data * keep
    return _make(out, "dropout", (a,), lambda g: (g * keep,))


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy over all entries, log-sum-exp stable form."""
    y = np.asarray(targets, dtype=logits.data.dtype)
    if y.shape != logits.data.shape:
        raise ContractError(
            f"logits shape {logits.data.shape} != targets shape {y.shape}")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ContractError("targets must be binary")
    z = logits.data
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray(per.mean())
    n = z.size

    def bwd(g):
        return ((_sigmoid_np(z) - y) * (g / n),)

    return _make(out, "bce_with_logits", (logits,), bwd)


# ---------------------------------------------------------------------------
# reverse pass


def _topo_order(root: Tensor) -> list[TapeNode]:
    order: list[TapeNode] = []
    seen: set[int] = set()
    stack: list[tuple[TapeNode, int]] = []
    if root.node is not None and id(root.node) not in seen:
        stack.append((root.node, 0))
        seen.add(id(root.node))
    while stack:
        node, i = stack.pop()
        if i < len(node.inputs):
            stack.append((node, i + 1))
            child = node.inputs[i].node
            if child is not None and id(child) not in seen:
                seen.add(id(child))
                stack.append((child, 0))
        else:
            order.append(node)
    return order


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Run reverse-mode accumulation from a scalar loss.

    Populates ``.grad`` (additively) on every requires_grad tensor reachable
    from ``loss`` and returns ``{tensor id -> gradient}`` for those tensors.
    Unreachable tensors are simply absent from the map.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")

    order = _topo_order(loss)
    # gradient flowing into each produced tensor, keyed by its TapeNode
    node_grads: dict[int, np.ndarray] = {}
    result: dict[int, np.ndarray] = {}

    seed = np.ones_like(loss.data)
    if loss.node is not None:
        node_grads[id(loss.node)] = seed
    if loss.requires_grad:
        loss.grad = seed.copy() if loss.grad is None else loss.grad + seed
        result[loss.tid] = loss.grad

    for node in reversed(order):
        g_out = node_grads.pop(id(node), None)
        if g_out is None:
            continue
        in_grads = node.backward(g_out)
        for t, g in zip(node.inputs, in_grads):
            if g is None:
                continue
            if t.node is not None:
                key = id(t.node)
                node_grads[key] = g if key not in node_grads else node_grads[key] + g
            if t.requires_grad:
                t.grad = g.copy() if t.grad is None else t.grad + g
                result[t.tid] = t.grad
    return result


def per_sample_gradients(model_closure: Callable[[object], Tensor],
                         batch: Sequence) -> list[dict[int, np.ndarray]]:
    """Replay forward/backward once per sample; returns one gradient map each.

    Parameters touched by the closure keep their ``.grad`` from the *last*
    sample only; the returned maps carry the per-sample values.
    """
    if len(batch) == 0:
        raise ContractError("per_sample_gradients needs a non-empty batch")
    maps: list[dict[int, np.ndarray]] = []
    for sample in batch:
        loss = model_closure(sample)
        touched = _collect_param_tensors(loss)
        for t in touched:
            t.zero_grad()
        maps.append(backward(loss))
    return maps


def _collect_param_tensors(root: Tensor) -> list[Tensor]:
    out: list[Tensor] = []
    seen: set[int] = set()
    for node in _topo_order(root):
        for t in node.inputs:
            if t.requires_grad and id(t) not in seen:
                seen.add(id(t))
                out.append(t)
    return out
