"""Dense float64 arrays with a reverse-mode graph, AdamW and a gradient checker.

Every op takes Nodes (or raw values, wrapped as constants) and returns a new
Node whose backward closure pushes its gradient into the parents. The graph is
rebuilt on every forward pass; nothing is cached between steps.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np

logger = logging.getLogger("NUMERICS")

GRAD_CHECK_FLOOR = 1e-5


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class NondeterminismError(RuntimeError):
    """A loss function returned different values for identical inputs."""


class Node:
    def __init__(
        self,
        value: Any,
        parents: Sequence[Node] = (),
        op: str = "const",
        requires_grad: bool = False,
    ) -> None:
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.op = op
        self.parents = tuple(parents)
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self._backward: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.value.reshape(()))

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def __add__(self, other: Any) -> Node:
        return add(self, other)

    def __radd__(self, other: Any) -> Node:
        return add(other, self)

    def __sub__(self, other: Any) -> Node:
        return sub(self, other)

    def __rsub__(self, other: Any) -> Node:
        return sub(other, self)

    def __mul__(self, other: Any) -> Node:
        return mul(self, other)

    def __rmul__(self, other: Any) -> Node:
        return mul(other, self)

    def __neg__(self) -> Node:
        return mul(self, -1.0)

    def __matmul__(self, other: Any) -> Node:
        return matmul(self, other)

    def __getitem__(self, key: Any) -> Node:
        return index(self, key)

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"


def parameter(value: Any) -> Node:
    return Node(value, op="param", requires_grad=True)


def constant(value: Any) -> Node:
    return Node(value, op="const", requires_grad=False)


def as_node(value: Any) -> Node:
    return value if isinstance(value, Node) else constant(value)


def _result(value: np.ndarray, parents: Sequence[Node], op: str) -> Node:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"op={op} produced non-finite values")
    return Node(value, parents=parents, op=op)


def _accumulate(node: Node, grad: np.ndarray) -> None:
    if node.requires_grad:
        node.grad += grad


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    for _ in range(extra):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _expand(grad: np.ndarray, axis: int | None, shape: tuple[int, ...]) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(grad, shape)
    return np.broadcast_to(np.expand_dims(grad, axis), shape)


# --- elementwise ---------------------------------------------------------


def add(a: Any, b: Any) -> Node:
    a, b = as_node(a), as_node(b)
    try:
        value = a.value + b.value
    except ValueError as exc:
        raise ValueError(f"add: incompatible shapes {a.shape} and {b.shape}") from exc
    out = _result(value, (a, b), "add")

    def backward() -> None:
        _accumulate(a, unbroadcast(out.grad, a.shape))
        _accumulate(b, unbroadcast(out.grad, b.shape))

    out._backward = backward
    return out


def sub(a: Any, b: Any) -> Node:
    a, b = as_node(a), as_node(b)
    try:
        value = a.value - b.value
    except ValueError as exc:
        raise ValueError(f"sub: incompatible shapes {a.shape} and {b.shape}") from exc
    out = _result(value, (a, b), "sub")

    def backward() -> None:
        _accumulate(a, unbroadcast(out.grad, a.shape))
        _accumulate(b, unbroadcast(-out.grad, b.shape))

    out._backward = backward
    return out


def mul(a: Any, b: Any) -> Node:
    a, b = as_node(a), as_node(b)
    try:
        value = a.value * b.value
    except ValueError as exc:
        raise ValueError(f"mul: incompatible shapes {a.shape} and {b.shape}") from exc
    out = _result(value, (a, b), "mul")

    def backward() -> None:
        _accumulate(a, unbroadcast(out.grad * b.value, a.shape))
        _accumulate(b, unbroadcast(out.grad * a.value, b.shape))

    out._backward = backward
    return out


def relu(x: Any) -> Node:
    x = as_node(x)
    out = _result(np.maximum(x.value, 0.0), (x,), "relu")

    def backward() -> None:
        _accumulate(x, out.grad * (x.value > 0.0))

    out._backward = backward
    return out


def abs_(x: Any) -> Node:
    x = as_node(x)
    out = _result(np.abs(x.value), (x,), "abs")

    def backward() -> None:
        _accumulate(x, out.grad * np.sign(x.value))

    out._backward = backward
    return out


# --- shape ---------------------------------------------------------------


def matmul(a: Any, b: Any) -> Node:
    a, b = as_node(a), as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = _result(a.value @ b.value, (a, b), "matmul")

    def backward() -> None:
        _accumulate(a, out.grad @ b.value.T)
        _accumulate(b, a.value.T @ out.grad)

    out._backward = backward
    return out


def transpose(x: Any) -> Node:
    x = as_node(x)
    if x.value.ndim != 2:
        raise ValueError(f"transpose needs a 2-D operand, got {x.shape}")
    out = _result(x.value.T.copy(), (x,), "transpose")

    def backward() -> None:
        _accumulate(x, out.grad.T)

    out._backward = backward
    return out


def reshape(x: Any, shape: tuple[int, ...]) -> Node:
    x = as_node(x)
    out = _result(x.value.reshape(shape).copy(), (x,), "reshape")

    def backward() -> None:
        _accumulate(x, out.grad.reshape(x.shape))

    out._backward = backward
    return out


def index(x: Any, key: Any) -> Node:
    x = as_node(x)
    out = _result(np.array(x.value[key], dtype=np.float64), (x,), "index")

    def backward() -> None:
        if not x.requires_grad:
            return
        grad = np.zeros_like(x.value)
        np.add.at(grad, key, out.grad)
        x.grad += grad

    out._backward = backward
    return out


def concatenate(nodes: Sequence[Any], axis: int = 0) -> Node:
    parts = [as_node(n) for n in nodes]
    if not parts:
        raise ValueError("concatenate needs at least one operand")
    try:
        value = np.concatenate([p.value for p in parts], axis=axis)
    except ValueError as exc:
        shapes = [p.shape for p in parts]
        raise ValueError(f"concatenate: incompatible shapes {shapes} on axis {axis}") from exc
    out = _result(value, parts, "concat")
    offsets = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward() -> None:
        for part, grad in zip(parts, np.split(out.grad, offsets, axis=axis)):
            _accumulate(part, grad)

    out._backward = backward
    return out


# --- reductions ----------------------------------------------------------


def sum_(x: Any, axis: int | None = None) -> Node:
    x = as_node(x)
    out = _result(np.sum(x.value, axis=axis), (x,), "sum")

    def backward() -> None:
        _accumulate(x, _expand(out.grad, axis, x.shape).copy())

    out._backward = backward
    return out


def mean_(x: Any, axis: int | None = None) -> Node:
    x = as_node(x)
    count = x.value.size if axis is None else x.shape[axis]
    out = _result(np.mean(x.value, axis=axis), (x,), "mean")

    def backward() -> None:
        _accumulate(x, _expand(out.grad, axis, x.shape) / count)

    out._backward = backward
    return out


def std_(x: Any, axis: int | None = None) -> Node:
    """Population standard deviation; zero variance has a zero subgradient."""
    x = as_node(x)
    count = x.value.size if axis is None else x.shape[axis]
    mu = np.mean(x.value, axis=axis, keepdims=axis is not None)
    centred = x.value - mu
    sigma = np.sqrt(np.mean(centred * centred, axis=axis))
    out = _result(sigma, (x,), "std")

    def backward() -> None:
        safe = np.where(sigma > 0.0, sigma, 1.0)
        scale = np.where(sigma > 0.0, out.grad / (count * safe), 0.0)
        _accumulate(x, centred * _expand(scale, axis, x.shape))

    out._backward = backward
    return out


def max_(x: Any, axis: int | None = None) -> Node:
    """Max reduction; the gradient goes to the lowest-index arg-max only."""
    x = as_node(x)
    out = _result(np.max(x.value, axis=axis), (x,), "max")

    def backward() -> None:
        mask = np.zeros_like(x.value)
        if axis is None:
            mask.flat[int(np.argmax(x.value))] = 1.0
            _accumulate(x, mask * out.grad)
            return
        arg = np.expand_dims(np.argmax(x.value, axis=axis), axis)
        np.put_along_axis(mask, arg, 1.0, axis=axis)
        _accumulate(x, mask * np.expand_dims(out.grad, axis))

    out._backward = backward
    return out


def l2_norm(x: Any) -> Node:
    x = as_node(x)
    norm = float(np.sqrt(np.sum(x.value * x.value)))
    out = _result(np.array(norm), (x,), "l2")

    def backward() -> None:
        if norm > 0.0:
            _accumulate(x, out.grad * x.value / norm)

    out._backward = backward
    return out


# --- normalisers ---------------------------------------------------------


def softmax(x: Any, axis: int = -1) -> Node:
    x = as_node(x)
    shifted = x.value - np.max(x.value, axis=axis, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / np.sum(exp, axis=axis, keepdims=True)
    out = _result(probs, (x,), "softmax")

    def backward() -> None:
        inner = np.sum(out.grad * probs, axis=axis, keepdims=True)
        _accumulate(x, probs * (out.grad - inner))

    out._backward = backward
    return out


def log_softmax(x: Any, axis: int = -1) -> Node:
    x = as_node(x)
    shifted = x.value - np.max(x.value, axis=axis, keepdims=True)
    log_norm = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    value = shifted - log_norm
    out = _result(value, (x,), "log_softmax")

    def backward() -> None:
        probs = np.exp(value)
        _accumulate(x, out.grad - probs * np.sum(out.grad, axis=axis, keepdims=True))

    out._backward = backward
    return out


def entropy(w: Any) -> Node:
    """Shannon entropy -sum(w log w) in nats, with 0 log 0 taken as 0."""
    w = as_node(w)
    if np.any(w.value < 0.0) or np.any(w.value > 1.0):
        raise ValueError(f"entropy needs components in [0, 1], got {w.value.tolist()}")
    positive = w.value > 0.0
    logs = np.log(np.where(positive, w.value, 1.0))
    out = _result(np.array(-np.sum(w.value * logs)), (w,), "entropy")

    def backward() -> None:
        _accumulate(w, np.where(positive, -(logs + 1.0), 0.0) * out.grad)

    out._backward = backward
    return out


# --- composites ----------------------------------------------------------


def linear(x: Any, weight: Any, bias: Any = None) -> Node:
    """x @ weight (+ bias) for a (n,) vector or an (m, n) matrix."""
    x = as_node(x)
    if x.value.ndim == 1:
        y = reshape(matmul(reshape(x, (1, x.shape[0])), weight), (as_node(weight).shape[1],))
    else:
        y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def scale(x: Any, factor: float) -> Node:
    return mul(x, float(factor))


# --- backward ------------------------------------------------------------


def topological_order(root: Node, reverse_parents: bool = False) -> list[Node]:
    order: list[Node] = []
    visited: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        parents = node.parents[::-1] if reverse_parents else node.parents
        for parent in parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(root: Node, order: list[Node] | None = None) -> None:
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    nodes = order if order is not None else topological_order(root)
    root.grad = np.ones_like(root.value)
    for node in reversed(nodes):
        if node._backward is not None and node.requires_grad:
            node._backward()


def zero_grads(params: Iterable[Node]) -> None:
    for p in params:
        p.zero_grad()


# --- optimizer -----------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(
    state: OptimizerState,
    params: dict[str, Node],
    grads: dict[str, np.ndarray] | None = None,
) -> None:
    """One AdamW step with decoupled weight decay; mutates parameter values in place."""
    grads = grads if grads is not None else {name: p.grad for name, p in params.items()}
    state.step += 1
    t = state.step
    bias1 = 1.0 - state.beta1**t
    bias2 = 1.0 - state.beta2**t
    for name in sorted(params):
        param = params[name]
        grad = grads[name]
        if grad.shape != param.shape:
            raise ValueError(f"gradient for {name} has shape {grad.shape}, expected {param.shape}")
        m = state.first_moment.setdefault(name, np.zeros_like(param.value))
        v = state.second_moment.setdefault(name, np.zeros_like(param.value))
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        if state.weight_decay:
            param.value -= state.lr * state.weight_decay * param.value
        param.value -= state.lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)


def warmup_cosine_lr(
    step: int,
    base_lr: float,
    total_steps: int,
    warmup_steps: int = 0,
    schedule: str = "cosine",
) -> float:
    """Learning rate for a 0-based step: linear warmup then cosine decay to zero."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    if schedule == "constant":
        return base_lr
    if schedule != "cosine":
        raise ValueError(f"unknown lr schedule: {schedule}")
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# --- gradient checking ---------------------------------------------------


@dataclass
class GradCheckReport:
    tol: float
    max_rel_error: dict[str, float]

    @property
    def failed(self) -> list[str]:
        return [name for name, err in self.max_rel_error.items() if err >= self.tol]

    @property
    def passed(self) -> bool:
        return not self.failed


def grad_check(
    loss_fn: Callable[[], Node],
    params: dict[str, Node],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients with central differences, block by block.

    max_entries caps the number of checked elements per block (chosen with a
    seeded generator) so large blocks stay affordable.
    """
    first = loss_fn().item()
    second = loss_fn().item()
    if first != second:
        raise NondeterminismError(f"loss_fn returned {first!r} then {second!r}")

    zero_grads(params.values())
    root = loss_fn()
    backward(root)
    analytic = {name: p.grad.copy() for name, p in params.items()}

    rng = np.random.default_rng(seed)
    report: dict[str, float] = {}
    for name in sorted(params):
        param = params[name]
        flat = param.value.reshape(-1)
        positions = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            positions = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        for pos in positions:
            original = flat[pos]
            flat[pos] = original + h
            plus = loss_fn().item()
            flat[pos] = original - h
            minus = loss_fn().item()
            flat[pos] = original
            numeric = (plus - minus) / (2.0 * h)
            exact = analytic[name].reshape(-1)[pos]
            denom = max(abs(numeric), abs(exact), GRAD_CHECK_FLOOR)
            worst = max(worst, abs(numeric - exact) / denom)
        report[name] = worst
        logger.debug("block=%s max_rel_error=%.3e", name, worst)
    return GradCheckReport(tol=tol, max_rel_error=report)
