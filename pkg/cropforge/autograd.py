"""Reverse-mode automatic differentiation over dense float64 arrays.

Every op builds its output eagerly and, when any input requires a gradient,
records a node holding the inputs and a closure mapping the output gradient to
the input gradients (define-by-run: the graph is rebuilt on every forward pass).

Broadcasting: ``add``, ``sub``, ``mul``, ``div``, ``maximum``, ``minimum``,
``where``, ``smooth_l1`` and ``l1`` follow numpy broadcasting; gradients are
summed back over broadcast axes. ``matmul`` contracts (n, k) @ (k, m) -> (n, m)
and accepts 2-d operands only. ``concat`` requires equal extents on every axis
except the concatenation axis. Reductions take ``axis=None`` for all axes.
``softmax`` and ``layernorm`` operate along one axis (last by default);
``layernorm`` carries no affine part, scale and shift are separate ops.
``gelu`` is the tanh approximation
0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
"""

from __future__ import annotations

import base64
import json
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Mapping, Optional, Sequence, Union

import numpy as np

from .errors import CheckpointError, ConfigError, GraphError, NonFiniteError, ShapeError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    previous = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], tuple[Optional[np.ndarray], ...]]
    consumed: bool = False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None) -> None:
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError("item", self.shape, detail="tensor is not a scalar")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return self.__mul__(other)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        if isinstance(other, (int, float)):
            return scalar_mul(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self) -> "Tensor":
        return scalar_mul(self, -1.0)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tensor(data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = np.asarray(out, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(op, detail=f"output shape {out.shape}")
    result = Tensor.__new__(Tensor)
    result.data = out
    result.grad = None
    result.name = None
    result.requires_grad = _grad_enabled() and any(t.requires_grad for t in inputs)
    result._node = Node(op, tuple(inputs), backward_fn) if result.requires_grad else None
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast(op: str, *shapes: tuple[int, ...]) -> tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(*shapes))
    except ValueError:
        raise ShapeError(op, *shapes) from None


# -- elementwise binary ------------------------------------------------------


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast("add", a.shape, b.shape)

    def grad_fn(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), grad_fn)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast("sub", a.shape, b.shape)

    def grad_fn(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), grad_fn)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast("mul", a.shape, b.shape)

    def grad_fn(g: np.ndarray):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", a.data * b.data, (a, b), grad_fn)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast("div", a.shape, b.shape)
    if np.any(b.data == 0.0):
        raise NonFiniteError("div", detail="division by zero")

    def grad_fn(g: np.ndarray):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("div", a.data / b.data, (a, b), grad_fn)


def maximum(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    shape = _broadcast("maximum", a.shape, b.shape)
    pick_a = np.broadcast_to(a.data >= b.data, shape)

    def grad_fn(g: np.ndarray):
        return _unbroadcast(np.where(pick_a, g, 0.0), a.shape), _unbroadcast(np.where(pick_a, 0.0, g), b.shape)

    return _make("maximum", np.maximum(a.data, b.data), (a, b), grad_fn)


def minimum(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    shape = _broadcast("minimum", a.shape, b.shape)
    pick_a = np.broadcast_to(a.data <= b.data, shape)

    def grad_fn(g: np.ndarray):
        return _unbroadcast(np.where(pick_a, g, 0.0), a.shape), _unbroadcast(np.where(pick_a, 0.0, g), b.shape)

    return _make("minimum", np.minimum(a.data, b.data), (a, b), grad_fn)


def where(cond: np.ndarray, a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    shape = _broadcast("where", cond.shape, a.shape, b.shape)
    mask = np.broadcast_to(cond, shape)

    def grad_fn(g: np.ndarray):
        return _unbroadcast(np.where(mask, g, 0.0), a.shape), _unbroadcast(np.where(mask, 0.0, g), b.shape)

    return _make("where", np.where(mask, a.data, b.data), (a, b), grad_fn)


def scalar_mul(a: ArrayLike, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)

    def grad_fn(g: np.ndarray):
        return (g * c,)

    return _make("scalar_mul", a.data * c, (a,), grad_fn)


# -- linear algebra and shape ------------------------------------------------


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape, detail="expected (n, k) @ (k, m)")

    def grad_fn(g: np.ndarray):
        return g @ b.data.T, a.data.T @ g

    return _make("matmul", a.data @ b.data, (a, b), grad_fn)


def transpose(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("transpose", a.shape, detail="expected a 2-d tensor")

    def grad_fn(g: np.ndarray):
        return (g.T,)

    return _make("transpose", a.data.T, (a,), grad_fn)


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None

    def grad_fn(g: np.ndarray):
        return (g.reshape(a.shape),)

    return _make("reshape", out, (a,), grad_fn)


def _check_axis(op: str, a: Tensor, axis: Optional[int]) -> None:
    if axis is not None and not -a.ndim <= axis < a.ndim:
        raise ShapeError(op, a.shape, detail=f"axis {axis} out of range")


def sum(a: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    _check_axis("sum", a, axis)

    def grad_fn(g: np.ndarray):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", a.data.sum(axis=axis, keepdims=keepdims), (a,), grad_fn)


def mean(a: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    _check_axis("mean", a, axis)
    if a.size == 0:
        raise ShapeError("mean", a.shape, detail="empty tensor")
    count = a.size if axis is None else a.shape[axis]

    def grad_fn(g: np.ndarray):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make("mean", a.data.mean(axis=axis, keepdims=keepdims), (a,), grad_fn)


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    parts = [_as_tensor(t) for t in tensors]
    if not parts:
        raise ShapeError("concat", (), detail="nothing to concatenate")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(p.shape for p in parts)) from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def grad_fn(g: np.ndarray):
        return tuple(np.split(g, bounds, axis=axis))

    return _make("concat", out, parts, grad_fn)


def index_select(a: ArrayLike, indices: Sequence[int], axis: int = 0) -> Tensor:
    a = _as_tensor(a)
    _check_axis("index_select", a, axis)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or np.any(idx < -a.shape[axis]) or np.any(idx >= a.shape[axis]):
        raise ShapeError("index_select", a.shape, idx.shape, detail=f"indices out of range on axis {axis}")

    def grad_fn(g: np.ndarray):
        out = np.zeros(a.shape)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (out,)

    return _make("index_select", np.take(a.data, idx, axis=axis), (a,), grad_fn)


# -- activations -------------------------------------------------------------


def relu(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0.0

    def grad_fn(g: np.ndarray):
        return (np.where(mask, g, 0.0),)

    return _make("relu", np.where(mask, a.data, 0.0), (a,), grad_fn)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)

    def grad_fn(g: np.ndarray):
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return _make("gelu", 0.5 * x * (1.0 + t), (a,), grad_fn)


def sigmoid(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def grad_fn(g: np.ndarray):
        return (g * y * (1.0 - y),)

    return _make("sigmoid", y, (a,), grad_fn)


def tanh(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)

    def grad_fn(g: np.ndarray):
        return (g * (1.0 - y * y),)

    return _make("tanh", y, (a,), grad_fn)


def softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    _check_axis("softmax", a, axis)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g: np.ndarray):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make("softmax", y, (a,), grad_fn)


def layernorm(a: ArrayLike, eps: float = 1e-5, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    _check_axis("layernorm", a, axis)
    mu = a.data.mean(axis=axis, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=axis, keepdims=True)
    denom = var + eps
    if np.any(denom <= 0.0):
        raise NonFiniteError("layernorm", detail="zero variance with eps=0")
    inv_std = 1.0 / np.sqrt(denom)
    xhat = centered * inv_std

    def grad_fn(g: np.ndarray):
        g_mean = g.mean(axis=axis, keepdims=True)
        gx_mean = (g * xhat).mean(axis=axis, keepdims=True)
        return (inv_std * (g - g_mean - xhat * gx_mean),)

    return _make("layernorm", xhat, (a,), grad_fn)


def clip(a: ArrayLike, lo: float, hi: float) -> Tensor:
    a = _as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)

    def grad_fn(g: np.ndarray):
        return (np.where(inside, g, 0.0),)

    return _make("clip", np.clip(a.data, lo, hi), (a,), grad_fn)


# -- losses (elementwise; reduce with sum/mean) ------------------------------


def smooth_l1(x: ArrayLike, y: ArrayLike, beta: float = 1.0) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    _broadcast("smooth_l1", x.shape, y.shape)
    if beta <= 0.0:
        raise ShapeError("smooth_l1", x.shape, y.shape, detail="beta must be positive")
    d = x.data - y.data
    small = np.abs(d) < beta
    out = np.where(small, 0.5 * d * d / beta, np.abs(d) - 0.5 * beta)

    def grad_fn(g: np.ndarray):
        local = np.where(small, d / beta, np.sign(d))
        return _unbroadcast(g * local, x.shape), _unbroadcast(-g * local, y.shape)

    return _make("smooth_l1", out, (x, y), grad_fn)


def l1(x: ArrayLike, y: ArrayLike) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    _broadcast("l1", x.shape, y.shape)
    d = x.data - y.data

    def grad_fn(g: np.ndarray):
        s = np.sign(d)
        return _unbroadcast(g * s, x.shape), _unbroadcast(-g * s, y.shape)

    return _make("l1", np.abs(d), (x, y), grad_fn)


# -- graph traversal ---------------------------------------------------------


class Graph:
    """Topologically ordered view of everything a tensor was computed from."""

    def __init__(self, order: list[Tensor]) -> None:
        self.order = order

    @classmethod
    def from_output(cls, root: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t._node is not None:
                for parent in t._node.inputs:
                    if id(parent) not in seen:
                        stack.append((parent, False))
        return cls(order)

    @property
    def nodes(self) -> list[Node]:
        return [t._node for t in self.order if t._node is not None]

    def leaves(self) -> list[Tensor]:
        return [t for t in self.order if t._node is None and t.requires_grad]


def backward(loss: Tensor) -> None:
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = np.ones(loss.shape) if loss.grad is None else loss.grad + 1.0
        return
    if loss._node.consumed:
        raise GraphError("backward already ran on this graph; run a fresh forward pass first")

    graph = Graph.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for t in reversed(graph.order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t._node
        if node is None:
            if t.requires_grad:
                t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(node.inputs, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise GraphError(f"{node.op}: gradient shape {pg.shape} does not match input {parent.shape}")
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    for node in graph.nodes:
        node.consumed = True


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- optimisation ------------------------------------------------------------


@dataclass
class AdamWState:
    step: int = 0
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamWState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> AdamWState:
    """One AdamW update with decoupled weight decay (decay, then Adam step).

    Parameters are updated by rebinding ``param.data``; the arrays themselves
    are never written in place, so a previously taken snapshot stays intact.
    """
    if not lr > 0.0:
        raise ConfigError([f"learning rate must be positive, got {lr}"])
    state.step += 1
    t = state.step
    bias1 = 1.0 - beta1**t
    bias2 = 1.0 - beta2**t
    for name, param in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(param.shape)
        if g.shape != param.shape:
            raise ShapeError("adamw_step", param.shape, g.shape, detail=f"gradient for {name}")
        m = state.exp_avg.get(name)
        v = state.exp_avg_sq.get(name)
        if m is None:
            m = np.zeros(param.shape)
            v = np.zeros(param.shape)
        if m.shape != param.shape or v.shape != param.shape:
            raise ShapeError("adamw_step", param.shape, m.shape, detail=f"moment buffers for {name}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.exp_avg[name] = m
        state.exp_avg_sq[name] = v
        decayed = param.data * (1.0 - lr * weight_decay)
        param.data = decayed - lr * (m / bias1) / (np.sqrt(v / bias2) + eps)
    return state


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    sq = 0.0
    for g in grads.values():
        sq += float(np.vdot(g, g))
    total = math.sqrt(sq)
    if max_norm <= 0.0 or total <= max_norm:
        return dict(grads), total
    scale = max_norm / (total + 1e-12)
    return {k: g * scale for k, g in grads.items()}, total


# -- checkpoints -------------------------------------------------------------


def _encode(a: np.ndarray) -> dict[str, Any]:
    arr = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(arr.shape), "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def _decode(name: str, entry: Mapping[str, Any]) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in entry["shape"])
        raw = base64.b64decode(entry["data"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"parameter {name!r}: malformed entry ({exc})") from None
    arr = np.frombuffer(raw, dtype="<f8")
    if arr.size != int(np.prod(shape)):
        raise CheckpointError(f"parameter {name!r}: {arr.size} values for shape {shape}")
    return arr.reshape(shape).astype(np.float64)


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    metadata: dict[str, Any]
    optimizer: Optional[AdamWState] = None


def save_checkpoint(
    path: Union[str, Path],
    params: Mapping[str, Union[Tensor, np.ndarray]],
    metadata: Mapping[str, Any],
    optimizer: Optional[AdamWState] = None,
) -> None:
    doc: dict[str, Any] = {
        "metadata": dict(metadata),
        "params": {k: _encode(v.data if isinstance(v, Tensor) else v) for k, v in params.items()},
    }
    if optimizer is not None:
        doc["optimizer"] = {
            "step": optimizer.step,
            "exp_avg": {k: _encode(v) for k, v in optimizer.exp_avg.items()},
            "exp_avg_sq": {k: _encode(v) for k, v in optimizer.exp_avg_sq.items()},
        }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(doc, dict) or "params" not in doc:
        raise CheckpointError(f"{path}: missing 'params'")
    params = {k: _decode(k, v) for k, v in doc["params"].items()}
    optimizer = None
    if "optimizer" in doc:
        opt = doc["optimizer"]
        optimizer = AdamWState(
            step=int(opt.get("step", 0)),
            exp_avg={k: _decode(k, v) for k, v in opt.get("exp_avg", {}).items()},
            exp_avg_sq={k: _decode(k, v) for k, v in opt.get("exp_avg_sq", {}).items()},
        )
    return Checkpoint(params=params, metadata=doc.get("metadata", {}), optimizer=optimizer)
