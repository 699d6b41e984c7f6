"""Dense float64 tensors with reverse-mode differentiation and Adagrad.

Graphs are recorded as operations execute. Every node gets a monotonically
increasing id, so sorting reachable nodes by id is a valid topological order
and ``backward`` never needs a separate sort pass.

Broadcasting is deliberately limited to adding a 1-D bias over leading axes.
Everything else goes through explicit ``expand``/``reshape`` nodes so each
gradient rule stays short enough to audit.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_ids = itertools.count()
_active_graphs: list["Graph"] = []


class ShapeError(ValueError):
    """Operand shapes violate a node's contract."""

    def __init__(self, op: str, node: int | None, message: str):
        self.op = op
        self.node = node
        where = f"{op}" if node is None else f"{op} (node {node})"
        super().__init__(f"{where}: {message}")


class NonFiniteError(FloatingPointError):
    """A node produced NaN or Inf."""

    def __init__(self, op: str, node: int):
        self.op = op
        self.node = node
        super().__init__(f"{op} (node {node}) produced a non-finite value")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "op", "id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.op = "leaf"
        self.id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.full((), x) if np.isscalar(x) else x)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(shape: Sequence[int], rng: np.random.Generator, name: str | None = None) -> Tensor:
    """Trainable tensor drawn uniformly from [-1/sqrt(d), 1/sqrt(d)], d = last-axis size."""
    bound = 1.0 / np.sqrt(shape[-1]) if len(shape) else 1.0
    return Tensor(rng.uniform(-bound, bound, size=tuple(shape)), requires_grad=True, name=name)


def zeros_parameter(shape: Sequence[int], name: str | None = None) -> Tensor:
    return Tensor(np.zeros(tuple(shape)), requires_grad=True, name=name)


@dataclass
class Graph:
    """Insertion-ordered record of the nodes created while the graph is active."""

    check_finite: bool = False
    nodes: list[Tensor] = field(default_factory=list)

    def __enter__(self) -> "Graph":
        _active_graphs.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_graphs.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


@contextmanager
def recording(check_finite: bool = True):
    with Graph(check_finite=check_finite) as g:
        yield g


def _node(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    out.id = next(_ids)
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = parents if out.requires_grad else ()
    out._backward = backward if out.requires_grad else None
    for g in _active_graphs:
        g.nodes.append(out)
        if g.check_finite and not np.all(np.isfinite(data)):
            raise NonFiniteError(op, len(g.nodes) - 1)
    return out


def _fail(op: str, message: str):
    node = len(_active_graphs[-1].nodes) if _active_graphs else None
    raise ShapeError(op, node, message)


# ---------------------------------------------------------------- operations


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a 1-D bias over ``a``'s last axis."""
    if a.shape == b.shape:
        return _node(a.data + b.data, "add", (a, b), lambda g: (g, g))
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        lead = tuple(range(a.ndim - 1))
        return _node(a.data + b.data, "add", (a, b), lambda g: (g, g.sum(axis=lead)))
    if b.ndim == 0:
        return _node(a.data + b.data, "add", (a, b), lambda g: (g, g.sum()))
    _fail("add", f"shapes {a.shape} and {b.shape} are not compatible")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        _fail("sub", f"shapes {a.shape} and {b.shape} differ")
    return _node(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        _fail("mul", f"shapes {a.shape} and {b.shape} differ")
    return _node(a.data * b.data, "mul", (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.data * c, "scale", (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a`` of shape (..., n) times a matrix ``b`` of shape (n, m)."""
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        _fail("matmul", f"cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _node(a.data @ b.data, "matmul", (a, b), backward)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    ref = xs[0].shape
    ax = axis % len(ref)
    for x in xs[1:]:
        if x.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(x.shape, ref)) if i != ax):
            _fail("concat", f"shape {x.shape} does not match {ref} off axis {axis}")
    bounds = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return _node(
        np.concatenate([x.data for x in xs], axis=ax),
        "concat",
        tuple(xs),
        lambda g: tuple(np.split(g, bounds, axis=ax)),
    )


def slice_axis(x: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    """Entries ``start:stop`` along ``axis``."""
    ax = axis % x.ndim
    if not 0 <= start <= stop <= x.shape[ax]:
        _fail("slice_axis", f"bad range {start}:{stop} on axis {axis} of {x.shape}")
    sel = (slice(None),) * ax + (slice(start, stop),)

    def backward(g):
        full = np.zeros_like(x.data)
        full[sel] = g
        return (full,)

    return _node(x.data[sel], "slice_axis", (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        _fail("reshape", f"cannot reshape {x.shape} to {tuple(shape)}")
    return _node(out, "reshape", (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), "transpose", (x,), lambda g: (np.transpose(g, inverse),))


def expand(x: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis of size ``n`` at ``axis`` by repetition."""
    ax = axis % (x.ndim + 1)
    out = np.repeat(np.expand_dims(x.data, ax), n, axis=ax)
    return _node(out, "expand", (x,), lambda g: (g.sum(axis=ax),))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _node(s, "sigmoid", (x,), lambda g: (g * s * (1.0 - s),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _node(np.where(pos, x.data, 0.0), "relu", (x,), lambda g: (g * pos,))


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis. Masked-out (False) positions get exactly zero.

    A row with no valid position yields all zeros.
    """
    z = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != z.shape:
            _fail("softmax", f"mask shape {mask.shape} != input {z.shape}")
        z = np.where(mask, z, -np.inf)
    top = np.max(z, axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.exp(z - top)
    total = e.sum(axis=-1, keepdims=True)
    p = np.divide(e, total, out=np.zeros_like(e), where=total > 0)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _node(p, "softmax", (x,), backward)


def gather(table: Tensor, index: np.ndarray) -> Tensor:
    """Embedding lookup: rows of a 2-D ``table`` at integer ``index`` of any shape."""
    index = np.asarray(index)
    if table.ndim != 2:
        _fail("gather", f"table must be 2-D, got {table.shape}")
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        _fail("gather", f"index out of range for {table.shape[0]} rows")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, index.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _node(table.data[index], "gather", (table,), backward)


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    if axis is None:
        return _node(np.asarray(x.data.sum()), "sum", (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))
    ax = axis % x.ndim
    return _node(x.data.sum(axis=ax), "sum", (x,), lambda g: (np.repeat(np.expand_dims(g, ax), x.shape[ax], axis=ax),))


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    if n == 0:
        _fail("mean", "empty reduction")
    return scale(sum(x, axis), 1.0 / n)


def sum_squares(x: Tensor) -> Tensor:
    return _node(np.asarray(np.sum(x.data * x.data)), "sum_squares", (x,), lambda g: (2.0 * g * x.data,))


def detach(x: Tensor) -> Tensor:
    """Pass values forward, block gradients backward."""
    return _node(x.data, "detach", (), None)


PROB_CLAMP = 1e-12


def binary_cross_entropy(p: Tensor, target: Tensor | np.ndarray, weight: np.ndarray | None = None) -> Tensor:
    """Mean of ``-w [t ln p + (1-t) ln(1-p)]`` with ``p`` clamped to [1e-12, 1-1e-12]."""
    target = _wrap(target)
    if p.shape != target.shape:
        _fail("binary_cross_entropy", f"prediction {p.shape} vs target {target.shape}")
    w = np.ones(p.shape) if weight is None else np.asarray(weight, dtype=np.float64)
    if w.shape != p.shape:
        _fail("binary_cross_entropy", f"weight {w.shape} vs prediction {p.shape}")
    n = max(p.data.size, 1)
    q = np.clip(p.data, PROB_CLAMP, 1.0 - PROB_CLAMP)
    t = target.data
    lq, l1q = np.log(q), np.log1p(-q)
    value = -np.sum(w * (t * lq + (1.0 - t) * l1q)) / n

    def backward(g):
        gp = g * w * (q - t) / (q * (1.0 - q)) / n
        gt = -g * w * (lq - l1q) / n
        return gp, gt

    return _node(np.asarray(value), "bce", (p, target), backward)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def custom(data: np.ndarray, op: str, parents: Sequence[Tensor], backward) -> Tensor:
    """Register a node whose gradient rule is supplied by the caller."""
    return _node(np.asarray(data, dtype=np.float64), op, tuple(parents), backward)


# ---------------------------------------------------------------- evaluation


def evaluate(fn: Callable[..., dict[str, Tensor] | Tensor], inputs: dict[str, Tensor | np.ndarray]):
    """Run ``fn(**inputs)`` on a fresh, finiteness-checked graph.

    Returns ``(outputs, graph)`` where outputs is a dict of named tensors.
    Shape violations raise :class:`ShapeError`, NaN/Inf raise
    :class:`NonFiniteError`; both name the offending node.
    """
    bound = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in inputs.items()}
    with Graph(check_finite=True) as g:
        for k, v in bound.items():
            if not np.all(np.isfinite(v.data)):
                raise NonFiniteError(f"input:{k}", -1)
        out = fn(**bound)
    if isinstance(out, Tensor):
        out = {"output": out}
    return out, g


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[int, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable trainable leaf.

    Returns a map from tensor id to gradient; tensors in ``wrt`` that are not
    reachable (or only reachable through a detach) map to zeros.
    """
    if loss.data.size != 1:
        raise ShapeError("backward", loss.id, f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    result: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        order: dict[int, Tensor] = {}
        stack = [loss]
        while stack:
            t = stack.pop()
            if t.id in order:
                continue
            order[t.id] = t
            stack.extend(p for p in t._parents if p.requires_grad and p.id not in order)
        grads[loss.id] = np.ones_like(loss.data)
        for nid in sorted(order, reverse=True):
            t = order[nid]
            g = grads.pop(nid, None)
            if g is None:
                continue
            if t._backward is None:
                t.grad = g.copy() if t.grad is None else t.grad + g
                result[nid] = g
                continue
            for parent, pg in zip(t._parents, t._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=np.float64)
                if pg.shape != parent.shape:
                    pg = pg.reshape(parent.shape)
                grads[parent.id] = grads[parent.id] + pg if parent.id in grads else pg
    if wrt is not None:
        for t in wrt:
            result.setdefault(t.id, np.zeros_like(t.data))
            if t.grad is None and t.requires_grad:
                t.grad = np.zeros_like(t.data)
    return result


def grad_check(
    loss_fn: Callable[[], Tensor],
    param: Tensor,
    epsilon: float = 1e-4,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` must rebuild the graph on every call. Relative error per entry
    is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    param.grad = None
    loss = loss_fn()
    backward(loss, [param])
    analytic = param.grad.copy()
    param.grad = None
    flat = param.data.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        idx = (rng or np.random.default_rng(0)).choice(flat.size, size=max_entries, replace=False)
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + epsilon
        up = loss_fn().item()
        flat[i] = orig - epsilon
        down = loss_fn().item()
        flat[i] = orig
        numeric = (up - down) / (2 * epsilon)
        a = analytic.reshape(-1)[i]
        worst = max(worst, abs(a - numeric) / max(1e-8, abs(a) + abs(numeric)))
    return worst


# ---------------------------------------------------------------- optimizer


@dataclass
class AdagradState:
    learning_rate: float = 0.01
    epsilon: float = 1e-10
    accumulators: list[np.ndarray] = field(default_factory=list)


def adagrad_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdagradState) -> None:
    """In place: ``acc += g^2``; ``p -= lr * g / (sqrt(acc) + eps)``."""
    if not state.accumulators:
        state.accumulators = [np.zeros_like(p.data) for p in params]
    if len(state.accumulators) != len(params):
        raise ShapeError("adagrad_step", None, f"{len(params)} params but {len(state.accumulators)} accumulators")
    for p, g, acc in zip(params, grads, state.accumulators):
        if g is None:
            continue
        if g.shape != p.shape or acc.shape != p.shape:
            raise ShapeError("adagrad_step", None, f"param {p.shape}, grad {g.shape}, accumulator {acc.shape}")
        acc += g * g
        p.data -= state.learning_rate * g / (np.sqrt(acc) + state.epsilon)


class Adagrad:
    def __init__(self, params: Sequence[Tensor], lr: float = 0.01, eps: float = 1e-10):
        self.params = list(params)
        self.state = AdagradState(learning_rate=lr, epsilon=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adagrad_step(self.params, [p.grad for p in self.params], self.state)
