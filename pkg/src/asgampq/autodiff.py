"""Tape-based reverse-mode autodiff over rank-2 float64 arrays.

Every primitive computes its forward value eagerly with numpy and, when a
:class:`Tape` is active, records a node holding the inputs, the output and a
closure mapping the upstream gradient to input gradients. ``backward`` replays
the tape in reverse.

    with Tape() as tape:
        loss = softmax_cross_entropy(matmul(x, w), labels)
    backward(loss, tape, params)
"""
from __future__ import annotations

import contextvars
import hashlib
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, ShapeError

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "asgampq_active_tape", default=None)


class Tensor:
    """Dense rank<=2 array of float64 values with a gradient buffer.

    Scalars are stored as 1x1 and vectors as a single row.
    """

    __slots__ = ("values", "grad", "requires_grad", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        arr = np.array(values, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim > 2:
            raise ShapeError(f"tensors are rank <= 2, got shape {arr.shape}")
        self.values = arr
        self.grad = np.zeros_like(arr)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.values[0, 0])

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"


def constant(values) -> Tensor:
    return Tensor(values, requires_grad=False)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of primitive applications for one forward pass."""

    nodes: list[Node] = field(default_factory=list)
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)


def _record(op: str, inputs: tuple[Tensor, ...], out_values: np.ndarray,
            back: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_values, requires_grad=needs)
    if tape is not None and needs:
        tape.nodes.append(Node(op, inputs, out, back))
    return out


class ParamSet:
    """Named parameters with a stable iteration order (insertion order)."""

    def __init__(self, items: Sequence[tuple[str, Tensor]] | None = None):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        for name, t in items or ():
            self.add(name, t)

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter id {name!r}")
        tensor.requires_grad = True
        tensor.name = tensor.name or name
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    @property
    def size(self) -> int:
        return sum(t.size for t in self._params.values())

    def vector(self) -> np.ndarray:
        if not self._params:
            return np.zeros(0)
        return np.concatenate([t.values.ravel() for t in self._params.values()])

    def set_vector(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise ShapeError(f"vector of shape {vec.shape} does not fit {self.size} parameters")
        offset = 0
        for t in self._params.values():
            n = t.size
            t.values[...] = vec[offset:offset + n].reshape(t.shape)
            offset += n

    def grad_vector(self) -> np.ndarray:
        return grad_vector(self)

    def grad_norm(self) -> float:
        return grad_norm(self)

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def digest(self) -> str:
        """SHA-256 over parameter names, shapes and raw value bytes."""
        h = hashlib.sha256()
        for name, t in self._params.items():
            h.update(name.encode())
            h.update(repr(t.shape).encode())
            h.update(np.ascontiguousarray(t.values).tobytes())
        return h.hexdigest()


def grad_vector(params: ParamSet) -> np.ndarray:
    if len(params) == 0:
        return np.zeros(0)
    return np.concatenate([t.grad.ravel() for t in params.tensors()])


def grad_norm(params: ParamSet) -> float:
    return float(np.linalg.norm(grad_vector(params)))


def backward(loss: Tensor, tape: Tape, params: ParamSet | None = None) -> dict[int, np.ndarray]:
    """Reverse sweep over ``tape`` seeded with d(loss)/d(loss) = 1.

    Overwrites ``grad`` of every tensor in ``params`` (zeros when the loss
    does not depend on it). Without ``params`` every leaf that requires a
    gradient is written. Returns the raw id -> gradient map.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.requires_grad and tape.nodes and tape.nodes[-1].output is not loss:
        raise ContractError("loss must be the final node recorded on the tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi

    targets = params.tensors() if params is not None else _leaves(tape)
    for t in targets:
        g = grads.get(id(t))
        if g is None:
            t.grad[...] = 0.0
        else:
            t.grad[...] = g
    return grads


def _leaves(tape: Tape) -> list[Tensor]:
    produced = {id(n.output) for n in tape.nodes}
    seen: dict[int, Tensor] = {}
    for n in tape.nodes:
        for t in n.inputs:
            if t.requires_grad and id(t) not in produced:
                seen.setdefault(id(t), t)
    return list(seen.values())


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# primitives ---------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    av, bv = a.values, b.values

    def back(g):
        return g @ bv.T, av.T @ g

    return _record("matmul", (a, b), av @ bv, back)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), a.values + b.values,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")
    av, bv = a.values, b.values

    def back(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return _record("mul", (a, b), av * bv, back)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scale", (a,), a.values * c, lambda g: (g * c,))


def total(a: Tensor) -> Tensor:
    """Sum of all entries as a 1x1 tensor."""
    shape = a.shape
    return _record("sum", (a,), np.array([[a.values.sum()]]),
                   lambda g: (np.full(shape, g[0, 0]),))


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0
    return _record("relu", (x,), np.where(mask, x.values, 0.0), lambda g: (g * mask,))


def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction."""
    z = logits.values - logits.values.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _record("softmax", (logits,), p, back)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.ndim != 1 or labels.shape[0] != n:
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if n == 0:
        raise ContractError("softmax_cross_entropy: empty batch")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"label out of range for {k} classes: "
                         f"min {labels.min()}, max {labels.max()}")
    labels = labels.astype(np.intp)
    z = logits.values - logits.values.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def back(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g[0, 0] / n),)

    return _record("softmax_xent", (logits,), np.array([[loss]]), back)


def mix(weights: Tensor, branches: Sequence[Tensor]) -> Tensor:
    """Sum_j weights[0, j] * branches[j] for a 1xJ weight row."""
    if weights.shape != (1, len(branches)):
        raise ShapeError(f"mix: weights {weights.shape} for {len(branches)} branches")
    shape = branches[0].shape
    for b in branches:
        if b.shape != shape:
            raise ShapeError(f"mix: branch shapes {shape} and {b.shape} differ")
    w = weights.values[0]
    vals = [b.values for b in branches]
    out = np.zeros(shape)
    for wj, v in zip(w, vals):
        out = out + wj * v

    def back(g):
        gw = np.array([[float((g * v).sum()) for v in vals]])
        return (gw, *[g * wj for wj in w])

    return _record("mix", (weights, *branches), out, back)


def dot_const(a: Tensor, c) -> Tensor:
    """Inner product of a 1xJ row with a constant vector, as 1x1."""
    c = np.asarray(c, dtype=np.float64).reshape(1, -1)
    if c.shape != a.shape:
        raise ShapeError(f"dot_const: {a.shape} vs constant {c.shape}")
    return _record("dot_const", (a,), np.array([[float((a.values * c).sum())]]),
                   lambda g: (g[0, 0] * c,))


def elementwise(name: str, x: Tensor, fn: Callable[[np.ndarray], np.ndarray],
                dfn: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> Tensor:
    """Record an elementwise op with a custom local derivative ``dfn(x, g)``."""
    xv = x.values
    return _record(name, (x,), fn(xv), lambda g: (dfn(xv, g),))
