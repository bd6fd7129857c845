"""Minimal tape-based reverse-mode differentiation over numpy arrays.

Every differentiable value is a :class:`Var`. Operations whose inputs live on a
:class:`Tape` append a node holding a closure that maps the output gradient to
input gradients. Recording order is a topological order, so :func:`backward`
just walks the node list in reverse.

Only the operations the lifting networks, losses and reprojection cycle need
are provided.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ContractError, DimensionError

Array = np.ndarray


class Var:
    """A value, optionally attached to a tape for gradient tracking."""

    __slots__ = ("value", "tape", "index", "__weakref__")

    def __init__(self, value, tape: "Tape | None" = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.index = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def __repr__(self) -> str:
        state = "tracked" if self.tracked else "const"
        return f"Var(shape={self.shape}, {state})"

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

    def __getitem__(self, key):
        return index(self, key)


class _Node:
    __slots__ = ("out", "parents", "grad_fn")

    def __init__(self, out: Var, parents: tuple[Var, ...], grad_fn: Callable):
        self.out = out
        self.parents = parents
        self.grad_fn = grad_fn


class Tape:
    """Records operations for one forward pass.

    Parameters are bound through :meth:`param`; the same ``(store, name)`` pair
    always maps to the same leaf so repeated use accumulates gradient. With
    ``record=False`` parameters come back as constants and nothing is stored,
    which keeps large inference batches cheap.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[_Node] = []
        self._leaves: dict[tuple[str, str], Var] = {}
        self._stores: dict[str, object] = {}

    def param(self, store, name: str) -> Var:
        if not self.record:
            return Var(store.params[name])
        key = (store.name, name)
        leaf = self._leaves.get(key)
        if leaf is None:
            if self._stores.get(store.name, store) is not store:
                raise ContractError(f"two different stores named {store.name!r} on one tape")
            self._stores[store.name] = store
            leaf = Var(store.params[name], tape=self)
            self._leaves[key] = leaf
        return leaf

    def watch(self, value) -> Var:
        """Leaf for a non-parameter input whose gradient is wanted."""
        return Var(value, tape=self)

    def _record(self, value: Array, parents: tuple[Var, ...], grad_fn: Callable) -> Var:
        out = Var(value, tape=self)
        out.index = len(self.nodes)
        self.nodes.append(_Node(out, parents, grad_fn))
        return out


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _tape_of(*xs: Var) -> Tape | None:
    tape = None
    for x in xs:
        if x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise ContractError("operands recorded on different tapes")
            tape = x.tape
    return tape


def _op(value: Array, parents: Sequence[Var], grad_fn: Callable) -> Var:
    parents = tuple(parents)
    tape = _tape_of(*parents)
    if tape is None:
        return Var(value)
    return tape._record(value, parents, grad_fn)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# --- elementwise -----------------------------------------------------------


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape
    return _op(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape
    return _op(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    return _op(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def neg(a) -> Var:
    a = as_var(a)
    return _op(-a.value, (a,), lambda g: (-g,))


def relu(a) -> Var:
    a = as_var(a)
    mask = a.value > 0
    return _op(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def square(a) -> Var:
    a = as_var(a)
    av = a.value
    return _op(av * av, (a,), lambda g: (2.0 * av * g,))


# --- linear algebra --------------------------------------------------------


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {av.shape} and {bv.shape}")
    if av.shape[1] != bv.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")
    return _op(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def rotate_points(points, rotations: Array) -> Var:
    """Apply rotation(s) to row-vector points: ``out[b, n] = R[b] @ points[b, n]``.

    ``rotations`` is a constant of shape (3, 3) or (B, 3, 3).
    """
    points = as_var(points)
    R = np.asarray(rotations, dtype=np.float64)
    pv = points.value
    if pv.shape[-1] != 3:
        raise DimensionError(f"points must end in 3 coordinates, got {pv.shape}")
    if R.ndim == 2:
        return _op(pv @ R.T, (points,), lambda g: (g @ R,))
    if R.shape != (pv.shape[0], 3, 3):
        raise DimensionError(f"rotation batch {R.shape} does not match points {pv.shape}")
    out = np.einsum("bnj,bkj->bnk", pv, R)
    return _op(out, (points,), lambda g: (np.einsum("bnk,bkj->bnj", g, R),))


# --- reductions and shape --------------------------------------------------


def sum(a, axis=None) -> Var:  # noqa: A001 - mirrors numpy naming
    a = as_var(a)
    shape = a.shape

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _op(np.sum(a.value, axis=axis), (a,), grad_fn)


def mean(a, axis=None) -> Var:
    a = as_var(a)
    count = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis), 1.0 / float(count))


def reshape(a, shape) -> Var:
    a = as_var(a)
    old = a.shape
    return _op(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def index(a, key) -> Var:
    a = as_var(a)
    shape = a.shape

    def grad_fn(g):
        full = np.zeros(shape)
        np.add.at(full, key, g)
        return (full,)

    return _op(a.value[key], (a,), grad_fn)


def take(a, indices, axis: int) -> Var:
    a = as_var(a)
    idx = np.asarray(indices, dtype=np.intp)
    shape = a.shape

    def grad_fn(g):
        full = np.zeros(shape)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _op(np.take(a.value, idx, axis=axis), (a,), grad_fn)


def concat(parts: Iterable, axis: int = -1) -> Var:
    parts = [as_var(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    return _op(
        np.concatenate([p.value for p in parts], axis=axis),
        parts,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def stack(parts: Iterable, axis: int = -1) -> Var:
    parts = [as_var(p) for p in parts]

    def grad_fn(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _op(np.stack([p.value for p in parts], axis=axis), parts, grad_fn)


# --- fused layer primitives ------------------------------------------------


def batch_norm_train(x, gamma, beta, eps: float) -> tuple[Var, Array, Array]:
    """Batch normalization with batch statistics.

    Returns the output and the batch mean / biased variance so the caller can
    update running statistics.
    """
    x, gamma, beta = as_var(x), as_var(gamma), as_var(beta)
    xv = x.value
    n = xv.shape[0]
    mu = xv.mean(axis=0)
    var = xv.var(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv_std
    gv = gamma.value

    def grad_fn(g):
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        dxhat = g * gv
        dx = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        return dx, dgamma, dbeta

    out = _op(xhat * gv + beta.value, (x, gamma, beta), grad_fn)
    return out, mu, var


def batch_norm_infer(x, gamma, beta, running_mean: Array, running_var: Array, eps: float) -> Var:
    scale = 1.0 / np.sqrt(running_var + eps)
    return add(mul(mul(sub(x, running_mean), scale), gamma), beta)


# --- gradient computation --------------------------------------------------


def _propagate(tape: Tape, loss: Var) -> dict[int, Array]:
    if loss.tape is not tape:
        raise ContractError("loss was not recorded on this tape")
    if loss.value.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, Array] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(tape.nodes[: loss.index + 1]):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.grad_fn(g)):
            if parent.tape is None or pg is None:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return grads


def backward(tape: Tape, loss: Var, stores: Iterable | None = None) -> dict[str, dict[str, Array]]:
    """Reverse-mode gradients of a scalar ``loss``.

    Returns ``{store_name: {param_name: grad}}``. When ``stores`` is given, every
    parameter of those stores gets an entry, zero if it is not on the path to
    ``loss``. Otherwise only stores touched on the tape are reported.
    """
    grads = _propagate(tape, loss)
    if stores is None:
        stores = tape._stores.values()
    result: dict[str, dict[str, Array]] = {}
    for store in stores:
        per_store = {}
        for name, value in store.params.items():
            leaf = tape._leaves.get((store.name, name))
            g = grads.get(id(leaf)) if leaf is not None else None
            per_store[name] = np.zeros_like(value) if g is None else np.asarray(g).reshape(value.shape)
        result[store.name] = per_store
    return result


def grad_of(tape: Tape, loss: Var, wrt: Var) -> Array:
    """Gradient of ``loss`` with respect to a watched leaf."""
    g = _propagate(tape, loss).get(id(wrt))
    return np.zeros_like(wrt.value) if g is None else g
