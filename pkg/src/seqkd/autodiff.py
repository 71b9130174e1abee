"""Dense float64 tensors with reverse-mode automatic differentiation.

Define-by-run: each operation eagerly computes its value and records its
parents plus a backward closure, so the compute graph is simply the DAG of
``Tensor`` objects. Calling ``backward()`` on a sink walks the DAG once in
reverse topological order and accumulates gradients into every tensor that
``requires_grad``.

Everything is 64-bit; op outputs are checked for non-finite values so a
diverging graph fails at the op that produced the bad value rather than
three modules later.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np


class GraphError(RuntimeError):
    """Raised by graph construction or execution; carries the op name."""

    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _check_finite(op: str, data: np.ndarray) -> None:
    if not np.all(np.isfinite(data)):
        raise GraphError(op, "non-finite output")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 ndarray plus the bookkeeping for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = self.name or self.op
        return f"Tensor({tag}, shape={self.shape})"

    # -- graph construction ------------------------------------------------

    @staticmethod
    def _make(op: str, data: np.ndarray, parents: Sequence["Tensor"],
              backward: Callable[[np.ndarray], None]) -> "Tensor":
        _check_finite(op, data)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = False
        out.name = None
        out.op = op
        if _grad_enabled and any(p.requires_grad or p._parents for p in parents):
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    def _accumulate(self, g: np.ndarray) -> None:
        # Gradients are never mutated in place, so holding views is safe.
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    def backward(self, seed=None) -> None:
        """Reverse-mode sweep from this tensor.

        `seed` defaults to ones and must match this tensor's shape; gradients
        land in the ``.grad`` of every reachable tensor with requires_grad.
        """
        if self._backward is None and not self.requires_grad:
            raise GraphError("backward", "tensor is not part of a recorded graph")
        if seed is None:
            seed = np.ones_like(self.data)
        else:
            seed = _as_array(seed)
            if seed.shape != self.data.shape:
                raise GraphError("backward", f"seed shape {seed.shape} != sink shape {self.data.shape}")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        for node in topo:
            node.grad = None
        self.grad = seed
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def constant(data) -> Tensor:
    return Tensor(data)


def parameter(data, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


# -- primitive operations ---------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(g, b.data.shape))

    return Tensor._make("add", data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return Tensor._make("mul", data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(-g)

    return Tensor._make("neg", -a.data, (a,), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def backward(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(-g, b.data.shape))

    return Tensor._make("sub", data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        a._accumulate(g * s)

    return Tensor._make("scale", a.data * s, (a,), backward)


def shift(a: Tensor, c: float) -> Tensor:
    """a + scalar constant."""
    c = float(c)

    def backward(g):
        a._accumulate(g)

    return Tensor._make("shift", a.data + c, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise GraphError("matmul", f"operands must be at least 2-D, got {a.data.ndim}-D @ {b.data.ndim}-D")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise GraphError("matmul", f"inner dims differ: {a.data.shape} @ {b.data.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        a._accumulate(_unbroadcast(ga, a.data.shape))
        b._accumulate(_unbroadcast(gb, b.data.shape))

    return Tensor._make("matmul", data, (a, b), backward)


def transpose_last2(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(np.swapaxes(g, -1, -2))

    return Tensor._make("transpose", np.swapaxes(a.data, -1, -2), (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    z = np.exp(-np.abs(x))
    data = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    def backward(g):
        a._accumulate(g * data * (1.0 - data))

    return Tensor._make("sigmoid", data, (a,), backward)


def log_sigmoid(a: Tensor) -> Tensor:
    # log(sigma(x)) = -log(1 + e^{-x}); logaddexp keeps the large-|x| branches exact.
    data = -np.logaddexp(0.0, -a.data)

    def backward(g):
        x = a.data
        z = np.exp(-np.abs(x))
        sig_negx = np.where(x >= 0, z / (1.0 + z), 1.0 / (1.0 + z))
        a._accumulate(g * sig_negx)

    return Tensor._make("log_sigmoid", data, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def backward(g):
        a._accumulate(g * (1.0 - data * data))

    return Tensor._make("tanh", data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def backward(g):
        a._accumulate(g * (a.data > 0.0))

    return Tensor._make("relu", data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * data)

    return Tensor._make("exp", data, (a,), backward)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(gg, a.data.shape).copy())

    return Tensor._make("sum", data, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def gather(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: out[..., :] = table[ids[...], :]. Adjoint scatter-adds."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise GraphError("gather", f"index out of range for table with {table.data.shape[0]} rows")
    data = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        table._accumulate(gt)

    return Tensor._make("gather", data, (table,), backward)


def concat(parts: Iterable[Tensor], axis: int = -1) -> Tensor:
    parts = list(parts)
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def backward(g):
        offs = np.cumsum([0] + sizes)
        for p, lo, hi in zip(parts, offs[:-1], offs[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis if axis >= 0 else g.ndim + axis] = slice(lo, hi)
            p._accumulate(g[tuple(idx)])

    return Tensor._make("concat", data, tuple(parts), backward)


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    data = a.data[..., start:stop]

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[..., start:stop] = g
        a._accumulate(ga)

    return Tensor._make("slice", data, (a,), backward)


def index_axis1(a: Tensor, t: int) -> Tensor:
    """out = a[:, t, ...] for a 3-D tensor."""
    data = a.data[:, t]

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[:, t] = g
        a._accumulate(ga)

    return Tensor._make("index_axis1", data, (a,), backward)


def take_positions(a: Tensor, idx: np.ndarray) -> Tensor:
    """out[b] = a[b, idx[b], :] for a (B, L, d) tensor."""
    idx = np.asarray(idx)
    rows = np.arange(a.data.shape[0])
    data = a.data[rows, idx]

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[rows, idx] = g
        a._accumulate(ga)

    return Tensor._make("take_positions", data, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(a.data.shape))

    return Tensor._make("reshape", data, (a,), backward)


def row_softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis, shift-stabilized."""
    x = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(x)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        a._accumulate(data * (g - dot))

    return Tensor._make("row_softmax", data, (a,), backward)


def batched_dot(a: Tensor, b: Tensor) -> Tensor:
    """(B, d) x (B, n, d) -> (B, n): per-row dot products against candidate sets."""
    if a.data.ndim != 2 or b.data.ndim != 3 or a.data.shape != (b.data.shape[0], b.data.shape[2]):
        raise GraphError("batched_dot", f"incompatible shapes {a.data.shape} and {b.data.shape}")
    data = np.einsum("bd,bnd->bn", a.data, b.data)

    def backward(g):
        a._accumulate(np.einsum("bn,bnd->bd", g, b.data))
        b._accumulate(np.einsum("bn,bd->bnd", g, a.data))

    return Tensor._make("batched_dot", data, (a, b), backward)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: scales kept units by 1/(1-rate) so eval needs no rescale."""
    if not 0.0 <= rate < 1.0:
        raise GraphError("dropout", f"rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return a
    keep = 1.0 - rate
    mask = (rng.random(a.data.shape) >= rate) / keep

    def backward(g):
        a._accumulate(g * mask)

    return Tensor._make("dropout", a.data * mask, (a,), backward)


# -- gradient checking -------------------------------------------------------

def check_gradients(build: Callable[[], Tensor], params: dict[str, Tensor],
                    h: float = 1e-5, sample_count: int = 100,
                    rng: np.random.Generator | None = None,
                    floor: float = 1e-6) -> float:
    """Compare analytic gradients against central differences.

    `build` must re-run the forward pass from the current parameter values and
    return a scalar loss tensor. Coordinates are sampled at random across all
    parameters; returns the worst relative error seen.

    `floor` bounds the denominator of the relative error: central differences
    of an O(1) loss carry ~1e-10 absolute noise, so gradients below the floor
    are effectively compared absolutely instead of drowning in that noise.
    """
    if not params:
        raise GraphError("check_gradients", "no parameters to check")
    rng = rng or np.random.default_rng(0)

    loss = build()
    if loss.data.shape != ():
        raise GraphError("check_gradients", "build() must return a scalar")
    if loss._backward is None and not loss.requires_grad:
        # Loss does not depend on any recorded tensor.
        analytic = {k: np.zeros_like(p.data) for k, p in params.items()}
    else:
        loss.backward()
        analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                    for k, p in params.items()}

    names = sorted(params)
    sizes = np.array([params[k].data.size for k in names])
    if sizes.sum() == 0:
        return 0.0
    picks = rng.choice(sizes.sum(), size=min(sample_count, sizes.sum()), replace=False)

    worst = 0.0
    bounds = np.cumsum(sizes)
    for flat in picks:
        which = int(np.searchsorted(bounds, flat, side="right"))
        name = names[which]
        offset = int(flat - (bounds[which - 1] if which else 0))
        p = params[name]
        idx = np.unravel_index(offset, p.data.shape)
        orig = p.data[idx]
        p.data[idx] = orig + h
        f_plus = build().item()
        p.data[idx] = orig - h
        f_minus = build().item()
        p.data[idx] = orig
        numeric = (f_plus - f_minus) / (2.0 * h)
        a = analytic[name][idx]
        denom = max(abs(a), abs(numeric), floor)
        worst = max(worst, abs(a - numeric) / denom)
    return worst
