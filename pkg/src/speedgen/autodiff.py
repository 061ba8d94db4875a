"""Reverse-mode automatic differentiation over dense 2-D float64 tensors.

A ``Tape`` records every primitive operation as it runs; ``Tape.gradients``
replays the record backwards and accumulates vector-Jacobian products.  All
tensors are rank-2 (rows x cols): scalars are (1, 1), column vectors (n, 1).
Broadcasting is restricted to scalar-with-tensor for elementwise ops; any
other shape combination raises loudly.  Explicit ``tile_cols`` /
``slice_rows`` / ``concat_rows`` primitives cover the remaining layout needs
of the recurrent and feed-forward networks built on top.

A Tape is single-threaded; distinct tapes may be used concurrently.
"""

from __future__ import annotations

import gc
import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DomainError, ShapeError

__all__ = [
    "Tape",
    "Tensor",
    "Gradients",
    "AdamState",
    "adam_step",
    "clip_by_global_norm",
    "paused_gc",
]


@contextmanager
def paused_gc():
    """Suspend the cyclic garbage collector for a tape-heavy training loop.

    Tapes hold tens of thousands of closures per epoch; the collector's
    periodic sweeps over them dominate runtime while reclaiming nothing
    (tape object graphs are acyclic and die by refcount).
    """
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        yield
    finally:
        if was_enabled:
            gc.enable()


def _reduce_broadcast(shape, g: np.ndarray) -> np.ndarray:
    # undo scalar broadcast: collapse the gradient back to (1, 1).  Kept at
    # module level so vjp closures never capture the tape (no ref cycles).
    if g.shape != shape:
        return g.sum().reshape(1, 1)
    return g


def _as_matrix(values) -> np.ndarray:
    a = np.asarray(values, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ShapeError("tensor", a.shape)
    return a


class Tensor:
    """Handle to one node on a tape: an immutable 2-D float64 value."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape: "Tape", idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def values(self) -> np.ndarray:
        return self.tape._values[self.idx]

    @property
    def shape(self) -> tuple[int, int]:
        return self.tape._values[self.idx].shape

    def item(self) -> float:
        v = self.values
        if v.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {v.shape}")
        return float(v[0, 0])

    # arithmetic sugar; each defers to the tape primitive
    def __add__(self, other):
        return self.tape.add(self, self.tape.lift(other))

    def __sub__(self, other):
        return self.tape.sub(self, self.tape.lift(other))

    def __mul__(self, other):
        return self.tape.mul(self, self.tape.lift(other))

    def __matmul__(self, other):
        return self.tape.matmul(self, other)

    def __neg__(self):
        return self.tape.neg(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, node={self.idx})"


class Gradients:
    """Result of a backward pass: gradient lookup per tensor.

    Tensors that do not lie on any path to the loss get a zero gradient of
    their own shape.
    """

    def __init__(self, tape: "Tape", grads: list):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        if t.tape is not self._tape:
            raise ContractError("gradient requested for a tensor from another tape")
        g = self._grads[t.idx]
        if g is None:
            return np.zeros(t.shape)
        return g


class Tape:
    """Ordered record of primitive ops; inputs of a node always precede it."""

    __slots__ = ("_values", "_parents", "_vjps", "_needs")

    def __init__(self):
        self._values: list[np.ndarray] = []
        self._parents: list[tuple[int, ...]] = []
        self._vjps: list[tuple] = []
        self._needs: list[bool] = []

    def __len__(self) -> int:
        return len(self._values)

    # ---- node construction -------------------------------------------------

    def _record(self, value, parents, vjps) -> Tensor:
        needs = False
        for p in parents:
            if self._needs[p]:
                needs = True
                break
        self._values.append(value)
        self._parents.append(parents)
        self._vjps.append(vjps)
        self._needs.append(needs)
        return Tensor(self, len(self._values) - 1)

    def constant(self, values) -> Tensor:
        """A leaf that never receives a gradient (data, masks, targets)."""
        a = _as_matrix(values)
        self._values.append(a)
        self._parents.append(())
        self._vjps.append(())
        self._needs.append(False)
        return Tensor(self, len(self._values) - 1)

    def leaf(self, values) -> Tensor:
        """A differentiable leaf (a trainable parameter)."""
        a = _as_matrix(values)
        self._values.append(a)
        self._parents.append(())
        self._vjps.append(())
        self._needs.append(True)
        return Tensor(self, len(self._values) - 1)

    def lift(self, x) -> Tensor:
        return x if isinstance(x, Tensor) else self.constant(x)

    # ---- elementwise binary ops ---------------------------------------------

    def _check_elementwise(self, op: str, a: Tensor, b: Tensor):
        sa, sb = a.shape, b.shape
        if sa == sb or sa == (1, 1) or sb == (1, 1):
            return
        raise ShapeError(op, sa, sb)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        self._check_elementwise("add", a, b)
        va, vb = a.values, b.values
        sa, sb = va.shape, vb.shape
        return self._record(
            va + vb,
            (a.idx, b.idx),
            (
                lambda g: _reduce_broadcast(sa, g),
                lambda g: _reduce_broadcast(sb, g),
            ),
        )

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        self._check_elementwise("sub", a, b)
        va, vb = a.values, b.values
        sa, sb = va.shape, vb.shape
        return self._record(
            va - vb,
            (a.idx, b.idx),
            (
                lambda g: _reduce_broadcast(sa, g),
                lambda g: _reduce_broadcast(sb, -g),
            ),
        )

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        self._check_elementwise("mul", a, b)
        va, vb = a.values, b.values
        sa, sb = va.shape, vb.shape
        return self._record(
            va * vb,
            (a.idx, b.idx),
            (
                lambda g: _reduce_broadcast(sa, g * vb),
                lambda g: _reduce_broadcast(sb, g * va),
            ),
        )

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        va, vb = a.values, b.values
        if va.shape[1] != vb.shape[0]:
            raise ShapeError("matmul", va.shape, vb.shape)
        return self._record(
            va @ vb,
            (a.idx, b.idx),
            (lambda g: g @ vb.T, lambda g: va.T @ g),
        )

    # ---- elementwise unary ops ------------------------------------------------

    def neg(self, a: Tensor) -> Tensor:
        return self._record(-a.values, (a.idx,), (lambda g: -g,))

    def square(self, a: Tensor) -> Tensor:
        va = a.values
        return self._record(va * va, (a.idx,), (lambda g: 2.0 * va * g,))

    def sigmoid(self, a: Tensor) -> Tensor:
        # exp overflow for very negative inputs saturates to exactly 0, which
        # is the correct limit, so the warning is suppressed rather than
        # paying for a branchy numerically-stable variant in the hot loop.
        with np.errstate(over="ignore"):
            out = 1.0 / (1.0 + np.exp(-a.values))
        return self._record(out, (a.idx,), (lambda g: g * out * (1.0 - out),))

    def tanh(self, a: Tensor) -> Tensor:
        out = np.tanh(a.values)
        return self._record(out, (a.idx,), (lambda g: g * (1.0 - out * out),))

    def log(self, a: Tensor) -> Tensor:
        va = a.values
        if np.any(va <= 0.0):
            raise DomainError(f"log of non-positive value (min={va.min():g})")
        return self._record(np.log(va), (a.idx,), (lambda g: g / va,))

    def exp(self, a: Tensor) -> Tensor:
        out = np.exp(a.values)
        return self._record(out, (a.idx,), (lambda g: g * out,))

    def sqrt(self, a: Tensor) -> Tensor:
        va = a.values
        if np.any(va <= 0.0):
            raise DomainError(f"sqrt of non-positive value (min={va.min():g})")
        out = np.sqrt(va)
        return self._record(out, (a.idx,), (lambda g: g / (2.0 * out),))

    def sinh(self, a: Tensor) -> Tensor:
        va = a.values
        return self._record(np.sinh(va), (a.idx,), (lambda g: g * np.cosh(va),))

    def asinh(self, a: Tensor) -> Tensor:
        va = a.values
        return self._record(
            np.arcsinh(va), (a.idx,), (lambda g: g / np.sqrt(1.0 + va * va),)
        )

    def logcosh(self, a: Tensor) -> Tensor:
        # log(cosh(x)) = |x| + log1p(exp(-2|x|)) - log 2, overflow-safe
        va = a.values
        ax = np.abs(va)
        out = ax + np.log1p(np.exp(-2.0 * ax)) - math.log(2.0)
        return self._record(out, (a.idx,), (lambda g: g * np.tanh(va),))

    # ---- reductions --------------------------------------------------------------

    def sum(self, a: Tensor) -> Tensor:
        va = a.values
        sa = va.shape
        return self._record(
            np.array([[va.sum()]]),
            (a.idx,),
            (lambda g: np.full(sa, g[0, 0]),),
        )

    def mean(self, a: Tensor) -> Tensor:
        va = a.values
        sa = va.shape
        n = va.size
        return self._record(
            np.array([[va.mean()]]),
            (a.idx,),
            (lambda g: np.full(sa, g[0, 0] / n),),
        )

    # ---- layout ops -----------------------------------------------------------------

    def concat_rows(self, parts: list[Tensor]) -> Tensor:
        if not parts:
            raise ContractError("concat of an empty list")
        cols = parts[0].shape[1]
        for p in parts:
            if p.shape[1] != cols:
                raise ShapeError("concat_rows", *(q.shape for q in parts))
        splits = np.cumsum([p.shape[0] for p in parts])[:-1]
        vjps = []
        start = 0
        for p in parts:
            stop = start + p.shape[0]
            vjps.append(lambda g, s=start, e=stop: g[s:e])
            start = stop
        _ = splits
        return self._record(
            np.concatenate([p.values for p in parts], axis=0),
            tuple(p.idx for p in parts),
            tuple(vjps),
        )

    def slice_rows(self, a: Tensor, start: int, stop: int) -> Tensor:
        rows, _ = a.shape
        if not (0 <= start < stop <= rows):
            raise ShapeError(f"slice_rows[{start}:{stop}]", a.shape)
        sa = a.shape

        def vjp(g, s=start, e=stop, shape=sa):
            out = np.zeros(shape)
            out[s:e] = g
            return out

        # row slices of C-ordered arrays are contiguous views; values are
        # treated as read-only so sharing the buffer is safe
        return self._record(a.values[start:stop], (a.idx,), (vjp,))

    def tile_cols(self, a: Tensor, n: int) -> Tensor:
        if a.shape[1] != 1:
            raise ShapeError(f"tile_cols x{n}", a.shape)
        return self._record(
            np.repeat(a.values, n, axis=1),
            (a.idx,),
            (lambda g: g.sum(axis=1, keepdims=True),),
        )

    # ---- backward ------------------------------------------------------------------

    def gradients(self, loss: Tensor) -> Gradients:
        """Backward pass from a scalar loss; does not mutate the tape."""
        if loss.tape is not self:
            raise ContractError("loss tensor belongs to another tape")
        if loss.shape != (1, 1):
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")
        grads: list = [None] * len(self._values)
        grads[loss.idx] = np.ones((1, 1))
        parents = self._parents
        vjps = self._vjps
        needs = self._needs
        for i in range(loss.idx, -1, -1):
            g = grads[i]
            if g is None:
                continue
            ps = parents[i]
            if not ps:
                continue
            fs = vjps[i]
            for p, f in zip(ps, fs):
                if not needs[p]:
                    continue
                contrib = f(g)
                if grads[p] is None:
                    grads[p] = contrib
                else:
                    grads[p] = grads[p] + contrib
        return Gradients(self, grads)


# ---- optimizer -------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment accumulators plus the step counter."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params: dict) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            t=0,
        )


def adam_step(
    params: dict,
    grads: dict,
    state: AdamState,
    lr: float = 0.001,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update; returns new snapshots, inputs untouched."""
    if lr <= 0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    t = state.t + 1
    new_params, new_m, new_v = {}, {}, {}
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ShapeError(f"adam_step[{k}]", p.shape, g.shape)
        m = beta1 * state.m[k] + (1.0 - beta1) * g
        v = beta2 * state.v[k] + (1.0 - beta2) * (g * g)
        new_params[k] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_m[k] = m
        new_v[k] = v
    return new_params, AdamState(m=new_m, v=new_v, t=t)


def clip_by_global_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    norm = math.sqrt(total)
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm
