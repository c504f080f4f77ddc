"""Dense tensors with define-by-run reverse-mode differentiation.

Operations record themselves on the active :class:`Tape` (see ``with Tape():``)
whenever one of their operands requires a gradient. Without an active tape the
same functions simply compute values, which is what evaluation code relies on.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

EPS_BN = 1e-5
BN_MOMENTUM = 0.1
EPS_NORM = 1e-8

_DTYPE = np.float64
_local = threading.local()


class DimensionError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def set_default_dtype(dtype) -> None:
    """Switch the dtype new tensors are created with (float64 or float32)."""
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float64, np.float32):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype.type


def get_default_dtype():
    return _DTYPE


class Tensor:
    """A dense array plus an optional gradient slot.

    Equality is identity, so tensors can key the gradient map returned by
    :func:`backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, check: bool = True):
        arr = np.asarray(data, dtype=_DTYPE)
        if check and not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor of shape {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, c: float) -> "Tensor":
        return scale(self, c)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, scale(other, -1.0))


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of operations for one forward pass.

    Use as a context manager to make it the active tape for the current
    thread; tapes nest, the innermost one records.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        stack = _stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: tuple, output: Tensor, backward) -> None:
        self.nodes.append(Node(op, inputs, output, backward))
        self._produced.add(id(output))

    def backward(self, loss: Tensor, wrt: Optional[Iterable[Tensor]] = None) -> dict:
        return backward(self, loss, wrt)


def _stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Optional[Tape]:
    stack = _stack()
    return stack[-1] if stack else None


def _make(op: str, out: np.ndarray, inputs: tuple, backward) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op} produced non-finite values")
    needs = any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs, check=False)
    tape = active_tape()
    if needs and tape is not None:
        tape.record(op, inputs, result, backward)
    return result


def backward(tape: Tape, loss: Tensor, wrt: Optional[Iterable[Tensor]] = None) -> dict:
    """Sweep ``tape`` in reverse from the scalar ``loss``.

    Gradients accumulate over every use of a tensor. Each leaf that requires a
    gradient gets its ``.grad`` set; leaves listed in ``wrt`` but never reached
    get zeros. Returns ``{leaf: gradient}``.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if id(loss) not in tape._produced:
        raise ValueError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        in_grads = node.backward(g_out)
        for t, g in zip(node.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
            if key not in tape._produced:
                leaves[key] = t
    result = {}
    for key, t in leaves.items():
        t.grad = grads[key]
        result[t] = t.grad
    for t in wrt or ():
        if t not in result:
            t.grad = np.zeros_like(t.data)
            result[t] = t.grad
    return result


# ---------------------------------------------------------------- operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    A, B = a.data, b.data

    def back(g):
        return (g @ B.T if a.requires_grad else None,
                A.T @ g if b.requires_grad else None)

    return _make("matmul", A @ B, (a, b), back)


def affine(x: Tensor, W: Tensor, bias: Tensor) -> Tensor:
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[0]:
        raise DimensionError(f"affine shape mismatch: x {x.shape}, W {W.shape}")
    if bias.shape != (W.shape[1],):
        raise DimensionError(f"affine bias shape {bias.shape} does not match W {W.shape}")
    X, M = x.data, W.data

    def back(g):
        return (g @ M.T if x.requires_grad else None,
                X.T @ g if W.requires_grad else None,
                g.sum(axis=0) if bias.requires_grad else None)

    return _make("affine", X @ M + bias.data, (x, W, bias), back)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}")
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def total(a: Tensor) -> Tensor:
    """Sum of all entries as a scalar tensor."""
    shape = a.shape
    return _make("sum", np.asarray(a.data.sum()), (a,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` of a 2-D tensor."""
    shape, dtype = x.shape, x.data.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        full[start:stop] = g
        return (full,)

    return _make("rows", x.data[start:stop].copy(), (x,), back)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make("relu", np.where(mask, x.data, 0.0).astype(x.data.dtype), (x,),
                 lambda g: (g * mask,))


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM

    @classmethod
    def fresh(cls, width: int) -> "BatchNormState":
        return cls(np.zeros(width, dtype=_DTYPE), np.ones(width, dtype=_DTYPE))


def batch_norm(x: Tensor, gamma: Tensor, beta_shift: Tensor, state: BatchNormState,
               mode: str = "train") -> Tensor:
    """Per-feature normalization; train mode also updates ``state`` in place."""
    if x.data.ndim != 2 or gamma.shape != (x.shape[1],) or beta_shift.shape != (x.shape[1],):
        raise DimensionError(
            f"batch_norm shape mismatch: x {x.shape}, gamma {gamma.shape}, shift {beta_shift.shape}")
    X = x.data
    if mode == "eval":
        inv = 1.0 / np.sqrt(state.running_var + EPS_BN)
        xhat = (X - state.running_mean) * inv
        gm = gamma.data

        def back_eval(g):
            return (g * gm * inv if x.requires_grad else None,
                    (g * xhat).sum(axis=0) if gamma.requires_grad else None,
                    g.sum(axis=0) if beta_shift.requires_grad else None)

        return _make("batch_norm", xhat * gm + beta_shift.data, (x, gamma, beta_shift), back_eval)
    if mode != "train":
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    n = X.shape[0]
    if n < 2:
        raise ValueError(f"batch_norm in train mode needs batch size >= 2, got {n}")
    mean = X.mean(axis=0)
    var = X.var(axis=0)
    inv = 1.0 / np.sqrt(var + EPS_BN)
    xhat = (X - mean) * inv
    m = state.momentum
    state.running_mean = (1 - m) * state.running_mean + m * mean
    state.running_var = (1 - m) * state.running_var + m * var * n / (n - 1)
    gm = gamma.data

    def back(g):
        dxhat = g * gm
        dx = None
        if x.requires_grad:
            dx = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        return (dx,
                (g * xhat).sum(axis=0) if gamma.requires_grad else None,
                g.sum(axis=0) if beta_shift.requires_grad else None)

    return _make("batch_norm", xhat * gm + beta_shift.data, (x, gamma, beta_shift), back)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    L = logits.data
    if L.ndim != 2:
        raise DimensionError(f"logits must be 2-D, got {L.shape}")
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    b, k = L.shape
    if y.shape[0] != b:
        raise DimensionError(f"{y.shape[0]} labels for {b} logit rows")
    if b == 0:
        raise ValueError("empty batch")
    if np.any(y < 0) or np.any(y >= k):
        raise ValueError(f"label out of range [0, {k})")
    z = L - L.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    nll = logsum - z[np.arange(b), y]
    probs = np.exp(z - logsum[:, None])

    def back(g):
        d = probs.copy()
        d[np.arange(b), y] -= 1.0
        return (d * (g / b),)

    return _make("softmax_cross_entropy", np.asarray(nll.mean()), (logits,), back)


def grl(x: Tensor, coeff: float) -> Tensor:
    """Gradient reversal: identity forward, ``-coeff`` times the gradient backward."""
    coeff = float(coeff)
    if coeff < 0:
        raise ValueError(f"grl coefficient must be >= 0, got {coeff}")
    return _make("grl", x.data.copy(), (x,), lambda g: (g * -coeff,))


def cosine_similarity_mean(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine similarity averaged over the batch.

    ``EPS_NORM`` is added to each norm product so zero rows give 0.
    """
    if a.shape != b.shape or a.data.ndim != 2:
        raise DimensionError(f"cosine similarity shape mismatch: {a.shape} vs {b.shape}")
    A, B = a.data, b.data
    n = A.shape[0]
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    den = na * nb + EPS_NORM
    dot = np.einsum("ij,ij->i", A, B)
    sim = dot / den

    def back(g):
        w = g / n
        ga = gb = None
        if a.requires_grad:
            # d|a|/da = a/|a|, zero where the row vanishes
            unit_a = np.divide(A, na[:, None], out=np.zeros_like(A), where=na[:, None] > 0)
            ga = w * (B / den[:, None] - (dot * nb / den**2)[:, None] * unit_a)
        if b.requires_grad:
            unit_b = np.divide(B, nb[:, None], out=np.zeros_like(B), where=nb[:, None] > 0)
            gb = w * (A / den[:, None] - (dot * na / den**2)[:, None] * unit_b)
        return ga, gb

    return _make("cosine_similarity_mean", np.asarray(sim.mean()), (a, b), back)
