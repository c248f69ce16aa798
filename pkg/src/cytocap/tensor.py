"""Minimal reverse-mode autodiff over numpy arrays.

Covers exactly the kernels needed by the frozen toy language model and the
trainable cross-attention adapter: elementwise arithmetic, matmul, GELU,
tanh, layer norm, softmax, embedding lookup, scaled dot-product attention
and masked cross-entropy. Gradients are recorded on a dynamic graph and
materialized by ``backward`` on a scalar loss.

Compute is float32 by default; gradient checking builds float64 graphs.
All operations are pure numpy and deterministic for fixed inputs.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

GELU_C = math.sqrt(2.0 / math.pi)  # tanh-approximation constant
NEG_INF = -1e9  # finite stand-in for -inf so masked scores stay finite

_grad_enabled = True


class EmptyLossError(ValueError):
    """Raised when a loss is requested over an all-false mask."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (decoding, evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.requires_grad = requires_grad and _grad_enabled
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar, got shape {self.shape}")
        if not self.requires_grad or self._backward is None and not self._parents:
            raise RuntimeError(
                "backward called without a recorded forward graph "
                "(no trainable inputs or no_grad was active)"
            )
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic ----------------------------------------------------------

    @staticmethod
    def _coerce(other, dtype) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=dtype))

    def __add__(self, other) -> "Tensor":
        other = self._coerce(other, self.dtype)
        a, b = self, other
        out_data = a.data + b.data

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.data.shape))

        return Tensor._result(out_data, (a, b), backward)

    __radd__ = __add__

    def __mul__(self, other) -> "Tensor":
        other = self._coerce(other, self.dtype)
        a, b = self, other
        out_data = a.data * b.data

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.data.shape))

        return Tensor._result(out_data, (a, b), backward)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return self * -1.0

    def __sub__(self, other) -> "Tensor":
        return self + (-self._coerce(other, self.dtype))

    def __matmul__(self, other) -> "Tensor":
        other = self._coerce(other, self.dtype)
        a, b = self, other
        if a.data.shape[-1] != b.data.shape[-2]:
            raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
        out_data = a.data @ b.data

        def backward(g):
            if a.requires_grad:
                ga = g @ _swap_last(b.data)
                a._accumulate(_unbroadcast(ga, a.data.shape))
            if b.requires_grad:
                gb = _swap_last(a.data) @ g
                b._accumulate(_unbroadcast(gb, b.data.shape))

        return Tensor._result(out_data, (a, b), backward)

    # -- shape ops -----------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        out_data = a.data.reshape(shape)

        def backward(g):
            a._accumulate(g.reshape(a.data.shape))

        return Tensor._result(out_data, (a,), backward)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        a = self
        inv = np.argsort(axes)
        out_data = a.data.transpose(axes)

        def backward(g):
            a._accumulate(g.transpose(inv))

        return Tensor._result(out_data, (a,), backward)

    # -- nonlinearities --------------------------------------------------------

    def tanh(self) -> "Tensor":
        a = self
        t = np.tanh(a.data)

        def backward(g):
            a._accumulate(g * (1.0 - t * t))

        return Tensor._result(t, (a,), backward)

    def gelu(self) -> "Tensor":
        """GELU, tanh approximation (fixed across the package for reproducible references)."""
        a = self
        x = a.data
        inner = GELU_C * (x + 0.044715 * x**3)
        t = np.tanh(inner)
        out_data = 0.5 * x * (1.0 + t)

        def backward(g):
            dinner = GELU_C * (1.0 + 3 * 0.044715 * x * x)
            da = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
            a._accumulate(g * da)

        return Tensor._result(out_data, (a,), backward)


class Parameter(Tensor):
    """Named model tensor. ``trainable`` gates gradient recording entirely."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, name: str, trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name = name
        self.trainable = trainable

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.data.shape}, trainable={self.trainable})"


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


# -- fused ops -----------------------------------------------------------------


def gelu(x: Tensor) -> Tensor:
    return x.gelu()


def tanh(x: Tensor) -> Tensor:
    return x.tanh()


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply affine."""
    if x.shape[-1] != gamma.shape[-1] or x.shape[-1] != beta.shape[-1]:
        raise ValueError(
            f"layer_norm last-axis mismatch: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}"
        )
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out_data = xhat * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate(_unbroadcast(g * xhat, gamma.data.shape))
        if beta.requires_grad:
            beta._accumulate(_unbroadcast(g, beta.data.shape))
        if x.requires_grad:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(inv * (dxhat - m1 - xhat * m2))

    return Tensor._result(out_data, (x, gamma, beta), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        x._accumulate(s * (g - dot))

    return Tensor._result(s, (x,), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; backward scatter-adds into the table gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    out_data = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        table._accumulate(gt)

    return Tensor._result(out_data, (table,), backward)


def attention(q: Tensor, k: Tensor, v: Tensor, causal_mask: bool = False) -> Tensor:
    """softmax(q k^T / sqrt(d)) v over the last two axes.

    With ``causal_mask`` each query position attends only to keys at the same
    or earlier positions (requires equal query/key lengths). Masked scores use
    a large negative constant so every intermediate stays finite; the masked
    attention weights underflow to exactly zero.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"attention head-dim mismatch: q {q.shape} vs k {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"attention key/value length mismatch: k {k.shape} vs v {v.shape}")
    d = q.shape[-1]
    scores = q @ _transpose_last(k)
    scores = scores * (1.0 / math.sqrt(d))
    if causal_mask:
        tq, tk = q.shape[-2], k.shape[-2]
        if tq != tk:
            raise ValueError(f"causal attention requires square scores, got {tq}x{tk}")
        mask = np.triu(np.full((tq, tk), NEG_INF, dtype=scores.dtype), k=1)
        scores = scores + Tensor(mask)
    weights = softmax(scores, axis=-1)
    return weights @ v


def _transpose_last(t: Tensor) -> Tensor:
    axes = list(range(t.data.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return t.transpose(axes)


def masked_cross_entropy(logits: Tensor, targets, loss_mask) -> Tensor:
    """Mean negative log-likelihood over positions where ``loss_mask`` is true.

    ``targets`` and ``loss_mask`` cover the leading axes of ``logits``; masked-out
    positions are never read, so their target values cannot affect the loss.
    """
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(loss_mask, dtype=bool)
    if targets.shape != mask.shape or targets.shape != logits.shape[:-1]:
        raise ValueError(
            f"masked_cross_entropy shape mismatch: logits {logits.shape}, "
            f"targets {targets.shape}, mask {mask.shape}"
        )
    flat_idx = np.nonzero(mask.reshape(-1))[0]
    if flat_idx.size == 0:
        raise EmptyLossError("loss mask selects no positions")
    vocab = logits.shape[-1]
    flat = logits.data.reshape(-1, vocab)
    sel = flat[flat_idx]
    tsel = targets.reshape(-1)[flat_idx]
    shifted = sel - sel.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1)) + sel.max(axis=-1)
    nll = lse - sel[np.arange(flat_idx.size), tsel]
    out_data = np.asarray(nll.mean(), dtype=logits.dtype)

    def backward(g):
        p = np.exp(shifted)
        p /= p.sum(axis=-1, keepdims=True)
        p[np.arange(flat_idx.size), tsel] -= 1.0
        p *= g / flat_idx.size
        gfull = np.zeros_like(flat)
        gfull[flat_idx] = p
        logits._accumulate(gfull.reshape(logits.shape))

    return Tensor._result(out_data, (logits,), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = x @ w
    if b is not None:
        out = out + b
    return out


def backward(loss: Tensor) -> None:
    """Spec-level alias: run reverse-mode differentiation from a scalar loss."""
    loss.backward()


def collect_gradients(params: Iterable[Parameter]) -> dict[str, np.ndarray]:
    """Gradients by name for trainable parameters that received one."""
    out = {}
    for p in params:
        if p.trainable and p.grad is not None:
            out[p.name] = p.grad
    return out
