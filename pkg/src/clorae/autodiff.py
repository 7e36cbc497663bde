"""Dense float64 tensors with reverse-mode automatic differentiation.

Small graph-based engine in the micrograd style, vectorized over numpy
arrays. Every op records a backward closure; `Tensor.backward()` walks the
graph in reverse topological order. Evaluation code wraps itself in
`no_grad()` so no graph is built.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

Array = np.ndarray


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


_grad_enabled = True


def grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (cheap evaluation path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(x) -> Array:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum gradient `g` down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Tensor:
    """A dense float64 array plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], None] | None = None

    # -- graph plumbing ----------------------------------------------------

    @staticmethod
    def _node(data: Array, parents: tuple["Tensor", ...],
              backward: Callable[[Array], None]) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        return out

    @staticmethod
    def _result(data: Array, parents: tuple["Tensor", ...],
                backward: Callable[[Array], None]) -> "Tensor":
        if _grad_enabled and any(p.requires_grad for p in parents):
            return Tensor._node(data, parents, backward)
        return Tensor(data)

    def _accum(self, g: Array) -> None:
        self.grad = g if self.grad is None else self.grad + g

    def backward(self) -> None:
        """Populate `grad` of every reachable tensor with d(self)/d(tensor).

        `self` must hold a single element (a scalar loss).
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward() requires a scalar tensor, got shape {self.data.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and p.requires_grad:
                    stack.append((p, False))
        self._accum(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def detach(self) -> "Tensor":
        """Same values, cut from the graph (no gradient flows through)."""
        return Tensor(self.data)

    # -- inspection ----------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- elementwise arithmetic ----------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            data = self.data + other.data

            def bw(g, a=self, b=other):
                if a.requires_grad:
                    a._accum(_unbroadcast(g, a.data.shape))
                if b.requires_grad:
                    b._accum(_unbroadcast(g, b.data.shape))

            return Tensor._result(data, (self, other), bw)
        c = _as_array(other)
        data = self.data + c

        def bwc(g, a=self):
            a._accum(_unbroadcast(g, a.data.shape))

        return Tensor._result(data, (self,), bwc)

    __radd__ = __add__

    def __neg__(self):
        def bw(g, a=self):
            a._accum(-g)

        return Tensor._result(-self.data, (self,), bw)

    def __sub__(self, other):
        return self + (-other if isinstance(other, Tensor) else -_as_array(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Tensor):
            data = self.data * other.data

            def bw(g, a=self, b=other):
                if a.requires_grad:
                    a._accum(_unbroadcast(g * b.data, a.data.shape))
                if b.requires_grad:
                    b._accum(_unbroadcast(g * a.data, b.data.shape))

            return Tensor._result(data, (self, other), bw)
        c = _as_array(other)

        def bwc(g, a=self, c=c):
            a._accum(_unbroadcast(g * c, a.data.shape))

        return Tensor._result(self.data * c, (self,), bwc)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            data = self.data / other.data

            def bw(g, a=self, b=other):
                if a.requires_grad:
                    a._accum(_unbroadcast(g / b.data, a.data.shape))
                if b.requires_grad:
                    b._accum(_unbroadcast(-g * a.data / (b.data * b.data),
                                          b.data.shape))

            return Tensor._result(data, (self, other), bw)
        c = _as_array(other)

        def bwc(g, a=self, c=c):
            a._accum(_unbroadcast(g / c, a.data.shape))

        return Tensor._result(self.data / c, (self,), bwc)

    def __rtruediv__(self, other):
        c = _as_array(other)
        data = c / self.data

        def bw(g, a=self, c=c):
            a._accum(_unbroadcast(-g * c / (a.data * a.data), a.data.shape))

        return Tensor._result(data, (self,), bw)

    def __pow__(self, exponent):
        n = float(exponent)
        data = self.data ** n

        def bw(g, a=self, n=n):
            a._accum(g * n * a.data ** (n - 1.0))

        return Tensor._result(data, (self,), bw)

    # -- matmul ----------------------------------------------------------------

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    # -- pointwise functions -----------------------------------------------------

    def exp(self) -> "Tensor":
        data = np.exp(self.data)

        def bw(g, a=self, y=data):
            a._accum(g * y)

        return Tensor._result(data, (self,), bw)

    def log(self) -> "Tensor":
        def bw(g, a=self):
            a._accum(g / a.data)

        return Tensor._result(np.log(self.data), (self,), bw)

    def tanh(self) -> "Tensor":
        data = np.tanh(self.data)

        def bw(g, a=self, y=data):
            a._accum(g * (1.0 - y * y))

        return Tensor._result(data, (self,), bw)

    def relu(self) -> "Tensor":
        data = np.maximum(self.data, 0.0)

        def bw(g, a=self):
            a._accum(g * (a.data > 0.0))

        return Tensor._result(data, (self,), bw)

    def softplus(self) -> "Tensor":
        data = np.logaddexp(0.0, self.data)

        def bw(g, a=self):
            # d softplus / dx = sigmoid(x), via tanh for stability
            a._accum(g * 0.5 * (1.0 + np.tanh(0.5 * a.data)))

        return Tensor._result(data, (self,), bw)

    # -- reductions ------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        data = self.data.sum(axis=axis, keepdims=keepdims)

        def bw(g, a=self, axis=axis, keepdims=keepdims):
            if axis is None:
                a._accum(np.broadcast_to(g.reshape(()), a.data.shape).copy())
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.data.shape).copy())

        return Tensor._result(data, (self,), bw)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.data.size
        elif isinstance(axis, tuple):
            count = int(np.prod([self.data.shape[i] for i in axis]))
        else:
            count = self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- shape ops ------------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        data = self.data.reshape(shape)

        def bw(g, a=self):
            a._accum(g.reshape(a.data.shape))

        return Tensor._result(data, (self,), bw)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = tuple(np.argsort(axes))
        data = self.data.transpose(axes)

        def bw(g, a=self, inv=inv):
            a._accum(g.transpose(inv))

        return Tensor._result(data, (self,), bw)

    def __getitem__(self, idx) -> "Tensor":
        data = self.data[idx]
        advanced = _has_advanced_index(idx)

        def bw(g, a=self, idx=idx, advanced=advanced):
            buf = np.zeros_like(a.data)
            if advanced:
                np.add.at(buf, idx, g)
            else:
                buf[idx] += g
            a._accum(buf)

        out_data = data if data.flags.owndata else data.copy()
        return Tensor._result(out_data, (self,), bw)


def _has_advanced_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (np.ndarray, list)) for i in items)


# -- free functions ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching semantics over leading axes."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(
            f"matmul needs >=2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def bw(g, a=a, b=b):
        if a.requires_grad:
            a._accum(_unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape))

    return Tensor._result(data, (a, b), bw)


def linear(x: Tensor, w: Tensor) -> Tensor:
    """x @ w.T for a 2-d weight; the hot path of every projection."""
    if w.data.ndim != 2:
        raise ShapeError(f"linear expects a 2-d weight, got {w.data.shape}")
    if x.data.shape[-1] != w.data.shape[-1]:
        raise ShapeError(
            f"linear dimensions disagree: {x.data.shape} vs weight {w.data.shape}")
    data = x.data @ w.data.T

    def bw(g, x=x, w=w):
        if x.requires_grad:
            x._accum(g @ w.data)
        if w.requires_grad:
            d_out, d_in = w.data.shape
            w._accum(g.reshape(-1, d_out).T @ x.data.reshape(-1, d_in))

    return Tensor._result(data, (x, w), bw)


def matmul_nt(a: Tensor, b: Tensor, scale: float = 1.0) -> Tensor:
    """scale * (a @ b^T) over the last two axes (attention scores)."""
    data = (a.data @ b.data.swapaxes(-1, -2)) * scale

    def bw(g, a=a, b=b, scale=scale):
        gs = g * scale if scale != 1.0 else g
        if a.requires_grad:
            a._accum(gs @ b.data)
        if b.requires_grad:
            b._accum(gs.swapaxes(-1, -2) @ a.data)

    return Tensor._result(data, (a, b), bw)


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """[B, T, D] -> [B, H, T, D/H]."""
    b, t, d = x.data.shape
    hd = d // n_heads
    data = x.data.reshape(b, t, n_heads, hd).transpose(0, 2, 1, 3)

    def bw(g, x=x, b=b, t=t, d=d):
        x._accum(g.transpose(0, 2, 1, 3).reshape(b, t, d))

    return Tensor._result(data, (x,), bw)


def merge_heads(x: Tensor) -> Tensor:
    """[B, H, T, hd] -> [B, T, H*hd]."""
    b, h, t, hd = x.data.shape
    data = x.data.transpose(0, 2, 1, 3).reshape(b, t, h * hd)

    def bw(g, x=x, b=b, h=h, t=t, hd=hd):
        x._accum(g.reshape(b, t, h, hd).transpose(0, 2, 1, 3))

    return Tensor._result(data, (x,), bw)


def masked_softmax(x: Tensor, add_mask: Array, axis: int = -1) -> Tensor:
    """softmax(x + add_mask) with the mask treated as a constant."""
    z = x.data + add_mask
    z -= z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g, x=x, y=y, axis=axis):
        dot = (g * y).sum(axis=axis, keepdims=True)
        x._accum(y * (g - dot))

    return Tensor._result(y, (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    datas = [t.data for t in tensors]
    data = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def bw(g, tensors=tuple(tensors), axis=axis, offsets=offsets):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(offsets[i], offsets[i + 1])
                t._accum(g[tuple(sl)])

    return Tensor._result(data, tuple(tensors), bw)


def embedding(table: Tensor, ids: Array) -> Tensor:
    """Row gather: out[..., :] = table[ids[...], :]."""
    ids = np.asarray(ids)
    data = table.data[ids]

    def bw(g, table=table, ids=ids):
        buf = np.zeros_like(table.data)
        np.add.at(buf, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        table._accum(buf)

    return Tensor._result(data, (table,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along `axis` (max-subtracted; the shift carries no grad)."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g, x=x, y=y, axis=axis):
        dot = (g * y).sum(axis=axis, keepdims=True)
        x._accum(y * (g - dot))

    return Tensor._result(y, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True)) + m
    data = x.data - lse

    def bw(g, x=x, data=data, axis=axis):
        x._accum(g - np.exp(data) * g.sum(axis=axis, keepdims=True))

    return Tensor._result(data, (x,), bw)


def cross_entropy(logits: Tensor, targets: Array, ignore_index: int = -1) -> Tensor:
    """Mean negative log-likelihood over positions whose target is not ignored.

    `logits` is [positions, vocab]; `targets` an integer vector. An empty
    effective target set yields loss 0 with zero gradient.
    """
    targets = np.asarray(targets)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects 2-d logits, got {logits.data.shape}")
    if targets.shape != (logits.data.shape[0],):
        raise ShapeError(
            f"targets shape {targets.shape} does not match logits rows "
            f"{logits.data.shape[0]}")
    valid = targets != ignore_index
    n_valid = int(valid.sum())
    if n_valid == 0:
        return Tensor(0.0)
    safe_targets = np.where(valid, targets, 0)
    if safe_targets.min() < 0 or safe_targets.max() >= logits.data.shape[1]:
        raise ValueError("target id outside vocabulary range")
    m = logits.data.max(axis=1, keepdims=True)
    shifted = logits.data - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True)) + m
    rows = np.arange(logits.data.shape[0])
    nll = lse[:, 0] - logits.data[rows, safe_targets]
    data = np.asarray(nll[valid].mean())

    def bw(g, logits=logits, lse=lse, valid=valid, n_valid=n_valid,
           safe_targets=safe_targets):
        p = np.exp(logits.data - lse)
        p[np.arange(p.shape[0]), safe_targets] -= 1.0
        p *= (valid / n_valid)[:, None]
        logits._accum(g.reshape(()) * p)

    return Tensor._result(data, (logits,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = gain.data * xhat + bias.data

    def bw(g, x=x, gain=gain, bias=bias, xhat=xhat, inv=inv):
        if gain.requires_grad:
            gain._accum((g * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0))
        if bias.requires_grad:
            bias._accum(g.reshape(-1, g.shape[-1]).sum(axis=0))
        if x.requires_grad:
            gh = g * gain.data
            mean_gh = gh.mean(axis=-1, keepdims=True)
            mean_ghx = (gh * xhat).mean(axis=-1, keepdims=True)
            x._accum(inv * (gh - mean_gh - xhat * mean_ghx))

    return Tensor._result(data, (x, gain, bias), bw)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: scales kept activations by 1/(1-p). Train-time only;
    callers use the identity at evaluation."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    mask = (rng.random(x.data.shape) >= p) / (1.0 - p)
    data = x.data * mask

    def bw(g, x=x, mask=mask):
        x._accum(g * mask)

    return Tensor._result(data, (x,), bw)
