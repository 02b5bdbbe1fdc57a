"""Minimal reverse-mode autodiff over NumPy arrays.

A :class:`Tensor` wraps an ndarray and remembers how it was produced. Calling
``backward()`` on a scalar walks the recorded graph once in reverse
topological order and accumulates gradients into every reachable tensor with
``requires_grad=True``. Leaves with ``requires_grad=False`` (frozen
parameters, constants, masks) prune the graph behind them.

Elementwise hot paths (gelu, softmax, layer norm, the fused loss ops) run on
the kernel backend selected in :mod:`groundlm.kernels`; matrix products go
straight to ``np.matmul``.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operands do not conform to the operation's shape contract."""


_GRAD_ENABLED = True


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw array data, not another Tensor")
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    # -- introspection ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = self.name or self._op
        return f"Tensor({tag}, shape={self.data.shape}, grad={self.requires_grad})"

    # -- graph --------------------------------------------------------------

    def backward(self):
        """Populate ``grad`` on every trainable tensor reachable from a scalar."""
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.data.shape}")
        if not np.isfinite(self.data):
            raise FloatingPointError(f"non-finite loss value {float(self.data)!r}")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take_slice(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if len(axes) != 1 else axes[0])

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _node(data, parents, backward, op) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    else:
        out._op = op
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- arithmetic ------------------------------------------------------------


def add(a, b):
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a))
    b = _as_tensor(b, a)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(data, (a, b), backward, "add")


def mul(a, b):
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a))
    b = _as_tensor(b, a)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node(data, (a, b), backward, "mul")


def matmul(a, b):
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a))
    b = _as_tensor(b, a)
    a_vec = a.ndim == 1
    b_vec = b.ndim == 1
    ad = a.data[None, :] if a_vec else a.data
    bd = b.data[:, None] if b_vec else b.data
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ for shapes {a.shape} and {b.shape}")
    if ad.ndim > 2 and bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ for shapes {a.shape} and {b.shape}")
    data = np.matmul(ad, bd)
    out_data = data
    if a_vec:
        out_data = out_data[..., 0, :]
    if b_vec:
        out_data = out_data[..., 0] if a_vec else out_data[..., :, 0]

    def backward(g):
        gm = g
        if a_vec and b_vec:
            gm = g.reshape(1, 1)
        elif a_vec:
            gm = g[..., None, :]
        elif b_vec:
            gm = g[..., :, None]
        if a.requires_grad:
            ga = np.matmul(gm, np.swapaxes(bd, -1, -2))
            if ga.ndim > ad.ndim:
                ga = ga.sum(axis=tuple(range(ga.ndim - ad.ndim)))
            _accumulate(a, ga[0] if a_vec else ga)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = np.matmul(ad.reshape(-1, ad.shape[-1]).T, gm.reshape(-1, gm.shape[-1]))
            else:
                gb = np.matmul(np.swapaxes(ad, -1, -2), gm)
            _accumulate(b, gb[:, 0] if b_vec else gb)

    return _node(out_data, (a, b), backward, "matmul")


def reshape(x: Tensor, shape):
    old = x.shape
    data = x.data.reshape(shape)

    def backward(g):
        _accumulate(x, g.reshape(old))

    return _node(data, (x,), backward, "reshape")


def transpose(x: Tensor, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = x.data.transpose(axes)

    def backward(g):
        _accumulate(x, g.transpose(inverse))

    return _node(data, (x,), backward, "transpose")


def take_slice(x: Tensor, key):
    data = x.data[key]

    def backward(g):
        full = np.zeros_like(x.data)
        full[key] = g
        _accumulate(x, full)

    return _node(data, (x,), backward, "slice")


def concat(parts, axis=0):
    parts = list(parts)
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def backward(g):
        offset = 0
        for p, s in zip(parts, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offset, offset + s)
            _accumulate(p, g[tuple(idx)])
            offset += s

    return _node(data, tuple(parts), backward, "concat")


def sum_all(x: Tensor):
    data = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def backward(g):
        _accumulate(x, np.broadcast_to(g, x.shape).astype(x.data.dtype, copy=False) * np.ones_like(x.data))

    return _node(data, (x,), backward, "sum")


def mean_all(x: Tensor):
    n = x.data.size
    data = np.asarray(x.data.mean(), dtype=x.data.dtype)

    def backward(g):
        _accumulate(x, np.full_like(x.data, float(g) / n))

    return _node(data, (x,), backward, "mean")


# -- neural ops ------------------------------------------------------------


def relu(x: Tensor):
    data = np.maximum(x.data, 0)

    def backward(g):
        _accumulate(x, g * (x.data > 0))

    return _node(data, (x,), backward, "relu")


def gelu(x: Tensor):
    kern = kernels.active
    data = kern.gelu_forward(x.data)

    def backward(g):
        _accumulate(x, kern.gelu_backward(g, x.data))

    return _node(data, (x,), backward, "gelu")


def softmax(x: Tensor):
    """Softmax over the last axis; rows sum to one."""
    kern = kernels.active
    flat = np.ascontiguousarray(x.data.reshape(-1, x.shape[-1]))
    y = kern.softmax_forward(flat).reshape(x.shape)

    def backward(g):
        g2 = np.ascontiguousarray(g.reshape(-1, x.shape[-1]))
        y2 = np.ascontiguousarray(y.reshape(-1, x.shape[-1]))
        _accumulate(x, kern.softmax_backward(g2, y2).reshape(x.shape))

    return _node(y, (x,), backward, "softmax")


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5):
    """Layer norm over the last axis with learned gain/bias."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(
            f"layernorm: gain/bias shapes {gain.shape}/{bias.shape} do not match width {x.shape[-1]}"
        )
    kern = kernels.active
    d = x.shape[-1]
    flat = np.ascontiguousarray(x.data.reshape(-1, d))
    y, mu, rstd = kern.layernorm_forward(flat, gain.data, bias.data, eps)

    def backward(g):
        g2 = np.ascontiguousarray(g.reshape(-1, d))
        dx, dgain, dbias = kern.layernorm_backward(g2, flat, mu, rstd, gain.data)
        _accumulate(x, dx.reshape(x.shape))
        _accumulate(gain, dgain)
        _accumulate(bias, dbias)

    return _node(y.reshape(x.shape), (x, gain, bias), backward, "layernorm")


def embedding(table: Tensor, ids: np.ndarray):
    """Row lookup: out[..., :] = table[ids[...]]."""
    ids = np.asarray(ids)
    if ids.min(initial=0) < 0 or (ids.size and ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: id out of range for table with {table.shape[0]} rows")
    data = table.data[ids]

    def backward(g):
        if not table.requires_grad:
            return
        full = np.zeros_like(table.data)
        rows = np.ascontiguousarray(g.reshape(-1, table.shape[1]))
        kernels.active.scatter_add_rows(full, ids.reshape(-1).astype(np.int64), rows)
        _accumulate(table, full)

    return _node(data, (table,), backward, "embedding")


def masked_cross_entropy(logits: Tensor, targets: np.ndarray, flags: np.ndarray):
    """Mean token cross-entropy over flagged positions.

    logits: (..., V); targets/flags: matching leading shape. Raises if no
    position is flagged.
    """
    v = logits.shape[-1]
    flat_flags = np.asarray(flags, dtype=bool).reshape(-1)
    idx = np.nonzero(flat_flags)[0]
    if idx.size == 0:
        raise ValueError("masked_cross_entropy: no masked positions in batch")
    kern = kernels.active
    rows = np.ascontiguousarray(logits.data.reshape(-1, v)[idx])
    tgt = np.asarray(targets).reshape(-1)[idx].astype(np.int64)
    losses, probs = kern.masked_ce_forward(rows, tgt)
    count = idx.size
    data = np.asarray(losses.mean(), dtype=logits.data.dtype)

    def backward(g):
        drows = kern.masked_ce_backward(probs, tgt, float(g) / count)
        full = np.zeros_like(logits.data).reshape(-1, v)
        full[idx] = drows
        _accumulate(logits, full.reshape(logits.shape))

    return _node(data, (logits,), backward, "masked_ce")


def masked_lp_loss(preds: Tensor, targets: np.ndarray, flags: np.ndarray, p: float):
    """Mean over flagged rows of sum(|pred - target|^p) / row_width."""
    d = preds.shape[-1]
    flat_flags = np.asarray(flags, dtype=bool).reshape(-1)
    idx = np.nonzero(flat_flags)[0]
    if idx.size == 0:
        raise ValueError("masked_lp_loss: no masked rows in batch")
    rows = preds.data.reshape(-1, d)[idx]
    tgt = np.asarray(targets).reshape(-1, d)[idx]
    diff = rows - tgt
    denom = idx.size * d
    data = np.asarray((np.abs(diff) ** p).sum() / denom, dtype=preds.data.dtype)

    def backward(g):
        local = p * np.abs(diff) ** (p - 1.0) * np.sign(diff)
        full = np.zeros_like(preds.data).reshape(-1, d)
        full[idx] = local * (float(g) / denom)
        _accumulate(preds, full.reshape(preds.shape))

    return _node(data, (preds,), backward, "masked_lp")


def l1_norm(w: Tensor):
    data = np.asarray(np.abs(w.data).sum(), dtype=w.data.dtype)

    def backward(g):
        _accumulate(w, float(g) * np.sign(w.data))

    return _node(data, (w,), backward, "l1_norm")
