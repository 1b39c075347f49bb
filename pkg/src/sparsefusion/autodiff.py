"""Minimal dense-tensor autodiff engine.

Float64 everywhere, reverse mode, and exactly the primitives the fusion
models need: matmul, residual adds, layer norm, masked softmax, multi-head
attention, GELU, inverted dropout, block pooling, and a log-softmax loss
head. Values are numpy arrays; the graph is a per-result closure chain.
Forward results are immutable once built (only ``grad`` slots mutate).
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

_grad_enabled = True


class NonFiniteError(ArithmeticError):
    """A forward op produced NaN/Inf from finite inputs."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 array plus an optional grad slot and backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def reset_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _make(out: np.ndarray, parents: tuple, bwd) -> Tensor:
    """Wrap an op result; attach the backward closure only when needed."""
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("non-finite value in op output")
    t = Tensor(out)
    if _grad_enabled and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = bwd
    return t


def backward(loss: Tensor):
    """Populate grad slots of every reachable requires-grad leaf.

    Repeated calls on graphs sharing leaves accumulate into their grads;
    call ``reset_grad`` on parameters between steps.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))

    flow: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

    def send(t: Tensor, g: np.ndarray):
        if not t.requires_grad:
            return
        acc = flow.get(id(t))
        flow[id(t)] = g if acc is None else acc + g

    for node in reversed(topo):
        g = flow.pop(id(node), None)
        if g is None:
            continue
        if node._backward is not None:
            node._backward(g, send)
        else:
            node.grad = g if node.grad is None else node.grad + g


# ---------------------------------------------------------------------------
# primitive ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    def bwd(g, send):
        send(a, g)
        send(b, g)
    return _make(a.data + b.data, (a, b), bwd)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-broadcast add: x[n,d] + b[d]."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: {x.shape} vs {b.shape}")
    def bwd(g, send):
        send(x, g)
        send(b, g.sum(axis=0))
    return _make(x.data + b.data, (x, b), bwd)


def mul_const(x: Tensor, c) -> Tensor:
    """Multiply by a constant scalar or array (no grad through c)."""
    c = np.asarray(c, dtype=np.float64)
    def bwd(g, send):
        send(x, g * c)
    return _make(x.data * c, (x,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims {a.shape} x {b.shape}")
    def bwd(g, send):
        send(a, g @ b.data.T)
        send(b, a.data.T @ g)
    return _make(a.data @ b.data, (a, b), bwd)


def concat_rows(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_rows of nothing")
    width = parts[0].shape[1]
    for p in parts:
        if p.data.ndim != 2 or p.shape[1] != width:
            raise ShapeError("concat_rows: column counts differ")
    sizes = [p.shape[0] for p in parts]
    def bwd(g, send):
        ofs = 0
        for p, n in zip(parts, sizes):
            send(p, g[ofs:ofs + n])
            ofs += n
    return _make(np.concatenate([p.data for p in parts], axis=0), tuple(parts), bwd)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    n = x.shape[0]
    if not (0 <= start < stop <= n):
        raise ShapeError(f"slice_rows [{start}:{stop}] of {n} rows")
    def bwd(g, send):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        send(x, full)
    return _make(x.data[start:stop].copy(), (x,), bwd)


def sum_all(x: Tensor) -> Tensor:
    def bwd(g, send):
        send(x, np.full_like(x.data, float(g)))
    return _make(np.asarray(x.data.sum()), (x,), bwd)


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    phi = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    def bwd(g, send):
        send(x, g * (phi + xd * np.exp(-0.5 * xd * xd) * _INV_SQRT2PI))
    return _make(xd * phi, (x,), bwd)


def _masked_softmax(scores: np.ndarray, mask) -> np.ndarray:
    """Stable softmax over the last axis, restricted to allowed entries."""
    if mask is None:
        m = scores.max(axis=-1, keepdims=True)
        e = np.exp(scores - m)
    else:
        neg = np.where(mask, scores, -np.inf)
        m = neg.max(axis=-1, keepdims=True)
        e = np.where(mask, np.exp(scores - m), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def masked_softmax_rows(x: Tensor, mask=None) -> Tensor:
    """Row-wise softmax over allowed entries; disallowed entries are exactly 0.

    ``mask`` is a boolean array broadcastable to x (True = allowed). Every
    row must keep at least one allowed entry.
    """
    if x.data.ndim != 2:
        raise ShapeError("masked_softmax_rows expects a 2-D tensor")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ShapeError(f"mask shape {mask.shape} vs {x.shape}")
        if not mask.any(axis=1).all():
            raise ValueError("masked_softmax_rows: fully masked row")
    out = _masked_softmax(x.data, mask)
    def bwd(g, send):
        dot = (g * out).sum(axis=1, keepdims=True)
        send(x, out * (g - dot))
    return _make(out, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization (population variance) followed by gain/bias."""
    if x.data.ndim != 2:
        raise ShapeError("layer_norm expects a 2-D tensor")
    d = x.shape[1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm: gain/bias must be 1-D of width d")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    def bwd(g, send):
        send(gain, (g * xhat).sum(axis=0))
        send(bias, g.sum(axis=0))
        dxhat = g * gain.data
        term = dxhat - dxhat.mean(axis=1, keepdims=True) \
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        send(x, inv * term)
    return _make(xhat * gain.data + bias.data, (x, gain, bias), bwd)


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout: kept entries scaled by 1/(1-p). Identity in eval."""
    if not training or p <= 0.0:
        return x
    if p >= 1.0:
        raise ValueError("dropout rate must be < 1")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    def bwd(g, send):
        send(x, g * keep)
    return _make(x.data * keep, (x,), bwd)


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax (used by the cross-entropy head)."""
    if x.data.ndim != 2:
        raise ShapeError("log_softmax expects a 2-D tensor")
    m = x.data.max(axis=1, keepdims=True)
    z = x.data - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    def bwd(g, send):
        send(x, g - sm * g.sum(axis=1, keepdims=True))
    return _make(out, (x,), bwd)


def cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """-sum(target * log_softmax(logits)) for a 1xC logits row."""
    target = np.asarray(target, dtype=np.float64)
    if logits.data.ndim != 2 or logits.shape[0] != 1 or target.shape != (logits.shape[1],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs target {target.shape}")
    return mul_const(sum_all(mul_const(log_softmax(logits), target[None, :])), -1.0)


def block_max_pool(x: Tensor, blocks: list[tuple[int, int]]) -> Tensor:
    """Per-channel max over contiguous row blocks; gradient routes to argmax."""
    if x.data.ndim != 2:
        raise ShapeError("block_max_pool expects a 2-D tensor")
    rows = []
    argmax = []
    for start, stop in blocks:
        seg = x.data[start:stop]
        idx = seg.argmax(axis=0) + start
        argmax.append(idx)
        rows.append(x.data[idx, np.arange(x.shape[1])])
    out = np.stack(rows, axis=0)
    cols = np.arange(x.shape[1])
    def bwd(g, send):
        full = np.zeros_like(x.data)
        for j, idx in enumerate(argmax):
            np.add.at(full, (idx, cols), g[j])
        send(x, full)
    return _make(out, (x,), bwd)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, num_heads: int,
                         mask=None) -> tuple[Tensor, np.ndarray]:
    """Scaled dot-product attention with H heads over rows of q/k/v [n,d].

    Returns the concatenated head outputs (pre output-projection) plus the
    detached per-head attention weights [H,n,n], row-stochastic over the
    allowed entries of ``mask`` (boolean [n,n], True = allowed).
    """
    n, d = q.shape
    if k.shape != (n, d) or v.shape != (n, d):
        raise ShapeError("multi_head_attention: q/k/v shapes must match")
    if d % num_heads != 0:
        raise ShapeError(f"dim {d} not divisible by {num_heads} heads")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (n, n):
            raise ShapeError(f"mask shape {mask.shape}, expected {(n, n)}")
        if not mask.any(axis=1).all():
            raise ValueError("attention mask has a fully masked row")
    dh = d // num_heads
    scale = 1.0 / math.sqrt(dh)

    def heads(a: np.ndarray) -> np.ndarray:
        return a.reshape(n, num_heads, dh).transpose(1, 0, 2)

    qh, kh, vh = heads(q.data), heads(k.data), heads(v.data)
    scores = (qh @ kh.transpose(0, 2, 1)) * scale
    w = _masked_softmax(scores, mask)          # [H,n,n]
    out = (w @ vh).transpose(1, 0, 2).reshape(n, d)

    def bwd(g, send):
        gh = heads(g)                          # [H,n,dh]
        dw = gh @ vh.transpose(0, 2, 1)
        dv = w.transpose(0, 2, 1) @ gh
        ds = w * (dw - (dw * w).sum(axis=2, keepdims=True))
        dq = (ds @ kh) * scale
        dk = (ds.transpose(0, 2, 1) @ qh) * scale
        send(q, dq.transpose(1, 0, 2).reshape(n, d))
        send(k, dk.transpose(1, 0, 2).reshape(n, d))
        send(v, dv.transpose(1, 0, 2).reshape(n, d))

    return _make(out, (q, k, v), bwd), w.copy()
