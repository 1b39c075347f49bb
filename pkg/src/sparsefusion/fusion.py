"""Token sparsification and fusion: strided sparse attention over each
modality, sub-sequence pooling down to k tokens, CLS merging, and assembly
of the fused token set handed to the cross-modal stage."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import LayerParams, TokenSet, encoder_layer

POOL_KINDS = ("max", "average", "attention-average")


@dataclass
class PoolSpec:
    """Block pooling to k tokens; stride s = floor(N/k), last block absorbs
    the remainder so the output length is exactly k for any divisibility."""

    kind: str
    keep: int

    def __post_init__(self):
        if self.kind not in POOL_KINDS:
            raise ValueError(f"unknown pool kind {self.kind!r}")
        if self.keep < 1:
            raise ValueError("keep count must be >= 1")

    def stride_for(self, n: int) -> int:
        if self.keep > n:
            raise ValueError(f"keep={self.keep} exceeds {n} tokens")
        return n // self.keep

    def blocks_for(self, n: int) -> list[tuple[int, int]]:
        s = self.stride_for(n)
        edges = [i * s for i in range(self.keep)] + [n]
        return [(edges[i], edges[i + 1]) for i in range(self.keep)]


@dataclass
class StridedMask:
    """Symmetric attention-allow matrix: dense local window of width s plus
    every s-th position, with the CLS row/column fully connected."""

    size: int
    stride: int
    allow: np.ndarray

    @property
    def allowed_entries(self) -> int:
        return int(self.allow.sum())


def build_strided_mask(n: int, stride: int) -> StridedMask:
    """Allow (i,j) for non-CLS tokens iff |i-j| < s or s divides i-j; index 0
    is the CLS token and attends everywhere (and is attended from everywhere)."""
    if n < 1 or stride < 1:
        raise ValueError("need n >= 1 and stride >= 1")
    idx = np.arange(n)
    diff = np.abs(idx[:, None] - idx[None, :])
    allow = (diff < stride) | (diff % stride == 0)
    allow[0, :] = True
    allow[:, 0] = True
    return StridedMask(size=n, stride=stride, allow=allow)


def strided_sparse_attention(x: TokenSet, lp: LayerParams, heads: int,
                             mask: StridedMask, dropout_p: float = 0.0,
                             training: bool = False,
                             rng: np.random.Generator | None = None
                             ) -> tuple[TokenSet, np.ndarray]:
    """One encoder layer whose MSA is restricted to the strided mask.

    Also returns the per-head attention weights for significance pooling.
    """
    if mask.size != x.length:
        raise ad.ShapeError(f"mask side {mask.size} vs {x.length} tokens")
    out, weights = encoder_layer(x.tokens, lp, heads, mask.allow,
                                 dropout_p, training, rng)
    return TokenSet(x.modality, out, x.has_cls), weights


def token_significance(weights: np.ndarray) -> np.ndarray:
    """Attention received per token: column sums of each head's row-stochastic
    weight matrix, summed over heads. Uniform attention gives H everywhere."""
    w = np.asarray(weights)
    if w.ndim != 3 or w.shape[1] != w.shape[2]:
        raise ad.ShapeError(f"expected [H,N,N] weights, got {w.shape}")
    return w.sum(axis=(0, 1))


def pool_tokens(z: Tensor, spec: PoolSpec, sig: np.ndarray | None = None) -> Tensor:
    """Pool an [N,D] token tensor (no CLS) down to [k,D] contiguous blocks.

    max/average are per channel; attention-average weights each block's rows
    by ``sig`` normalized within the block, falling back to a plain average
    for blocks whose significance sums to zero.
    """
    n = z.shape[0]
    blocks = spec.blocks_for(n)
    if spec.kind == "max":
        return ad.block_max_pool(z, blocks)
    pool = np.zeros((spec.keep, n))
    if spec.kind == "average":
        for j, (a, b) in enumerate(blocks):
            pool[j, a:b] = 1.0 / (b - a)
    else:
        if sig is None:
            raise ValueError("attention-average pooling requires significance")
        sig = np.asarray(sig, dtype=np.float64)
        if sig.shape != (n,):
            raise ad.ShapeError(f"significance shape {sig.shape} vs {n} tokens")
        for j, (a, b) in enumerate(blocks):
            total = sig[a:b].sum()
            if total > 0:
                pool[j, a:b] = sig[a:b] / total
            else:
                pool[j, a:b] = 1.0 / (b - a)
    return ad.matmul(ad.constant(pool), z)


def merge_cls(cls_tokens: list[Tensor]) -> Tensor:
    """Elementwise sum of the unimodal classification tokens."""
    if not cls_tokens:
        raise ValueError("no CLS tokens to merge")
    merged = cls_tokens[0]
    for c in cls_tokens[1:]:
        merged = ad.add(merged, c)
    return merged


def fuse(merged_cls: Tensor, pooled: list[Tensor]) -> Tensor:
    """Fused token set: merged CLS first, then each modality's pooled tokens
    in modality order. Length is exactly 1 + sum of keep counts."""
    return ad.concat_rows([merged_cls] + pooled)
