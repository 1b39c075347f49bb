"""Per-modality transformer encoder: input projection, CLS prepending,
learned positions, and pre-norm MSA/MLP layers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MLP_RATIO = 4


@dataclass
class TokenSet:
    """One modality's token sequence; CLS sits at row 0 when present."""

    modality: str
    tokens: Tensor
    has_cls: bool = False

    def __post_init__(self):
        if self.tokens.data.ndim != 2 or self.tokens.shape[0] < 1:
            raise ad.ShapeError(f"token set must be [N,D], got {self.tokens.shape}")

    @property
    def length(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


@dataclass
class LayerParams:
    """Weights of one transformer layer (MSA + MLP, pre-norm)."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def named(self, prefix: str):
        for name in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                     "ln1_g", "ln1_b", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2"):
            yield f"{prefix}.{name}", getattr(self, name)


@dataclass
class EncoderParams:
    """One modality's encoder: projection, CLS, positions, layer stack."""

    proj_w: Tensor
    proj_b: Tensor
    cls: Tensor
    pos: Tensor
    layers: list[LayerParams] = field(default_factory=list)

    def named(self, prefix: str):
        yield f"{prefix}.proj_w", self.proj_w
        yield f"{prefix}.proj_b", self.proj_b
        yield f"{prefix}.cls", self.cls
        yield f"{prefix}.pos", self.pos
        for i, lp in enumerate(self.layers):
            yield from lp.named(f"{prefix}.layer{i}")


def affine_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_layer(rng: np.random.Generator, dim: int) -> LayerParams:
    hidden = MLP_RATIO * dim
    return LayerParams(
        wq=ad.parameter(affine_init(rng, dim, dim)),
        bq=ad.parameter(np.zeros(dim)),
        wk=ad.parameter(affine_init(rng, dim, dim)),
        bk=ad.parameter(np.zeros(dim)),
        wv=ad.parameter(affine_init(rng, dim, dim)),
        bv=ad.parameter(np.zeros(dim)),
        wo=ad.parameter(affine_init(rng, dim, dim)),
        bo=ad.parameter(np.zeros(dim)),
        ln1_g=ad.parameter(np.ones(dim)),
        ln1_b=ad.parameter(np.zeros(dim)),
        ln2_g=ad.parameter(np.ones(dim)),
        ln2_b=ad.parameter(np.zeros(dim)),
        w1=ad.parameter(affine_init(rng, dim, hidden)),
        b1=ad.parameter(np.zeros(hidden)),
        w2=ad.parameter(affine_init(rng, hidden, dim)),
        b2=ad.parameter(np.zeros(dim)),
    )


def init_encoder(rng: np.random.Generator, dim_in: int, dim: int,
                 n_tokens: int, depth: int) -> EncoderParams:
    return EncoderParams(
        proj_w=ad.parameter(affine_init(rng, dim_in, dim)),
        proj_b=ad.parameter(np.zeros(dim)),
        cls=ad.parameter(rng.normal(0.0, 0.02, size=(1, dim))),
        pos=ad.parameter(rng.normal(0.0, 0.02, size=(n_tokens + 1, dim))),
        layers=[init_layer(rng, dim) for _ in range(depth)],
    )


def project_and_embed(raw: np.ndarray, params: EncoderParams,
                      modality: str = "") -> TokenSet:
    """Project raw features to model width, prepend CLS, add positions."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[1] != params.proj_w.shape[0]:
        raise ad.ShapeError(
            f"{modality or 'modality'}: raw features {raw.shape} do not match "
            f"projection input dim {params.proj_w.shape[0]}")
    n = raw.shape[0]
    if params.pos.shape[0] < n + 1:
        raise ad.ShapeError(f"positional table {params.pos.shape[0]} < {n + 1}")
    proj = ad.add_bias(ad.matmul(ad.constant(raw), params.proj_w), params.proj_b)
    seq = ad.concat_rows([params.cls, proj])
    pos = params.pos if params.pos.shape[0] == n + 1 else ad.slice_rows(params.pos, 0, n + 1)
    return TokenSet(modality, ad.add(seq, pos), has_cls=True)


def encoder_layer(x: Tensor, lp: LayerParams, heads: int, mask=None,
                  dropout_p: float = 0.0, training: bool = False,
                  rng: np.random.Generator | None = None) -> tuple[Tensor, np.ndarray]:
    """One pre-norm layer: x + MSA(LN(x)), then + MLP(LN(.)).

    Returns the output tokens and the detached per-head attention weights.
    """
    if mask is not None and np.asarray(mask).shape != (x.shape[0], x.shape[0]):
        raise ad.ShapeError(
            f"mask side {np.asarray(mask).shape} vs {x.shape[0]} tokens")
    normed = ad.layer_norm(x, lp.ln1_g, lp.ln1_b)
    q = ad.add_bias(ad.matmul(normed, lp.wq), lp.bq)
    k = ad.add_bias(ad.matmul(normed, lp.wk), lp.bk)
    v = ad.add_bias(ad.matmul(normed, lp.wv), lp.bv)
    attn, weights = ad.multi_head_attention(q, k, v, heads, mask)
    attn = ad.add_bias(ad.matmul(attn, lp.wo), lp.bo)
    attn = ad.dropout(attn, dropout_p, rng, training)
    y = ad.add(x, attn)

    normed2 = ad.layer_norm(y, lp.ln2_g, lp.ln2_b)
    h = ad.gelu(ad.add_bias(ad.matmul(normed2, lp.w1), lp.b1))
    h = ad.add_bias(ad.matmul(h, lp.w2), lp.b2)
    h = ad.dropout(h, dropout_p, rng, training)
    return ad.add(y, h), weights


def unimodal_encode(x: TokenSet, params: EncoderParams, heads: int,
                    dropout_p: float = 0.0, training: bool = False,
                    rng: np.random.Generator | None = None) -> TokenSet:
    """Apply the full layer stack; L=0 is the identity."""
    t = x.tokens
    for lp in params.layers:
        t, _ = encoder_layer(t, lp, heads, None, dropout_p, training, rng)
    return TokenSet(x.modality, t, x.has_cls)
