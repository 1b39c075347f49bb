"""Full classification networks built from the encoder/fusion blocks:

* ``sft``      unimodal encoders -> strided sparse attention -> pooling ->
               fused cross-modal transformer -> MLP head
* ``sft-po``   same but pooling only (no sparse-attention layer)
* ``concat``   all projected tokens concatenated, one dense transformer
* ``lf``       independent unimodal transformers, summed logits
* ``unimodal:<name>``  single-modality transformer classifier

plus the versioned binary checkpoint container.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import (EncoderParams, LayerParams, TokenSet, encoder_layer,
                      init_encoder, init_layer, project_and_embed, affine_init)
from .fusion import (PoolSpec, build_strided_mask, fuse, merge_cls,
                     pool_tokens, strided_sparse_attention, token_significance)
from .mixup import mix_latent

CHECKPOINT_MAGIC = b"SFTM"
CHECKPOINT_VERSION = 1


@dataclass
class ModalityConfig:
    name: str
    dim_in: int
    n_tokens: int
    keep: int

    def __post_init__(self):
        if self.n_tokens < 1 or self.dim_in < 1:
            raise ValueError(f"{self.name}: bad token geometry")
        if not (1 <= self.keep <= self.n_tokens):
            raise ValueError(f"{self.name}: keep={self.keep} not in [1, {self.n_tokens}]")


@dataclass
class ModelConfig:
    modalities: list[ModalityConfig]
    dim: int
    heads: int
    unimodal_depth: int
    cross_depth: int
    num_classes: int
    pool_kind: str = "average"
    dropout: float = 0.2
    # baseline experiment knobs: max-pool after the first layer, and the
    # keep count for the concatenated sequence in the concat variant
    baseline_pool_after_first: bool = False
    concat_keep: int | None = None

    def __post_init__(self):
        if not self.modalities:
            raise ValueError("need at least one modality")
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by {self.heads} heads")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.unimodal_depth < 0 or self.cross_depth < 0:
            raise ValueError("depths must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def num_modalities(self) -> int:
        return len(self.modalities)

    @property
    def fused_tokens(self) -> int:
        return 1 + sum(m.keep for m in self.modalities)

    @property
    def total_tokens(self) -> int:
        return sum(m.n_tokens for m in self.modalities)

    def to_dict(self) -> dict:
        return {
            "modalities": [{"name": m.name, "dim_in": m.dim_in,
                            "n_tokens": m.n_tokens, "keep": m.keep}
                           for m in self.modalities],
            "dim": self.dim, "heads": self.heads,
            "unimodal_depth": self.unimodal_depth,
            "cross_depth": self.cross_depth,
            "num_classes": self.num_classes, "pool_kind": self.pool_kind,
            "dropout": self.dropout,
            "baseline_pool_after_first": self.baseline_pool_after_first,
            "concat_keep": self.concat_keep,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        mods = [ModalityConfig(**m) for m in d["modalities"]]
        rest = {k: v for k, v in d.items() if k != "modalities"}
        return cls(modalities=mods, **rest)


@dataclass
class Prediction:
    probs: np.ndarray
    logits: np.ndarray
    fused_tokens: int
    logits_tensor: Tensor = field(repr=False, default=None)


@dataclass
class HeadParams:
    """Final-norm + two-layer MLP classifier applied to a CLS row."""

    ln_g: Tensor
    ln_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def named(self, prefix: str):
        for name in ("ln_g", "ln_b", "w1", "b1", "w2", "b2"):
            yield f"{prefix}.{name}", getattr(self, name)


def init_head(rng: np.random.Generator, dim: int, num_classes: int) -> HeadParams:
    return HeadParams(
        ln_g=ad.parameter(np.ones(dim)),
        ln_b=ad.parameter(np.zeros(dim)),
        w1=ad.parameter(affine_init(rng, dim, dim)),
        b1=ad.parameter(np.zeros(dim)),
        w2=ad.parameter(affine_init(rng, dim, num_classes)),
        b2=ad.parameter(np.zeros(num_classes)),
    )


def apply_head(head: HeadParams, cls_row: Tensor) -> Tensor:
    x = ad.layer_norm(cls_row, head.ln_g, head.ln_b)
    x = ad.gelu(ad.add_bias(ad.matmul(x, head.w1), head.b1))
    return ad.add_bias(ad.matmul(x, head.w2), head.b2)


@dataclass
class SFTParams:
    encoders: list[EncoderParams]
    sparse: list[LayerParams] | None
    cross: list[LayerParams]
    head: HeadParams

    def named(self):
        for i, e in enumerate(self.encoders):
            yield from e.named(f"enc{i}")
        if self.sparse is not None:
            for i, lp in enumerate(self.sparse):
                yield from lp.named(f"sparse{i}")
        for i, lp in enumerate(self.cross):
            yield from lp.named(f"cross{i}")
        yield from self.head.named("head")


@dataclass
class ConcatParams:
    proj_w: list[Tensor]
    proj_b: list[Tensor]
    cls: Tensor
    pos: Tensor
    layers: list[LayerParams]
    head: HeadParams

    def named(self):
        for i, (w, b) in enumerate(zip(self.proj_w, self.proj_b)):
            yield f"proj{i}.w", w
            yield f"proj{i}.b", b
        yield "cls", self.cls
        yield "pos", self.pos
        for i, lp in enumerate(self.layers):
            yield from lp.named(f"layer{i}")
        yield from self.head.named("head")


@dataclass
class LateFusionParams:
    encoders: list[EncoderParams]
    heads: list[HeadParams]

    def named(self):
        for i, e in enumerate(self.encoders):
            yield from e.named(f"enc{i}")
        for i, h in enumerate(self.heads):
            yield from h.named(f"head{i}")


@dataclass
class UnimodalParams:
    modality_index: int
    encoder: EncoderParams
    head: HeadParams

    def named(self):
        yield from self.encoder.named("enc")
        yield from self.head.named("head")


def parse_variant(variant: str, cfg: ModelConfig) -> tuple[str, int | None]:
    if variant in ("sft", "sft-po", "concat", "lf"):
        return variant, None
    if variant.startswith("unimodal:"):
        key = variant.split(":", 1)[1]
        for i, m in enumerate(cfg.modalities):
            if m.name == key or str(i) == key:
                return "unimodal", i
        raise ValueError(f"unknown modality {key!r} in variant {variant!r}")
    raise ValueError(f"unknown variant {variant!r}")


def build_params(cfg: ModelConfig, variant: str, rng: np.random.Generator):
    kind, mod_idx = parse_variant(variant, cfg)
    if kind in ("sft", "sft-po"):
        encoders = [init_encoder(rng, m.dim_in, cfg.dim, m.n_tokens, cfg.unimodal_depth)
                    for m in cfg.modalities]
        sparse = None
        if kind == "sft":
            sparse = [init_layer(rng, cfg.dim) for _ in cfg.modalities]
        cross = [init_layer(rng, cfg.dim) for _ in range(cfg.cross_depth)]
        return SFTParams(encoders, sparse, cross,
                         init_head(rng, cfg.dim, cfg.num_classes))
    depth = cfg.unimodal_depth + cfg.cross_depth
    if kind == "concat":
        proj_w = [ad.parameter(affine_init(rng, m.dim_in, cfg.dim))
                  for m in cfg.modalities]
        proj_b = [ad.parameter(np.zeros(cfg.dim)) for _ in cfg.modalities]
        return ConcatParams(
            proj_w, proj_b,
            cls=ad.parameter(rng.normal(0.0, 0.02, size=(1, cfg.dim))),
            pos=ad.parameter(rng.normal(0.0, 0.02, size=(1 + cfg.total_tokens, cfg.dim))),
            layers=[init_layer(rng, cfg.dim) for _ in range(depth)],
            head=init_head(rng, cfg.dim, cfg.num_classes))
    if kind == "lf":
        return LateFusionParams(
            encoders=[init_encoder(rng, m.dim_in, cfg.dim, m.n_tokens, depth)
                      for m in cfg.modalities],
            heads=[init_head(rng, cfg.dim, cfg.num_classes) for _ in cfg.modalities])
    return UnimodalParams(
        modality_index=mod_idx,
        encoder=init_encoder(rng, cfg.modalities[mod_idx].dim_in, cfg.dim,
                             cfg.modalities[mod_idx].n_tokens, depth),
        head=init_head(rng, cfg.dim, cfg.num_classes))


# ---------------------------------------------------------------------------
# forward passes


@dataclass
class MixApplication:
    """Apply latent mixing at ``layer`` against a partner sample's inputs."""

    layer: int
    lambdas: list[float]
    partner: list[np.ndarray]


def _check_inputs(inputs, cfg: ModelConfig):
    if len(inputs) != cfg.num_modalities:
        raise ad.ShapeError(f"expected {cfg.num_modalities} modalities, got {len(inputs)}")
    for raw, m in zip(inputs, cfg.modalities):
        if np.asarray(raw).shape != (m.n_tokens, m.dim_in):
            raise ad.ShapeError(
                f"{m.name}: input shape {np.asarray(raw).shape}, "
                f"expected {(m.n_tokens, m.dim_in)}")


def _softmax_probs(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def _finish(logits_t: Tensor, fused_tokens: int) -> Prediction:
    logits = logits_t.data[0].copy()
    return Prediction(probs=_softmax_probs(logits), logits=logits,
                      fused_tokens=fused_tokens, logits_tensor=logits_t)


def _sft_fused_set(inputs, params: SFTParams, cfg: ModelConfig, train: bool,
                   rng, mix_uni: MixApplication | None = None) -> Tensor:
    """Unimodal layers (optionally mixing at one of them), strided sparse
    attention, pooling, CLS merge, fusion. Returns the fused token set."""
    states = [project_and_embed(inputs[m], params.encoders[m], cfg.modalities[m].name).tokens
              for m in range(cfg.num_modalities)]
    partner = None
    if mix_uni is not None:
        partner = [project_and_embed(mix_uni.partner[m], params.encoders[m],
                                     cfg.modalities[m].name).tokens
                   for m in range(cfg.num_modalities)]
    last_weights: list[np.ndarray | None] = [None] * cfg.num_modalities
    for li in range(cfg.unimodal_depth):
        for m in range(cfg.num_modalities):
            states[m], last_weights[m] = encoder_layer(
                states[m], params.encoders[m].layers[li], cfg.heads, None,
                cfg.dropout, train, rng)
            if partner is not None:
                partner[m], _ = encoder_layer(
                    partner[m], params.encoders[m].layers[li], cfg.heads, None,
                    cfg.dropout, train, rng)
        if partner is not None and li + 1 == mix_uni.layer:
            states = [mix_latent(states[m], partner[m], mix_uni.lambdas[m])
                      for m in range(cfg.num_modalities)]
            partner = None

    pooled = []
    cls_tokens = []
    for m, mc in enumerate(cfg.modalities):
        tokens = states[m]
        weights = last_weights[m]
        if params.sparse is not None:
            spec = PoolSpec(cfg.pool_kind, mc.keep)
            mask = build_strided_mask(mc.n_tokens + 1, spec.stride_for(mc.n_tokens))
            ts, weights = strided_sparse_attention(
                TokenSet(mc.name, tokens, True), params.sparse[m], cfg.heads,
                mask, cfg.dropout, train, rng)
            tokens = ts.tokens
        cls_tokens.append(ad.slice_rows(tokens, 0, 1))
        body = ad.slice_rows(tokens, 1, mc.n_tokens + 1)
        sig = None
        if cfg.pool_kind == "attention-average":
            # significance over non-CLS tokens from the most recent layer
            if weights is None:
                raise ValueError("attention-average needs at least one "
                                 "attention layer before pooling")
            sig = token_significance(weights)[1:]
        pooled.append(pool_tokens(body, PoolSpec(cfg.pool_kind, mc.keep), sig))

    fused = fuse(merge_cls(cls_tokens), pooled)
    assert fused.shape[0] == cfg.fused_tokens, \
        f"fused stage sees {fused.shape[0]} tokens, expected {cfg.fused_tokens}"
    return fused


def sft_forward(inputs, params: SFTParams, cfg: ModelConfig, mode: str = "eval",
                rng: np.random.Generator | None = None,
                mix: MixApplication | None = None) -> Prediction:
    """Full pipeline. ``mix`` interpolates latents with a partner sample at
    one layer index in [1, L+T] (per modality while unimodal, shared once
    fused); eval mode never mixes."""
    train = mode == "train"
    _check_inputs(inputs, cfg)
    if mix is not None and not 1 <= mix.layer <= cfg.unimodal_depth + cfg.cross_depth:
        raise ValueError(f"mix layer {mix.layer} outside [1, L+T]")

    if mix is not None and mix.layer <= cfg.unimodal_depth:
        fused = _sft_fused_set(inputs, params, cfg, train, rng, mix_uni=mix)
        mix = None
    else:
        fused = _sft_fused_set(inputs, params, cfg, train, rng)
    partner_fused = None
    if mix is not None:
        _check_inputs(mix.partner, cfg)
        partner_fused = _sft_fused_set(mix.partner, params, cfg, train, rng)

    for ti in range(cfg.cross_depth):
        fused, _ = encoder_layer(fused, params.cross[ti], cfg.heads, None,
                                 cfg.dropout, train, rng)
        if partner_fused is not None:
            partner_fused, _ = encoder_layer(partner_fused, params.cross[ti],
                                             cfg.heads, None, cfg.dropout, train, rng)
            if cfg.unimodal_depth + ti + 1 == mix.layer:
                fused = mix_latent(fused, partner_fused, mix.lambdas[0])
                partner_fused = None

    logits = apply_head(params.head, ad.slice_rows(fused, 0, 1))
    return _finish(logits, cfg.fused_tokens)


def concat_forward(inputs, params: ConcatParams, cfg: ModelConfig,
                   mode: str = "eval",
                   rng: np.random.Generator | None = None) -> Prediction:
    """Early fusion: shared CLS + all projected tokens through one dense
    L+T-layer transformer; optionally max-pools the concatenated sequence
    after the first layer (the naive-sparsification baseline)."""
    train = mode == "train"
    _check_inputs(inputs, cfg)
    projected = [ad.add_bias(ad.matmul(ad.constant(np.asarray(raw, dtype=np.float64)),
                                       w), b)
                 for raw, w, b in zip(inputs, params.proj_w, params.proj_b)]
    seq = ad.add(ad.concat_rows([params.cls] + projected), params.pos)

    pool_at = 1 if (cfg.baseline_pool_after_first and cfg.concat_keep) else None
    n_body = cfg.total_tokens
    for li, lp in enumerate(params.layers):
        seq, _ = encoder_layer(seq, lp, cfg.heads, None, cfg.dropout, train, rng)
        if pool_at is not None and li + 1 == pool_at:
            cls_row = ad.slice_rows(seq, 0, 1)
            body = ad.slice_rows(seq, 1, n_body + 1)
            body = pool_tokens(body, PoolSpec("max", cfg.concat_keep))
            seq = ad.concat_rows([cls_row, body])

    logits = apply_head(params.head, ad.slice_rows(seq, 0, 1))
    return _finish(logits, seq.shape[0])


def _branch_logits(raw, enc_params: EncoderParams, head: HeadParams,
                   mc: ModalityConfig, cfg: ModelConfig, train: bool, rng) -> Tensor:
    """One unimodal transformer branch, optionally max-pooled after layer 1."""
    seq = project_and_embed(raw, enc_params, mc.name).tokens
    for li, lp in enumerate(enc_params.layers):
        seq, _ = encoder_layer(seq, lp, cfg.heads, None, cfg.dropout, train, rng)
        if cfg.baseline_pool_after_first and li == 0 and mc.keep < mc.n_tokens:
            cls_row = ad.slice_rows(seq, 0, 1)
            body = ad.slice_rows(seq, 1, mc.n_tokens + 1)
            body = pool_tokens(body, PoolSpec("max", mc.keep))
            seq = ad.concat_rows([cls_row, body])
    return apply_head(head, ad.slice_rows(seq, 0, 1))


def late_fusion_forward(inputs, params: LateFusionParams, cfg: ModelConfig,
                        mode: str = "eval",
                        rng: np.random.Generator | None = None) -> Prediction:
    """Independent unimodal transformers; prediction sums per-branch logits."""
    train = mode == "train"
    _check_inputs(inputs, cfg)
    logits = None
    for m, mc in enumerate(cfg.modalities):
        branch = _branch_logits(inputs[m], params.encoders[m], params.heads[m],
                                mc, cfg, train, rng)
        logits = branch if logits is None else ad.add(logits, branch)
    total = sum(m.n_tokens + 1 for m in cfg.modalities)
    return _finish(logits, total)


def unimodal_forward(inputs, params: UnimodalParams, cfg: ModelConfig,
                     mode: str = "eval",
                     rng: np.random.Generator | None = None) -> Prediction:
    train = mode == "train"
    mc = cfg.modalities[params.modality_index]
    raw = np.asarray(inputs[params.modality_index]
                     if len(inputs) == cfg.num_modalities else inputs[0])
    if raw.shape != (mc.n_tokens, mc.dim_in):
        raise ad.ShapeError(f"{mc.name}: input shape {raw.shape}, "
                            f"expected {(mc.n_tokens, mc.dim_in)}")
    logits = _branch_logits(raw, params.encoder, params.head, mc, cfg, train, rng)
    return _finish(logits, mc.n_tokens + 1)


def forward(variant: str, inputs, params, cfg: ModelConfig, mode: str = "eval",
            rng: np.random.Generator | None = None,
            mix: MixApplication | None = None) -> Prediction:
    kind, _ = parse_variant(variant, cfg)
    if kind == "sft" or kind == "sft-po":
        return sft_forward(inputs, params, cfg, mode, rng, mix)
    if mix is not None:
        raise ValueError(f"latent mixup is only wired into the sft variants, not {variant!r}")
    if kind == "concat":
        return concat_forward(inputs, params, cfg, mode, rng)
    if kind == "lf":
        return late_fusion_forward(inputs, params, cfg, mode, rng)
    return unimodal_forward(inputs, params, cfg, mode, rng)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, variant: str, cfg: ModelConfig, params) -> None:
    """Versioned container: magic, u32 version, length-prefixed JSON config
    record, then (u32 name length, name, u32 rank, u64 dims, f64 values) per
    parameter. Round-trips bit-exactly."""
    record = json.dumps({"variant": variant, "model": cfg.to_dict()},
                        sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<Q", len(record)))
    buf.write(record)
    for name, tensor in params.named():
        nb = name.encode("utf-8")
        arr = np.ascontiguousarray(tensor.data, dtype="<f8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


class CheckpointError(ValueError):
    pass


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint")
    return data


def load_checkpoint(path):
    """Returns (variant, ModelConfig, params) with tensors exactly as saved."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != CHECKPOINT_MAGIC:
            raise CheckpointError("bad magic, not a model checkpoint")
        version = struct.unpack("<I", _read_exact(fh, 4))[0]
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        rec_len = struct.unpack("<Q", _read_exact(fh, 8))[0]
        record = json.loads(_read_exact(fh, rec_len).decode("utf-8"))
        tensors: dict[str, np.ndarray] = {}
        while True:
            head = fh.read(4)
            if not head:
                break
            name_len = struct.unpack("<I", head)[0]
            name = _read_exact(fh, name_len).decode("utf-8")
            rank = struct.unpack("<I", _read_exact(fh, 4))[0]
            dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
            count = int(np.prod(dims)) if dims else 1
            values = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8")
            tensors[name] = values.reshape(dims).astype(np.float64)

    cfg = ModelConfig.from_dict(record["model"])
    variant = record["variant"]
    params = build_params(cfg, variant, np.random.default_rng(0))
    names = dict(params.named())
    missing = set(names) - set(tensors)
    extra = set(tensors) - set(names)
    if missing or extra:
        raise CheckpointError(f"parameter mismatch: missing={sorted(missing)[:3]} "
                              f"extra={sorted(extra)[:3]}")
    for name, tensor in names.items():
        if tensors[name].shape != tensor.data.shape:
            raise CheckpointError(f"{name}: shape {tensors[name].shape} vs "
                                  f"{tensor.data.shape}")
        tensor.data = tensors[name]
    return variant, cfg, params
