"""Analytical per-sample forward-pass flop accounting.

Transformer blocks are costed with the closed forms
    mha(n, d) = 4*n*d^2 + 2*n^2*d      (qkv + attention map + weighted sum + out-proj)
    mlp(n, d) = 2*n*d^2 + 4*n*d        (two linears + norm + activation)
in exact integer arithmetic. A strided-sparse MSA replaces the quadratic
attention term 2*n^2*d with 2*E*d where E counts the mask's allowed entries.
Projections, classifier heads, and pooling are tracked separately as small
"extras" so block totals stay comparable across pipeline variants.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .fusion import PoolSpec, build_strided_mask
from .model import ModelConfig, parse_variant


def flops_mha(n: int, d: int) -> int:
    if n < 1 or d < 1:
        raise ValueError("need n, d >= 1")
    return 4 * n * d * d + 2 * n * n * d


def flops_mlp(n: int, d: int) -> int:
    if n < 1 or d < 1:
        raise ValueError("need n, d >= 1")
    return 2 * n * d * d + 4 * n * d


def flops_mha_sparse(n: int, d: int, allowed: int) -> int:
    """Masked MSA: quadratic attention term shrinks to the allowed entries."""
    if allowed < n or allowed > n * n:
        raise ValueError(f"allowed entries {allowed} outside [{n}, {n * n}]")
    return 4 * n * d * d + 2 * allowed * d


@dataclass
class StageCost:
    """One pipeline stage: ``layers`` blocks over ``n`` tokens of width ``d``."""

    name: str
    n: int
    d: int
    layers: int
    kind: str  # dense | sparse | affine | pool
    flops: int


@dataclass
class CostReport:
    variant: str
    stages: list[StageCost] = field(default_factory=list)
    extras: list[StageCost] = field(default_factory=list)

    @property
    def stage_total(self) -> int:
        return sum(s.flops for s in self.stages)

    @property
    def extras_total(self) -> int:
        return sum(s.flops for s in self.extras)

    @property
    def total(self) -> int:
        return self.stage_total + self.extras_total

    @property
    def activation_floats(self) -> int:
        """Rough live-activation count (block outputs); NOT a measured-memory figure."""
        return sum(s.layers * s.n * s.d for s in self.stages)

    def to_dict(self) -> dict:
        def rows(items):
            return [{"name": s.name, "n": s.n, "d": s.d, "layers": s.layers,
                     "kind": s.kind, "flops": s.flops} for s in items]
        return {"variant": self.variant, "stages": rows(self.stages),
                "extras": rows(self.extras), "stage_total": self.stage_total,
                "extras_total": self.extras_total, "total": self.total,
                "activation_floats": self.activation_floats}


def _dense_stage(name: str, n: int, d: int, layers: int) -> StageCost:
    return StageCost(name, n, d, layers, "dense",
                     layers * (flops_mha(n, d) + flops_mlp(n, d)))


def _sparse_stage(name: str, n: int, d: int, stride: int) -> StageCost:
    allowed = int(build_strided_mask(n, stride).allow.sum())
    return StageCost(name, n, d, 1, "sparse",
                     flops_mha_sparse(n, d, allowed) + flops_mlp(n, d))


def flops_pipeline(cfg: ModelConfig, variant: str) -> CostReport:
    """Stage-by-stage flop report for one pipeline variant.

    ``concat-pool`` / ``lf-pool`` alias the baselines with max-pool after the
    first layer regardless of cfg.baseline_pool_after_first.
    """
    pooled_baseline = cfg.baseline_pool_after_first
    if variant in ("concat-pool", "lf-pool"):
        variant = variant.split("-")[0]
        pooled_baseline = True
    kind, mod_idx = parse_variant(variant, cfg)
    d = cfg.dim
    depth = cfg.unimodal_depth + cfg.cross_depth
    rep = CostReport(variant=variant if mod_idx is None else f"unimodal:{cfg.modalities[mod_idx].name}")

    def proj_extra(m):
        return StageCost(f"proj[{m.name}]", m.n_tokens, d, 1, "affine",
                         m.n_tokens * m.dim_in * d)

    def head_extra(name="head"):
        return StageCost(name, 1, d, 1, "affine",
                         d * d + d * cfg.num_classes)

    if kind in ("sft", "sft-po"):
        for m in cfg.modalities:
            if cfg.unimodal_depth:
                rep.stages.append(_dense_stage(f"unimodal[{m.name}]",
                                               m.n_tokens + 1, d, cfg.unimodal_depth))
            if kind == "sft":
                stride = PoolSpec(cfg.pool_kind, m.keep).stride_for(m.n_tokens)
                rep.stages.append(_sparse_stage(f"sparse[{m.name}]",
                                                m.n_tokens + 1, d, stride))
            rep.extras.append(proj_extra(m))
            rep.extras.append(StageCost(f"pool[{m.name}]", m.n_tokens, d, 1,
                                        "pool", m.n_tokens * d))
        if cfg.cross_depth:
            rep.stages.append(_dense_stage("cross", cfg.fused_tokens, d,
                                           cfg.cross_depth))
        rep.extras.append(head_extra())
    elif kind == "concat":
        n_full = 1 + cfg.total_tokens
        if pooled_baseline and cfg.concat_keep and depth:
            rep.stages.append(_dense_stage("pre-pool", n_full, d, 1))
            if depth > 1:
                rep.stages.append(_dense_stage("post-pool", 1 + cfg.concat_keep,
                                               d, depth - 1))
            rep.extras.append(StageCost("pool", cfg.total_tokens, d, 1, "pool",
                                        cfg.total_tokens * d))
        elif depth:
            rep.stages.append(_dense_stage("dense", n_full, d, depth))
        for m in cfg.modalities:
            rep.extras.append(proj_extra(m))
        rep.extras.append(head_extra())
    else:
        mods = cfg.modalities if kind == "lf" else [cfg.modalities[mod_idx]]
        for m in mods:
            pooled = pooled_baseline and m.keep < m.n_tokens
            if pooled and depth:
                rep.stages.append(_dense_stage(f"pre-pool[{m.name}]",
                                               m.n_tokens + 1, d, 1))
                if depth > 1:
                    rep.stages.append(_dense_stage(f"post-pool[{m.name}]",
                                                   m.keep + 1, d, depth - 1))
                rep.extras.append(StageCost(f"pool[{m.name}]", m.n_tokens, d, 1,
                                            "pool", m.n_tokens * d))
            elif depth:
                rep.stages.append(_dense_stage(f"branch[{m.name}]",
                                               m.n_tokens + 1, d, depth))
            rep.extras.append(proj_extra(m))
            rep.extras.append(head_extra(f"head[{m.name}]"))
    return rep


def gflops(flops: int) -> float:
    return flops / 1e9


def cost_table(reports: list[CostReport], reference: str = "sft") -> str:
    """Aligned text table with block GFlops and ratios vs the reference."""
    ref = next((r for r in reports if r.variant == reference), reports[0])
    lines = [f"{'variant':<16} {'blocks GFlops':>14} {'extras GFlops':>14} "
             f"{'total GFlops':>13} {'ratio vs ' + ref.variant:>14}"]
    for r in reports:
        ratio = r.stage_total / ref.stage_total if ref.stage_total else float("nan")
        lines.append(f"{r.variant:<16} {gflops(r.stage_total):>14.4f} "
                     f"{gflops(r.extras_total):>14.4f} {gflops(r.total):>13.4f} "
                     f"{ratio:>13.2f}x")
    return "\n".join(lines)
