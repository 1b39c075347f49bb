"""Reduction-factor sweeps: train/evaluate every (variant, factor, seed)
cell and aggregate per-cell statistics.

For a factor r each modality keeps max(1, N_i // r) tokens. The ``sft`` and
``sft-po`` cells pool inside the fusion pipeline; ``concat-pool``,
``lf-pool``, and ``unimodal`` cells max-pool after their first transformer
layer (the naive sparsification protocol). Mixup stays on only for ``sft``.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .cost import flops_pipeline, gflops
from .data import load_dataset
from .training import CSV_HEADER, MetricsRow, TrainConfig, evaluate, train

SWEEP_VARIANTS = ("sft", "sft-po", "unimodal", "concat-pool", "lf-pool")


def expand_variants(variants, model_cfg) -> list[str]:
    """Expand the ``unimodal`` shorthand into one entry per modality."""
    out = []
    for v in variants:
        if v == "unimodal":
            out.extend(f"unimodal:{m.name}" for m in model_cfg.modalities)
        else:
            out.append(v)
    return out


def cell_config(base: TrainConfig, variant: str, factor: int) -> TrainConfig:
    """Specialize the base config for one sweep cell."""
    if factor < 1:
        raise ValueError("reduction factor must be >= 1")
    cfg = TrainConfig.from_dict(base.to_dict())
    model = cfg.model
    for m in model.modalities:
        m.keep = max(1, m.n_tokens // factor)
    if variant in ("sft", "sft-po"):
        cfg.variant = variant
        model.baseline_pool_after_first = False
        model.concat_keep = None
        cfg.mixup = replace(cfg.mixup, enabled=cfg.mixup.enabled and variant == "sft")
    else:
        cfg.variant = {"concat-pool": "concat", "lf-pool": "lf"}.get(variant, variant)
        cfg.mixup = replace(cfg.mixup, enabled=False)
        if factor == 1:
            model.baseline_pool_after_first = False
            model.concat_keep = None
        else:
            model.baseline_pool_after_first = True
            model.concat_keep = max(1, model.total_tokens // factor)
    return cfg


def run_cell(base_dict: dict, variant: str, factor: int, seed: int,
             data_dir: str, eval_split: str = "test") -> dict:
    """Train and test one cell; returns a plain dict so it can cross a
    process boundary."""
    base = TrainConfig.from_dict(base_dict)
    cfg = cell_config(base, variant, factor)
    ds = load_dataset(data_dir)
    result = train(cfg, ds, seed, factor=factor)
    ev = evaluate(cfg.variant, result.params, cfg.model, ds, eval_split)
    row = MetricsRow(variant=variant, factor=factor, seed=seed,
                     epoch=result.best_epoch, top1=ev.top1, map=ev.map,
                     gflops=gflops(flops_pipeline(cfg.model, cfg.variant).stage_total))
    return row.__dict__


def reduction_sweep(base: TrainConfig, data_dir, factors, variants, seeds,
                    workers: int = 1, eval_split: str = "test",
                    progress=None) -> list[MetricsRow]:
    names = expand_variants(variants, base.model)
    cells = [(v, f, s) for v in names for f in factors for s in seeds]
    base_dict = base.to_dict()
    rows: list[MetricsRow] = []
    if workers <= 1:
        for v, f, s in cells:
            rows.append(MetricsRow(**run_cell(base_dict, v, f, s, str(data_dir),
                                              eval_split)))
            if progress:
                progress(rows[-1])
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_cell, base_dict, v, f, s, str(data_dir),
                                   eval_split) for v, f, s in cells]
            for fut in futures:
                rows.append(MetricsRow(**fut.result()))
                if progress:
                    progress(rows[-1])
    rows.sort(key=lambda r: (r.variant, r.factor, r.seed))
    return rows


def summarize(rows: list[MetricsRow]) -> dict:
    """Per-(variant, factor) mean and population stddev over seeds."""
    cells: dict[tuple[str, int], list[MetricsRow]] = {}
    for r in rows:
        cells.setdefault((r.variant, r.factor), []).append(r)
    out = {}
    for (variant, factor), group in sorted(cells.items()):
        t = np.array([r.top1 for r in group])
        m = np.array([r.map for r in group])
        out[f"{variant}@{factor}"] = {
            "variant": variant, "factor": factor, "seeds": len(group),
            "top1_mean": float(t.mean()), "top1_std": float(t.std()),
            "map_mean": float(m.mean()), "map_std": float(m.std()),
            "gflops": group[0].gflops,
        }
    return out


def write_csv(rows: list[MetricsRow], path) -> None:
    lines = [CSV_HEADER] + [r.csv() for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def write_summary(rows: list[MetricsRow], path) -> None:
    Path(path).write_text(json.dumps(summarize(rows), indent=1) + "\n")
