"""Command-line interface: dataset generation, training, evaluation,
reduction-factor sweeps, and flop-cost reports."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .cost import cost_table, flops_pipeline, gflops
from .data import (DatasetError, SyntheticSpec, apply_label_noise,
                   generate_synthetic, load_dataset, save_dataset,
                   split_dataset)
from .model import CheckpointError, load_checkpoint, save_checkpoint
from .sweep import reduction_sweep, write_csv, write_summary
from .training import (CSV_HEADER, TrainConfig, TrainingDiverged, evaluate,
                       train)

DEFAULT_SPLIT_FRACTIONS = (0.6, 0.15, 0.25)


def _load_json(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise DatasetError(f"no such file: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"malformed JSON in {p}: {e}") from e


def cmd_gen_data(args) -> int:
    spec = SyntheticSpec.from_dict(_load_json(args.spec))
    ds, _info = generate_synthetic(spec, seed=args.seed)
    fractions = tuple(float(f) for f in args.split.split(","))
    split_dataset(ds, fractions, seed=args.seed)
    if args.label_noise > 0:
        apply_label_noise(ds, args.label_noise, seed=args.seed)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds.samples)} samples "
          f"({', '.join(f'{k}={len(v)}' for k, v in ds.splits.items())}) "
          f"to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = TrainConfig.from_dict(_load_json(args.config))
    data_dir = args.data or cfg.dataset_path
    if not data_dir:
        raise DatasetError("no dataset: pass --data or set dataset_path in the config")
    ds = load_dataset(data_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = [CSV_HEADER]
    all_rows = []
    for seed in cfg.seeds:
        result = train(cfg, ds, seed)
        ckpt = out / f"model_seed{seed}.sftm"
        save_checkpoint(ckpt, cfg.variant, cfg.model, result.params)
        lines.extend(r.csv() for r in result.rows)
        all_rows.extend(result.rows)
        ev = evaluate(cfg.variant, result.params, cfg.model, ds,
                      "test" if ds.splits.get("test") else "val")
        print(f"seed {seed}: best epoch {result.best_epoch} "
              f"top1 {ev.top1:.4f} map {ev.map:.4f} -> {ckpt}")
    (out / "metrics.csv").write_text("\n".join(lines) + "\n")
    write_summary(all_rows, out / "summary.json")
    return 0


def cmd_eval(args) -> int:
    variant, cfg, params = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    ev = evaluate(variant, params, cfg, ds, args.split)
    print(json.dumps({
        "variant": variant, "split": args.split, "samples": len(ev.labels),
        "top1": ev.top1, "map": ev.map, "loss": ev.loss,
        "gflops": gflops(flops_pipeline(cfg, variant).stage_total),
    }, indent=1))
    return 0


def cmd_sweep(args) -> int:
    cfg = TrainConfig.from_dict(_load_json(args.config))
    data_dir = args.data or cfg.dataset_path
    if not data_dir:
        raise DatasetError("no dataset: pass --data or set dataset_path in the config")
    ds = load_dataset(data_dir)  # fail fast on a bad dataset
    eval_split = "test" if ds.splits.get("test") else "val"
    factors = [int(f) for f in args.factors.split(",")]
    variants = args.variants.split(",")
    if "," in args.seeds:
        seeds = [int(s) for s in args.seeds.split(",")]
    else:
        seeds = list(range(int(args.seeds)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(row):
        print(row.csv(), flush=True)

    print(CSV_HEADER, flush=True)
    rows = reduction_sweep(cfg, data_dir, factors, variants, seeds,
                           workers=args.workers, eval_split=eval_split,
                           progress=progress)
    write_csv(rows, out / "sweep.csv")
    write_summary(rows, out / "sweep_summary.json")
    print(f"wrote {len(rows)} rows to {out / 'sweep.csv'}")
    return 0


def cmd_cost(args) -> int:
    cfg = TrainConfig.from_dict(_load_json(args.config))
    variants = args.variants.split(",")
    reports = []
    for v in variants:
        names = ([f"unimodal:{m.name}" for m in cfg.model.modalities]
                 if v == "unimodal" else [v])
        reports.extend(flops_pipeline(cfg.model, name) for name in names)
    ref = next((r for r in reports if r.variant == "sft"), reports[0])
    payload = {
        "reference": ref.variant,
        "ratios_vs_reference": {r.variant: r.stage_total / ref.stage_total
                                for r in reports},
        "reports": [r.to_dict() for r in reports],
    }
    print(json.dumps(payload, indent=1))
    print()
    print(cost_table(reports, reference=ref.variant))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sparsefusion",
                                description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--spec", required=True, help="JSON synthetic-data spec")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--split", default=",".join(str(f) for f in DEFAULT_SPLIT_FRACTIONS),
                   help="train,val,test fractions")
    g.add_argument("--label-noise", type=float, default=0.0,
                   help="fraction of train labels to corrupt")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one variant over the config seeds")
    t.add_argument("--config", required=True, help="JSON train config")
    t.add_argument("--data", default=None)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="reduction-factor sweep")
    s.add_argument("--config", required=True)
    s.add_argument("--data", default=None)
    s.add_argument("--factors", default="1,2,4,8,16,32,64,128,256")
    s.add_argument("--variants", default="sft,sft-po,unimodal,concat-pool,lf-pool")
    s.add_argument("--seeds", default="5",
                   help="seed count (N -> 0..N-1) or comma-separated list")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("cost", help="analytical flop report")
    c.add_argument("--config", required=True)
    c.add_argument("--variants", default="sft,concat,lf")
    c.set_defaults(func=cmd_cost)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (DatasetError, CheckpointError, TrainingDiverged, ValueError,
            OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
