"""Deterministic mini-batch training with Adam-style updates, stepped or
plateau learning-rate decay, latent mixup, and best-validation checkpointing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import cross_entropy, no_grad
from .cost import flops_pipeline, gflops
from .data import Dataset
from .metrics import mean_average_precision, top1
from .mixup import MixupConfig, mix_labels, one_hot, sample_mixup_draw
from .model import (MixApplication, ModelConfig, forward, build_params,
                    parse_variant)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    model: ModelConfig
    variant: str = "sft"
    learning_rate: float = 1e-4
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 10
    plateau_decay: bool = False
    plateau_patience: int = 10
    batch_size: int = 24
    epochs: int = 20
    mixup: MixupConfig = field(default_factory=MixupConfig)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    dataset_path: str | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in
             ("variant", "learning_rate", "lr_decay_factor", "lr_decay_every",
              "plateau_decay", "plateau_patience", "batch_size", "epochs",
              "seeds", "dataset_path")}
        d["model"] = self.model.to_dict()
        d["mixup"] = {"alpha": self.mixup.alpha,
                      "warmup_epochs": self.mixup.warmup_epochs,
                      "enabled": self.mixup.enabled}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        model = ModelConfig.from_dict(d.pop("model"))
        mixup = MixupConfig(**d.pop("mixup", {}))
        return cls(model=model, mixup=mixup, **d)


@dataclass
class MetricsRow:
    variant: str
    factor: int
    seed: int
    epoch: int
    top1: float
    map: float
    gflops: float

    def csv(self) -> str:
        return (f"{self.variant},{self.factor},{self.seed},{self.epoch},"
                f"{self.top1:.6f},{self.map:.6f},{self.gflops:.6f}")


CSV_HEADER = "variant,factor,seed,epoch,top1,map,gflops"


@dataclass
class TrainResult:
    params: object
    rows: list[MetricsRow]
    train_losses: list[float]
    val_losses: list[float]
    best_epoch: int


class Adam:
    """Adam with bias correction (b1=0.9, b2=0.999, eps=1e-8)."""

    def __init__(self, named_params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {name: np.zeros_like(t.data) for name, t in self.params}
        self.v = {name: np.zeros_like(t.data) for name, t in self.params}
        self.t = 0

    def step(self, lr: float, grad_scale: float = 1.0):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad * grad_scale
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def reset_grads(self):
        for _, p in self.params:
            p.reset_grad()


def lr_for_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Stepped schedule: decay by the factor every ``lr_decay_every`` epochs."""
    return cfg.learning_rate * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *tags]))


@dataclass
class EvalResult:
    loss: float
    top1: float
    map: float
    scores: np.ndarray
    labels: np.ndarray


def evaluate(variant: str, params, model_cfg: ModelConfig, ds: Dataset,
             split: str) -> EvalResult:
    records = ds.split(split)
    if not records:
        raise ValueError(f"split {split!r} is empty")
    scores = np.zeros((len(records), model_cfg.num_classes))
    labels = np.zeros(len(records), dtype=int)
    loss = 0.0
    with no_grad():
        for i, rec in enumerate(records):
            pred = forward(variant, ds.inputs(rec), params, model_cfg, "eval")
            scores[i] = pred.probs
            labels[i] = rec.label
            loss -= float(np.log(max(pred.probs[rec.label], 1e-300)))
    return EvalResult(loss=loss / len(records), top1=top1(scores, labels),
                      map=mean_average_precision(scores, labels),
                      scores=scores, labels=labels)


def train(cfg: TrainConfig, ds: Dataset, seed: int, factor: int = 1,
          quiet: bool = True) -> TrainResult:
    """Train one model; deterministic given (cfg, dataset bytes, seed).

    Tracks per-epoch validation metrics and restores the parameters of the
    best-validation-loss epoch before returning.
    """
    kind, _ = parse_variant(cfg.variant, cfg.model)
    train_ids = ds.splits.get("train") or []
    if not train_ids:
        raise ValueError("training split is empty")
    has_val = bool(ds.splits.get("val"))
    mixup_allowed = kind in ("sft", "sft-po") and cfg.mixup.enabled

    params = build_params(cfg.model, cfg.variant, _rng(seed, 0))
    opt = Adam(params.named())
    drop_rng = _rng(seed, 3)
    run_gflops = gflops(flops_pipeline(cfg.model, cfg.variant).stage_total)
    depth_l, depth_t = cfg.model.unimodal_depth, cfg.model.cross_depth

    rows: list[MetricsRow] = []
    train_losses: list[float] = []
    val_losses: list[float] = []
    best_loss = np.inf
    best_epoch = -1
    best_state: dict[str, np.ndarray] = {}
    plateau_wait = 0
    lr_scale = 1.0

    for epoch in range(cfg.epochs):
        if cfg.plateau_decay:
            lr = cfg.learning_rate * lr_scale
        else:
            lr = lr_for_epoch(cfg, epoch)
        order = _rng(seed, 1, epoch).permutation(len(train_ids))
        epoch_loss = 0.0
        for bi in range(0, len(order), cfg.batch_size):
            batch = [train_ids[i] for i in order[bi:bi + cfg.batch_size]]
            draw = None
            partner_ids = batch
            if mixup_allowed:
                mix_rng = _rng(seed, 2, epoch, bi)
                draw = sample_mixup_draw(cfg.mixup, epoch, depth_l, depth_t,
                                         cfg.model.num_modalities, mix_rng)
                if draw is not None:
                    perm = mix_rng.permutation(len(batch))
                    partner_ids = [batch[j] for j in perm]
            opt.reset_grads()
            batch_loss = 0.0
            for sid, pid in zip(batch, partner_ids):
                rec = ds.by_id(sid)
                target = one_hot(rec.label, cfg.model.num_classes)
                mix = None
                if draw is not None:
                    partner = ds.by_id(pid)
                    mix = MixApplication(draw.layer, draw.lambdas,
                                         ds.inputs(partner))
                    target = mix_labels(target,
                                        one_hot(partner.label, cfg.model.num_classes),
                                        draw.lam_bar)
                try:
                    pred = forward(cfg.variant, ds.inputs(rec), params,
                                   cfg.model, "train", drop_rng, mix)
                    loss_t = cross_entropy(pred.logits_tensor, target)
                    ad.backward(loss_t)
                except ad.NonFiniteError as e:
                    raise TrainingDiverged(
                        f"non-finite value at epoch {epoch}, batch {bi // cfg.batch_size},"
                        f" sample {sid}: {e}") from e
                batch_loss += loss_t.item()
            if not np.isfinite(batch_loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {bi // cfg.batch_size}")
            epoch_loss += batch_loss
            opt.step(lr, grad_scale=1.0 / len(batch))
        train_losses.append(epoch_loss / len(train_ids))

        if has_val:
            ev = evaluate(cfg.variant, params, cfg.model, ds, "val")
            watch_loss = ev.loss
            rows.append(MetricsRow(cfg.variant, factor, seed, epoch,
                                   ev.top1, ev.map, run_gflops))
        else:
            watch_loss = train_losses[-1]
        val_losses.append(watch_loss)
        if watch_loss < best_loss:
            best_loss = watch_loss
            best_epoch = epoch
            best_state = {name: t.data.copy() for name, t in params.named()}
            plateau_wait = 0
        else:
            plateau_wait += 1
            if cfg.plateau_decay and plateau_wait >= cfg.plateau_patience:
                lr_scale *= cfg.lr_decay_factor
                plateau_wait = 0
        if not quiet:
            print(f"epoch {epoch:3d} lr {lr:.2e} train_loss "
                  f"{train_losses[-1]:.4f} watch {watch_loss:.4f}")

    for name, t in params.named():
        t.data = best_state[name]
    return TrainResult(params=params, rows=rows, train_losses=train_losses,
                       val_losses=val_losses, best_epoch=best_epoch)
