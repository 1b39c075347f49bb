"""Latent mixup for multimodal training: a random layer's representations of
two paired samples are convexly combined, with per-modality interpolation
weights while the streams are still unimodal and a single weight once fused.
Labels mix with the mean of the modality weights."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class MixupConfig:
    alpha: float = 0.3
    warmup_epochs: int = 5
    enabled: bool = True

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.warmup_epochs < 0:
            raise ValueError("warmup must be >= 0")


@dataclass
class MixupDraw:
    """One sampled decision: layer index in [1, L+T]; per-modality lambdas
    while layer <= L, a single shared lambda afterwards."""

    layer: int
    lambdas: list[float]
    lam_bar: float


def sample_mixup_draw(cfg: MixupConfig, epoch: int, unimodal_depth: int,
                      cross_depth: int, num_modalities: int,
                      rng: np.random.Generator) -> MixupDraw | None:
    """Draw the layer and interpolation weights, or None during warmup or
    when mixup is disabled."""
    if not cfg.enabled or epoch < cfg.warmup_epochs:
        return None
    total = unimodal_depth + cross_depth
    if total < 1:
        return None
    layer = int(rng.integers(1, total + 1))
    if layer <= unimodal_depth:
        lambdas = [float(rng.beta(cfg.alpha, cfg.alpha)) for _ in range(num_modalities)]
    else:
        lambdas = [float(rng.beta(cfg.alpha, cfg.alpha))]
    return MixupDraw(layer=layer, lambdas=lambdas,
                     lam_bar=float(np.mean(lambdas)))


def mix_latent(v_i: Tensor, v_j: Tensor, lam: float) -> Tensor:
    """lam * v_i + (1 - lam) * v_j over every token, CLS included."""
    if v_i.shape != v_j.shape:
        raise ad.ShapeError(f"mix_latent: {v_i.shape} vs {v_j.shape}")
    return ad.add(ad.mul_const(v_i, lam), ad.mul_const(v_j, 1.0 - lam))


def mix_labels(y_i: np.ndarray, y_j: np.ndarray, lam_bar: float) -> np.ndarray:
    """Convex combination of two label distributions."""
    y_i = np.asarray(y_i, dtype=np.float64)
    y_j = np.asarray(y_j, dtype=np.float64)
    if y_i.shape != y_j.shape:
        raise ValueError(f"label shapes differ: {y_i.shape} vs {y_j.shape}")
    return lam_bar * y_i + (1.0 - lam_bar) * y_j


def one_hot(label: int, num_classes: int) -> np.ndarray:
    y = np.zeros(num_classes)
    y[label] = 1.0
    return y
