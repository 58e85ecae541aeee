"""Mean relative error, Dice and IoU between predicted and true fields.

``V`` denotes the ground truth and ``V_hat`` the prediction. Sums run over
every grid point (exterior zeros included) and, for Dice/IoU, over every
sample and channel of the batch.

The default ``soft_squared`` variant uses squared magnitudes in the
denominators so identical fields score exactly 1 (up to ``eps``). The
``paper_literal`` variant keeps the printed first-power denominators,
which do not score identity as 1 for continuous fields.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParams, ShapeMismatch, ZeroReference

VARIANTS = ("soft_squared", "paper_literal")


@dataclass(frozen=True)
class MetricsConfig:
    eps: float = 1e-6
    variant: str = "soft_squared"

    def validate(self) -> None:
        if not self.eps > 0:
            raise InvalidParams("eps must be positive")
        if self.variant not in VARIANTS:
            raise InvalidParams(f"unknown metric variant {self.variant!r}")


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(getattr(pred, "data", pred), dtype=np.float64)
    t = np.asarray(getattr(truth, "data", truth), dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeMismatch(f"prediction {p.shape} and truth {t.shape} differ")
    return p, t


def mre_terms(pred, truth) -> np.ndarray:
    """Per-sample relative error sum|V - V_hat| / sum|V| (first axis = sample)."""
    p, t = _pair(pred, truth)
    if p.ndim == 0:
        raise ShapeMismatch("mre needs a batch axis")
    n = p.shape[0]
    den = np.abs(t).reshape(n, -1).sum(axis=1)
    if np.any(den == 0):
        raise ZeroReference(f"sample(s) {np.flatnonzero(den == 0).tolist()} have an all-zero reference")
    return np.abs(t - p).reshape(n, -1).sum(axis=1) / den


def mre(pred, truth) -> float:
    return float(mre_terms(pred, truth).mean())


@dataclass
class OverlapSums:
    """Running sums from which Dice and IoU are formed; adds across batches."""

    cross: float = 0.0  # sum |V * V_hat|
    truth_sq: float = 0.0
    pred_sq: float = 0.0
    truth_abs: float = 0.0
    pred_abs: float = 0.0

    @classmethod
    def of(cls, pred, truth) -> "OverlapSums":
        p, t = _pair(pred, truth)
        return cls(float(np.abs(t * p).sum()), float((t * t).sum()), float((p * p).sum()),
                   float(np.abs(t).sum()), float(np.abs(p).sum()))

    def __add__(self, other: "OverlapSums") -> "OverlapSums":
        return OverlapSums(self.cross + other.cross, self.truth_sq + other.truth_sq,
                           self.pred_sq + other.pred_sq, self.truth_abs + other.truth_abs,
                           self.pred_abs + other.pred_abs)

    def dice(self, cfg: MetricsConfig = MetricsConfig()) -> float:
        cfg.validate()
        if cfg.variant == "soft_squared":
            return (2.0 * self.cross + cfg.eps) / (self.truth_sq + self.pred_sq + cfg.eps)
        return (2.0 * self.cross + cfg.eps) / (self.truth_abs + cfg.eps)

    def iou(self, cfg: MetricsConfig = MetricsConfig()) -> float:
        cfg.validate()
        if cfg.variant == "soft_squared":
            return (self.cross + cfg.eps) / (self.truth_sq + self.pred_sq - self.cross + cfg.eps)
        den = self.truth_abs + self.pred_abs - self.cross
        if den == 0:
            raise ZeroReference("IoU denominator vanishes for all-zero fields")
        return self.cross / den


def dice(pred, truth, cfg: MetricsConfig = MetricsConfig()) -> float:
    return OverlapSums.of(pred, truth).dice(cfg)


def iou(pred, truth, cfg: MetricsConfig = MetricsConfig()) -> float:
    return OverlapSums.of(pred, truth).iou(cfg)
