"""L1 losses, Adam with step-decayed learning rate, and the fit loop."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import models
from . import tensor as T
from .dataset import FieldSample, batches, derive_seed
from .errors import InvalidParams, InvalidSpec, NonFiniteLoss, ShapeMismatch
from .metrics import MetricsConfig, OverlapSums, mre_terms
from .tensor import Tensor

log = logging.getLogger(__name__)

TARGET_MODES = ("components", "magnitude")


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 4e-4
    decay_factor: float = 0.9
    decay_every: int = 25
    batch_size: int = 16
    epochs: int | None = None  # None: 100 for components, 75 for magnitude
    seed: int = 0
    target_mode: str = "magnitude"

    def validate(self) -> None:
        if not self.initial_lr > 0 or not 0 < self.decay_factor <= 1 or self.decay_every < 1:
            raise InvalidParams("learning-rate schedule parameters out of range")
        if self.batch_size < 1:
            raise InvalidParams("batch_size must be >= 1")
        if self.epochs is not None and self.epochs < 1:
            raise InvalidParams("epochs must be >= 1")
        if self.target_mode not in TARGET_MODES:
            raise InvalidParams(f"target_mode must be one of {TARGET_MODES}")

    @property
    def n_epochs(self) -> int:
        if self.epochs is not None:
            return self.epochs
        return 100 if self.target_mode == "components" else 75


# ------------------------------------------------------------ losses


def _abs_diff(pred: Tensor, truth) -> Tensor:
    truth = truth if isinstance(truth, Tensor) else Tensor(np.asarray(truth, dtype=pred.dtype))
    if pred.shape != truth.shape:
        raise ShapeMismatch(f"prediction {pred.shape} and truth {truth.shape} differ")
    return T.abs_(pred - truth)


def l1_components(pred: Tensor, truth) -> Tensor:
    """(1 / 2 m nx ny) * sum(|du| + |dv|): the mean absolute error over both channels."""
    if pred.ndim != 4 or pred.shape[1] != 2:
        raise ShapeMismatch(f"expected N x 2 x H x W, got {pred.shape}")
    return T.mean_all(_abs_diff(pred, truth))


def l1_magnitude(pred: Tensor, truth) -> Tensor:
    """(1 / 2 m nx ny) * sum |dV|, i.e. half the mean absolute error."""
    if pred.ndim != 4 or pred.shape[1] != 1:
        raise ShapeMismatch(f"expected N x 1 x H x W, got {pred.shape}")
    return T.mean_all(_abs_diff(pred, truth)) * 0.5


def loss_for(target_mode: str):
    return l1_components if target_mode == "components" else l1_magnitude


# ------------------------------------------------------------ optimizer


def lr_at(epoch: int, cfg: TrainConfig = TrainConfig()) -> float:
    if epoch < 0:
        raise InvalidParams("epoch must be >= 0")
    return cfg.initial_lr * cfg.decay_factor ** (epoch // cfg.decay_every)


@dataclass
class AdamState:
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState, lr: float) -> AdamState:
    """In-place bias-corrected Adam update of ``params``."""
    if len(params) != len(grads):
        raise ShapeMismatch("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    for p, g, m in zip(params, grads, state.m):
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeMismatch(f"gradient {g.shape} does not match parameter {p.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = (p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return state


# ------------------------------------------------------------ history

COLUMNS = ("epoch", "lr", "train_loss", "val_loss", "train_mre", "val_mre",
           "train_dice", "val_dice", "train_iou", "val_iou")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    train_mre: float
    val_mre: float
    train_dice: float
    val_dice: float
    train_iou: float
    val_iou: float
    steps: int = 0
    seconds: float = field(default=0.0, compare=False)


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1

    @property
    def steps(self) -> int:
        return sum(r.steps for r in self.records)

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError("epoch indices must increase")
        self.records.append(rec)

    def to_table(self) -> str:
        """One line per epoch; wall-clock time is left out so tables are reproducible."""
        lines = [" ".join(f"{c:>12}" for c in COLUMNS)]
        for r in self.records:
            vals = [f"{r.epoch:>12d}"] + [f"{getattr(r, c):>12.6g}" for c in COLUMNS[1:]]
            lines.append(" ".join(vals))
        return "\n".join(lines) + "\n"


@dataclass
class _Tally:
    loss_sum: float = 0.0
    count: int = 0
    mre_terms: list = field(default_factory=list)
    overlap: OverlapSums = field(default_factory=OverlapSums)

    def add(self, loss: float, pred: np.ndarray, truth: np.ndarray) -> None:
        n = pred.shape[0]
        self.loss_sum += loss * n
        self.count += n
        # all-zero references cannot occur for generated samples; guard anyway
        den = np.abs(truth).reshape(n, -1).sum(axis=1)
        if np.all(den > 0):
            self.mre_terms.extend(mre_terms(pred, truth).tolist())
        self.overlap = self.overlap + OverlapSums.of(pred, truth)

    def summary(self, cfg: MetricsConfig) -> tuple[float, float, float, float]:
        if self.count == 0:
            return (math.nan,) * 4
        mre = float(np.mean(self.mre_terms)) if self.mre_terms else math.nan
        return self.loss_sum / self.count, mre, self.overlap.dice(cfg), self.overlap.iou(cfg)


def evaluate(model: models.Model, samples: list[FieldSample], target_mode: str, batch_size: int = 16,
             metrics_cfg: MetricsConfig = MetricsConfig()) -> tuple[float, float, float, float]:
    """(loss, MRE, Dice, IoU) in eval mode."""
    loss_fn = loss_for(target_mode)
    tally = _Tally()
    for b in batches(samples, batch_size, None, target_mode):
        pred = models.forward(model, b.x, "eval")
        tally.add(float(loss_fn(pred, b.y).data), pred.data, b.y)
    return tally.summary(metrics_cfg)


def _snapshot(model: models.Model):
    return ([p.data.copy() for p in model.parameters()],
            [(m, name, getattr(m, name).copy()) for m in model.modules() for name in m._buffers])


def _restore(model: models.Model, snap) -> None:
    params, bufs = snap
    for p, d in zip(model.parameters(), params):
        p.data = d
    for m, name, arr in bufs:
        m.register_buffer(name, arr)


def fit(model: models.Model, train_set: list[FieldSample], val_set: list[FieldSample], cfg: TrainConfig,
        out_dir=None, metrics_cfg: MetricsConfig = MetricsConfig(), progress=None):
    """Train ``model``; returns the best-by-validation-loss model and the history.

    With an empty ``val_set`` the training loss selects the best epoch.
    Training metrics are accumulated from the train-mode forward passes.
    """
    cfg.validate()
    if not train_set:
        raise InvalidParams("training set is empty")
    n_out = train_set[0].target(cfg.target_mode).shape[0]
    if n_out != model.spec.out_channels:
        raise InvalidSpec(f"model predicts {model.spec.out_channels} channels, target has {n_out}")
    loss_fn = loss_for(cfg.target_mode)
    params = model.parameters()
    state = AdamState()
    history = History()
    model.seed_dropout(derive_seed(cfg.seed, 0xD0))
    best, best_loss = None, math.inf
    rec_log = T.current_record()
    for epoch in range(cfg.n_epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, cfg)
        model.train()
        tally = _Tally()
        steps = 0
        for bi, b in enumerate(batches(train_set, cfg.batch_size, derive_seed(cfg.seed, epoch), cfg.target_mode)):
            rec_log.clear()
            model.zero_grad()
            pred = model(Tensor(b.x))
            loss = loss_fn(pred, b.y)
            value = float(loss.data)
            if not math.isfinite(value):
                rec_log.clear()
                raise NonFiniteLoss(f"non-finite loss {value} at epoch {epoch}, batch {bi}")
            grads = T.backward(loss, params)
            adam_step(params, grads, state, lr)
            steps += 1
            tally.add(value, pred.data, b.y)
        tr = tally.summary(metrics_cfg)
        va = evaluate(model, val_set, cfg.target_mode, cfg.batch_size, metrics_cfg) if val_set else (math.nan,) * 4
        rec = EpochRecord(epoch, lr, tr[0], va[0], tr[1], va[1], tr[2], va[2], tr[3], va[3], steps,
                          time.perf_counter() - t0)
        history.append(rec)
        select = va[0] if val_set else tr[0]
        if select < best_loss:
            best_loss, best = select, _snapshot(model)
            history.best_epoch = epoch
            if out_dir is not None:
                models.save(model, Path(out_dir) / "best.mfck")
        log.info("epoch %d lr %.3g train %.5f val %.5f (%.1fs)", epoch, lr, tr[0], va[0], rec.seconds)
        if progress is not None:
            progress(rec)
    if out_dir is not None:
        (Path(out_dir) / "history.txt").write_text(history.to_table())
    if best is not None:
        _restore(model, best)
    return model, history
