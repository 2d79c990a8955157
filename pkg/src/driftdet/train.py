"""Deterministic single-threaded training loop, evaluation and ablation."""

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .dbcasa import fold_bn_stats, reset_bn_stats
from .errors import ConfigurationError, NumericalError
from .metrics import MetricsReport, build_report
from .model import (DetectorModel, LossWeights, ModelToggles, batch_loss,
                    build_model, predict_scene)
from .synth import SceneLabel
from .tensor import ParamStore, Tape, Tensor

log = logging.getLogger(__name__)

Scene = tuple[Tensor, list[SceneLabel]]


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.937
    weight_decay: float = 0.0005
    epochs: int = 200
    batch_size: int = 8
    seed: int = 0
    toggles: ModelToggles = field(default_factory=lambda: ModelToggles(True, True, True))
    weights: LossWeights = field(default_factory=LossWeights)
    eval_every: int = 0      # 0 = evaluate only after the final epoch
    stop_at_ap50: float = 0.0  # >0 = stop once a scheduled eval reaches it
    clip_norm: float = 5.0   # global gradient-norm cap per step; 0 = off
    lr_final_frac: float = 0.1  # linear decay of the initial rate across epochs

    def lr_at(self, epoch: int) -> float:
        """Linearly interpolated rate for an absolute epoch index."""
        if self.epochs <= 1:
            return self.learning_rate
        t = min(epoch, self.epochs - 1) / (self.epochs - 1)
        return self.learning_rate * (1.0 + (self.lr_final_frac - 1.0) * t)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError("learning rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigurationError("weight decay must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch size must be >= 1")
        if not 0 <= self.stop_at_ap50 <= 1:
            raise ConfigurationError("stop_at_ap50 must be in [0, 1]")
        if self.clip_norm < 0:
            raise ConfigurationError("clip_norm must be >= 0")
        if not 0 < self.lr_final_frac <= 1:
            raise ConfigurationError("lr_final_frac must be in (0, 1]")


class SgdState:
    """Momentum buffers, one per learnable parameter."""

    def __init__(self, store: ParamStore):
        self.velocity: dict[str, np.ndarray] = {
            name: np.zeros_like(t.data) for name, t in store.learnable_items()}

    def step(self, store: ParamStore, lr: float, momentum: float,
             weight_decay: float, clip_norm: float = 0.0) -> None:
        """v <- m v + g;  p <- p - lr v - lr wd p (decoupled decay).

        With clip_norm > 0 the whole gradient vector is rescaled so its
        global L2 norm never exceeds the cap (a deterministic stabilizer
        for the fixed high-momentum schedule)."""
        grads = {name: (t.grad if t.grad is not None else np.zeros_like(t.data))
                 for name, t in store.learnable_items()}
        factor = 1.0
        if clip_norm > 0:
            total = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum())
                                for g in grads.values()))
            if total > clip_norm:
                factor = clip_norm / total
        for name, t in store.learnable_items():
            v = self.velocity[name]
            v *= momentum
            v += (grads[name] * factor).astype(v.dtype, copy=False)
            t.set_data(t.data - lr * v - (lr * weight_decay) * t.data)


@dataclass
class TrainResult:
    epoch_losses: list[float]
    reports: list[MetricsReport]
    epochs_run: int
    dropped_total: int


def _batches(n: int, batch_size: int, order: np.ndarray):
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def run_epoch(model: DetectorModel, store: ParamStore, data: list[Scene],
              cfg: TrainConfig, state: SgdState, epoch: int) -> tuple[float, int]:
    """One pass over the data in the epoch's shuffled order; returns the
    scene-weighted mean batch loss and the number of dropped truths."""
    order = np.random.default_rng([cfg.seed, 1000 + epoch]).permutation(len(data))
    total, dropped = 0.0, 0
    if model.attn is not None:
        reset_bn_stats(store)
    for bi, idx in enumerate(_batches(len(data), cfg.batch_size, order)):
        images = Tensor(np.concatenate([data[i][0].data for i in idx], axis=0))
        labels = [data[i][1] for i in idx]
        sink: list | None = [] if model.attn is not None else None
        store.zero_grads()
        with Tape() as tape:
            try:
                loss, info = batch_loss(model, images, labels, cfg.weights,
                                        train=True, stats_sink=sink)
            except NumericalError as e:
                raise NumericalError(f"{e} (epoch {epoch} batch {bi})") from None
            value = loss.item()
            if not np.isfinite(value):
                raise NumericalError(
                    f"non-finite loss {value} at epoch {epoch} batch {bi}")
            tape.backward(loss)
        state.step(store, cfg.lr_at(epoch), cfg.momentum, cfg.weight_decay,
                   clip_norm=cfg.clip_norm)
        if sink:
            fold_bn_stats(store, sink)
        total += value * len(idx)
        dropped += info.dropped
    for name, t in store.learnable_items():
        if not np.all(np.isfinite(t.data)):
            raise NumericalError(f"non-finite values in '{name}' after epoch {epoch}")
    return total / len(data), dropped


def evaluate(model: DetectorModel, scenes: list[Scene], iou_thresh: float = 0.5,
             epochs: int = 0, seed: int = 0) -> MetricsReport:
    preds = [predict_scene(model, image) for image, _ in scenes]
    truths = [labels for _, labels in scenes]
    return build_report(preds, truths, param_count=model.store.total_learnable(),
                        epochs=epochs, seed=seed, iou_thresh=iou_thresh)


def train(
    model: DetectorModel,
    store: ParamStore,
    train_data: list[Scene],
    cfg: TrainConfig,
    val_data: list[Scene] | None = None,
    start_epoch: int = 0,
    end_epoch: int | None = None,
    state: SgdState | None = None,
    on_epoch=None,
) -> TrainResult:
    """Train in place; deterministic given (cfg.seed, start_epoch, data).

    `start_epoch`/`state` let a checkpoint resume mid-schedule with the
    same shuffles, momentum and rate schedule it would have had
    uninterrupted; `end_epoch` truncates the pass without changing that
    schedule.
    """
    if not train_data:
        raise ConfigurationError("empty training set")
    if state is None:
        state = SgdState(store)
    losses: list[float] = []
    reports: list[MetricsReport] = []
    dropped_total = 0
    epochs_run = start_epoch
    last = cfg.epochs if end_epoch is None else min(end_epoch, cfg.epochs)
    for epoch in range(start_epoch, last):
        mean_loss, dropped = run_epoch(model, store, train_data, cfg, state, epoch)
        losses.append(mean_loss)
        dropped_total += dropped
        epochs_run = epoch + 1
        log.debug("epoch %d: loss %.5f", epoch, mean_loss)
        if on_epoch is not None:
            on_epoch(epoch, mean_loss, state)
        due = cfg.eval_every > 0 and (epoch + 1) % cfg.eval_every == 0
        if due and val_data:
            report = evaluate(model, val_data, epochs=epochs_run, seed=cfg.seed)
            reports.append(report)
            log.debug("epoch %d: ap50 %.4f", epoch, report.ap50)
            if 0 < cfg.stop_at_ap50 <= report.ap50:
                break
    if val_data and (not reports or reports[-1].epochs != epochs_run):
        reports.append(evaluate(model, val_data, epochs=epochs_run, seed=cfg.seed))
    return TrainResult(losses, reports, epochs_run, dropped_total)


# ---------------------------------------------------------------------------
# Ablation table
# ---------------------------------------------------------------------------


TOGGLE_ORDER = tuple(
    ModelToggles(bool(bits & 4), bool(bits & 2), bool(bits & 1))
    for bits in range(8))


@dataclass
class AblationRow:
    toggles: ModelToggles
    report: MetricsReport
    final_loss: float


def run_single(train_data: list[Scene], val_data: list[Scene],
               cfg: TrainConfig,
               **build_kwargs) -> tuple[TrainResult, DetectorModel, ParamStore]:
    """One fresh seeded build-train-evaluate run for cfg.toggles."""
    model, store = build_model(cfg.toggles, seed=cfg.seed, **build_kwargs)
    result = train(model, store, train_data, cfg, val_data=val_data)
    return result, model, store


def ablate(train_data: list[Scene], val_data: list[Scene],
           cfg: TrainConfig, **build_kwargs) -> list[AblationRow]:
    """All 8 toggle rows on shared data and seed, in binary order
    (dbcasa, fsfm, sfg)."""
    rows = []
    for toggles in TOGGLE_ORDER:
        row_cfg = replace(cfg, toggles=toggles)
        result, _, _ = run_single(train_data, val_data, row_cfg, **build_kwargs)
        rows.append(AblationRow(toggles, result.reports[-1],
                                result.epoch_losses[-1]))
    return rows
