"""Slide-weighted, truncated GIoU regression loss.

Per matched (prediction, target) pair: take GIoU loss 1 - giou, multiply
by a difficulty weight driven by the pair's IoU relative to a batch-level
anchor mu, then clamp the product through a linear truncation window so
extreme pairs stop moving the objective. The batch loss is the mean.

mu and the per-pair weights are frozen per batch: they are computed from
detached values and never backpropagated, since a reweighting that steers
its own gradient is a feedback loop. The differentiable path is exactly
the box geometry.

Two weight variants ship. "as-printed" uses 1 below mu - delta and
exp(-x) everywhere above, which is deliberately discontinuous at
mu - delta and continuous at mu. "slide-v2" uses the older form
(1; exp(1 - mu); exp(1 - x)) with its jump at mu - delta as well.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .tensor import Tensor

log = logging.getLogger(__name__)

VARIANTS = ("as-printed", "slide-v2")
MU_POLICIES = ("batch-mean-iou", "fixed")
EMPTY_BATCH_MU = 0.5


@dataclass(frozen=True)
class BoxXYXY:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise DimensionError(
                f"degenerate box ({self.x1}, {self.y1}, {self.x2}, {self.y2})")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


@dataclass(frozen=True)
class SlideConfig:
    mu_policy: str = "batch-mean-iou"
    mu_fixed: float = 0.5
    delta: float = 0.1
    variant: str = "as-printed"

    def __post_init__(self):
        if self.mu_policy not in MU_POLICIES:
            raise ConfigurationError(f"unknown mu policy {self.mu_policy!r}")
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown slide variant {self.variant!r}")
        if not (0.0 <= self.mu_fixed <= 1.0):
            raise ConfigurationError(f"fixed mu must be in [0,1], got {self.mu_fixed}")


@dataclass(frozen=True)
class FocalerConfig:
    d: float = 0.0
    u: float = 0.95

    def __post_init__(self):
        if not self.d < self.u:
            raise ConfigurationError(f"need d < u, got d={self.d}, u={self.u}")


@dataclass
class PairTerms:
    iou: float
    giou: float
    weight: float
    sg: float
    sg_focaler: float


@dataclass
class LossBreakdown:
    mu: float
    mu_fallback: bool
    pairs: list[PairTerms] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Pure-float geometry
# ---------------------------------------------------------------------------


def iou(a: BoxXYXY, b: BoxXYXY) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(0.0, iw) * max(0.0, ih)
    union = a.area + b.area - inter
    return inter / union


def giou(a: BoxXYXY, b: BoxXYXY) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(0.0, iw) * max(0.0, ih)
    union = a.area + b.area - inter
    hull = ((max(a.x2, b.x2) - min(a.x1, b.x1))
            * (max(a.y2, b.y2) - min(a.y1, b.y1)))
    return inter / union - (hull - union) / hull


def slide_weight(x: float, mu: float, cfg: SlideConfig) -> float:
    lo = mu - cfg.delta
    if x <= lo:
        return 1.0
    if cfg.variant == "as-printed":
        # middle and upper ranges share the same expression
        return math.exp(-x)
    if x < mu:
        return math.exp(1.0 - mu)
    return math.exp(1.0 - x)


def slide_giou(a: BoxXYXY, b: BoxXYXY, mu: float, cfg: SlideConfig) -> float:
    return slide_weight(iou(a, b), mu, cfg) * (1.0 - giou(a, b))


def focaler_truncate(sg: float, cfg: FocalerConfig) -> float:
    if sg < cfg.d:
        return 0.0
    if sg > cfg.u:
        return 1.0
    return (sg - cfg.d) / (cfg.u - cfg.d)


def mu_estimate(pairs: list[tuple[BoxXYXY, BoxXYXY]], cfg: SlideConfig) -> float:
    if cfg.mu_policy == "fixed":
        return cfg.mu_fixed
    if not pairs:
        log.warning("batch has no matched pairs; falling back to mu=%s", EMPTY_BATCH_MU)
        return EMPTY_BATCH_MU
    mean = sum(iou(a, b) for a, b in pairs) / len(pairs)
    return min(1.0, max(0.0, mean))


def sfg_loss(
    pairs: list[tuple[BoxXYXY, BoxXYXY]],
    slide_cfg: SlideConfig,
    focaler_cfg: FocalerConfig,
) -> tuple[float, LossBreakdown]:
    """Reference (non-differentiable) composition; the graph path must agree."""
    fallback = not pairs and slide_cfg.mu_policy == "batch-mean-iou"
    mu = mu_estimate(pairs, slide_cfg)
    breakdown = LossBreakdown(mu=mu, mu_fallback=fallback)
    if not pairs:
        return 0.0, breakdown
    total = 0.0
    for a, b in pairs:
        i = iou(a, b)
        g = giou(a, b)
        w = slide_weight(i, mu, slide_cfg)
        sg = w * (1.0 - g)
        sgf = focaler_truncate(sg, focaler_cfg)
        breakdown.pairs.append(PairTerms(i, g, w, sg, sgf))
        total += sgf
    return total / len(pairs), breakdown


# ---------------------------------------------------------------------------
# Differentiable path
# ---------------------------------------------------------------------------


def boxes_from_array(arr: np.ndarray) -> list[BoxXYXY]:
    return [BoxXYXY(*row) for row in np.asarray(arr, dtype=np.float64)]


def frozen_batch_constants(
    pred_xyxy: np.ndarray,
    target_xyxy: np.ndarray,
    slide_cfg: SlideConfig,
) -> tuple[float, np.ndarray]:
    """mu and per-pair slide weights from detached coordinates."""
    pairs = list(zip(boxes_from_array(pred_xyxy), boxes_from_array(target_xyxy)))
    mu = mu_estimate(pairs, slide_cfg)
    weights = np.array([slide_weight(iou(a, b), mu, slide_cfg) for a, b in pairs],
                       dtype=np.float64)
    return mu, weights


def giou_graph(pred: Tensor, target: np.ndarray) -> Tensor:
    """Per-pair GIoU on tape. pred is [1,4,P,1] with channels x1,y1,x2,y2;
    target is a constant [P,4] array. Returns [1,1,P,1]."""
    p = pred.shape[2]
    if pred.shape != (1, 4, p, 1):
        raise DimensionError(f"pred must be [1,4,P,1], got {pred.shape}")
    if target.shape != (p, 4):
        raise DimensionError(f"target must be [P,4]={p}x4, got {target.shape}")
    ax1, ay1, ax2, ay2 = T.split_channels(pred, [1, 1, 1, 1])
    tt = np.asarray(target, dtype=pred.data.dtype)
    bx1, by1, bx2, by2 = (Tensor(tt[:, i].reshape(1, 1, p, 1)) for i in range(4))

    iw = T.sub(T.minimum(ax2, bx2), T.maximum(ax1, bx1))
    ih = T.sub(T.minimum(ay2, by2), T.maximum(ay1, by1))
    inter = T.mul(T.relu(iw), T.relu(ih))
    area_a = T.mul(T.sub(ax2, ax1), T.sub(ay2, ay1))
    area_b = T.mul(T.sub(bx2, bx1), T.sub(by2, by1))
    union = T.sub(T.add(area_a, area_b), inter)
    hull_w = T.sub(T.maximum(ax2, bx2), T.minimum(ax1, bx1))
    hull_h = T.sub(T.maximum(ay2, by2), T.minimum(ay1, by1))
    hull = T.mul(hull_w, hull_h)
    return T.sub(T.divide(inter, union), T.divide(T.sub(hull, union), hull))


def _clamp01(z: Tensor) -> Tensor:
    """Piecewise-linear clamp to [0,1] built from two relu kinks."""
    return T.sub(T.relu(z), T.relu(T.sub(z, 1.0)))


def sfg_loss_graph(
    pred: Tensor,
    target: np.ndarray,
    slide_cfg: SlideConfig,
    focaler_cfg: FocalerConfig,
    use_slide: bool = True,
    use_focaler: bool = True,
    frozen: tuple[float, np.ndarray] | None = None,
) -> tuple[Tensor, LossBreakdown]:
    """Differentiable batch loss over P matched pairs.

    With both stages disabled this is the plain mean GIoU loss (the
    ablation baseline). `frozen` lets a caller pin (mu, weights); by
    default they are recomputed from the current detached coordinates.
    """
    p = pred.shape[2]
    g = giou_graph(pred, target)
    one_minus_g = T.sub(1.0, g)

    if use_slide:
        if frozen is None:
            frozen = frozen_batch_constants(pred.data[0, :, :, 0].T, target, slide_cfg)
        mu, weights = frozen
        w_t = Tensor(weights.reshape(1, 1, p, 1).astype(pred.data.dtype))
        sg = T.mul(w_t, one_minus_g)
    else:
        mu, weights = float("nan"), np.ones(p, dtype=np.float64)
        sg = one_minus_g

    if use_focaler:
        d, u = focaler_cfg.d, focaler_cfg.u
        z = T.scale(T.sub(sg, d), 1.0 / (u - d))
        per_pair = _clamp01(z)
    else:
        per_pair = sg

    loss = T.scale(T.sum_all(per_pair), 1.0 / p)

    breakdown = LossBreakdown(mu=mu, mu_fallback=False)
    g_det = g.data[0, 0, :, 0]
    sg_det = sg.data[0, 0, :, 0]
    per_det = per_pair.data[0, 0, :, 0]
    pred_boxes = boxes_from_array(pred.data[0, :, :, 0].T)
    tgt_boxes = boxes_from_array(target)
    for idx in range(p):
        breakdown.pairs.append(PairTerms(
            iou=iou(pred_boxes[idx], tgt_boxes[idx]),
            giou=float(g_det[idx]),
            weight=float(weights[idx]),
            sg=float(sg_det[idx]),
            sg_focaler=float(per_det[idx]),
        ))
    return loss, breakdown


def gradcheck_cases():
    from .gradcheck import Case

    def random_boxes(rng, n, low=0.0, high=10.0, min_side=1.0, max_side=4.0):
        rows = []
        for _ in range(n):
            w = rng.uniform(min_side, max_side)
            h = rng.uniform(min_side, max_side)
            x1 = rng.uniform(low, high - w)
            y1 = rng.uniform(low, high - h)
            rows.append([x1, y1, x1 + w, y1 + h])
        return np.array(rows, dtype=np.float64)

    def overlapping_targets(rng, pred_rows):
        # targets near the predictions so IoU spans interesting values
        rows = []
        for x1, y1, x2, y2 in pred_rows:
            dx, dy = rng.uniform(-1.0, 1.0, size=2)
            s = rng.uniform(0.7, 1.3)
            w, h = (x2 - x1) * s, (y2 - y1) * s
            rows.append([x1 + dx, y1 + dy, x1 + dx + w, y1 + dy + h])
        return np.array(rows, dtype=np.float64)

    def loss_case(use_slide, use_focaler, mu_policy):
        def factory(rng):
            n = 5
            pred_rows = random_boxes(rng, n)
            target = overlapping_targets(rng, pred_rows)
            pred = Tensor(pred_rows.T.reshape(1, 4, n, 1).copy(),
                          requires_grad=True, dtype=np.float64)
            slide_cfg = SlideConfig(mu_policy=mu_policy, mu_fixed=0.5)
            focaler_cfg = FocalerConfig()
            # pin the batch constants at the base point: they are
            # stop-gradient by contract, so the probe must hold them fixed
            frozen = frozen_batch_constants(pred.data[0, :, :, 0].T, target, slide_cfg)

            def build():
                loss, _ = sfg_loss_graph(pred, target, slide_cfg, focaler_cfg,
                                         use_slide=use_slide, use_focaler=use_focaler,
                                         frozen=frozen)
                return loss

            return build, [pred]

        return factory

    def giou_case():
        def factory(rng):
            n = 6
            pred_rows = random_boxes(rng, n)
            target = overlapping_targets(rng, pred_rows)
            pred = Tensor(pred_rows.T.reshape(1, 4, n, 1).copy(),
                          requires_grad=True, dtype=np.float64)
            r = None

            def build():
                nonlocal r
                y = giou_graph(pred, target)
                if r is None:
                    r = Tensor(rng.uniform(-1, 1, size=y.shape), dtype=np.float64)
                return T.sum_all(T.mul(y, r))

            return build, [pred]

        return factory

    return [
        Case("loss-sfg", "giou_geometry", giou_case()),
        Case("loss-sfg", "full_loss_batch_mu", loss_case(True, True, "batch-mean-iou")),
        Case("loss-sfg", "full_loss_fixed_mu", loss_case(True, True, "fixed")),
        Case("loss-sfg", "plain_giou_loss", loss_case(False, False, "fixed")),
        Case("loss-sfg", "slide_only", loss_case(True, False, "fixed")),
        Case("loss-sfg", "focaler_only", loss_case(False, True, "fixed")),
    ]
