"""Detection metrics: confidence filtering, NMS, matching, precision/recall,
and class-averaged all-point average precision at IoU 0.5.

All rankings use a total order (confidence descending, then scene id, class
id, and box coordinates ascending), so every figure is invariant under
permutations of the input and stable under confidence ties.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigurationError
from .sfg import BoxXYXY, iou
from .synth import SceneLabel

CONF_THRESHOLD = 0.25
NMS_IOU = 0.5
MATCH_IOU = 0.5


@dataclass(frozen=True)
class Detection:
    box: BoxXYXY
    class_id: int
    confidence: float

    def __post_init__(self):
        if not (0.0 <= self.confidence <= 1.0):
            raise ConfigurationError(f"confidence out of range: {self.confidence}")


@dataclass
class MetricsReport:
    precision: float
    recall: float
    f1: float
    ap50: float
    param_count: int
    epochs: int
    seed: int

    def __post_init__(self):
        for name in ("precision", "recall", "f1", "ap50"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigurationError(f"{name} out of [0,1]: {v}")


def _rank_key(scene_id: int, d: Detection):
    b = d.box
    return (-d.confidence, scene_id, d.class_id, b.x1, b.y1, b.x2, b.y2)


def nms(dets: list[Detection], iou_thresh: float = NMS_IOU) -> list[Detection]:
    """Greedy per-class suppression within one scene."""
    kept: list[Detection] = []
    ordered = sorted(dets, key=lambda d: _rank_key(0, d))
    for d in ordered:
        if any(k.class_id == d.class_id and iou(k.box, d.box) > iou_thresh for k in kept):
            continue
        kept.append(d)
    return kept


def _greedy_match(
    dets: list[Detection],
    truths: list[SceneLabel],
    iou_thresh: float,
) -> list[bool]:
    """True/false-positive flag per detection, in the given order.

    Each detection takes the highest-IoU unmatched truth of its class; a
    truth matches at most once.
    """
    taken = [False] * len(truths)
    flags = []
    for d in dets:
        best, best_iou = -1, iou_thresh
        for ti, t in enumerate(truths):
            if taken[ti] or t.class_id != d.class_id:
                continue
            v = iou(d.box, t.box)
            if v >= best_iou and (best == -1 or v > best_iou):
                best, best_iou = ti, v
        if best >= 0:
            taken[best] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def precision_recall_f1(
    preds_by_scene: list[list[Detection]],
    truths_by_scene: list[list[SceneLabel]],
    conf_thresh: float = CONF_THRESHOLD,
    iou_thresh: float = MATCH_IOU,
) -> tuple[float, float, float]:
    """Micro-averaged point metrics after confidence filtering and NMS."""
    tp = fp = 0
    total_truths = sum(len(t) for t in truths_by_scene)
    for preds, truths in zip(preds_by_scene, truths_by_scene):
        strong = [d for d in preds if d.confidence >= conf_thresh]
        kept = nms(strong)
        kept = sorted(kept, key=lambda d: _rank_key(0, d))
        for flag in _greedy_match(kept, truths, iou_thresh):
            if flag:
                tp += 1
            else:
                fp += 1
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / total_truths if total_truths else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def ap50(
    preds_by_scene: list[list[Detection]],
    truths_by_scene: list[list[SceneLabel]],
    iou_thresh: float = MATCH_IOU,
    apply_nms: bool = True,
) -> float:
    """All-point interpolated AP at the given IoU, averaged over every class
    that has at least one truth. Uses the full ranked prediction list."""
    classes = sorted({t.class_id for truths in truths_by_scene for t in truths})
    if not classes:
        return 0.0
    per_class = []
    for cls in classes:
        ranked: list[tuple[tuple, int, Detection]] = []
        for sid, preds in enumerate(preds_by_scene):
            scene_dets = [d for d in preds if d.class_id == cls]
            if apply_nms:
                scene_dets = nms(scene_dets)
            for d in scene_dets:
                ranked.append((_rank_key(sid, d), sid, d))
        ranked.sort(key=lambda r: r[0])

        n_truth = sum(1 for truths in truths_by_scene for t in truths if t.class_id == cls)
        taken = {sid: [False] * len(truths) for sid, truths in enumerate(truths_by_scene)}
        tp_flags = []
        for _, sid, d in ranked:
            truths = truths_by_scene[sid]
            best, best_iou = -1, iou_thresh
            for ti, t in enumerate(truths):
                if taken[sid][ti] or t.class_id != cls:
                    continue
                v = iou(d.box, t.box)
                if v >= best_iou and (best == -1 or v > best_iou):
                    best, best_iou = ti, v
            if best >= 0:
                taken[sid][best] = True
                tp_flags.append(True)
            else:
                tp_flags.append(False)

        # precision envelope over the ranked list, integrated across recall
        tp = fp = 0
        points = []  # (recall, precision) after each prediction
        for flag in tp_flags:
            if flag:
                tp += 1
            else:
                fp += 1
            points.append((tp / n_truth, tp / (tp + fp)))
        env = []  # precision replaced by its running max from the right
        running = 0.0
        for recall, precision in reversed(points):
            running = max(running, precision)
            env.append((recall, running))
        env.reverse()
        ap, last_r = 0.0, 0.0
        for recall, prec_env in env:
            ap += (recall - last_r) * prec_env
            last_r = recall
        per_class.append(ap)
    return sum(per_class) / len(per_class)


def build_report(
    preds_by_scene: list[list[Detection]],
    truths_by_scene: list[list[SceneLabel]],
    param_count: int,
    epochs: int,
    seed: int,
    conf_thresh: float = CONF_THRESHOLD,
    iou_thresh: float = MATCH_IOU,
) -> MetricsReport:
    p, r, f1 = precision_recall_f1(preds_by_scene, truths_by_scene, conf_thresh, iou_thresh)
    ap = ap50(preds_by_scene, truths_by_scene, iou_thresh)
    return MetricsReport(precision=p, recall=r, f1=f1, ap50=ap,
                         param_count=param_count, epochs=epochs, seed=seed)
