"""Synthetic degraded-scene generator.

Scenes are square RGB images containing a handful of small axis-aligned
colored rectangles over a cluttered background, optionally softened by a
Gaussian blur. The distribution is deliberately hostile in three ways:
objects are small (side lengths biased toward the lower bound), the
background carries smoothed noise texture, and the whole frame can be
blurred. Every scene is a pure function of (seed, index), so datasets
need no storage to be reproducible.

Labels are the exact geometry of the rectangles as rendered, before blur.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigurationError
from .sfg import BoxXYXY
from .tensor import Tensor

# distinct, saturated color per class
PALETTE = np.array([
    [0.9, 0.2, 0.15],
    [0.2, 0.85, 0.3],
    [0.25, 0.35, 0.95],
    [0.95, 0.85, 0.2],
    [0.8, 0.3, 0.85],
], dtype=np.float32)

BACKGROUND_LEVEL = 0.35
CLUTTER_SMOOTHING = 3.0
MAX_PLACEMENT_TRIES = 30


@dataclass(frozen=True)
class SynthSceneSpec:
    image_size: int = 64
    num_classes: int = 3
    objects_min: int = 1
    objects_max: int = 6
    side_min: int = 4
    side_max: int = 16
    blur_sigma_min: float = 0.0
    blur_sigma_max: float = 1.5
    clutter: float = 0.25
    class_weights: tuple[float, ...] = ()
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 8:
            raise ConfigurationError(f"image_size too small: {self.image_size}")
        if not (1 <= self.num_classes <= len(PALETTE)):
            raise ConfigurationError(
                f"num_classes must be in [1, {len(PALETTE)}], got {self.num_classes}")
        if not (1 <= self.objects_min <= self.objects_max):
            raise ConfigurationError(
                f"bad object count range [{self.objects_min}, {self.objects_max}]")
        if not (2 <= self.side_min <= self.side_max < self.image_size):
            raise ConfigurationError(
                f"bad side range [{self.side_min}, {self.side_max}]")
        if not (0.0 <= self.blur_sigma_min <= self.blur_sigma_max):
            raise ConfigurationError(
                f"bad blur range [{self.blur_sigma_min}, {self.blur_sigma_max}]")
        if self.clutter < 0:
            raise ConfigurationError(f"clutter must be >= 0, got {self.clutter}")
        if self.class_weights and len(self.class_weights) != self.num_classes:
            raise ConfigurationError(
                f"class_weights needs {self.num_classes} entries, got {len(self.class_weights)}")

    def weights(self) -> np.ndarray:
        if self.class_weights:
            w = np.asarray(self.class_weights, dtype=np.float64)
            if np.any(w < 0) or w.sum() <= 0:
                raise ConfigurationError("class_weights must be non-negative, sum > 0")
            return w / w.sum()
        return np.full(self.num_classes, 1.0 / self.num_classes)


@dataclass
class SceneLabel:
    box: BoxXYXY
    class_id: int


def degraded_variant(spec: SynthSceneSpec) -> SynthSceneSpec:
    """Heavier blur, smaller objects: the stress suite for ablation runs."""
    return SynthSceneSpec(
        image_size=spec.image_size,
        num_classes=spec.num_classes,
        objects_min=spec.objects_min,
        objects_max=spec.objects_max,
        side_min=spec.side_min,
        side_max=max(spec.side_min, min(spec.side_max, 9)),
        blur_sigma_min=0.8,
        blur_sigma_max=1.5,
        clutter=spec.clutter,
        class_weights=spec.class_weights,
        seed=spec.seed,
    )


def _draw_side(rng: np.random.Generator, lo: int, hi: int) -> int:
    """Integer side in [lo, hi], squared-uniform so small sides dominate."""
    u = rng.uniform()
    return lo + int(u * u * (hi - lo + 1 - 1e-9))


def generate_scene(spec: SynthSceneSpec, index: int) -> tuple[Tensor, list[SceneLabel]]:
    """Deterministic scene `index` of the stream owned by `spec.seed`."""
    rng = np.random.default_rng([spec.seed, index])
    s = spec.image_size
    img = np.full((3, s, s), BACKGROUND_LEVEL, dtype=np.float64)
    if spec.clutter > 0:
        noise = rng.normal(size=(3, s, s))
        texture = gaussian_filter(noise, sigma=(0, CLUTTER_SMOOTHING, CLUTTER_SMOOTHING))
        img += spec.clutter * texture

    n_objects = int(rng.integers(spec.objects_min, spec.objects_max + 1))
    weights = spec.weights()
    labels: list[SceneLabel] = []
    occupied: list[tuple[int, int, int, int]] = []
    for _ in range(n_objects):
        placed = None
        for _ in range(MAX_PLACEMENT_TRIES):
            w = _draw_side(rng, spec.side_min, spec.side_max)
            h = _draw_side(rng, spec.side_min, spec.side_max)
            x1 = int(rng.integers(0, s - w + 1))
            y1 = int(rng.integers(0, s - h + 1))
            cand = (x1, y1, x1 + w, y1 + h)
            if all(cand[2] <= ox1 or cand[0] >= ox2 or cand[3] <= oy1 or cand[1] >= oy2
                   for ox1, oy1, ox2, oy2 in occupied):
                placed = cand
                break
        if placed is None:
            continue  # crowded frame; skip rather than overlap
        x1, y1, x2, y2 = placed
        cls = int(rng.choice(spec.num_classes, p=weights))
        img[:, y1:y2, x1:x2] = PALETTE[cls][:, None, None]
        occupied.append(placed)
        labels.append(SceneLabel(BoxXYXY(float(x1), float(y1), float(x2), float(y2)), cls))

    sigma = rng.uniform(spec.blur_sigma_min, spec.blur_sigma_max)
    if sigma > 0:
        img = gaussian_filter(img, sigma=(0, sigma, sigma))
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return Tensor(img[None]), labels


def generate_dataset(
    spec: SynthSceneSpec, count: int, offset: int = 0
) -> list[tuple[Tensor, list[SceneLabel]]]:
    return [generate_scene(spec, offset + i) for i in range(count)]
