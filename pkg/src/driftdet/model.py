"""Single-scale anchor-free toy detector.

Assembly: stem conv -> per-stage {stride-2 conv -> residual shift block}
-> optional dual-branch attention on the last stage -> 1x1 head emitting
per-cell (objectness, class logits, box offsets). Each toggle swaps one
module in or out so ablation rows differ by exactly that module.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .dbcasa import DbcasaConfig, DbcasaParams, dbcasa_forward
from .dbcasa import init_params as init_dbcasa_params
from .errors import ConfigurationError, DimensionError, NumericalError
from .fsfm import FsfmBlockParams, ShiftConfig, fsfm_c3k2_block, init_block_params
from .sfg import FocalerConfig, LossBreakdown, SlideConfig, sfg_loss_graph
from .synth import SceneLabel
from .tensor import ParamStore, Tensor, uniform_init

DEFAULT_CHANNELS = (8, 16, 24, 32)
OBJ_BIAS_INIT = -4.0  # start near-silent: sigmoid(-4) ~ 0.018 objectness


@dataclass(frozen=True)
class ModelToggles:
    """Ablation switches; each enables one module independently."""

    dbcasa: bool = False
    fsfm: bool = False
    sfg: bool = False

    def label(self) -> str:
        return "".join("1" if v else "0" for v in (self.dbcasa, self.fsfm, self.sfg))


@dataclass(frozen=True)
class LossWeights:
    box: float = 5.0
    obj: float = 1.0
    cls: float = 1.0

    def __post_init__(self):
        for name in ("box", "obj", "cls"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"loss weight {name} must be >= 0")


@dataclass
class _Stage:
    conv_w: Tensor
    conv_b: Tensor
    block: FsfmBlockParams


class DetectorModel:
    """Parameter handles plus the forward graph builder."""

    def __init__(self, toggles: ModelToggles, channels, image_size: int,
                 num_classes: int, store: ParamStore,
                 slide_cfg: SlideConfig, focaler_cfg: FocalerConfig):
        self.toggles = toggles
        self.channels = tuple(channels)
        self.image_size = image_size
        self.num_classes = num_classes
        self.store = store
        self.slide_cfg = slide_cfg
        self.focaler_cfg = focaler_cfg
        self.shift_cfg = ShiftConfig()
        self.stages: list[_Stage] = []
        self.attn: DbcasaParams | None = None
        self.attn_cfg: DbcasaConfig | None = None
        self.stem_w: Tensor
        self.stem_b: Tensor
        self.head_w: Tensor
        self.head_b: Tensor

    @property
    def num_stages(self) -> int:
        return len(self.channels) - 1

    @property
    def stride(self) -> int:
        return 2 ** self.num_stages

    @property
    def grid(self) -> int:
        return self.image_size // self.stride

    @property
    def head_channels(self) -> int:
        return 1 + self.num_classes + 4

    def forward(self, x: Tensor, train: bool = False,
                stats_sink: list | None = None) -> Tensor:
        """[N,3,S,S] -> [N, 1+K+4, G, G] raw head output."""
        n, c, h, w = x.shape
        if c != 3 or h != self.image_size or w != self.image_size:
            raise DimensionError(
                f"expected [N,3,{self.image_size},{self.image_size}], got {x.shape}")
        y = T.relu(T.conv2d(x, self.stem_w, self.stem_b, pad=1))
        for stage in self.stages:
            y = T.relu(T.conv2d(y, stage.conv_w, stage.conv_b, stride=2, pad=1))
            y = fsfm_c3k2_block(y, stage.block, self.shift_cfg,
                                use_fuse=self.toggles.fsfm)
        if self.attn is not None:
            y = dbcasa_forward(y, self.attn, self.attn_cfg,
                               train=train, stats_sink=stats_sink)
        return T.conv2d(y, self.head_w, self.head_b)


def build_model(
    toggles: ModelToggles,
    channels=DEFAULT_CHANNELS,
    image_size: int = 64,
    num_classes: int = 3,
    seed: int = 0,
    dtype=np.float32,
    slide_cfg: SlideConfig | None = None,
    focaler_cfg: FocalerConfig | None = None,
    attn_cfg: DbcasaConfig | None = None,
    shift_cfg: ShiftConfig | None = None,
) -> tuple[DetectorModel, ParamStore]:
    """Create the model and its parameter store, deterministically per seed.

    The residual blocks exist at every toggle setting (the shift stage
    inside them is parameter-free), so counts differ across toggle rows
    only by modules that actually own parameters.
    """
    channels = tuple(int(c) for c in channels)
    if len(channels) < 2:
        raise ConfigurationError("channels must list the stem plus at least one stage")
    if any(c < 4 for c in channels):
        raise ConfigurationError("every width must be at least 4")
    if any(c % 4 != 0 for c in channels[1:]):
        raise ConfigurationError(
            f"stage widths {channels[1:]} must be divisible by 4 "
            "(the four-way split inside each residual block)")
    stages = len(channels) - 1
    if image_size % (2 ** stages) != 0 or image_size // (2 ** stages) < 1:
        raise ConfigurationError(
            f"image size {image_size} not divisible by stride {2 ** stages}")
    if num_classes < 1:
        raise ConfigurationError("need at least one class")

    if attn_cfg is not None and attn_cfg.channels != channels[-1]:
        raise ConfigurationError(
            f"attention width {attn_cfg.channels} != last stage width {channels[-1]}")

    store = ParamStore()
    rng = np.random.default_rng([seed, 0])
    model = DetectorModel(toggles, channels, image_size, num_classes, store,
                          slide_cfg or SlideConfig(), focaler_cfg or FocalerConfig())
    if shift_cfg is not None:
        model.shift_cfg = shift_cfg

    def conv_pair(prefix, cin, cout, k, gain):
        w = store.add(prefix + "w",
                      Tensor(uniform_init(rng, (cout, cin, k, k), cin * k * k,
                                          dtype, gain=gain)))
        b = store.add(prefix + "b", Tensor(np.zeros((1, cout, 1, 1), dtype=dtype)))
        return w, b

    relu_gain, linear_gain = float(np.sqrt(6.0)), float(np.sqrt(3.0))
    model.stem_w, model.stem_b = conv_pair("stem.", 3, channels[0], 3, relu_gain)
    for i in range(stages):
        cin, cout = channels[i], channels[i + 1]
        cw, cb = conv_pair(f"stage{i + 1}.conv_", cin, cout, 3, relu_gain)
        block = init_block_params(cout, store, f"stage{i + 1}.block.", rng, dtype)
        model.stages.append(_Stage(cw, cb, block))
    if toggles.dbcasa:
        model.attn_cfg = attn_cfg or DbcasaConfig(channels[-1])
        model.attn = init_dbcasa_params(model.attn_cfg, store, "attn.", rng, dtype)
    model.head_w, model.head_b = conv_pair("head.", channels[-1],
                                           model.head_channels, 1, linear_gain)
    bias = model.head_b.data.copy()
    bias[0, 0, 0, 0] = OBJ_BIAS_INIT
    model.head_b.set_data(bias)
    return model, store


def module_param_counts(model: DetectorModel) -> dict[str, int]:
    """Learnable counts per architectural unit, plus the total."""
    counts = {"stem": model.store.count_prefix("stem.")}
    for i in range(1, model.num_stages + 1):
        counts[f"stage{i}"] = model.store.count_prefix(f"stage{i}.")
    counts["attention"] = model.store.count_prefix("attn.")
    counts["head"] = model.store.count_prefix("head.")
    counts["total"] = model.store.total_learnable()
    return counts


# ---------------------------------------------------------------------------
# Target assignment
# ---------------------------------------------------------------------------


@dataclass
class TargetAssignment:
    """Per-scene positives in row-major cell order, plus the dense
    objectness target grid and the count of truths dropped to cell
    collisions (larger box keeps the cell)."""

    rows: list[int] = field(default_factory=list)
    cols: list[int] = field(default_factory=list)
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    class_ids: list[int] = field(default_factory=list)
    obj_grid: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    dropped: int = 0


def assign_targets(grid: int, stride: int, labels: list[SceneLabel]) -> TargetAssignment:
    """Each truth goes to the cell containing its center; on collision the
    larger-area box owns the cell and the rest are dropped (counted)."""
    owner: dict[tuple[int, int], SceneLabel] = {}
    dropped = 0
    for lab in labels:
        b = lab.box
        r = min(grid - 1, int((b.y1 + b.y2) / 2 // stride))
        c = min(grid - 1, int((b.x1 + b.x2) / 2 // stride))
        held = owner.get((r, c))
        if held is None:
            owner[(r, c)] = lab
        elif b.area > held.box.area:
            owner[(r, c)] = lab
            dropped += 1
        else:
            dropped += 1
    out = TargetAssignment(obj_grid=np.zeros((grid, grid), dtype=np.float64),
                           dropped=dropped)
    cells = sorted(owner)
    out.rows = [r for r, _ in cells]
    out.cols = [c for _, c in cells]
    out.class_ids = [owner[cell].class_id for cell in cells]
    out.boxes = np.array([[owner[cell].box.x1, owner[cell].box.y1,
                           owner[cell].box.x2, owner[cell].box.y2]
                          for cell in cells], dtype=np.float64).reshape(-1, 4)
    for r, c in cells:
        out.obj_grid[r, c] = 1.0
    return out


# ---------------------------------------------------------------------------
# Box decoding
# ---------------------------------------------------------------------------


MIN_BOX_SIDE = 1.0  # decoded sides live in (MIN_BOX_SIDE, image_size)


def decode_boxes(raw: Tensor, rows, cols, stride: int, image_size: int) -> Tensor:
    """[1,4,P,1] cell-local offsets -> [1,4,P,1] absolute corner boxes.

    Center lands inside the owning cell via a sigmoid; sides interpolate
    between the one-pixel floor and the full image, so a box can never
    collapse to zero width even after 32-bit rounding.
    """
    p = raw.shape[2]
    if raw.shape != (1, 4, p, 1) or p != len(rows) or p != len(cols):
        raise DimensionError(f"raw offsets must be [1,4,P,1] matching indices, got {raw.shape}")
    dt = raw.data.dtype
    tx, ty, tw, th = T.split_channels(raw, [1, 1, 1, 1])
    col_off = Tensor(np.asarray(cols, dtype=dt).reshape(1, 1, p, 1))
    row_off = Tensor(np.asarray(rows, dtype=dt).reshape(1, 1, p, 1))
    cx = T.scale(T.add(T.sigmoid(tx), col_off), float(stride))
    cy = T.scale(T.add(T.sigmoid(ty), row_off), float(stride))
    span = (image_size - MIN_BOX_SIDE) / 2.0
    half_w = T.add(T.scale(T.sigmoid(tw), span), MIN_BOX_SIDE / 2.0)
    half_h = T.add(T.scale(T.sigmoid(th), span), MIN_BOX_SIDE / 2.0)
    return T.concat_channels([
        T.sub(cx, half_w), T.sub(cy, half_h),
        T.add(cx, half_w), T.add(cy, half_h),
    ])


def decode_boxes_reference(raw: np.ndarray, rows, cols, stride: int,
                           image_size: int) -> np.ndarray:
    """Plain-array mirror of decode_boxes for [P,4] offset rows."""
    raw = np.asarray(raw, dtype=np.float64)
    sig = 1.0 / (1.0 + np.exp(-raw))
    cx = (np.asarray(cols, dtype=np.float64) + sig[:, 0]) * stride
    cy = (np.asarray(rows, dtype=np.float64) + sig[:, 1]) * stride
    span = (image_size - MIN_BOX_SIDE) / 2.0
    hw = sig[:, 2] * span + MIN_BOX_SIDE / 2.0
    hh = sig[:, 3] * span + MIN_BOX_SIDE / 2.0
    return np.stack([cx - hw, cy - hh, cx + hw, cy + hh], axis=1)


# ---------------------------------------------------------------------------
# Training loss
# ---------------------------------------------------------------------------


@dataclass
class BatchLossInfo:
    num_positives: int
    dropped: int
    obj_loss: float
    cls_loss: float
    box_loss: float
    breakdown: LossBreakdown | None


def batch_loss(
    model: DetectorModel,
    images: Tensor,
    labels_per_scene: list[list[SceneLabel]],
    weights: LossWeights,
    train: bool = True,
    stats_sink: list | None = None,
    frozen: tuple[float, np.ndarray] | None = None,
) -> tuple[Tensor, BatchLossInfo]:
    """Weighted sum of objectness BCE (all cells), class BCE and the
    slide/focaler-gated GIoU regression (positive cells only)."""
    n = images.shape[0]
    if len(labels_per_scene) != n:
        raise DimensionError(f"{n} images but {len(labels_per_scene)} label lists")
    out = model.forward(images, train=train, stats_sink=stats_sink)
    if not np.all(np.isfinite(out.data)):
        raise NumericalError("non-finite values in the model head output")
    g, k = model.grid, model.num_classes
    obj, cls, box = T.split_channels(out, [1, k, 4])

    b_idx: list[int] = []
    rows: list[int] = []
    cols: list[int] = []
    tclasses: list[int] = []
    tboxes: list[np.ndarray] = []
    obj_target = np.zeros((n, 1, g, g), dtype=np.float64)
    dropped = 0
    for s, labels in enumerate(labels_per_scene):
        asg = assign_targets(g, model.stride, labels)
        dropped += asg.dropped
        obj_target[s, 0] = asg.obj_grid
        b_idx.extend([s] * len(asg.rows))
        rows.extend(asg.rows)
        cols.extend(asg.cols)
        tclasses.extend(asg.class_ids)
        if len(asg.rows):
            tboxes.append(asg.boxes)

    obj_term = T.scale(T.sum_all(T.bce_with_logits(obj, obj_target)), 1.0 / (n * g * g))
    p = len(rows)
    if p == 0:
        total = T.scale(obj_term, weights.obj)
        return total, BatchLossInfo(0, dropped, obj_term.item(), 0.0, 0.0, None)

    cls_at_pos = T.gather_cells(cls, b_idx, rows, cols)  # [1,K,P,1]
    one_hot = np.zeros((1, k, p, 1), dtype=np.float64)
    for j, cid in enumerate(tclasses):
        one_hot[0, cid, j, 0] = 1.0
    cls_term = T.scale(T.sum_all(T.bce_with_logits(cls_at_pos, one_hot)), 1.0 / (p * k))

    raw_box = T.gather_cells(box, b_idx, rows, cols)  # [1,4,P,1]
    pred_boxes = decode_boxes(raw_box, rows, cols, model.stride, model.image_size)
    target = np.concatenate(tboxes, axis=0)
    use_sfg = model.toggles.sfg
    box_term, breakdown = sfg_loss_graph(
        pred_boxes, target, model.slide_cfg, model.focaler_cfg,
        use_slide=use_sfg, use_focaler=use_sfg, frozen=frozen)

    total = T.add(T.add(T.scale(box_term, weights.box), T.scale(obj_term, weights.obj)),
                  T.scale(cls_term, weights.cls))
    info = BatchLossInfo(p, dropped, obj_term.item(), cls_term.item(),
                         box_term.item(), breakdown)
    return total, info


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def predict_scene(model: DetectorModel, image: Tensor,
                  conf_floor: float = 0.05) -> list:
    """All decoded cells with objectness x best-class confidence above the
    floor, in row-major cell order. NMS/thresholding happen in the metrics
    layer, not here."""
    from .metrics import Detection
    from .sfg import BoxXYXY

    out = model.forward(image, train=False)
    g, k = model.grid, model.num_classes
    head = out.data[0].astype(np.float64)  # [1+K+4, G, G]
    obj_prob = 1.0 / (1.0 + np.exp(-head[0]))
    cls_prob = 1.0 / (1.0 + np.exp(-head[1:1 + k]))
    best_cls = np.argmax(cls_prob, axis=0)
    best_prob = np.take_along_axis(cls_prob, best_cls[None], axis=0)[0]
    conf = obj_prob * best_prob

    rows, cols = np.nonzero(conf >= conf_floor)
    if rows.size == 0:
        return []
    raw = head[1 + k:, rows, cols].T  # [P,4]
    boxes = decode_boxes_reference(raw, rows, cols, model.stride, model.image_size)
    dets = []
    for j in range(rows.size):
        x1, y1, x2, y2 = boxes[j]
        dets.append(Detection(BoxXYXY(float(x1), float(y1), float(x2), float(y2)),
                              int(best_cls[rows[j], cols[j]]),
                              float(conf[rows[j], cols[j]])))
    return dets
