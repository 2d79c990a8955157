"""Run configuration: one YAML document covering generator, model, loss
and optimizer settings. Unknown keys are rejected, defaults are the
dataclass defaults, and a loaded config re-serializes to one canonical
sorted form whose SHA-256 names the run."""

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .dbcasa import DbcasaConfig
from .errors import ConfigurationError
from .fsfm import ShiftConfig
from .model import LossWeights, ModelToggles
from .sfg import FocalerConfig, SlideConfig
from .synth import SynthSceneSpec
from .train import TrainConfig

_SCENE_KEYS = ("image_size", "num_classes", "objects_min", "objects_max",
               "side_min", "side_max", "blur_sigma_min", "blur_sigma_max",
               "clutter", "class_weights")
_TRAIN_KEYS = ("learning_rate", "momentum", "weight_decay", "epochs",
               "batch_size", "eval_every", "stop_at_ap50", "clip_norm",
               "lr_final_frac", "box_weight", "obj_weight", "cls_weight",
               "checkpoint_every")
_TOGGLE_KEYS = ("dbcasa", "fsfm", "sfg")
_SLIDE_KEYS = ("mu_policy", "mu_fixed", "delta", "variant")
_FOCALER_KEYS = ("d", "u")
_SHIFT_KEYS = ("step",)
_ATTENTION_KEYS = ("dw_kernel", "maps_from_input", "swap_pairing")
_MODEL_KEYS = ("channels",)
_TOP_KEYS = ("seed", "output_dir", "train_scenes", "val_scenes", "scene",
             "model", "toggles", "train", "slide", "focaler", "shift",
             "attention")


def _section(data: dict, name: str, allowed: tuple[str, ...]) -> dict:
    raw = data.get(name, {})
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigurationError(f"section '{name}' must be a mapping")
    for key in raw:
        if key not in allowed:
            raise ConfigurationError(f"unknown key '{name}.{key}'")
    return raw


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs"
    train_scenes: int = 200
    val_scenes: int = 50
    scene: SynthSceneSpec = field(default_factory=SynthSceneSpec)
    channels: tuple[int, ...] = (8, 16, 24, 32)
    toggles: ModelToggles = field(default_factory=lambda: ModelToggles(True, True, True))
    train: TrainConfig = field(default_factory=TrainConfig)
    slide: SlideConfig = field(default_factory=SlideConfig)
    focaler: FocalerConfig = field(default_factory=FocalerConfig)
    shift: ShiftConfig = field(default_factory=ShiftConfig)
    attention: DbcasaConfig | None = None
    checkpoint_every: int = 50

    def __post_init__(self):
        if self.train_scenes < 1:
            raise ConfigurationError("train_scenes must be >= 1")
        if self.val_scenes < 0:
            raise ConfigurationError("val_scenes must be >= 0")
        if self.checkpoint_every < 0:
            raise ConfigurationError("train.checkpoint_every must be >= 0")
        if self.attention is None:
            self.attention = DbcasaConfig(self.channels[-1])
        if self.attention.channels != self.channels[-1]:
            raise ConfigurationError(
                "attention.channels must equal the last model width")

    # -- construction -----------------------------------------------------

    @classmethod
    def from_dict(cls, data: dict | None) -> "RunConfig":
        data = {} if data is None else data
        if not isinstance(data, dict):
            raise ConfigurationError("config root must be a mapping")
        data = dict(data)
        for key in data:
            if key not in _TOP_KEYS:
                raise ConfigurationError(f"unknown key '{key}'")
        seed = int(data.get("seed", 0))

        scene_kw = _section(data, "scene", _SCENE_KEYS)
        if "class_weights" in scene_kw and scene_kw["class_weights"] is not None:
            scene_kw["class_weights"] = tuple(float(v)
                                              for v in scene_kw["class_weights"])
        scene = SynthSceneSpec(seed=seed, **scene_kw)

        model_kw = _section(data, "model", _MODEL_KEYS)
        channels = tuple(int(c) for c in model_kw.get("channels", (8, 16, 24, 32)))

        toggles_kw = _section(data, "toggles", _TOGGLE_KEYS)
        toggles = ModelToggles(bool(toggles_kw.get("dbcasa", True)),
                               bool(toggles_kw.get("fsfm", True)),
                               bool(toggles_kw.get("sfg", True)))

        train_kw = dict(_section(data, "train", _TRAIN_KEYS))
        checkpoint_every = int(train_kw.pop("checkpoint_every", 50))
        weights = LossWeights(float(train_kw.pop("box_weight", 5.0)),
                              float(train_kw.pop("obj_weight", 1.0)),
                              float(train_kw.pop("cls_weight", 1.0)))
        train = TrainConfig(seed=seed, toggles=toggles, weights=weights, **train_kw)

        slide = SlideConfig(**_section(data, "slide", _SLIDE_KEYS))
        focaler = FocalerConfig(**_section(data, "focaler", _FOCALER_KEYS))
        shift = ShiftConfig(**_section(data, "shift", _SHIFT_KEYS))
        attention = DbcasaConfig(channels[-1],
                                 **_section(data, "attention", _ATTENTION_KEYS))

        return cls(seed=seed,
                   output_dir=str(data.get("output_dir", "runs")),
                   train_scenes=int(data.get("train_scenes", 200)),
                   val_scenes=int(data.get("val_scenes", 50)),
                   scene=scene, channels=channels,
                   toggles=toggles, train=train, slide=slide, focaler=focaler,
                   shift=shift, attention=attention,
                   checkpoint_every=checkpoint_every)

    @classmethod
    def from_yaml(cls, text: str) -> "RunConfig":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigurationError(f"malformed config: {e}") from None
        return cls.from_dict(data)

    @classmethod
    def from_path(cls, path) -> "RunConfig":
        return cls.from_yaml(Path(path).read_text())

    # -- canonical form ---------------------------------------------------

    def canonical_dict(self) -> dict:
        """Every key present, defaults filled in, plain python types."""
        return {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "train_scenes": self.train_scenes,
            "val_scenes": self.val_scenes,
            "scene": {k: (list(v) if isinstance(v := getattr(self.scene, k), tuple)
                          else v)
                      for k in _SCENE_KEYS},
            "model": {"channels": list(self.channels)},
            "toggles": {"dbcasa": self.toggles.dbcasa,
                        "fsfm": self.toggles.fsfm,
                        "sfg": self.toggles.sfg},
            "train": {
                "learning_rate": self.train.learning_rate,
                "momentum": self.train.momentum,
                "weight_decay": self.train.weight_decay,
                "epochs": self.train.epochs,
                "batch_size": self.train.batch_size,
                "eval_every": self.train.eval_every,
                "stop_at_ap50": self.train.stop_at_ap50,
                "clip_norm": self.train.clip_norm,
                "lr_final_frac": self.train.lr_final_frac,
                "box_weight": self.train.weights.box,
                "obj_weight": self.train.weights.obj,
                "cls_weight": self.train.weights.cls,
                "checkpoint_every": self.checkpoint_every,
            },
            "slide": {k: getattr(self.slide, k) for k in _SLIDE_KEYS},
            "focaler": {k: getattr(self.focaler, k) for k in _FOCALER_KEYS},
            "shift": {"step": self.shift.step},
            "attention": {k: getattr(self.attention, k) for k in _ATTENTION_KEYS},
        }

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.canonical_dict(), sort_keys=True,
                              default_flow_style=False)

    def hash_hex(self) -> str:
        return hashlib.sha256(self.to_yaml().encode()).hexdigest()

    # -- builders ---------------------------------------------------------

    def build_kwargs(self) -> dict:
        """Keyword arguments for build_model matching this config."""
        return dict(channels=self.channels,
                    image_size=self.scene.image_size,
                    num_classes=self.scene.num_classes,
                    seed=self.seed,
                    slide_cfg=self.slide,
                    focaler_cfg=self.focaler,
                    attn_cfg=self.attention,
                    shift_cfg=self.shift)
