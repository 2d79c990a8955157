"""Checkpoints: a YAML manifest plus one TensorFile per parameter and
per momentum buffer. Restores are refused on config-hash mismatch and
are bit-exact, so a resumed run reproduces an uninterrupted one."""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigurationError, FormatError
from .model import DetectorModel, ModelToggles, build_model
from .tensor import ParamStore, Tensor
from .tensorfile import load_tensor, save_tensor
from .train import SgdState

FORMAT_NAME = "driftdet-checkpoint"
FORMAT_VERSION = 1

_DTYPE_LABEL = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


def _entry_file(kind: str, name: str) -> str:
    return f"{kind}/{name}.tnsr"


def save_checkpoint(dirpath, model: DetectorModel, state: SgdState,
                    config_hash: str, epoch: int,
                    metrics: dict | None = None) -> None:
    root = Path(dirpath)
    (root / "params").mkdir(parents=True, exist_ok=True)
    (root / "momentum").mkdir(parents=True, exist_ok=True)
    store = model.store
    params = {}
    for name in store.names():
        t = store[name]
        rel = _entry_file("params", name)
        save_tensor(t, root / rel)
        params[name] = {"file": rel, "shape": list(t.shape),
                        "dtype": _DTYPE_LABEL[t.data.dtype],
                        "learnable": store.is_learnable(name)}
    momentum = {}
    for name, v in state.velocity.items():
        rel = _entry_file("momentum", name)
        save_tensor(Tensor(v), root / rel)
        momentum[name] = rel
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "config_hash": config_hash,
        "epoch": int(epoch),
        "toggles": {"dbcasa": model.toggles.dbcasa,
                    "fsfm": model.toggles.fsfm,
                    "sfg": model.toggles.sfg},
        "model": {"channels": list(model.channels),
                  "image_size": model.image_size,
                  "num_classes": model.num_classes},
        "metrics": metrics,
        "params": params,
        "momentum": momentum,
    }
    (root / "manifest.yaml").write_text(
        yaml.safe_dump(manifest, sort_keys=True, default_flow_style=False))


@dataclass
class Checkpoint:
    config_hash: str
    epoch: int
    toggles: ModelToggles
    model_kw: dict
    metrics: dict | None
    values: dict[str, Tensor]
    learnable: dict[str, bool]
    velocity: dict[str, np.ndarray]


def load_checkpoint(dirpath) -> Checkpoint:
    root = Path(dirpath)
    manifest_path = root / "manifest.yaml"
    if not manifest_path.is_file():
        raise FormatError(f"missing manifest.yaml under {root}")
    manifest = yaml.safe_load(manifest_path.read_text())
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT_NAME:
        raise FormatError("not a checkpoint manifest")
    if manifest.get("version") != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {manifest.get('version')}")

    values: dict[str, Tensor] = {}
    learnable: dict[str, bool] = {}
    for name, entry in manifest["params"].items():
        path = root / entry["file"]
        if not path.is_file():
            raise FormatError(f"parameter '{name}' missing file {entry['file']}")
        t = load_tensor(path)
        if list(t.shape) != list(entry["shape"]):
            raise FormatError(
                f"parameter '{name}' dims {list(t.shape)} != declared {entry['shape']}")
        if _DTYPE_LABEL[t.data.dtype] != entry["dtype"]:
            raise FormatError(f"parameter '{name}' dtype mismatch")
        values[name] = t
        learnable[name] = bool(entry["learnable"])

    velocity: dict[str, np.ndarray] = {}
    for name, rel in manifest["momentum"].items():
        path = root / rel
        if not path.is_file():
            raise FormatError(f"momentum '{name}' missing file {rel}")
        velocity[name] = load_tensor(path).data

    tg = manifest["toggles"]
    return Checkpoint(
        config_hash=str(manifest["config_hash"]),
        epoch=int(manifest["epoch"]),
        toggles=ModelToggles(bool(tg["dbcasa"]), bool(tg["fsfm"]), bool(tg["sfg"])),
        model_kw=dict(manifest["model"]),
        metrics=manifest.get("metrics"),
        values=values,
        learnable=learnable,
        velocity=velocity,
    )


def restore(ckpt: Checkpoint, run_cfg) -> tuple[DetectorModel, ParamStore, SgdState, int]:
    """Rebuild the model for run_cfg and load the checkpoint into it.

    Refuses when the checkpoint was produced under a different canonical
    config (hash mismatch) or its tensors do not line up."""
    if run_cfg.hash_hex() != ckpt.config_hash:
        raise ConfigurationError(
            f"config hash mismatch: checkpoint {ckpt.config_hash[:12]} vs "
            f"config {run_cfg.hash_hex()[:12]}")
    model, store = build_model(run_cfg.toggles, **run_cfg.build_kwargs())
    if set(store.names()) != set(ckpt.values):
        raise FormatError("checkpoint parameters do not match the model")
    for name in store.names():
        t = store[name]
        loaded = ckpt.values[name]
        if loaded.shape != t.shape:
            raise FormatError(f"parameter '{name}' shape mismatch on restore")
        t.set_data(loaded.data)
    state = SgdState(store)
    for name in state.velocity:
        if name not in ckpt.velocity:
            raise FormatError(f"momentum buffer '{name}' missing from checkpoint")
        if ckpt.velocity[name].shape != state.velocity[name].shape:
            raise FormatError(f"momentum buffer '{name}' shape mismatch")
        state.velocity[name] = ckpt.velocity[name].copy()
    return model, store, state, ckpt.epoch
