"""Command-line surface: gradient checks, synthetic data generation,
training with checkpoints, evaluation, the ablation table, parameter
counts, and micro-benchmarks.

Exit codes are a stable contract: 0 success, 1 tolerance/benchmark
failure or I/O trouble, 2 usage error (argparse), 3 configuration or
file-format violation (message names the offending key or field),
4 numerical abort (non-finite values during training).
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import tensor as T
from .checkpoint import load_checkpoint, restore, save_checkpoint
from .config import RunConfig
from .dbcasa import dbcasa_forward
from .errors import ConfigurationError, FormatError, NumericalError
from .fsfm import fsfm_c3k2_block
from .gradcheck import TOL_DEFAULT, all_cases, run_suite, tensor_cases
from .metrics import MetricsReport
from .model import LossWeights, batch_loss, build_model, module_param_counts
from .sfg import BoxXYXY
from .synth import SceneLabel, generate_dataset
from .tensor import Tape, Tensor
from .tensorfile import load_tensor, save_tensor
from .train import SgdState, ablate, evaluate, train

METRICS_CSV_HEADER = "precision,recall,F1,mAP50,parameters,epochs,seed"
ABLATION_CSV_HEADER = ("dbcasa,fsfm,sfg,parameters,precision,recall,F1,"
                       "mAP50,final_loss")


# ---------------------------------------------------------------------------
# Metrics emission
# ---------------------------------------------------------------------------


def emit_metrics(report: MetricsReport, path) -> tuple[Path, Path]:
    """Write {path}.yaml (full precision) and {path}.csv (flat row).

    The YAML keys are precision, recall, F1, mAP50, parameters, epochs,
    seed; the CSV header is METRICS_CSV_HEADER with ratio fields printed
    to 4 decimal places for spreadsheet ingestion.
    """
    ypath = Path(str(path) + ".yaml")
    cpath = Path(str(path) + ".csv")
    data = {
        "precision": float(report.precision),
        "recall": float(report.recall),
        "F1": float(report.f1),
        "mAP50": float(report.ap50),
        "parameters": int(report.param_count),
        "epochs": int(report.epochs),
        "seed": int(report.seed),
    }
    ypath.write_text(yaml.safe_dump(data, sort_keys=True))
    row = (f"{report.precision:.4f},{report.recall:.4f},{report.f1:.4f},"
           f"{report.ap50:.4f},{report.param_count},{report.epochs},"
           f"{report.seed}")
    cpath.write_text(METRICS_CSV_HEADER + "\n" + row + "\n")
    return ypath, cpath


def parse_metrics(path) -> MetricsReport:
    """Read back the YAML written by emit_metrics (exact round trip)."""
    ypath = Path(str(path) + ".yaml")
    if not ypath.is_file():
        raise FormatError(f"missing metrics file {ypath}")
    data = yaml.safe_load(ypath.read_text())
    try:
        return MetricsReport(
            precision=float(data["precision"]), recall=float(data["recall"]),
            f1=float(data["F1"]), ap50=float(data["mAP50"]),
            param_count=int(data["parameters"]), epochs=int(data["epochs"]),
            seed=int(data["seed"]))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed metrics file {ypath}: {exc}") from exc


def format_report(report: MetricsReport) -> str:
    return (f"precision {report.precision:.4f}  recall {report.recall:.4f}  "
            f"F1 {report.f1:.4f}  mAP50 {report.ap50:.4f}  "
            f"parameters {report.param_count}  epochs {report.epochs}  "
            f"seed {report.seed}")


# ---------------------------------------------------------------------------
# Dataset directories (synth-gen output, eval input)
# ---------------------------------------------------------------------------


def save_dataset(scenes, dirpath, image_size: int, num_classes: int) -> Path:
    """Write one TensorFile per scene plus a labels manifest."""
    root = Path(dirpath)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (image, labels) in enumerate(scenes):
        rel = f"scene_{i:04d}.tnsr"
        save_tensor(image, root / rel)
        entries.append({
            "file": rel,
            "labels": [{"x1": float(lb.box.x1), "y1": float(lb.box.y1),
                        "x2": float(lb.box.x2), "y2": float(lb.box.y2),
                        "class_id": int(lb.class_id)} for lb in labels],
        })
    manifest = {"image_size": image_size, "num_classes": num_classes,
                "count": len(entries), "scenes": entries}
    (root / "manifest.yaml").write_text(
        yaml.safe_dump(manifest, sort_keys=True, default_flow_style=False))
    return root


def load_dataset(dirpath) -> list:
    """Read a dataset directory back into (image, labels) scenes."""
    root = Path(dirpath)
    mpath = root / "manifest.yaml"
    if not mpath.is_file():
        raise FormatError(f"missing manifest.yaml under {root}")
    manifest = yaml.safe_load(mpath.read_text())
    size = int(manifest["image_size"])
    scenes = []
    for entry in manifest["scenes"]:
        path = root / entry["file"]
        if not path.is_file():
            raise FormatError(f"scene file missing: {entry['file']}")
        image = load_tensor(path)
        if image.shape[1:] != (3, size, size):
            raise FormatError(
                f"scene {entry['file']} has shape {image.shape}, "
                f"expected [1,3,{size},{size}]")
        labels = [SceneLabel(BoxXYXY(float(lb["x1"]), float(lb["y1"]),
                                     float(lb["x2"]), float(lb["y2"])),
                             int(lb["class_id"]))
                  for lb in entry["labels"]]
        scenes.append((image, labels))
    return scenes


# ---------------------------------------------------------------------------
# Subcommand helpers
# ---------------------------------------------------------------------------


def _load_config(path_str: str) -> RunConfig:
    path = Path(path_str)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    return RunConfig.from_path(path)


def _datasets(cfg: RunConfig):
    train_data = generate_dataset(cfg.scene, cfg.train_scenes)
    val_data = generate_dataset(cfg.scene, cfg.val_scenes,
                                offset=cfg.train_scenes)
    return train_data, val_data


def _model_kwargs(cfg: RunConfig) -> dict:
    kwargs = cfg.build_kwargs()
    kwargs.pop("seed")  # run_single/ablate pass cfg.train.seed themselves
    return kwargs


def _save_run_checkpoint(dirpath, model, state, cfg: RunConfig, epoch: int,
                         metrics: dict | None = None) -> None:
    save_checkpoint(dirpath, model, state, cfg.hash_hex(), epoch, metrics)
    (Path(dirpath) / "config.yaml").write_text(cfg.to_yaml())


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

_GRADCHECK_MODULES = {
    "tensor": "tensor-core",
    "dbcasa": "attn-dbcasa",
    "fsfm": "shift-fsfm",
    "loss": "loss-sfg",
}


def _cmd_gradcheck(args) -> int:
    cases = all_cases()
    if args.module != "all":
        label = _GRADCHECK_MODULES[args.module]
        cases = [c for c in cases if c.module == label]
        if args.module == "tensor":
            cases = tensor_cases()
    seeds = [args.seed] if args.seed is not None else list(range(10))
    results = run_suite(cases, seeds)
    worst: dict[tuple[str, str], float] = {}
    for r in results:
        key = (r.module, r.name)
        worst[key] = max(worst.get(key, 0.0), r.max_rel_err)
    ok = True
    for (module, name), err in worst.items():
        passed = err < TOL_DEFAULT
        ok = ok and passed
        print(f"{module:12s} {name:28s} worst rel err {err:.3e}  "
              f"{'ok' if passed else 'FAIL'}")
    print(f"{len(worst)} ops x {len(seeds)} seeds, tolerance {TOL_DEFAULT:g}: "
          f"{'all ok' if ok else 'FAILURES'}")
    return 0 if ok else 1


def _cmd_synth_gen(args) -> int:
    cfg = _load_config(args.config)
    out = Path(args.out or cfg.output_dir)
    train_data, val_data = _datasets(cfg)
    save_dataset(train_data, out / "train", cfg.scene.image_size,
                 cfg.scene.num_classes)
    print(f"wrote {len(train_data)} train scenes to {out / 'train'}")
    if val_data:
        save_dataset(val_data, out / "val", cfg.scene.image_size,
                     cfg.scene.num_classes)
        print(f"wrote {len(val_data)} val scenes to {out / 'val'}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args.config)
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_data, val_data = _datasets(cfg)
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        model, store, state, start_epoch = restore(ckpt, cfg)
        print(f"resumed at epoch {start_epoch} from {args.resume}")
    else:
        model, store = build_model(cfg.toggles, **cfg.build_kwargs())
        state = SgdState(store)
        start_epoch = 0
    print(f"config {cfg.hash_hex()[:12]}  parameters "
          f"{store.total_learnable()}  toggles {cfg.toggles.label()}")

    def on_epoch(epoch, mean_loss, st):
        done = epoch + 1
        if (cfg.checkpoint_every > 0 and done % cfg.checkpoint_every == 0
                and done < cfg.train.epochs):
            _save_run_checkpoint(out / "checkpoints" / f"epoch_{done:04d}",
                                 model, st, cfg, done)

    result = train(model, store, train_data, cfg.train,
                   val_data=val_data or None, start_epoch=start_epoch,
                   state=state, on_epoch=on_epoch)
    for report in result.reports:
        print(f"epoch {report.epochs:4d}: AP50 {report.ap50:.4f}")
    _save_run_checkpoint(out / "checkpoints" / "final", model, state,
                         cfg, result.epochs_run,
                         metrics=(_report_dict(result.reports[-1])
                                  if result.reports else None))
    if result.reports:
        final = result.reports[-1]
        _write_series(result.reports, out / "metrics_series.csv")
        emit_metrics(final, out / "metrics")
        print("final: " + format_report(final))
    print(f"trained {result.epochs_run} epochs; artifacts under {out}")
    return 0


def _report_dict(report: MetricsReport) -> dict:
    return {"precision": float(report.precision), "recall": float(report.recall),
            "F1": float(report.f1), "mAP50": float(report.ap50),
            "parameters": int(report.param_count), "epochs": int(report.epochs),
            "seed": int(report.seed)}


def _write_series(reports, path: Path) -> None:
    lines = [METRICS_CSV_HEADER]
    for r in reports:
        lines.append(f"{r.precision:.4f},{r.recall:.4f},{r.f1:.4f},"
                     f"{r.ap50:.4f},{r.param_count},{r.epochs},{r.seed}")
    path.write_text("\n".join(lines) + "\n")


def _cmd_eval(args) -> int:
    ckdir = Path(args.checkpoint)
    config_path = ckdir / "config.yaml"
    if not config_path.is_file():
        raise FormatError(f"checkpoint has no config.yaml: {ckdir}")
    cfg = RunConfig.from_path(config_path)
    ckpt = load_checkpoint(ckdir)
    model, _store, _state, epoch = restore(ckpt, cfg)
    scenes = load_dataset(args.data)
    report = evaluate(model, scenes, epochs=epoch, seed=cfg.seed)
    print(format_report(report))
    if args.out:
        ypath, cpath = emit_metrics(report, args.out)
        print(f"wrote {ypath} and {cpath}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = _load_config(args.config)
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_data, val_data = _datasets(cfg)
    rows = ablate(train_data, val_data, cfg.train, **_model_kwargs(cfg))
    header = (f"{'dbcasa':7s} {'fsfm':5s} {'sfg':4s} {'params':>8s} "
              f"{'AP50':>7s} {'F1':>7s} {'loss':>8s}")
    print(header)
    csv_lines = [ABLATION_CSV_HEADER]
    yaml_rows = []
    for row in rows:
        t, rep = row.toggles, row.report
        print(f"{str(t.dbcasa):7s} {str(t.fsfm):5s} {str(t.sfg):4s} "
              f"{rep.param_count:8d} {rep.ap50:7.4f} {rep.f1:7.4f} "
              f"{row.final_loss:8.4f}")
        csv_lines.append(
            f"{int(t.dbcasa)},{int(t.fsfm)},{int(t.sfg)},{rep.param_count},"
            f"{rep.precision:.4f},{rep.recall:.4f},{rep.f1:.4f},"
            f"{rep.ap50:.4f},{row.final_loss:.6f}")
        yaml_rows.append({"toggles": {"dbcasa": t.dbcasa, "fsfm": t.fsfm,
                                      "sfg": t.sfg},
                          "final_loss": float(row.final_loss),
                          **_report_dict(rep)})
    (out / "ablation.csv").write_text("\n".join(csv_lines) + "\n")
    (out / "ablation.yaml").write_text(yaml.safe_dump(yaml_rows, sort_keys=True))
    print(f"wrote {out / 'ablation.csv'} and {out / 'ablation.yaml'}")
    return 0


def _cmd_params(args) -> int:
    cfg = _load_config(args.config)
    model, _store = build_model(cfg.toggles, **cfg.build_kwargs())
    counts = module_param_counts(model)
    total = counts.pop("total")
    for name, count in counts.items():
        print(f"{name:10s} {count:8d}")
    print(f"{'total':10s} {total:8d}")
    return 0


def _cmd_bench(args) -> int:
    cfg = _load_config(args.config)
    model, _store = build_model(cfg.toggles, **cfg.build_kwargs())
    size = cfg.scene.image_size
    batch = cfg.train.batch_size
    rng = np.random.default_rng([cfg.seed, 99])
    scenes = generate_dataset(cfg.scene, batch)
    images = Tensor(np.concatenate([s[0].data for s in scenes], axis=0))
    labels = [s[1] for s in scenes]

    def rand(shape):
        return rng.standard_normal(shape).astype(np.float32)

    blocks = [("stem_conv", (batch, 3, size, size),
               lambda x: T.relu(T.conv2d(x, model.stem_w, model.stem_b, pad=1)))]
    spatial = size
    for i, stage in enumerate(model.stages, start=1):
        cin, s_in = model.channels[i - 1], spatial

        def stage_fn(x, st=stage):
            y = T.relu(T.conv2d(x, st.conv_w, st.conv_b, stride=2, pad=1))
            return fsfm_c3k2_block(y, st.block, model.shift_cfg,
                                   use_fuse=model.toggles.fsfm)

        blocks.append((f"stage{i}", (batch, cin, s_in, s_in), stage_fn))
        spatial //= 2
    if model.attn is not None:
        blocks.append(("attention", (batch, model.channels[-1], spatial, spatial),
                       lambda x: dbcasa_forward(x, model.attn, model.attn_cfg)))
    blocks.append(("head_conv", (batch, model.channels[-1], spatial, spatial),
                   lambda x: T.conv2d(x, model.head_w, model.head_b)))

    print(f"config {cfg.hash_hex()[:12]}  batch {batch}  image {size}  "
          f"repeats {args.repeats}")
    for name, shape, fn in blocks:
        fwd, bwd = _time_block(lambda: Tensor(rand(shape)), fn, args.repeats)
        print(f"{name:12s} fwd {fwd * 1e3:8.2f} ms   bwd {bwd * 1e3:8.2f} ms")

    def loss_fn(x):
        loss, _info = batch_loss(model, x, labels, LossWeights(), train=True,
                                 stats_sink=[] if model.attn is not None else None)
        return loss

    fwd, bwd = _time_block(lambda: Tensor(images.data.copy()), loss_fn,
                           args.repeats)
    print(f"{'full_loss':12s} fwd {fwd * 1e3:8.2f} ms   bwd {bwd * 1e3:8.2f} ms")
    return 0


def _time_block(make_input, fn, repeats: int) -> tuple[float, float]:
    """Mean forward and backward seconds over `repeats` timed passes."""
    fwd_total = bwd_total = 0.0
    for rep in range(repeats + 1):  # first pass is warmup
        x = make_input()
        x.requires_grad = True
        with Tape() as tape:
            t0 = time.perf_counter()
            y = fn(x)
            t1 = time.perf_counter()
            tape.backward(y)
            t2 = time.perf_counter()
        if rep > 0:
            fwd_total += t1 - t0
            bwd_total += t2 - t1
    return fwd_total / repeats, bwd_total / repeats


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="driftdet",
        description="Tiny degraded-scene detector: training, evaluation, "
                    "and verification tools.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck",
                       help="finite-difference gradient checks per module")
    p.add_argument("--module", choices=["all", *sorted(_GRADCHECK_MODULES)],
                   default="all")
    p.add_argument("--seed", type=int, default=None,
                   help="single seed (default: seeds 0-9)")
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("synth-gen", help="write synthetic scenes to disk")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None,
                   help="output directory (default: config output_dir)")
    p.set_defaults(func=_cmd_synth_gen)

    p = sub.add_parser("train", help="train and checkpoint a model")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--resume", default=None,
                   help="checkpoint directory to resume from")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset dir")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None,
                   help="basename for metrics files (writes .yaml and .csv)")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="run the 8-row toggle ablation table")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("params", help="per-module learnable parameter counts")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_params)

    p = sub.add_parser("bench", help="per-block forward/backward wall time")
    p.add_argument("--config", required=True)
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(func=_cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigurationError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
