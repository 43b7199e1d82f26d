"""Command-line interface.

Subcommands: train, evaluate, predict, describe, synth, curves. Settings
resolve in three layers — built-in defaults, then a key=value config file,
then explicit flags — and unknown keys anywhere are an error, not a warning.

Exit codes: 0 success, 1 usage or configuration problem, 2 data problem
(unreadable volume, malformed reference, bad checkpoint), 3 divergence.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from typing import Optional, Sequence

import numpy as np

from .data import DataError, load_reference, synth_generate
from .mha import MhaError, read_mha_file, to_hounsfield
from .model import CheckpointError, DenseNetModel, count_connections, feature_map_plan, weighted_layer_count
from .preprocess import PreprocessConfig, PreprocessError, preprocess
from .training import (
    PRESETS,
    DivergenceError,
    TrainConfig,
    evaluate,
    metrics_from_csv,
    predict,
    train,
)


class UsageError(Exception):
    """Bad flags, bad config keys, or bad values: exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _optional_float(raw: str) -> Optional[float]:
    return None if raw.lower() in ("none", "") else float(raw)


# key -> (converter, default); the single source of truth for run settings
_SCHEMA = {
    "preset": (str, "densenet121"),
    "epochs": (int, 100),
    "batch_size": (int, 8),
    "lr": (float, 0.01),
    "seed": (int, 0),
    "val_count": (int, 0),
    "threshold": (float, 0.5),
    "checkpoint_every": (int, 10),
    "stop_accuracy": (_optional_float, None),
    "target_size": (int, 224),
    "clip_lo": (float, -1000.0),
    "clip_hi": (float, 400.0),
    "crop_policy": (str, "none"),
    "crop_fraction": (float, 1.0),
    "slice_policy": (str, "middle-axial"),
    "slice_index": (int, 0),
}


def _read_config_file(path: str) -> dict:
    """Parse a key=value settings file; every key must be in the schema."""
    values = {}
    try:
        with open(path, "r") as fh:
            lines = fh.readlines()
    except OSError as e:
        raise UsageError(f"cannot read config file: {e}") from e
    for line_no, line in enumerate(lines, start=1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        if "=" not in text:
            raise UsageError(f"{path}:{line_no}: expected key=value, got {text!r}")
        key, _, raw = text.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in _SCHEMA:
            raise UsageError(f"{path}:{line_no}: unknown setting {key!r}")
        if key in values:
            raise UsageError(f"{path}:{line_no}: duplicate setting {key!r}")
        convert = _SCHEMA[key][0]
        try:
            values[key] = convert(raw)
        except ValueError:
            raise UsageError(
                f"{path}:{line_no}: invalid value {raw!r} for {key}") from None
    return values


def _resolve(args) -> tuple[dict, set]:
    """Defaults < config file < flags. Returns (settings, explicitly-set keys)."""
    settings = {key: default for key, (_, default) in _SCHEMA.items()}
    provided = set()
    config_path = getattr(args, "config", None)
    if config_path is not None:
        from_file = _read_config_file(config_path)
        settings.update(from_file)
        provided.update(from_file)
    for key in _SCHEMA:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            settings[key] = flag_value
            provided.add(key)
    return settings, provided


def _preprocess_config(s: dict) -> PreprocessConfig:
    return PreprocessConfig(
        target_size=s["target_size"],
        clip_window=(s["clip_lo"], s["clip_hi"]),
        crop_policy=s["crop_policy"],
        crop_fraction=s["crop_fraction"],
        slice_policy=s["slice_policy"],
        slice_index=s["slice_index"],
    )


def _train_config(s: dict) -> TrainConfig:
    return TrainConfig(
        preset=s["preset"],
        epochs=s["epochs"],
        batch_size=s["batch_size"],
        lr=s["lr"],
        seed=s["seed"],
        val_count=s["val_count"],
        threshold=s["threshold"],
        checkpoint_every=s["checkpoint_every"],
        stop_accuracy=s["stop_accuracy"],
        preprocess=_preprocess_config(s),
    )


def _add_preprocess_flags(p: argparse.ArgumentParser):
    p.add_argument("--target-size", dest="target_size", type=int)
    p.add_argument("--clip-lo", dest="clip_lo", type=float)
    p.add_argument("--clip-hi", dest="clip_hi", type=float)
    p.add_argument("--crop-policy", dest="crop_policy")
    p.add_argument("--crop-fraction", dest="crop_fraction", type=float)
    p.add_argument("--slice-policy", dest="slice_policy")
    p.add_argument("--slice-index", dest="slice_index", type=int)


def _add_config_flag(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key=value settings file")


def _load_model(path: str) -> DenseNetModel:
    return DenseNetModel.load_checkpoint(path)


# --------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    settings, _ = _resolve(args)
    config = _train_config(settings)
    records = load_reference(os.path.join(args.data, "reference.csv"))
    model, metrics = train(records, config, args.out)
    for m in metrics:
        print(f"epoch {m.epoch}: train_loss={m.train_loss:.4f} "
              f"val_loss={m.val_loss:.4f} val_accuracy={m.val_accuracy:.4f}")
    print(f"done: {len(metrics)} epochs, {model.count_params()} parameters, "
          f"artifacts in {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    settings, provided = _resolve(args)
    model = _load_model(args.checkpoint)
    if "target_size" not in provided:
        settings["target_size"] = model.config.input_size
    records = load_reference(os.path.join(args.data, "reference.csv"))
    result = evaluate(model, records, _preprocess_config(settings),
                      batch_size=settings["batch_size"],
                      threshold=settings["threshold"])
    for row in result.per_patient:
        print(f"{row.patient_id} prob_covid={row.prob_covid:.4f} "
              f"prob_severe={row.prob_severe:.4f} "
              f"pred={row.pred_covid},{row.pred_severe} "
              f"label={row.label_covid},{row.label_severe}")
    print(f"loss={result.loss:.4f} joint_accuracy={result.joint_accuracy:.4f}")
    with open(args.report, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("patient_id", "prob_covid", "prob_severe",
                         "pred_covid", "pred_severe",
                         "label_covid", "label_severe"))
        for row in result.per_patient:
            writer.writerow((row.patient_id,
                             repr(row.prob_covid), repr(row.prob_severe),
                             row.pred_covid, row.pred_severe,
                             row.label_covid, row.label_severe))
    return 0


def cmd_predict(args) -> int:
    settings, provided = _resolve(args)
    model = _load_model(args.checkpoint)
    if "target_size" not in provided:
        settings["target_size"] = model.config.input_size
    volume = to_hounsfield(read_mha_file(args.input))
    image = preprocess(volume, _preprocess_config(settings))
    batch = image.pixels[None, None, :, :].astype(np.float32)
    probs, labels = predict(model, batch, threshold=settings["threshold"])
    print(f"prob_covid={probs[0, 0]:.4f} prob_severe={probs[0, 1]:.4f} "
          f"covid={labels[0, 0]} severe={labels[0, 1]}")
    return 0


def cmd_describe(args) -> int:
    if args.checkpoint is not None:
        model = _load_model(args.checkpoint)
        config = model.config
        n_params = model.count_params()
    else:
        if args.preset not in PRESETS:
            raise UsageError(f"preset must be one of {sorted(PRESETS)}, "
                             f"got {args.preset!r}")
        config = PRESETS[args.preset]
        n_params = DenseNetModel(config, seed=0).count_params()
    for name, spatial, channels in feature_map_plan(config):
        print(f"{name:<14}{spatial:>8}{channels:>10}")
    layers = weighted_layer_count(config)
    print(f"layers: {layers}")
    print(f"parameters: {n_params}")
    print(f"connections: {count_connections(layers)}")
    return 0


def cmd_synth(args) -> int:
    records = synth_generate(args.count, args.out, seed=args.seed,
                             image_size=args.image_size, depth=args.depth)
    positives = sum(r.label_covid for r in records)
    severe = sum(r.label_severe for r in records)
    print(f"wrote {len(records)} studies to {args.out} "
          f"({positives} positive, {severe} severe)")
    return 0


def _trailing_mean(values: list, window: int) -> list:
    out = []
    for i in range(len(values)):
        lo = max(0, i - window + 1)
        chunk = values[lo:i + 1]
        out.append(sum(chunk) / len(chunk))
    return out


def cmd_curves(args) -> int:
    if args.window < 1:
        raise UsageError(f"window must be >= 1, got {args.window}")
    try:
        metrics = metrics_from_csv(args.metrics)
    except ValueError as e:
        raise UsageError(str(e)) from None
    os.makedirs(args.out_dir, exist_ok=True)
    epochs = [m.epoch for m in metrics]
    train_ma = _trailing_mean([m.train_loss for m in metrics], args.window)
    val_ma = _trailing_mean([m.val_loss for m in metrics], args.window)
    acc_ma = _trailing_mean([m.val_accuracy for m in metrics], args.window)
    loss_path = os.path.join(args.out_dir, "loss.csv")
    with open(loss_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("epoch", "train_loss", "val_loss",
                         "train_loss_ma", "val_loss_ma"))
        for i, m in enumerate(metrics):
            writer.writerow((m.epoch, repr(m.train_loss), repr(m.val_loss),
                             repr(train_ma[i]), repr(val_ma[i])))
    acc_path = os.path.join(args.out_dir, "accuracy.csv")
    with open(acc_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("epoch", "val_accuracy", "val_accuracy_ma"))
        for i, m in enumerate(metrics):
            writer.writerow((m.epoch, repr(m.val_accuracy), repr(acc_ma[i])))
    print(f"wrote {loss_path} and {acc_path} "
          f"({len(epochs)} epochs, window {args.window})")
    return 0


# --------------------------------------------------------------------------
# parser


def _build_parser() -> _Parser:
    parser = _Parser(prog="densect",
                     description="Train and run a dense CT classifier.")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True,
                   help="directory with reference.csv and data/*.mha")
    p.add_argument("--out", required=True, help="output directory for artifacts")
    _add_config_flag(p)
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--val-count", dest="val_count", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--stop-accuracy", dest="stop_accuracy", type=_optional_float)
    _add_preprocess_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--report", default="evaluation.csv",
                   help="where to write the per-patient CSV")
    _add_config_flag(p)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--threshold", type=float)
    _add_preprocess_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="classify a single .mha volume")
    p.add_argument("--input", required=True, help="volume file (.mha)")
    p.add_argument("--checkpoint", required=True)
    _add_config_flag(p)
    p.add_argument("--threshold", type=float)
    _add_preprocess_flags(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("describe", help="print the architecture plan")
    p.add_argument("--preset", default="densenet121")
    p.add_argument("--checkpoint", help="describe the model in a checkpoint")
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", "--n", required=True, type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", dest="image_size", type=int, default=64)
    p.add_argument("--depth", type=int, default=8)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("curves", help="derive smoothed curves from metrics.csv")
    p.add_argument("--metrics", required=True, help="metrics.csv from train")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--window", type=int, default=5,
                   help="trailing moving-average window (epochs)")
    p.set_defaults(func=cmd_curves)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # --help prints and exits 0
        return int(e.code or 0)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (DataError, MhaError, PreprocessError, CheckpointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (UsageError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
