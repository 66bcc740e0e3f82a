"""Command-line entry point.

Subcommands:
    dataset   build imbalanced train/validation/test subsets from MNIST files
    train     train capsnet / dnn / autoencoder / iforest on a dataset file
    eval      score a checkpoint on a dataset and write a report CSV row
    compare   merge report CSVs into comparison tables and bar charts

Every artifact gets a sibling ``<artifact>.manifest.json`` recording the
command line, the resolved configuration, seeds, and input/output hashes.
Outputs are byte-identical across reruns with identical flags; manifests
differ only in their timestamp and wall-clock fields.

Flag values beat entries in an optional JSON ``--config`` file, which beat
the documented defaults. The MNIST directory may also come from the
``CAPSANOM_MNIST_DIR`` environment variable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from capsanom import __version__
from capsanom.baselines import (
    AutoencoderConfig,
    DnnConfig,
    IsolationForestConfig,
    autoencoder_score_batch,
    autoencoder_train,
    dnn_score_batch,
    dnn_train,
    iforest_fit,
    iforest_score_batch,
)
from capsanom.capsnet import CapsNetModel, EncoderConfig, predict_batch, train
from capsanom.checkpoint import load_checkpoint, save_checkpoint
from capsanom.container import file_sha256
from capsanom.dataset import (
    ImbalancedDatasetSpec,
    build_all_splits,
    export_dataset,
    import_dataset,
    load_corpus,
)
from capsanom.errors import ConfigError, FormatError, TrainingError
from capsanom.metrics import evaluate, read_reports, write_reports
from capsanom.report import write_comparison

MNIST_DIR_ENV = "CAPSANOM_MNIST_DIR"
DEFAULT_EPOCHS = 10


class CliError(Exception):
    """Operational failure; message goes to stderr, exit code 1."""


def _config_hash(config: dict) -> str:
    import hashlib

    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _write_manifest(artifact: Path, command: list[str], resolved: dict,
                    seed: int | None, hashes: dict[str, str],
                    wall_clock: float) -> None:
    manifest = {
        "artifact": artifact.name,
        "artifact_sha256": file_sha256(artifact),
        "command": command,
        "config": resolved,
        "seed": seed,
        "input_hashes": hashes,
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "wall_clock_seconds": wall_clock,
        "tool_version": __version__,
    }
    Path(str(artifact) + ".manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


# -- dataset ---------------------------------------------------------------


def _cmd_dataset(args, command: list[str]) -> int:
    mnist_dir = args.mnist_dir or os.environ.get(MNIST_DIR_ENV)
    if not mnist_dir:
        raise CliError(
            f"no MNIST directory: pass --mnist-dir or set {MNIST_DIR_ENV}"
        )
    if args.normal_class is None and not args.all:
        raise CliError("pass --class N or --all")
    classes = list(range(10)) if args.all else [args.normal_class]
    started = time.perf_counter()
    corpus = load_corpus(mnist_dir)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for normal in classes:
        spec = ImbalancedDatasetSpec(
            normal_class=normal,
            anomaly_ratio=args.ratio,
            seed=args.seed,
            validation_size=args.validation_size,
        )
        splits = build_all_splits(corpus, spec)
        for split_name, ds in splits.items():
            path = out_dir / f"subset-{normal}.{split_name}.ds"
            export_dataset(ds, path)
            _write_manifest(
                path, command, asdict(spec), args.seed, {},
                time.perf_counter() - started,
            )
            print(f"wrote {path} ({len(ds)} instances)")
    return 0


# -- train -------------------------------------------------------------------


def _loss_log_csv(rows: list[tuple], header: str) -> str:
    lines = [header]
    for row in rows:
        lines.append(",".join("" if v is None else repr(v) if isinstance(v, float)
                              else str(v) for v in row))
    return "\n".join(lines) + "\n"


def _cmd_train(args, command: list[str]) -> int:
    started = time.perf_counter()
    dataset = import_dataset(args.dataset)
    validation = import_dataset(args.val_dataset) if args.val_dataset else None
    epochs = args.epochs if args.epochs is not None else DEFAULT_EPOCHS

    if args.model == "iforest":
        if args.epochs is not None:
            print("warning: --epochs is ignored for iforest", file=sys.stderr)
        config = IsolationForestConfig(n_trees=args.trees, seed=args.seed)
        model = iforest_fit(config, dataset.pixels)
        resolved = asdict(config)
        log_rows: list[tuple] = []
    elif args.model == "capsnet":
        encoder = EncoderConfig(width_scale=args.width_scale)
        model = CapsNetModel.init(encoder, seed=args.seed)
        model, logs = train(
            model, dataset, epochs=epochs, batch_size=args.batch_size,
            seed=args.seed, validation=validation,
        )
        resolved = {**model.config_dict(), "epochs": epochs,
                    "batch_size": args.batch_size}
        log_rows = [(l.epoch, l.train_loss, l.val_f1) for l in logs]
    elif args.model == "dnn":
        config = DnnConfig(epochs=epochs, batch_size=args.batch_size, seed=args.seed)
        model = dnn_train(config, dataset)
        resolved = asdict(config)
        log_rows = [(i + 1, v, None) for i, v in enumerate(model.loss_log)]
    elif args.model == "autoencoder":
        if validation is None:
            raise CliError("autoencoder needs --val-dataset to tune its threshold")
        config = AutoencoderConfig(epochs=epochs, batch_size=args.batch_size,
                                   seed=args.seed)
        model = autoencoder_train(config, dataset, validation)
        resolved = {**asdict(config), "threshold": model.threshold}
        log_rows = [(i + 1, v, None) for i, v in enumerate(model.loss_log)]
    else:  # unreachable: argparse restricts choices
        raise CliError(f"unknown model {args.model!r}")

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out, seed=args.seed)
    log_path = Path(str(out) + ".losslog.csv")
    log_path.write_text(_loss_log_csv(log_rows, "epoch,train_loss,val_f1"),
                        encoding="utf-8")
    hashes = {"dataset": file_sha256(args.dataset)}
    if args.val_dataset:
        hashes["val_dataset"] = file_sha256(args.val_dataset)
    wall = time.perf_counter() - started
    _write_manifest(out, command, resolved, args.seed, hashes, wall)
    _write_manifest(log_path, command, resolved, args.seed, hashes, wall)
    print(f"wrote {out} and {log_path}")
    return 0


# -- eval --------------------------------------------------------------------


def _score_with(kind: str, model, dataset) -> tuple[np.ndarray, np.ndarray]:
    pixels = dataset.pixels
    if kind == "capsnet":
        return predict_batch(model, pixels)
    if kind == "dnn":
        scores = dnn_score_batch(model, pixels)
        return (scores > 0.5).astype(np.int64), scores
    if kind == "autoencoder":
        scores = autoencoder_score_batch(model, pixels)
        return (scores >= model.threshold).astype(np.int64), scores
    if kind == "iforest":
        scores = iforest_score_batch(model, pixels)
        return (scores > 0.5).astype(np.int64), scores
    raise CliError(f"unknown checkpoint kind {kind!r}")


def _cmd_eval(args, command: list[str]) -> int:
    started = time.perf_counter()
    kind, model, meta = load_checkpoint(args.checkpoint)
    dataset = import_dataset(args.dataset)
    dataset_id = f"subset-{dataset.spec.normal_class}.{dataset.split}"
    try:
        predictions, scores = _score_with(kind, model, dataset)
    except (ConfigError, ValueError) as e:
        raise CliError(
            f"checkpoint {file_sha256(args.checkpoint)} cannot score dataset "
            f"{file_sha256(args.dataset)}: {e}"
        ) from e
    report = evaluate(
        dataset.labels, predictions, scores,
        model=kind, dataset=dataset_id, seed=meta["seed"],
        config_hash=_config_hash(meta["config"]),
    )
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_reports([report], out)
    _write_manifest(
        out, command, meta["config"], meta["seed"],
        {"checkpoint": file_sha256(args.checkpoint), "dataset": file_sha256(args.dataset)},
        time.perf_counter() - started,
    )
    print(f"wrote {out}")
    return 0


# -- compare -------------------------------------------------------------------


def _cmd_compare(args, command: list[str]) -> int:
    started = time.perf_counter()
    reports_dir = Path(args.reports)
    paths = sorted(p for p in reports_dir.glob("*.csv")
                   if not p.name.endswith(".losslog.csv"))
    if not paths:
        raise CliError(f"no report CSVs found in {reports_dir}")
    reports = []
    for p in paths:
        reports.extend(read_reports(p))
    written = write_comparison(reports, args.out, plots=not args.no_plots)
    hashes = {p.name: file_sha256(p) for p in paths}
    wall = time.perf_counter() - started
    for artifact in written:
        _write_manifest(artifact, command, {"reports": len(reports)}, None,
                        hashes, wall)
        print(f"wrote {artifact}")
    return 0


# -- parser ----------------------------------------------------------------------


def _positive_int(text: str) -> int:
    value = int(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return value


def _ratio(text: str) -> float:
    value = float(text)
    if not 0.0 < value <= 1.0:
        raise argparse.ArgumentTypeError(f"must be in (0, 1], got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="capsanom",
        description="Capsule-network anomaly detection on imbalanced MNIST subsets.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset", help="build imbalanced subsets from MNIST files")
    p.add_argument("--mnist-dir", help=f"directory with the four MNIST IDX files "
                                        f"(default: ${MNIST_DIR_ENV})")
    p.add_argument("--class", dest="normal_class", type=int, choices=range(10),
                   help="normal digit; the other nine become anomalies")
    p.add_argument("--all", action="store_true", help="build all ten subsets")
    p.add_argument("--ratio", type=_ratio, default=0.1,
                   help="anomaly count as a fraction of normals (default 0.1)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--validation-size", type=_positive_int, default=5000)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON file with default flag values")

    p = sub.add_parser("train", help="train a model on a dataset container")
    p.add_argument("--model", required=True,
                   choices=["capsnet", "dnn", "autoencoder", "iforest"])
    p.add_argument("--dataset", required=True, help="training dataset container")
    p.add_argument("--val-dataset", help="validation dataset container")
    p.add_argument("--epochs", type=_positive_int, default=None,
                   help=f"training epochs (default {DEFAULT_EPOCHS})")
    p.add_argument("--batch-size", type=_positive_int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width-scale", type=_ratio, default=1.0,
                   help="capsnet channel scaling, e.g. 0.25 for desk-scale runs")
    p.add_argument("--trees", type=_positive_int, default=100,
                   help="isolation forest tree count")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--config", help="JSON file with default flag values")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--report", required=True, help="output CSV path")
    p.add_argument("--config", help="JSON file with default flag values")

    p = sub.add_parser("compare", help="merge reports into tables and charts")
    p.add_argument("--reports", required=True, help="directory of report CSVs")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--no-plots", action="store_true", help="skip the SVG charts")
    p.add_argument("--config", help="JSON file with default flag values")
    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> None:
    """Inject config-file values as parser defaults (flags still win)."""
    probe, _ = parser.parse_known_args(argv)
    config_path = getattr(probe, "config", None)
    if not config_path:
        return
    try:
        values = json.loads(Path(config_path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise CliError(f"cannot read config file {config_path}: {e}") from e
    if not isinstance(values, dict):
        raise CliError(f"config file {config_path} must hold a JSON object")
    for action in parser._subparsers._group_actions:  # type: ignore[union-attr]
        for name, subparser in action.choices.items():
            if name == probe.command:
                known = {a.dest for a in subparser._actions}
                unknown = set(values) - known
                if unknown:
                    raise CliError(f"config file keys not recognized: {sorted(unknown)}")
                subparser.set_defaults(**values)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        command = ["capsanom"] + argv
        handler = {
            "dataset": _cmd_dataset,
            "train": _cmd_train,
            "eval": _cmd_eval,
            "compare": _cmd_compare,
        }[args.command]
        return handler(args, command)
    except (CliError, ConfigError, FormatError, TrainingError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
