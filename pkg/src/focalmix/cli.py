"""Command-line entry points: dataset generation, training, evaluation,
and single-scan prediction.

    focalmix gen-data --config cfg.json --out data/ [--count-labeled N] ...
    focalmix train    --config cfg.json --data data/ --mode focalmix --out run/
    focalmix eval     --checkpoint run/checkpoint.ckpt --data data/ --out eval/
    focalmix predict  --checkpoint run/checkpoint.ckpt --scan data/test/<id> --out dets.jsonl

The config file is one JSON document with sections "gen", "model", "ssl",
"focal" (each optional, defaults apply) plus "epochs".  Flags override
config scalars.  Every run directory receives a manifest with the full
config snapshot, enough to reproduce the run.

Exit codes: 0 success, 1 usage/configuration error, 2 data error,
3 numerical divergence.  All randomness flows from the config seeds; no
wall-clock entropy touches any artifact.  Timestamps are recorded in run
manifests only when SOURCE_DATE_EPOCH is set, so repeated runs with equal
seeds produce byte-identical outputs.

The environment variable FOCALMIX_THREADS caps internal parallelism (it
is applied to the numerical backends at package import; set 1 for
bit-reproducibility across machines).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from . import __version__
from .anchors import write_detections
from .exceptions import ConfigurationError, DataError, DivergenceError
from .loss import FocalParams
from .metrics import write_cpm_json, write_froc_csv
from .model import DetectorConfig, load_checkpoint, save_checkpoint
from .pipeline import SSLConfig, detect_scan, evaluate_scans, train
from .volume import GenConfig, LabeledScan, generate_scan, read_scan, write_scan

__all__ = ["entrypoint", "main"]

DATASET_MANIFEST = "dataset.json"
RUN_MANIFEST = "manifest.json"

# Scan-index namespaces per split: scan content depends only on (seed, index),
# never on how many scans each split holds.
SPLIT_INDEX_BASE = {"labeled": 0, "unlabeled": 100_000, "test": 200_000}

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems on exit code 1."""

    def error(self, message):
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _atomic_write_text(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        f.write(text)
    os.replace(tmp, path)


def _timestamp() -> int | None:
    """Deterministic epoch stamp: SOURCE_DATE_EPOCH or nothing."""
    raw = os.environ.get("SOURCE_DATE_EPOCH")
    return int(raw) if raw else None


def _write_run_manifest(out_dir: str, command: str, config: dict, outputs: list[str],
                        finished: bool = False) -> None:
    manifest = {
        "command": command,
        "config": config,
        "version": f"focalmix-{__version__}",
        "started_at": _timestamp(),
        "finished": finished,
        "finished_at": _timestamp() if finished else None,
        "outputs": sorted(outputs),
    }
    _atomic_write_text(
        os.path.join(out_dir, RUN_MANIFEST), json.dumps(manifest, sort_keys=True) + "\n"
    )


def load_config(path: str | None):
    """Parse the combined JSON config into typed sections."""
    raw = {}
    if path is not None:
        try:
            with open(path) as f:
                raw = json.load(f)
        except (OSError, ValueError) as e:
            raise ConfigurationError(f"cannot read config {path}: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigurationError(f"config {path} must be a JSON object")
    try:
        gen = GenConfig.from_json_dict(raw.get("gen", {}))
        model = DetectorConfig.from_json_dict(raw.get("model", {}))
        ssl = SSLConfig.from_json_dict(raw.get("ssl", {}))
        focal = FocalParams.from_json_dict(raw.get("focal", {}))
    except TypeError as e:
        raise ConfigurationError(f"bad config field: {e}") from e
    epochs = int(raw.get("epochs", 10))
    if epochs < 1:
        raise ConfigurationError(f"epochs must be >= 1, got {epochs}")
    return gen, model, ssl, focal, epochs


def _apply_seed_override(gen, model, ssl, seed: int | None):
    if seed is None:
        return gen, model, ssl
    return (
        dataclasses.replace(gen, seed=seed),
        dataclasses.replace(model, weight_init_seed=seed),
        dataclasses.replace(ssl, seed=seed),
    )


def _config_snapshot(gen, model, ssl, focal, epochs) -> dict:
    return {
        "gen": gen.to_json_dict(),
        "model": model.to_json_dict(),
        "ssl": ssl.to_json_dict(),
        "focal": focal.to_json_dict(),
        "epochs": epochs,
    }


def cmd_gen_data(args) -> int:
    gen, model, ssl, focal, epochs = load_config(args.config)
    gen, model, ssl = _apply_seed_override(gen, model, ssl, args.seed)
    counts = {
        "labeled": args.count_labeled,
        "unlabeled": args.count_unlabeled,
        "test": args.count_test,
    }
    for split, n in counts.items():
        if n < 0:
            raise ConfigurationError(f"count for {split} must be >= 0, got {n}")
        if n == 0:
            print(f"warning: {split} split is empty", file=sys.stderr)

    os.makedirs(args.out, exist_ok=True)
    splits: dict[str, list[str]] = {}
    for split, n in counts.items():
        split_dir = os.path.join(args.out, split)
        os.makedirs(split_dir, exist_ok=True)
        ids = []
        for i in range(n):
            scan = generate_scan(gen, SPLIT_INDEX_BASE[split] + i)
            if split == "unlabeled":
                scan = LabeledScan(volume=scan.volume, boxes=[], id=scan.id)
            write_scan(scan, os.path.join(split_dir, scan.id))
            ids.append(scan.id)
        splits[split] = ids
    manifest = {
        "format": "focalmix-dataset-v1",
        "gen": gen.to_json_dict(),
        "splits": splits,
    }
    _atomic_write_text(
        os.path.join(args.out, DATASET_MANIFEST), json.dumps(manifest, sort_keys=True) + "\n"
    )
    print(
        f"wrote {counts['labeled']} labeled / {counts['unlabeled']} unlabeled / "
        f"{counts['test']} test scans to {args.out}"
    )
    return EXIT_OK


def _load_split(data_dir: str, manifest: dict, split: str) -> list[LabeledScan]:
    ids = manifest.get("splits", {}).get(split, [])
    return [read_scan(os.path.join(data_dir, split, scan_id)) for scan_id in ids]


def _read_dataset_manifest(data_dir: str) -> dict:
    path = os.path.join(data_dir, DATASET_MANIFEST)
    try:
        with open(path) as f:
            manifest = json.load(f)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read dataset manifest {path}: {e}") from e
    if manifest.get("format") != "focalmix-dataset-v1":
        raise DataError(f"{path}: unknown dataset format {manifest.get('format')!r}")
    return manifest


def _metrics_csv(log) -> str:
    lines = ["epoch,lr,loss_labeled,loss_unlabeled,CPM_val"]
    for row in log:
        cpm_val = "" if row.cpm_val is None else repr(row.cpm_val)
        lines.append(
            f"{row.epoch},{row.lr!r},{row.loss_labeled!r},{row.loss_unlabeled!r},{cpm_val}"
        )
    return "\n".join(lines) + "\n"


def cmd_train(args) -> int:
    gen, model, ssl, focal, epochs = load_config(args.config)
    gen, model, ssl = _apply_seed_override(gen, model, ssl, args.seed)
    if args.epochs is not None:
        if args.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {args.epochs}")
        epochs = args.epochs
    manifest = _read_dataset_manifest(args.data)
    labeled = _load_split(args.data, manifest, "labeled")
    if not labeled:
        raise DataError(f"dataset {args.data} has no labeled scans")

    if args.mode == "supervised":
        ssl = dataclasses.replace(
            ssl, unlabeled_per_batch=0, image_mixup=False, object_mixup=False
        )
        unlabeled: list[LabeledScan] = []
    else:
        unlabeled = _load_split(args.data, manifest, "unlabeled")
        if not unlabeled:
            raise DataError(
                f"mode focalmix requires unlabeled scans in {args.data}/unlabeled"
            )

    os.makedirs(args.out, exist_ok=True)
    config_snapshot = _config_snapshot(gen, model, ssl, focal, epochs)
    config_snapshot["mode"] = args.mode
    config_snapshot["data"] = os.path.abspath(args.data)
    outputs = [os.path.join(args.out, p) for p in ("checkpoint.ckpt", "metrics.csv")]
    _write_run_manifest(args.out, "train", config_snapshot, outputs)

    state, log = train(labeled, unlabeled, ssl, model, focal, epochs=epochs)

    save_checkpoint(state, os.path.join(args.out, "checkpoint.ckpt"))
    _atomic_write_text(os.path.join(args.out, "metrics.csv"), _metrics_csv(log))
    _write_run_manifest(args.out, "train", config_snapshot, outputs, finished=True)
    print(f"trained {epochs} epochs ({args.mode}); artifacts in {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    manifest = _read_dataset_manifest(args.data)
    test_scans = _load_split(args.data, manifest, "test")
    if not test_scans:
        raise DataError(f"dataset {args.data} has no test scans")
    os.makedirs(args.out, exist_ok=True)
    config_snapshot = {
        "checkpoint": os.path.abspath(args.checkpoint),
        "data": os.path.abspath(args.data),
        "model": state.config.to_json_dict(),
    }
    outputs = [os.path.join(args.out, p) for p in ("froc.csv", "cpm.json")]
    _write_run_manifest(args.out, "eval", config_snapshot, outputs)

    curve, cpm_value = evaluate_scans(state, test_scans)
    write_froc_csv(curve, os.path.join(args.out, "froc.csv"))
    write_cpm_json(curve, os.path.join(args.out, "cpm.json"))
    _write_run_manifest(args.out, "eval", config_snapshot, outputs, finished=True)
    print(f"CPM {cpm_value:.2f} over {len(test_scans)} scans; outputs in {args.out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    state = load_checkpoint(args.checkpoint)
    scan = read_scan(args.scan)
    dets = detect_scan(state, scan, min_score=args.min_score)
    write_detections(args.out, {scan.id: dets})
    print(f"{len(dets)} detections for {scan.id} written to {args.out}")
    return EXIT_OK


def _build_parser() -> _Parser:
    parser = _Parser(prog="focalmix", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"focalmix {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--config", default=None, help="JSON config (defaults apply if omitted)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--count-labeled", type=int, default=4)
    p.add_argument("--count-unlabeled", type=int, default=32)
    p.add_argument("--count-test", type=int, default=24)
    p.add_argument("--seed", type=int, default=None, help="override all config seeds")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True, help="dataset directory (from gen-data)")
    p.add_argument("--mode", choices=("supervised", "focalmix"), default="focalmix")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="detect lesions in one scan")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scan", required=True, help="scan path (base, .vol, or .json)")
    p.add_argument("--out", required=True, help="detections JSONL path")
    p.add_argument("--min-score", type=float, default=0.05)
    p.set_defaults(func=cmd_predict)
    return parser


def entrypoint(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as e:  # argparse --help/--version or usage error
        return int(e.code or 0)
    except ConfigurationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    raise SystemExit(entrypoint())
