"""Command-line entry point: ``msdann {synth,train,score,experiment,report}``.

Every command writes a ``manifest.json`` next to its outputs holding the
fully resolved configuration; ``--from-manifest`` replays a run from it.

Exit codes: 0 success, 2 configuration or I/O error, 3 training diverged,
4 every experiment cell failed.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from . import __version__
from . import data as dm
from .errors import ConfigurationError, MsdannError, TrainingDivergedError
from .evaluation import (
    ExperimentConfig,
    export_report,
    load_report,
    plot_data,
    run_experiment,
    summarize,
)
from .strategies import (
    StrategyKind,
    TrainConfig,
    load_checkpoint,
    predict_proba,
    save_checkpoint,
    train_strategy,
)
from .synth import SyntheticConfig, generate

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_ALL_FAILED = 0, 2, 3, 4
OUTPUT_ENV = "MSDANN_OUTPUT_DIR"

log = logging.getLogger("msdann")


class ExitError(Exception):
    def __init__(self, code: int, message: str):
        self.code = code
        super().__init__(message)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _read_config(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    try:
        with path.open("rb") as fh:
            if path.suffix.lower() == ".json":
                return json.load(fh)
            return tomllib.load(fh)
    except OSError as exc:
        raise ExitError(EXIT_CONFIG, f"cannot read config {path}: {exc.strerror}") from None
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ExitError(EXIT_CONFIG, f"cannot parse config {path}: {exc}") from None


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUTPUT_ENV) or "msdann-out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, resolved: dict, inputs: dict, outputs: list[Path],
                    started: float) -> Path:
    manifest = {
        "command": command,
        "tool_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "resolved": resolved,
        "seed": resolved.get("seed"),
        "inputs": {k: {"path": str(p), "sha256": _sha256(p)} for k, p in inputs.items()},
        "outputs": {p.name: _sha256(p) for p in outputs},
        "wall_clock_seconds": round(time.time() - started, 3),
    }
    path = out / "manifest.json"
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)
    return path


def _replay(args, command: str) -> dict | None:
    if not getattr(args, "from_manifest", None):
        return None
    obj = json.loads(Path(args.from_manifest).read_text(encoding="utf-8"))
    if obj.get("command") != command:
        raise ExitError(EXIT_CONFIG, f"manifest was written by {obj.get('command')!r}, not {command!r}")
    return obj["resolved"]


def _parse_list(value, cast=str):
    if value is None:
        return None
    return [cast(v.strip()) for v in value.split(",") if v.strip()]


# -- synth ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    started = time.time()
    resolved = _replay(args, "synth")
    if resolved is None:
        raw = _read_config(args.config)
        raw = dict(raw.get("synthetic", raw))
        fmt = raw.pop("format", "csv")
        if args.seed is not None:
            raw["seed"] = args.seed
        if args.format:
            fmt = args.format
        cfg = SyntheticConfig.from_dict(raw)
        resolved = {"synthetic": cfg.to_dict(), "format": fmt, "seed": cfg.seed}
    else:
        cfg = SyntheticConfig.from_dict(resolved["synthetic"])
        fmt = resolved["format"]
    if fmt not in ("csv", "jsonl"):
        raise ConfigurationError(f"format must be csv or jsonl, got {fmt!r}")
    out = _out_dir(args)
    ds, gt = generate(cfg)
    data_path = dm.save_dataset(ds, out / f"dataset.{fmt}", fmt)
    gt_path = gt.save(out / "ground_truth.json")
    inputs = {"config": args.config} if args.config else {}
    _write_manifest(out, "synth", resolved, inputs, [data_path, gt_path], started)
    print(f"wrote {len(ds)} encounters from {len(ds.site_registry)} sites to {data_path}")
    return EXIT_OK


# -- train ---------------------------------------------------------------------------

def _train_config(args, raw: dict) -> TrainConfig:
    raw = dict(raw.get("train", raw))
    overrides = {
        "epochs": args.epochs, "lam": args.lam, "seed": args.seed, "batch_size": args.batch_size,
        "learning_rate": args.lr, "hidden_width": args.hidden_width,
    }
    raw.update({k: v for k, v in overrides.items() if v is not None})
    if getattr(args, "source_labels_only", False):
        raw["use_target_labels"] = False
    return TrainConfig.from_dict(raw)


def cmd_train(args) -> int:
    started = time.time()
    resolved = _replay(args, "train")
    if resolved is None:
        raw = _read_config(args.config)
        tcfg = _train_config(args, raw)
        split = raw.get("split", {}).get("train_fraction", 0.8)
        if args.train_fraction is not None:
            split = args.train_fraction
        resolved = {
            "data": str(args.data),
            "strategy": StrategyKind.parse(args.strategy).value,
            "target_er": args.target,
            "train": tcfg.to_dict(),
            "train_fraction": split,
            "seed": tcfg.seed,
        }
    tcfg = TrainConfig.from_dict(resolved["train"])
    kind = StrategyKind.parse(resolved["strategy"])
    ds = dm.load_dataset(resolved["data"])
    train_ds, test_ds = dm.temporal_split(ds, dm.SplitSpec(resolved["train_fraction"]))
    out = _out_dir(args)
    try:
        model, tlog = train_strategy(train_ds, resolved["target_er"], kind, tcfg)
    except TrainingDivergedError as exc:
        raise ExitError(EXIT_DIVERGED, str(exc)) from None
    ckpt = save_checkpoint(model, out / "checkpoint.json")
    log_path = tlog.write_csv(out / "train_log.csv")
    split_path = out / "split_manifest.json"
    split_path.write_text(json.dumps(dm.split_manifest(train_ds, test_ds), indent=1) + "\n", encoding="utf-8")
    _write_manifest(out, "train", resolved, {"data": resolved["data"]}, [ckpt, log_path, split_path], started)
    print(f"trained {kind.value} for target {resolved['target_er']} on {len(model.train_manifest)} rows "
          f"-> {ckpt}")
    return EXIT_OK


# -- score ---------------------------------------------------------------------------

def cmd_score(args) -> int:
    started = time.time()
    resolved = _replay(args, "score") or {"checkpoint": str(args.checkpoint), "data": str(args.data)}
    model = load_checkpoint(resolved["checkpoint"])
    ds = dm.load_dataset(resolved["data"])
    if model.vocabulary and tuple(model.vocabulary) != ds.vocabulary:
        raise ConfigurationError(
            f"dataset vocabulary ({ds.vocab_size} concepts) does not match the checkpoint "
            f"({len(model.vocabulary)} concepts)"
        )
    batch = dm.encode(ds.records, ds.vocabulary)
    probs = predict_proba(model, batch.x)
    out = _out_dir(args)
    path = out / (args.name or "scores.csv")
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["encounter_id", "probability"])
        for eid, p in zip(batch.row_meta, probs):
            w.writerow([eid, repr(float(p))])
    _write_manifest(out, "score", resolved, {"checkpoint": resolved["checkpoint"], "data": resolved["data"]},
                    [path], started)
    print(f"scored {len(probs)} encounters -> {path}")
    return EXIT_OK


# -- experiment / report ----------------------------------------------------------------

def _write_report_files(report, out: Path, plotdata: bool) -> list[Path]:
    paths = [export_report(report, out / "report.csv"), export_report(report, out / "report.json")]
    summary = out / "summary.json"
    summary.write_text(json.dumps(report.summaries, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    paths.append(summary)
    if plotdata:
        pd = out / "plotdata.json"
        pd.write_text(json.dumps(plot_data(report), indent=1, sort_keys=True) + "\n", encoding="utf-8")
        paths.append(pd)
    return paths


def _print_summary(report) -> None:
    for name, s in report.summaries["strategies"].items():
        if s["n"]:
            print(f"{name:18s} n={s['n']:3d}  min={s['min']:.3f}  median={s['median']:.3f}  max={s['max']:.3f}")
        else:
            print(f"{name:18s} no successful cells")


def cmd_experiment(args) -> int:
    started = time.time()
    resolved = _replay(args, "experiment")
    inputs = {}
    if resolved is None:
        raw = dict(_read_config(args.config))
        if args.config:
            inputs["config"] = args.config
        if args.data:
            raw["data_path"] = str(args.data)
            raw.pop("synthetic", None)
        if raw.get("data_path") is None and raw.get("synthetic") is None:
            raw["synthetic"] = {}
        for key, value in (("strategies", _parse_list(args.strategies)),
                           ("targets", _parse_list(args.targets)),
                           ("seeds", _parse_list(args.seeds, int))):
            if value is not None:
                raw[key] = value
        train_raw = dict(raw.get("train", {}))
        if args.epochs is not None:
            train_raw["epochs"] = args.epochs
        raw["train"] = train_raw
        raw.pop("workers", None)
        cfg = ExperimentConfig.from_dict(raw)
        resolved = cfg.to_dict()
        resolved["seed"] = list(cfg.seeds)
        resolved["plotdata"] = bool(args.plotdata)
    else:
        cfg = ExperimentConfig.from_dict({k: v for k, v in resolved.items() if k not in ("seed", "plotdata")})
    if cfg.data_path:
        inputs["data"] = cfg.data_path
    cfg.workers = args.workers
    report = run_experiment(cfg)
    out = _out_dir(args)
    paths = _write_report_files(report, out, resolved.get("plotdata", False))
    _write_manifest(out, "experiment", resolved, inputs, paths, started)
    _print_summary(report)
    n_ok = len(report.ok_cells())
    print(f"{n_ok}/{len(report.cells)} cells succeeded -> {out}")
    return EXIT_OK if n_ok else EXIT_ALL_FAILED


def cmd_report(args) -> int:
    started = time.time()
    resolved = _replay(args, "report") or {"report": str(args.report), "plotdata": bool(args.plotdata)}
    report = load_report(resolved["report"])
    report.summaries = summarize(report)
    out = _out_dir(args)
    paths = _write_report_files(report, out, resolved["plotdata"])
    _write_manifest(out, "report", resolved, {"report": resolved["report"]}, paths, started)
    _print_summary(report)
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msdann", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or ./msdann-out)")
        p.add_argument("--from-manifest", help="replay the run recorded in a manifest.json")

    p = sub.add_parser("synth", help="generate a synthetic multi-site dataset")
    common(p)
    p.add_argument("--config", help="TOML/JSON synthetic config")
    p.add_argument("--seed", type=int)
    p.add_argument("--format", choices=("csv", "jsonl"))
    p.set_defaults(func=cmd_synth)

    def train_flags(p):
        p.add_argument("--epochs", type=int)
        p.add_argument("--lam", "--lambda", dest="lam", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--hidden-width", type=int)

    p = sub.add_parser("train", help="train one strategy for one target site")
    common(p)
    p.add_argument("--data")
    p.add_argument("--strategy")
    p.add_argument("--target")
    p.add_argument("--config", help="TOML/JSON train config")
    p.add_argument("--train-fraction", type=float)
    p.add_argument("--source-labels-only", action="store_true",
                   help="exclude target rows from the label loss")
    train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="score a dataset with a checkpoint")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--name", help="output file name (default scores.csv)")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("experiment", help="run the target x strategy x seed grid")
    common(p)
    p.add_argument("--config", help="TOML/JSON experiment config")
    p.add_argument("--data", help="dataset file (overrides the config's source)")
    p.add_argument("--strategies", help="comma-separated strategy names")
    p.add_argument("--targets", help="comma-separated target site ids")
    p.add_argument("--seeds", help="comma-separated training seeds")
    p.add_argument("--epochs", type=int)
    p.add_argument("--workers", type=int, help="parallel worker processes")
    p.add_argument("--plotdata", action="store_true", help="also write per-strategy AUROC vectors")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("report", help="re-summarize an existing report.json")
    common(p)
    p.add_argument("--report")
    p.add_argument("--plotdata", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


_REQUIRED = {"train": ("data", "strategy", "target"), "score": ("checkpoint", "data"), "report": ("report",)}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not args.from_manifest:
        missing = [f"--{k}" for k in _REQUIRED.get(args.command, ()) if getattr(args, k) is None]
        if missing:
            parser.error(f"{args.command}: missing {', '.join(missing)}")
    try:
        return args.func(args)
    except ExitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (MsdannError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
