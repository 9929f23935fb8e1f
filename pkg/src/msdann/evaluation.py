"""AUROC, the target-site x strategy x seed experiment grid, and reports."""

from __future__ import annotations

import csv
import json
import logging
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from . import data as dm
from .data import Dataset, SplitSpec, encode, manifest_hash, temporal_split
from .errors import ConfigurationError, MsdannError, UndefinedMetricError
from .strategies import StrategyKind, TrainConfig, predict_proba, train_strategy
from .synth import GroundTruth, SyntheticConfig, bayes_scores, generate

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("target_er", "strategy", "seed", "auroc", "n_test", "n_test_pos", "status")

ALL_STRATEGIES = tuple(StrategyKind)


def auroc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney rank sum (ties count half)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ConfigurationError("scores and labels must be vectors of equal length")
    if not np.all((labels == 0) | (labels == 1)):
        raise UndefinedMetricError("labels must be 0 or 1")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs at least one positive and one negative label")
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class ExperimentConfig:
    data_path: str | None = None
    synthetic: SyntheticConfig | None = None
    strategies: Sequence[StrategyKind] = ALL_STRATEGIES
    targets: Sequence[str] | None = None  # None = every site
    seeds: Sequence[int] = (0,)
    train: TrainConfig = field(default_factory=TrainConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    workers: int | None = None

    def __post_init__(self):
        self.strategies = tuple(StrategyKind.parse(s) for s in self.strategies)
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.strategies:
            raise ConfigurationError("strategies must not be empty")
        if not self.seeds:
            raise ConfigurationError("seeds must not be empty")
        if self.targets is not None:
            self.targets = tuple(self.targets)
            if not self.targets:
                raise ConfigurationError("targets must not be empty")
        if (self.data_path is None) == (self.synthetic is None):
            raise ConfigurationError("exactly one of data_path or synthetic must be given")

    def to_dict(self) -> dict:
        return {
            "data_path": self.data_path,
            "synthetic": None if self.synthetic is None else self.synthetic.to_dict(),
            "strategies": [s.value for s in self.strategies],
            "targets": None if self.targets is None else list(self.targets),
            "seeds": list(self.seeds),
            "train": self.train.to_dict(),
            "split": asdict(self.split),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        obj = dict(obj)
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown experiment config field(s): {sorted(unknown)}")
        if obj.get("synthetic") is not None:
            obj["synthetic"] = SyntheticConfig.from_dict(obj["synthetic"])
        obj["train"] = TrainConfig.from_dict(obj.get("train") or {})
        obj["split"] = SplitSpec(**(obj.get("split") or {}))
        if "strategies" in obj and isinstance(obj["strategies"], str):
            obj["strategies"] = obj["strategies"].split(",")
        return cls(**obj)


@dataclass
class Cell:
    target_er: str
    strategy: str
    seed: int
    auroc: float | None
    n_test: int
    n_test_pos: int
    status: str = "ok"  # ok | skipped | failed
    message: str = ""


@dataclass
class ExperimentReport:
    cells: list[Cell] = field(default_factory=list)
    test_manifest: dict[str, str] = field(default_factory=dict)  # target -> sha256 of test ids
    oracle_auroc: dict[str, float] = field(default_factory=dict)  # target -> Bayes AUROC
    summaries: dict = field(default_factory=dict)

    def ok_cells(self, strategy: str | None = None) -> list[Cell]:
        return [c for c in self.cells if c.status == "ok" and (strategy is None or c.strategy == strategy)]

    def to_dict(self) -> dict:
        return {
            "columns": list(REPORT_COLUMNS),
            "cells": [asdict(c) for c in self.cells],
            "test_manifest": dict(self.test_manifest),
            "oracle_auroc": dict(self.oracle_auroc),
            "summaries": self.summaries,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentReport":
        return cls(
            cells=[Cell(**c) for c in obj["cells"]],
            test_manifest=dict(obj.get("test_manifest", {})),
            oracle_auroc=dict(obj.get("oracle_auroc", {})),
            summaries=obj.get("summaries", {}),
        )


def _load_source(cfg: ExperimentConfig) -> tuple[Dataset, GroundTruth | None]:
    if cfg.synthetic is not None:
        return generate(cfg.synthetic)
    return dm.load_dataset(cfg.data_path), None


def _run_cell(train_ds: Dataset, test_x, test_y, target: str, kind: StrategyKind,
              tcfg: TrainConfig) -> Cell:
    n_test, n_pos = len(test_y), int(test_y.sum())
    try:
        model, _ = train_strategy(train_ds, target, kind, tcfg)
        score = auroc(predict_proba(model, test_x), test_y)
    except UndefinedMetricError as exc:
        return Cell(target, kind.value, tcfg.seed, None, n_test, n_pos, "skipped", str(exc))
    except MsdannError as exc:
        return Cell(target, kind.value, tcfg.seed, None, n_test, n_pos, "failed", str(exc))
    return Cell(target, kind.value, tcfg.seed, score, n_test, n_pos)


def _cell_job(args):
    return _run_cell(*args)


def run_experiment(cfg: ExperimentConfig, dataset: Dataset | None = None,
                   ground_truth: GroundTruth | None = None) -> ExperimentReport:
    """Train and score every (target, strategy, seed) cell.

    Every strategy for a target is scored on the same target test rows.
    Cells whose test set holds a single class are marked ``skipped``;
    training failures are marked ``failed`` and the grid carries on.
    ``dataset`` bypasses loading from the configured source.
    """
    if dataset is None:
        dataset, ground_truth = _load_source(cfg)
    train_ds, test_ds = temporal_split(dataset, cfg.split)
    targets = cfg.targets if cfg.targets is not None else dataset.site_registry
    for t in targets:
        if t not in dataset.site_registry:
            raise ConfigurationError(f"unknown target site {t!r}")

    report = ExperimentReport()
    jobs = []
    for t in targets:
        test_recs = test_ds.site_records(t)
        batch = encode(test_recs, dataset.vocabulary)
        report.test_manifest[t] = manifest_hash(batch.row_meta)
        y = batch.y.astype(int)
        if ground_truth is not None:
            try:
                report.oracle_auroc[t] = auroc(bayes_scores(ground_truth, test_ds.subset(test_recs)), y)
            except UndefinedMetricError:
                pass
        for kind in cfg.strategies:
            for seed in cfg.seeds:
                tcfg = TrainConfig.from_dict({**cfg.train.to_dict(), "seed": seed})
                jobs.append((train_ds, batch.x, y, t, kind, tcfg))

    workers = cfg.workers or min(len(jobs), os.cpu_count() or 1)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(_cell_job, jobs))
    else:
        cells = [_cell_job(j) for j in jobs]
    for c in cells:
        if c.status != "ok":
            log.warning("cell %s/%s/seed=%d %s: %s", c.target_er, c.strategy, c.seed, c.status, c.message)

    order_t = {t: i for i, t in enumerate(targets)}
    order_s = {k.value: i for i, k in enumerate(cfg.strategies)}
    report.cells = sorted(cells, key=lambda c: (order_t[c.target_er], order_s[c.strategy], c.seed))
    report.summaries = summarize(report)
    return report


def _median(values):
    return float(statistics.median(values))


def summarize(report: ExperimentReport) -> dict:
    """Per-strategy min/median/max AUROC and pairwise per-target improvements.

    Per-target values average a strategy's seeds. The relative improvement of
    A over B on one target is ``(auroc_A - auroc_B) / auroc_B``.
    """
    strategies = list(dict.fromkeys(c.strategy for c in report.cells))
    per_target: dict[str, dict[str, float]] = {}
    for s in strategies:
        groups: dict[str, list[float]] = {}
        for c in report.ok_cells(s):
            groups.setdefault(c.target_er, []).append(c.auroc)
        per_target[s] = {t: float(np.mean(v)) for t, v in groups.items()}

    stats = {}
    for s in strategies:
        vals = [c.auroc for c in report.ok_cells(s)]
        if vals:
            stats[s] = {"min": float(min(vals)), "median": _median(vals), "max": float(max(vals)),
                        "n": len(vals)}
        else:
            stats[s] = {"min": None, "median": None, "max": None, "n": 0}

    improvements = {}
    for a in strategies:
        for b in strategies:
            if a == b:
                continue
            common = [t for t in per_target[a] if t in per_target[b] and per_target[b][t] > 0]
            rel = {t: (per_target[a][t] - per_target[b][t]) / per_target[b][t] for t in common}
            improvements[f"{a}/{b}"] = {
                "per_target": rel,
                "wins": sum(1 for t in common if per_target[a][t] > per_target[b][t]),
                "n_targets": len(common),
            }
    return {"strategies": stats, "per_target": per_target, "improvements": improvements}


def relative_improvement(a: float, b: float) -> float:
    return (a - b) / b


def plot_data(report: ExperimentReport) -> dict[str, list[float]]:
    """AUROC vectors grouped by strategy, ready for a boxplot."""
    out: dict[str, list[float]] = {}
    for c in report.ok_cells():
        out.setdefault(c.strategy, []).append(c.auroc)
    return out


def _fmt(v) -> str:
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, float) else str(v)


def export_report(report: ExperimentReport, path, fmt: str | None = None) -> Path:
    path = Path(path)
    fmt = fmt or ("json" if path.suffix.lower() == ".json" else "csv")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if fmt == "csv":
            with path.open("w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(REPORT_COLUMNS)
                for c in report.cells:
                    w.writerow([_fmt(getattr(c, col)) for col in REPORT_COLUMNS])
        elif fmt == "json":
            path.write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
        else:
            raise ConfigurationError(f"unknown report format {fmt!r}")
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc.strerror}") from exc
    return path


def load_report(path) -> ExperimentReport:
    """Read a report written by :func:`export_report` (JSON or CSV).

    A CSV report carries only the cell table; summaries are recomputed.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".json":
        return ExperimentReport.from_dict(json.loads(text))
    rows = list(csv.DictReader(text.splitlines()))
    if rows and set(REPORT_COLUMNS) - set(rows[0]):
        raise ConfigurationError(f"{path} is missing report columns {sorted(set(REPORT_COLUMNS) - set(rows[0]))}")
    cells = [
        Cell(r["target_er"], r["strategy"], int(r["seed"]), float(r["auroc"]) if r["auroc"] else None,
             int(r["n_test"]), int(r["n_test_pos"]), r["status"])
        for r in rows
    ]
    report = ExperimentReport(cells)
    report.summaries = summarize(report)
    return report
