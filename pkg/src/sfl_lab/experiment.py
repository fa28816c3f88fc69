"""
Experiment orchestration: seeded runs, method comparisons and nu sweeps.

Output files are schema-stable: CSV column orders are fixed by the constants
below and ``summary.json`` is written with sorted keys. Wall-clock timings go
to a separate ``timing.json`` so summaries of identical runs are byte-identical.
"""

from __future__ import annotations

import json
import logging
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .data import Dataset, DeskClassifier, default_benchmark, gt_class_probabilities, make_dataset, train_desk_classifier
from .nn import NumericError
from .selection import RankTable, build_rank_table, gaussian_class_scores, instance_select
from .svg import line_plot, scatter
from .trainer import METHODS, TrainingAborted, TrainResult, train, write_csv

log = logging.getLogger(__name__)

METRIC_NAMES = ["inception_score", "fid", "precision", "recall", "density", "coverage", "gt_prob_mean"]
METRICS_COLUMNS = ["epoch", *METRIC_NAMES, "dc_var_top", "dp_cond_share_top"]


@dataclass
class Prepared:
    train: Dataset
    heldout: Dataset
    classifier: DeskClassifier
    rank_table: RankTable


def prepare(config: RunConfig) -> Prepared:
    """Dataset, desk classifier and per-class rank table shared by all runs of a config."""
    if config.dataset == "default":
        ds = make_dataset(default_benchmark(), config.data_seed)
    else:
        ds = Dataset.from_csv(config.dataset)
    clf = train_desk_classifier(ds, epochs=config.classifier_epochs, seed=config.data_seed)
    tr, ho = ds.train(), ds.heldout()
    if len(ho) == 0:
        ho = tr
    if config.retention_ratio is not None:
        tr = instance_select(tr, gaussian_class_scores(tr.x, tr.labels), config.retention_ratio)
    table = build_rank_table(gt_class_probabilities(clf, tr.x, tr.labels), tr.labels, tr.n_classes)
    return Prepared(tr, ho, clf, table)


def _checkpoint_row(ckpt):
    m = ckpt.metrics.to_dict()
    return {"epoch": ckpt.epoch, **{k: m[k] for k in METRIC_NAMES},
            "dc_var_top": ckpt.focus["dc_var_top"], "dp_cond_share_top": ckpt.focus["dp_cond_share_top"]}


def write_metrics_csv(path, result: TrainResult):
    rows = [_checkpoint_row(c) for c in result.checkpoints]
    write_csv(path, METRICS_COLUMNS, [[r[c] for c in METRICS_COLUMNS] for r in rows])


def write_snapshots(directory, result: TrainResult, real, prefix=""):
    directory = Path(directory)
    for ckpt in result.checkpoints:
        scatter(directory / f"{prefix}epoch_{ckpt.epoch:04d}.svg", real.x, real.labels, ckpt.samples, ckpt.labels,
                title=f"{prefix.rstrip('_') or result.config.method} epoch {ckpt.epoch}")


def run_single(config: RunConfig, seed, prepared: Prepared, out_dir=None, snapshots=True) -> TrainResult:
    """Train one seed; with ``out_dir``, write its per-run files there."""
    tcfg = config.trainer_config(seed=seed)
    result = train(tcfg, prepared.train, prepared.heldout, rank_table=prepared.rank_table,
                   classifier=prepared.classifier, out_dir=out_dir)
    if out_dir is not None:
        out_dir = Path(out_dir)
        write_metrics_csv(out_dir / "metrics.csv", result)
        if snapshots:
            write_snapshots(out_dir / "snapshots", result, prepared.heldout)
    return result


@dataclass
class RunSummary:
    config: dict
    seeds: list[int]
    runs: dict[int, dict]
    aggregate: dict[str, dict]
    wall_time: dict[str, float] = field(default_factory=dict)
    results: dict[int, TrainResult] = field(default_factory=dict, repr=False)

    @property
    def ok_seeds(self):
        return [s for s in self.seeds if self.runs[s]["status"] == "ok"]

    def to_json(self):
        payload = {
            "config": self.config,
            "seeds": self.seeds,
            "runs": {str(s): self.runs[s] for s in self.seeds},
            "aggregate": self.aggregate,
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def _aggregate(best_rows):
    out = {}
    for name in METRIC_NAMES:
        values = [r[name] for r in best_rows if r[name] is not None]
        if values:
            out[name] = {"median": statistics.median(values), "min": min(values), "max": max(values)}
        else:
            out[name] = None
    return out


def run_experiment(config: RunConfig, seeds, out_dir=None, prepared: Prepared | None = None,
                   flat=False, snapshots=True) -> RunSummary:
    """Train every seed independently and aggregate best-FID checkpoints.

    A seed whose run aborts is recorded as failed; the others still run.
    With ``flat`` (single seed only) run files go directly into ``out_dir``,
    otherwise into ``out_dir/seed_<n>``.
    """
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ConfigError("at least one seed is required")
    if flat and len(seeds) != 1:
        raise ValueError("flat layout needs exactly one seed")
    wall = {}
    started = time.perf_counter()
    if prepared is None:
        prepared = prepare(config)
    wall["prepare"] = time.perf_counter() - started
    out_dir = Path(out_dir) if out_dir is not None else None
    runs, results, best_rows = {}, {}, []
    for seed in seeds:
        run_dir = None
        if out_dir is not None:
            run_dir = out_dir if flat else out_dir / f"seed_{seed}"
        t0 = time.perf_counter()
        try:
            result = run_single(config, seed, prepared, run_dir, snapshots=snapshots)
        except (TrainingAborted, NumericError) as exc:
            log.warning("seed %d failed: %s", seed, exc)
            runs[seed] = {"status": "failed", "error": str(exc)}
            wall[f"train_seed_{seed}"] = time.perf_counter() - t0
            continue
        wall[f"train_seed_{seed}"] = time.perf_counter() - t0
        series = [_checkpoint_row(c) for c in result.checkpoints]
        best = _checkpoint_row(result.best())
        runs[seed] = {"status": "ok", "series": series, "best": best, "final": series[-1]}
        results[seed] = result
        best_rows.append(best)
    summary = RunSummary(asdict(config), seeds, runs, _aggregate(best_rows), wall, results)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "summary.json").write_text(summary.to_json())
        (out_dir / "timing.json").write_text(json.dumps(wall, indent=2, sort_keys=True) + "\n")
        prepared.rank_table.to_csv(out_dir / "rank_table.csv")
    return summary


def _table_columns(first):
    cols = [first, "seeds_ok"]
    for name in METRIC_NAMES:
        cols += [f"{name}_median", f"{name}_min", f"{name}_max"]
    return cols


def _table_row(label, summary: RunSummary):
    row = [label, len(summary.ok_seeds)]
    for name in METRIC_NAMES:
        agg = summary.aggregate.get(name)
        row += [None, None, None] if agg is None else [agg["median"], agg["min"], agg["max"]]
    return row


def _fid_curves(summaries):
    curves = {}
    for label, summary in summaries.items():
        if not summary.ok_seeds:
            continue
        series = [summary.runs[s]["series"] for s in summary.ok_seeds]
        epochs = [r["epoch"] for r in series[0]]
        curves[label] = (epochs, [statistics.median(run[i]["fid"] for run in series) for i in range(len(epochs))])
    return curves


def compare(methods, config: RunConfig, seeds, out_dir=None):
    """One RunSummary per method on identical data and seeds.

    Writes ``comparison.csv``, ``fid_curve.svg`` and, for the first seed,
    ``snapshots/<method>_epoch_<E>.svg`` for every evaluation checkpoint.
    """
    methods = list(methods)
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ConfigError(f"unknown method(s) {', '.join(unknown)}; choose from {', '.join(METHODS)}", key="methods")
    if len(methods) < 2:
        raise ConfigError("compare needs at least two methods", key="methods")
    prepared = prepare(config)
    out_dir = Path(out_dir) if out_dir is not None else None
    summaries = {}
    for method in methods:
        sub = out_dir / method if out_dir is not None else None
        summaries[method] = run_experiment(config.with_values(method=method), seeds, sub, prepared, snapshots=False)
    if out_dir is not None:
        write_csv(out_dir / "comparison.csv", _table_columns("method"),
                  [_table_row(m, s) for m, s in summaries.items()])
        curves = _fid_curves(summaries)
        if curves:
            line_plot(out_dir / "fid_curve.svg", curves, title="median FID by epoch")
        for method, summary in summaries.items():
            if summary.ok_seeds:
                write_snapshots(out_dir / "snapshots", summary.results[summary.ok_seeds[0]],
                                prepared.heldout, prefix=f"{method}_")
    return summaries


def sweep(config: RunConfig, nus, seeds, out_dir=None):
    """Repeat the configured method for each maximum focusing rate in ``nus``."""
    prepared = prepare(config)
    out_dir = Path(out_dir) if out_dir is not None else None
    summaries = {}
    for nu in nus:
        label = f"nu={nu:g}"
        sub = out_dir / label if out_dir is not None else None
        summaries[label] = run_experiment(config.with_values(nu=float(nu)), seeds, sub, prepared, snapshots=False)
    if out_dir is not None:
        rows = []
        for nu, (label, s) in zip(nus, summaries.items()):
            rows.append([float(nu), *_table_row(label, s)[1:]])
        write_csv(out_dir / "sweep.csv", _table_columns("nu"), rows)
        curves = _fid_curves(summaries)
        if curves:
            line_plot(out_dir / "fid_curve.svg", curves, title="median FID by epoch")
    return summaries


def score_files(real_path, fake_path, k=3, classifier: DeskClassifier | None = None):
    """Metrics between two point files (last column is a class label or -1)."""
    from .metrics import evaluate

    real_x, _ = read_points(real_path)
    fake_x, fake_y = read_points(fake_path)
    probs = labels = None
    if classifier is not None:
        probs = classifier.probabilities(fake_x)
        if np.all(fake_y >= 0):
            labels = fake_y
    return evaluate(real_x, fake_x, k=k, fake_probs=probs, fake_labels=labels)


def read_points(path):
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                if not rows and lineno == 1:
                    continue  # header
                raise ValueError(f"{path}:{lineno}: non-numeric row") from None
    if not rows:
        raise ValueError(f"{path}: no points")
    if len({len(r) for r in rows}) != 1 or len(rows[0]) < 2:
        raise ValueError(f"{path}: rows need equal length with at least one coordinate and a label")
    a = np.array(rows)
    return a[:, :-1], a[:, -1].astype(int)
