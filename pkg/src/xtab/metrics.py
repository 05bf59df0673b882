"""Task metrics and cross-model comparison statistics."""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

HIGHER_BETTER = "higher_better"
LOWER_BETTER = "lower_better"
METRIC_DIRECTION = {"auc": HIGHER_BETTER, "logloss": LOWER_BETTER, "rmse": LOWER_BETTER}
LOG_LOSS_CLIP = 1e-15
RESULT_SCHEMA_VERSION = 1


class MetricError(ValueError):
    """The metric is undefined for the given inputs."""


@dataclass(frozen=True)
class MetricRecord:
    task: str
    trial: int
    model: str
    metric: str
    value: float
    direction: str

    def __post_init__(self) -> None:
        if self.metric not in METRIC_DIRECTION:
            raise MetricError(f"unknown metric {self.metric!r}")
        if self.direction != METRIC_DIRECTION[self.metric]:
            raise MetricError(f"{self.metric} must be {METRIC_DIRECTION[self.metric]}")
        if self.metric == "auc" and not 0.0 <= self.value <= 1.0:
            raise MetricError(f"AUC {self.value} outside [0, 1]")
        if self.metric != "auc" and self.value < 0:
            raise MetricError(f"{self.metric} must be non-negative, got {self.value}")


def _check_direction(direction: str) -> None:
    if direction not in (HIGHER_BETTER, LOWER_BETTER):
        raise ValueError(f"direction must be {HIGHER_BETTER!r} or {LOWER_BETTER!r}, got {direction!r}")


def average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ascending ranks; tied values share the mean of their positions."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    ranks = np.empty(len(values), dtype=np.float64)
    # boundaries of runs of equal values
    starts = np.flatnonzero(np.r_[True, sorted_vals[1:] != sorted_vals[:-1]])
    ends = np.r_[starts[1:], len(values)]
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = 0.5 * (s + 1 + e)
    return ranks


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """ROC AUC through the Mann-Whitney U statistic (tied pairs count one half)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise MetricError("scores and labels must be 1-D and equally long")
    if not np.isin(labels, (0, 1)).all():
        raise MetricError("labels must be 0 or 1")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC is undefined when only one class is present")
    ranks = average_ranks(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def log_loss(probs: np.ndarray, labels: Sequence[int]) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or len(probs) != len(labels) or len(labels) == 0:
        raise MetricError("probs must be (B, C) with one label per row")
    if (probs < 0).any() or not np.allclose(probs.sum(axis=1), 1.0, rtol=0, atol=1e-6):
        raise MetricError("probability rows must be non-negative and sum to 1")
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise MetricError("label outside the probability columns")
    p = np.clip(probs[np.arange(len(labels)), labels], LOG_LOSS_CLIP, 1.0 - LOG_LOSS_CLIP)
    return float(-np.mean(np.log(p)))


def rmse(preds: Sequence[float], targets: Sequence[float]) -> float:
    preds = np.asarray(preds, dtype=np.float64).ravel()
    targets = np.asarray(targets, dtype=np.float64).ravel()
    if len(preds) != len(targets):
        raise MetricError("preds and targets differ in length")
    if len(preds) == 0:
        raise MetricError("RMSE of an empty set")
    return float(np.sqrt(np.mean((preds - targets) ** 2)))


def rank_models(values: Sequence[float], direction: str) -> np.ndarray:
    """Ranks of m models within one trial: best gets 1, ties are averaged."""
    _check_direction(direction)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1 or len(values) < 2:
        raise ValueError("need a 1-D vector of at least two model scores")
    return average_ranks(-values if direction == HIGHER_BETTER else values)


def win_rate(model_vals: Sequence[float], baseline_vals: Sequence[float], direction: str) -> float:
    """Fraction of paired trials the model beats the baseline; ties earn half credit."""
    _check_direction(direction)
    a = np.asarray(model_vals, dtype=np.float64)
    b = np.asarray(baseline_vals, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise ValueError("win rate needs equally long, non-empty paired vectors")
    better = a > b if direction == HIGHER_BETTER else a < b
    return float((better.sum() + 0.5 * (a == b).sum()) / a.size)


def minmax_normalize(values: Sequence[float], direction: str) -> np.ndarray:
    """Worst model -> 0, best -> 1; an all-equal trial maps to 0.5."""
    _check_direction(direction)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1 or len(values) < 2:
        raise ValueError("need a 1-D vector of at least two model scores")
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.full(len(values), 0.5)
    scaled = (values - lo) / (hi - lo)
    return scaled if direction == HIGHER_BETTER else 1.0 - scaled


def to_error(value: float, metric: str) -> float:
    """Error view of a metric: ``1 - AUC`` for AUC, the value itself otherwise."""
    return 1.0 - value if metric == "auc" else value


def error_reduction(model_err: float, baseline_err: float, best_err: float, worst_err: float) -> float:
    if not worst_err > best_err:
        return 0.0
    return (model_err - baseline_err) / (worst_err - best_err)


# ---------------------------------------------------------------------------
# aggregation across tasks and trials


@dataclass
class ModelSummary:
    model: str
    n_trials: int
    win_rate: float | None
    mean_rank: float
    std_rank: float
    mean_normalized: float
    error_reduction: list[float]

    @property
    def median_error_reduction(self) -> float | None:
        return float(np.median(self.error_reduction)) if self.error_reduction else None


@dataclass
class AggregateReport:
    baseline: str | None
    models: dict[str, ModelSummary]
    per_trial: list[dict]

    def to_dict(self) -> dict:
        out = {"baseline": self.baseline, "models": {}}
        for name, s in self.models.items():
            entry = asdict(s)
            entry["median_error_reduction"] = s.median_error_reduction
            out["models"][name] = entry
        return out


def _group_trials(records: Iterable[MetricRecord]) -> dict[tuple[str, int], dict[str, MetricRecord]]:
    groups: dict[tuple[str, int], dict[str, MetricRecord]] = defaultdict(dict)
    for rec in records:
        key = (rec.task, rec.trial)
        if rec.model in groups[key]:
            raise MetricError(f"duplicate record for model {rec.model!r} on {key}")
        groups[key][rec.model] = rec
    return groups


def aggregate(records: Sequence[MetricRecord], baseline: str | None = None) -> AggregateReport:
    """Per-trial ranks, normalized scores and error reductions, then per-model means.

    Only (task, trial) groups in which every model has a record are used.
    """
    records = list(records)
    if not records:
        raise MetricError("no records")
    models = sorted({r.model for r in records})
    if baseline is not None and baseline not in models:
        raise MetricError(f"baseline {baseline!r} has no records")
    groups = _group_trials(records)
    complete = {k: g for k, g in sorted(groups.items()) if len(g) == len(models)}
    if len(complete) < len(groups):
        logger.warning("skipping %d incomplete trial groups", len(groups) - len(complete))
    if not complete:
        raise MetricError("no trial has results for every model")

    ranks: dict[str, list[float]] = defaultdict(list)
    normalized: dict[str, list[float]] = defaultdict(list)
    reductions: dict[str, list[float]] = defaultdict(list)
    paired: dict[str, tuple[list[float], list[float]]] = {m: ([], []) for m in models}
    per_trial: list[dict] = []
    for (task, trial), group in complete.items():
        metrics = {r.metric for r in group.values()}
        if len(metrics) != 1:
            raise MetricError(f"mixed metrics {sorted(metrics)} for task {task!r}")
        metric = metrics.pop()
        direction = METRIC_DIRECTION[metric]
        vals = np.array([group[m].value for m in models])
        trial_ranks = rank_models(vals, direction) if len(models) > 1 else np.ones(1)
        trial_norm = minmax_normalize(vals, direction) if len(models) > 1 else np.full(1, 0.5)
        errors = np.array([to_error(v, metric) for v in vals])
        for j, m in enumerate(models):
            ranks[m].append(float(trial_ranks[j]))
            normalized[m].append(float(trial_norm[j]))
            row = {
                "task": task,
                "trial": trial,
                "model": m,
                "metric": metric,
                "value": float(vals[j]),
                "rank": float(trial_ranks[j]),
                "normalized": float(trial_norm[j]),
            }
            if baseline is not None:
                b = models.index(baseline)
                red = error_reduction(errors[j], errors[b], errors.min(), errors.max())
                reductions[m].append(red)
                row["error_reduction"] = red
                # orient so that "higher is better" for the paired win count
                sign = 1.0 if direction == HIGHER_BETTER else -1.0
                paired[m][0].append(sign * vals[j])
                paired[m][1].append(sign * vals[b])
            per_trial.append(row)

    summaries = {}
    for m in models:
        wr = None
        if baseline is not None:
            wr = win_rate(paired[m][0], paired[m][1], HIGHER_BETTER)
        summaries[m] = ModelSummary(
            model=m,
            n_trials=len(ranks[m]),
            win_rate=wr,
            mean_rank=float(np.mean(ranks[m])),
            std_rank=float(np.std(ranks[m])),
            mean_normalized=float(np.mean(normalized[m])),
            error_reduction=reductions[m],
        )
    return AggregateReport(baseline, summaries, per_trial)


# ---------------------------------------------------------------------------
# result files


def load_results(path: str | Path, schema_version: int = RESULT_SCHEMA_VERSION) -> list[dict]:
    """Read a line-delimited JSON results file."""
    path = Path(path)
    rows = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MetricError(f"{path}:{lineno}: not valid JSON ({exc.msg})") from exc
            if row.get("schema_version") != schema_version:
                raise MetricError(
                    f"{path}:{lineno}: schema_version {row.get('schema_version')!r}, expected {schema_version}"
                )
            rows.append(row)
    if not rows:
        raise MetricError(f"{path}: no records")
    return rows


def records_from_results(rows: Iterable[dict], group_by_round: bool = True) -> list[MetricRecord]:
    """Result rows -> metric records; pretrained models are split by checkpoint round."""
    out = []
    for row in rows:
        model = row["model"]
        if group_by_round and row.get("pretrain_round") is not None and row.get("init") != "random":
            model = f"{model}@{row['pretrain_round']}"
        out.append(MetricRecord(row["task"], int(row["trial"]), model, row["metric"], float(row["value"]), row["direction"]))
    return out


def write_report(report: AggregateReport, json_path: str | Path, csv_path: str | Path) -> None:
    Path(json_path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    fields = ["task", "trial", "model", "metric", "value", "rank", "normalized", "error_reduction"]
    with Path(csv_path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        for row in report.per_trial:
            writer.writerow(row)


def format_report(report: AggregateReport) -> str:
    lines = [f"baseline: {report.baseline or '-'}"]
    header = f"{'model':<24} {'trials':>6} {'win rate':>9} {'rank':>13} {'norm':>6} {'err.red.':>9}"
    lines.append(header)
    for s in report.models.values():
        wr = "-" if s.win_rate is None else f"{s.win_rate:.3f}"
        med = s.median_error_reduction
        er = "-" if med is None or math.isnan(med) else f"{med:+.3f}"
        rank = f"{s.mean_rank:.2f}±{s.std_rank:.2f}"
        lines.append(f"{s.model:<24} {s.n_trials:>6} {wr:>9} {rank:>13} {s.mean_normalized:>6.3f} {er:>9}")
    return "\n".join(lines)
