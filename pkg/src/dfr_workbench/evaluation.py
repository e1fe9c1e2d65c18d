"""
Per-group accuracy, micro-averaged accuracy and worst-group bookkeeping.

The worst group is the group with the lowest ERM test accuracy; the DFR accuracy is
then read for that same group.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .datagen import ALL_GROUPS, N_GROUPS, GroupId, Sample, group_from_index, groups_of, labels_of
from .errors import ArgumentError, MetricError
from .nn import TrainedModel, predict_samples

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.5
STAGES = ("erm", "dfr")


@dataclass
class GroupMetrics:
    per_group_accuracy: List[float]
    average_accuracy: float
    n_per_group: List[int]
    n_correct_per_group: List[int] = field(default_factory=list)
    worst_group: Optional[GroupId] = None
    run_id: Optional[int] = None

    def to_dict(self) -> Dict:
        return {
            "run": self.run_id,
            "per_group_accuracy": list(self.per_group_accuracy),
            "average_accuracy": self.average_accuracy,
            "n_per_group": list(self.n_per_group),
            "n_correct_per_group": list(self.n_correct_per_group),
            "worst_group": None if self.worst_group is None else self.worst_group.index,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "GroupMetrics":
        worst = data.get("worst_group")
        return cls(
            per_group_accuracy=[float(a) for a in data["per_group_accuracy"]],
            average_accuracy=float(data["average_accuracy"]),
            n_per_group=[int(n) for n in data["n_per_group"]],
            n_correct_per_group=[int(n) for n in data.get("n_correct_per_group", [])],
            worst_group=None if worst is None else group_from_index(worst),
            run_id=data.get("run"),
        )


def accuracies_from_predictions(probabilities: np.ndarray, labels: np.ndarray, groups: np.ndarray,
                                threshold: float = DEFAULT_THRESHOLD) -> GroupMetrics:
    """GroupMetrics from raw probabilities; prediction = [p >= threshold]."""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels)
    groups = np.asarray(groups)
    if probabilities.size == 0:
        raise ArgumentError("cannot evaluate an empty split")
    correct = (probabilities >= threshold).astype(np.int64) == labels
    per_group, n_per_group, n_correct = [], [], []
    for g in range(N_GROUPS):
        in_group = groups == g
        n = int(in_group.sum())
        if n == 0:
            raise MetricError(g)
        k = int(correct[in_group].sum())
        n_per_group.append(n)
        n_correct.append(k)
        per_group.append(k / n)
    average = sum(n_correct) / sum(n_per_group)
    return GroupMetrics(per_group, average, n_per_group, n_correct)


def group_accuracies(model: TrainedModel, split: Sequence[Sample],
                     threshold: float = DEFAULT_THRESHOLD) -> GroupMetrics:
    """Per-group and micro-averaged accuracy of ``model`` on ``split``; worst_group unset."""
    split = list(split)
    if not split:
        raise ArgumentError("cannot evaluate an empty split")
    probabilities = predict_samples(model, split)
    return accuracies_from_predictions(probabilities, labels_of(split), groups_of(split), threshold)


def worst_group(erm_metrics: GroupMetrics) -> GroupId:
    """Group with the lowest accuracy; ties go to the lowest group index."""
    if len(erm_metrics.per_group_accuracy) != N_GROUPS:
        raise ArgumentError(f"expected {N_GROUPS} group accuracies, got {len(erm_metrics.per_group_accuracy)}")
    return group_from_index(int(np.argmin(erm_metrics.per_group_accuracy)))


@dataclass
class RunSummary:
    n_runs: int
    single_run: bool
    worst_group: GroupId
    # stats[stage][metric] = (mean, std); metrics: y*_s* group names, "average", "worst_group"
    stats: Dict[str, Dict[str, Tuple[float, float]]]
    per_run: List[Tuple[GroupMetrics, GroupMetrics]]

    def to_dict(self) -> Dict:
        return {
            "n_runs": self.n_runs,
            "single_run": self.single_run,
            "worst_group": self.worst_group.index,
            "worst_group_name": self.worst_group.name,
            "stats": {
                stage: {metric: {"mean": mean, "std": std} for metric, (mean, std) in metrics.items()}
                for stage, metrics in self.stats.items()
            },
        }


def _mean_std(values: Sequence[float]) -> Tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 1:
        return float(arr[0]), 0.0
    return float(arr.mean()), float(arr.std(ddof=1))


def summarize_runs(per_run: Sequence[Tuple[GroupMetrics, GroupMetrics]]) -> RunSummary:
    """Mean and sample std of each metric over runs; worst group fixed by mean ERM accuracy."""
    per_run = list(per_run)
    if not per_run:
        raise ArgumentError("summarize_runs needs at least one run")
    erm_mean = np.mean([erm.per_group_accuracy for erm, _ in per_run], axis=0)
    worst = group_from_index(int(np.argmin(erm_mean)))
    stats: Dict[str, Dict[str, Tuple[float, float]]] = {}
    for position, stage in enumerate(STAGES):
        metrics = [run[position] for run in per_run]
        stage_stats = {}
        for group in ALL_GROUPS:
            stage_stats[group.name] = _mean_std([m.per_group_accuracy[group.index] for m in metrics])
        stage_stats["average"] = _mean_std([m.average_accuracy for m in metrics])
        stage_stats["worst_group"] = _mean_std([m.per_group_accuracy[worst.index] for m in metrics])
        stats[stage] = stage_stats
    if len(per_run) == 1:
        logger.info("Single run: standard deviations reported as 0")
    return RunSummary(len(per_run), len(per_run) == 1, worst, stats, per_run)


def summary_table(summary: RunSummary,
                  class_names: Tuple[str, str] = ("class 0", "class 1")) -> List[Dict]:
    """Rows of the group table: four groups then the average, ERM and DFR columns."""
    rows = []
    for group in ALL_GROUPS:
        rows.append(_table_row(summary, group.name, group.describe(class_names), group == summary.worst_group))
    rows.append(_table_row(summary, "average", "Average", False))
    return rows


def _table_row(summary: RunSummary, key: str, label: str, is_worst: bool) -> Dict:
    row = {"group": key, "label": label, "worst": is_worst}
    for stage in STAGES:
        mean, std = summary.stats[stage][key]
        row[f"{stage}_mean"] = mean
        row[f"{stage}_std"] = std
    return row


def format_table(summary: RunSummary, class_names: Tuple[str, str] = ("class 0", "class 1")) -> str:
    """Plain-text table, worst group marked with '*'."""
    lines = [f"{'group':<24}{'ERM':>18}{'DFR':>18}"]
    for row in summary_table(summary, class_names):
        mark = "*" if row["worst"] else " "
        lines.append(
            f"{mark}{row['label']:<23}"
            f"{100 * row['erm_mean']:>10.2f} ± {100 * row['erm_std']:<5.2f}"
            f"{100 * row['dfr_mean']:>10.2f} ± {100 * row['dfr_std']:<5.2f}"
        )
    return "\n".join(lines)


def metric_rows(run: int, stage: str, metrics: GroupMetrics) -> List[Dict]:
    """CSV rows (run, stage, group, n, accuracy) plus an average row."""
    rows = [
        {"run": run, "stage": stage, "group": group.name,
         "n": metrics.n_per_group[group.index], "accuracy": metrics.per_group_accuracy[group.index]}
        for group in ALL_GROUPS
    ]
    rows.append({"run": run, "stage": stage, "group": "average",
                 "n": int(sum(metrics.n_per_group)), "accuracy": metrics.average_accuracy})
    return rows
