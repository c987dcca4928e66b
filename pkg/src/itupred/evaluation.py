"""Metrics, bootstrap confidence intervals, calibration, parity, ensembling.

Undefined metrics (for example precision with no predicted positives) come
back as None rather than raising; downstream tables print them as NA.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

POSITIVE_THRESHOLD = 0.5

# Binary subtype precision convention: planned/unplanned members are all
# true ITU cases, so any subtype member predicted positive is correct and
# subtype precision is 1.0 (None when the subtype has no predicted
# positives). Reports repeat this note in their footer.
SUBTYPE_PRECISION_NOTE = (
    "Planned/Unplanned precision is computed over subtype members predicted "
    "positive; every such member is a true ITU case, so the value is 1.0 "
    "whenever the subtype has at least one predicted positive."
)

REPORT_GROUPS = ("Ward", "ITU", "PlannedITU", "UnplannedITU")


def classify(probabilities) -> np.ndarray:
    """Shared decision rule: positive at probability 0.5 or higher."""
    return (np.asarray(probabilities) >= POSITIVE_THRESHOLD).astype(np.int64)


@dataclass(frozen=True)
class GroupMetrics:
    precision: float | None
    recall: float | None
    f1: float | None
    fn_ratio: float | None


@dataclass
class ClassMetrics:
    groups: dict[str, GroupMetrics]

    def __getitem__(self, name: str) -> GroupMetrics:
        return self.groups[name]


def _prf(tp: int, fp: int, fn: int) -> tuple[float | None, float | None, float | None]:
    precision = tp / (tp + fp) if tp + fp else None
    recall = tp / (tp + fn) if tp + fn else None
    if precision is None or recall is None:
        f1 = None
    elif precision + recall == 0:
        f1 = 0.0
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return precision, recall, f1


def classification_metrics(class_labels, y_pred) -> ClassMetrics:
    """Per-group metrics from true class labels and binary predictions.

    ITU treats any admission as positive; Ward flips the polarity; the
    planned/unplanned rows restrict recall and FN ratio to their subsets
    (see SUBTYPE_PRECISION_NOTE for the precision convention).
    """
    class_labels = np.asarray(class_labels)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if len(class_labels) != len(y_pred):
        raise ValueError("class_labels and y_pred lengths differ")
    y_true = (class_labels != "Ward").astype(np.int64)

    groups: dict[str, GroupMetrics] = {}

    tp = int(((y_true == 1) & (y_pred == 1)).sum())
    fp = int(((y_true == 0) & (y_pred == 1)).sum())
    fn = int(((y_true == 1) & (y_pred == 0)).sum())
    precision, recall, f1 = _prf(tp, fp, fn)
    groups["ITU"] = GroupMetrics(
        precision, recall, f1, None if recall is None else 1.0 - recall
    )

    tp = int(((y_true == 0) & (y_pred == 0)).sum())
    fp = int(((y_true == 1) & (y_pred == 0)).sum())
    fn = int(((y_true == 0) & (y_pred == 1)).sum())
    precision, recall, f1 = _prf(tp, fp, fn)
    groups["Ward"] = GroupMetrics(precision, recall, f1, None)

    for subtype in ("PlannedITU", "UnplannedITU"):
        members = class_labels == subtype
        n_members = int(members.sum())
        if n_members == 0:
            groups[subtype] = GroupMetrics(None, None, None, None)
            continue
        tp = int((y_pred[members] == 1).sum())
        recall = tp / n_members
        precision = 1.0 if tp else None
        if precision is None:
            f1 = None
        else:
            f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        groups[subtype] = GroupMetrics(precision, recall, f1, 1.0 - recall)

    return ClassMetrics(groups)


@dataclass(frozen=True)
class BootstrapCI:
    mean: float | None
    lower: float | None
    upper: float | None
    resamples: int
    seed: int
    na_fraction: float = 0.0


def bootstrap_ci(metric_fn, n: int, resamples: int = 1000, seed: int = 0) -> BootstrapCI:
    """Percentile bootstrap over test-example indices.

    `metric_fn` receives an index array into the test set and returns a
    float or None. When more than half the resamples are undefined, the
    interval itself is NA with the failure fraction attached.
    """
    if n < 1:
        raise ValueError("empty test set")
    rng = np.random.default_rng(seed)
    values = []
    undefined = 0
    for _ in range(resamples):
        idx = rng.integers(0, n, size=n)
        value = metric_fn(idx)
        if value is None:
            undefined += 1
        else:
            values.append(value)
    na_fraction = undefined / resamples
    if na_fraction > 0.5:
        return BootstrapCI(None, None, None, resamples, seed, na_fraction)
    arr = np.array(values)
    lower, upper = np.percentile(arr, [2.5, 97.5])
    return BootstrapCI(float(arr.mean()), float(lower), float(upper), resamples, seed, na_fraction)


@dataclass(frozen=True)
class CalibrationCurve:
    bins: list[tuple[float, float, int]]  # (mean predicted, observed rate, count)
    n_bins: int

    @property
    def total_count(self) -> int:
        return sum(count for _, _, count in self.bins)


def calibration_curve(y_true, p_pred, n_bins: int = 10) -> CalibrationCurve:
    """Equal-width probability bins; the final bin is right-closed and empty
    bins are omitted."""
    y_true = np.asarray(y_true, dtype=float)
    p_pred = np.asarray(p_pred, dtype=float)
    if ((p_pred < 0) | (p_pred > 1)).any():
        raise ValueError("probabilities must lie in [0, 1]")
    indices = np.minimum((p_pred * n_bins).astype(np.int64), n_bins - 1)
    bins = []
    for b in range(n_bins):
        mask = indices == b
        count = int(mask.sum())
        if count == 0:
            continue
        bins.append((float(p_pred[mask].mean()), float(y_true[mask].mean()), count))
    return CalibrationCurve(bins, n_bins)


@dataclass
class ParityReport:
    # comparison name ("Male/Female") -> report group -> metric -> ratio
    ratios: dict[str, dict[str, dict[str, float | None]]] = field(default_factory=dict)


_PARITY_METRICS = ("precision", "recall", "f1", "fn_ratio")


def parity_ratios(metrics_a: ClassMetrics, metrics_b: ClassMetrics) -> dict:
    """Per-metric A/B ratios over the Ward and ITU rows; None where either
    side is undefined or the denominator is zero."""
    out: dict[str, dict[str, float | None]] = {}
    for group in ("Ward", "ITU"):
        out[group] = {}
        for metric in _PARITY_METRICS:
            a = getattr(metrics_a[group], metric)
            b = getattr(metrics_b[group], metric)
            out[group][metric] = None if a is None or not b else a / b
    return out


def demographic_parity(class_labels, y_pred, demographics) -> ParityReport:
    """A.7/A.8-style tables: Male/Female and White/NonWhite metric ratios
    computed from the same prediction set."""
    class_labels = np.asarray(class_labels)
    y_pred = np.asarray(y_pred)
    report = ParityReport()
    for name, attribute, (a_value, b_value) in (
        ("Male/Female", "sex", ("Male", "Female")),
        ("White/NonWhite", "ethnicity", ("White", "NonWhite")),
    ):
        values = np.array([getattr(d, attribute) for d in demographics])
        mask_a = values == a_value
        mask_b = values == b_value
        if not mask_a.any() or not mask_b.any():
            report.ratios[name] = {
                g: {m: None for m in _PARITY_METRICS} for g in ("Ward", "ITU")
            }
            continue
        metrics_a = classification_metrics(class_labels[mask_a], y_pred[mask_a])
        metrics_b = classification_metrics(class_labels[mask_b], y_pred[mask_b])
        report.ratios[name] = parity_ratios(metrics_a, metrics_b)
    return report


def ensemble_average(p_a, p_b) -> np.ndarray:
    """Arithmetic mean of two aligned probability vectors."""
    p_a = np.asarray(p_a, dtype=float)
    p_b = np.asarray(p_b, dtype=float)
    if p_a.shape != p_b.shape:
        raise ValueError(f"shape mismatch: {p_a.shape} vs {p_b.shape}")
    return (p_a + p_b) / 2.0


@dataclass(frozen=True)
class MissedUnplanned:
    baseline: float  # share of ITU cases clinicians miss (the unplanned ones)
    residual: float  # share still missed after model assistance


def missed_unplanned_reduction(
    n_unplanned: int, n_planned: int, fn_unplanned: float
) -> MissedUnplanned:
    """Missed-case share: clinicians miss all unplanned admissions, the model
    misses only fn_unplanned of them."""
    total = n_unplanned + n_planned
    if total <= 0:
        raise ValueError("no ITU cases in the test composition")
    if not 0.0 <= fn_unplanned <= 1.0:
        raise ValueError("fn_unplanned must lie in [0, 1]")
    baseline = n_unplanned / total
    return MissedUnplanned(baseline, baseline * fn_unplanned)


def metric_over_indices(class_labels, y_pred_per_seed, group: str, metric: str):
    """Build a bootstrap metric_fn: evaluate the metric on resampled indices
    for each seed's predictions and average the defined values."""
    class_labels = np.asarray(class_labels)
    seeds = [np.asarray(p) for p in y_pred_per_seed]

    def metric_fn(idx):
        values = []
        for y_pred in seeds:
            metrics = classification_metrics(class_labels[idx], y_pred[idx])
            value = getattr(metrics[group], metric)
            if value is not None:
                values.append(value)
        return float(np.mean(values)) if values else None

    return metric_fn


def bootstrap_metrics_table(
    class_labels, y_pred_per_seed, resamples: int = 1000, seed: int = 0
) -> dict:
    """All report groups and metrics in one bootstrap pass.

    Returns {group: {metric: (mean, (lower, upper))}} with None cells where
    more than half the resamples leave the metric undefined. Each resample
    averages the metric across seeds before aggregation.
    """
    class_labels = np.asarray(class_labels)
    seeds = [np.asarray(p) for p in y_pred_per_seed]
    n = len(class_labels)
    rng = np.random.default_rng(seed)

    collected: dict = {
        g: {m: [] for m in _PARITY_METRICS} for g in REPORT_GROUPS
    }
    for _ in range(resamples):
        idx = rng.integers(0, n, size=n)
        per_seed = [classification_metrics(class_labels[idx], p[idx]) for p in seeds]
        for group in REPORT_GROUPS:
            for metric in _PARITY_METRICS:
                values = [
                    getattr(m[group], metric)
                    for m in per_seed
                    if getattr(m[group], metric) is not None
                ]
                collected[group][metric].append(
                    float(np.mean(values)) if values else None
                )

    table: dict = {}
    for group in REPORT_GROUPS:
        table[group] = {}
        for metric in _PARITY_METRICS:
            values = [v for v in collected[group][metric] if v is not None]
            if len(values) < resamples / 2:
                table[group][metric] = None
                continue
            arr = np.array(values)
            lower, upper = np.percentile(arr, [2.5, 97.5])
            table[group][metric] = (float(arr.mean()), (float(lower), float(upper)))
    return table


def format_value(value: float | None, digits: int = 2) -> str:
    return "NA" if value is None else f"{value:.{digits}f}"


def write_metrics_table(path, tables: dict, footer_lines=(), header: str | None = None):
    """Delimited report: one block per model, rows per group, bootstrap CIs
    in parentheses."""
    with open(path, "w", encoding="utf-8") as handle:
        if header:
            handle.write(f"# {header}\n")
        for model_name, rows in tables.items():
            handle.write(f"[{model_name}]\n")
            handle.write("group\tprecision\trecall\tf1\tfn_ratio\n")
            for group in REPORT_GROUPS:
                if group not in rows:
                    continue
                cells = [group]
                for metric in _PARITY_METRICS:
                    entry = rows[group].get(metric)
                    if entry is None:
                        cells.append("NA")
                    else:
                        mean, ci = entry
                        if mean is None:
                            cells.append("NA")
                        elif ci is None:
                            cells.append(format_value(mean))
                        else:
                            cells.append(
                                f"{format_value(mean)} ({format_value(ci[0])}-{format_value(ci[1])})"
                            )
                handle.write("\t".join(cells) + "\n")
            handle.write("\n")
        for line in footer_lines:
            handle.write(f"# {line}\n")
