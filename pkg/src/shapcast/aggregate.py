"""Global views over many local explanations.

Turns per-example attribution vectors into a global importance ranking
(share of total absolute attribution per block), dependence-plot points for
one block at a chosen horizon step, and per-example CSV panels. Day groups
can be merged into a single load block first so the global views match the
coarser presentation.
"""

from __future__ import annotations

import io
import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .schema import ForecastExample
from .shapley import Explanation

N_BINS = 10
DAY_LABEL_PREFIX = "load_d"
MERGED_LOAD_LABEL = "load"

__all__ = [
    "ImportanceTable",
    "DependencePoint",
    "feature_importance",
    "merge_day_groups",
    "dependence_points",
    "importance_csv",
    "dependence_csv",
    "local_explanation_csv",
]


@dataclass(frozen=True)
class ImportanceTable:
    """Per-block share of the total absolute attribution."""

    group_labels: tuple[str, ...]
    raw: np.ndarray
    percent: np.ndarray

    def __post_init__(self):
        raw = np.asarray(self.raw, dtype=np.float64)
        percent = np.asarray(self.percent, dtype=np.float64)
        n = len(self.group_labels)
        object.__setattr__(self, "group_labels", tuple(self.group_labels))
        if raw.shape != (n,) or percent.shape != (n,):
            raise ValueError("raw and percent must have one entry per group")
        if np.any(raw < 0) or np.any(percent < 0):
            raise ValueError("importance values must be >= 0")
        if abs(percent.sum() - 100.0) > 1e-6:
            raise ValueError(f"percentages sum to {percent.sum()!r}, not 100")
        object.__setattr__(self, "raw", raw)
        object.__setattr__(self, "percent", percent)

    def ranked(self) -> list[tuple[str, float, float]]:
        """(label, percent, raw) rows sorted by descending percentage."""
        order = np.argsort(-self.percent, kind="stable")
        return [(self.group_labels[i], float(self.percent[i]),
                 float(self.raw[i])) for i in order]


def _check_consistent_labels(explanations: Sequence[Explanation]) -> tuple[str, ...]:
    if not explanations:
        raise ValueError("need at least one explanation")
    labels = explanations[0].group_labels
    for e in explanations[1:]:
        if e.group_labels != labels:
            raise ValueError(
                f"explanations disagree on group labels: {labels} "
                f"vs {e.group_labels}")
    return labels


def feature_importance(explanations: Sequence[Explanation]) -> ImportanceTable:
    """Sum absolute attributions over examples and horizon steps, then
    normalize to percentages."""
    labels = _check_consistent_labels(explanations)
    raw = np.zeros(len(labels))
    for e in explanations:
        raw += np.abs(e.attributions).sum(axis=1)
    total = raw.sum()
    if total <= 0.0:
        raise ValueError("all attributions are zero; percentages undefined")
    return ImportanceTable(group_labels=labels, raw=raw,
                           percent=raw / total * 100.0)


def merge_day_groups(explanation: Explanation,
                     label: str = MERGED_LOAD_LABEL) -> Explanation:
    """Sum the per-day load blocks into one block, keeping covariates."""
    day_idx = [i for i, name in enumerate(explanation.group_labels)
               if name.startswith(DAY_LABEL_PREFIX)]
    if not day_idx:
        raise ValueError("explanation has no per-day load blocks to merge")
    rest_idx = [i for i in range(len(explanation.group_labels))
                if i not in day_idx]
    merged = explanation.attributions[day_idx].sum(axis=0, keepdims=True)
    attributions = np.concatenate(
        [merged, explanation.attributions[rest_idx]])
    labels = (label,) + tuple(explanation.group_labels[i] for i in rest_idx)
    return Explanation(base_value=explanation.base_value.copy(),
                       attributions=attributions, group_labels=labels,
                       mode=explanation.mode,
                       elapsed_ms=explanation.elapsed_ms,
                       mask_count=explanation.mask_count)


@dataclass(frozen=True)
class DependencePoint:
    """One example's contribution to a dependence plot: the block's input
    value, its attribution at the chosen horizon step, and the value of the
    strongest interacting covariate for the color channel."""

    example_id: int
    x: float
    y: float
    interactor: str | None
    interactor_value: float


def _is_load_label(label: str) -> bool:
    return label == MERGED_LOAD_LABEL or label.startswith(DAY_LABEL_PREFIX)


def _between_bin_variance(values: np.ndarray, ys: np.ndarray) -> float:
    order = np.argsort(values, kind="stable")
    chunks = np.array_split(order, min(N_BINS, order.size))
    mean = ys.mean()
    weighted = 0.0
    for chunk in chunks:
        if chunk.size:
            weighted += chunk.size * (ys[chunk].mean() - mean) ** 2
    return weighted / ys.size


def dependence_points(explanations: Sequence[Explanation],
                      examples: Sequence[ForecastExample], group: str,
                      step: int = 23) -> list[DependencePoint]:
    """Extract (x, y) pairs for one block at one horizon step.

    For a load block, x is the load one lookback window before the
    predicted step; for a covariate it is the covariate's value at the
    predicted step. y is the block's attribution at that step. The color
    channel is the covariate whose value bins explain the most variance of
    y (ten equal-count bins), chosen once for the whole panel.
    """
    labels = _check_consistent_labels(explanations)
    if group not in labels:
        raise ValueError(f"unknown group {group!r}; have {labels}")
    if len(explanations) != len(examples):
        raise ValueError(
            f"{len(explanations)} explanations vs {len(examples)} examples")
    schema = examples[0].schema
    if not 0 <= step < schema.horizon:
        raise ValueError(f"step {step} outside horizon {schema.horizon}")
    if _is_load_label(group) and step >= schema.lookback:
        raise ValueError(
            f"load x value needs step < lookback, got {step}")

    ys = np.array([e.group(group)[step] for e in explanations])
    if _is_load_label(group):
        xs = np.array([float(ex.past_target[step]) for ex in examples])
    else:
        ci = schema.covariate_index(group)
        xs = np.array([float(ex.covariate_values[ci, schema.lookback + step])
                       for ex in examples])

    candidates = [c.name for c in schema.covariates if c.name != group]
    interactor = None
    interactor_values = np.full(len(examples), np.nan)
    if candidates and len(examples) > 1:
        best = -1.0
        for name in candidates:
            ci = schema.covariate_index(name)
            vals = np.array([
                float(ex.covariate_values[ci, schema.lookback + step])
                for ex in examples])
            score = _between_bin_variance(vals, ys)
            if score > best:
                best = score
                interactor = name
                interactor_values = vals
    return [DependencePoint(example_id=i, x=float(xs[i]), y=float(ys[i]),
                            interactor=interactor,
                            interactor_value=float(interactor_values[i]))
            for i in range(len(examples))]


# ---------------------------------------------------------------------------
# CSV emitters


def importance_csv(table: ImportanceTable) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("group", "percent", "raw"))
    for label, percent, raw in table.ranked():
        writer.writerow([label, "%.9g" % percent, "%.9g" % raw])
    return buf.getvalue()


def dependence_csv(points: Sequence[DependencePoint], discrete: bool = False,
                   jitter_seed: int = 0) -> str:
    """Render dependence points; discrete features get a jittered
    presentation column so overlapping points stay visible, while the x
    column keeps the exact values."""
    rng = np.random.default_rng(jitter_seed)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("example_id", "x", "y", "interactor",
                     "interactor_value", "x_display"))
    for p in points:
        display = p.x + rng.uniform(-0.3, 0.3) if discrete else p.x
        writer.writerow([
            p.example_id, "%.9g" % p.x, "%.9g" % p.y,
            p.interactor if p.interactor is not None else "",
            "%.9g" % p.interactor_value if np.isfinite(p.interactor_value)
            else "",
            "%.9g" % display])
    return buf.getvalue()


def local_explanation_csv(explanation: Explanation,
                          target: np.ndarray,
                          prediction: np.ndarray | None = None) -> str:
    """One row per horizon step (1-based): every block's attribution, the
    prediction, and the target. The prediction defaults to the explanation's
    own reconstruction (base value plus attribution sums)."""
    horizon = explanation.horizon
    tgt = np.asarray(target, dtype=np.float64).reshape(-1)
    if tgt.shape != (horizon,):
        raise ValueError(f"target must have shape ({horizon},), got {tgt.shape}")
    if prediction is None:
        pred = explanation.prediction()
    else:
        pred = np.asarray(prediction, dtype=np.float64).reshape(-1)
        if pred.shape != (horizon,):
            raise ValueError(
                f"prediction must have shape ({horizon},), got {pred.shape}")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("step",) + explanation.group_labels
                    + ("prediction", "target"))
    for t in range(horizon):
        row = [t + 1]
        row += ["%.9g" % v for v in explanation.attributions[:, t]]
        row += ["%.9g" % pred[t], "%.9g" % tgt[t]]
        writer.writerow(row)
    return buf.getvalue()
