"""Reference forecasters and forecast-error metrics.

The persistence forecaster repeats the previous week. The linear model
predicts each horizon step independently from that step's features: the
load one lookback window earlier, sine/cosine encodings of the cyclic
calendar covariates, binary covariates as-is, and continuous covariates
raw. Metric reports carry errors on the standardized scale, in physical
units, and as MAPE.
"""

from __future__ import annotations

import io
import csv
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .schema import FeatureSchema, ForecastExample, Standardizer

RIDGE = 1e-8
MAPE_FLOOR = 1e-6

__all__ = [
    "LinearModel",
    "MetricReport",
    "persistence",
    "fit_linear",
    "evaluate",
    "metrics_to_csv",
]


def persistence(example: ForecastExample) -> np.ndarray:
    """Predict each future step as the value one week earlier.

    Requires the lookback and horizon to match, so every predicted step has
    a counterpart exactly one window back.
    """
    s = example.schema
    if s.lookback != s.horizon:
        raise ValueError(
            f"persistence needs lookback == horizon, got {s.lookback} "
            f"and {s.horizon}")
    return example.past_target.astype(np.float64)


def linear_feature_names(schema: FeatureSchema) -> tuple[str, ...]:
    """Per-step feature layout of the linear model."""
    names = ["lag_load"]
    for c in schema.covariates:
        if c.kind == "categorical" and c.cardinality == 2:
            names.append(c.name)
        elif c.kind == "categorical":
            names.append(f"{c.name}_sin")
            names.append(f"{c.name}_cos")
        else:
            names.append(c.name)
    return tuple(names)


def _design_rows(example: ForecastExample) -> np.ndarray:
    s = example.schema
    if s.horizon > s.lookback:
        raise ValueError("linear features need horizon <= lookback")
    h = s.horizon
    cols = [example.past_target[:h].astype(np.float64)]
    future = example.covariate_values[:, s.lookback:].astype(np.float64)
    for i, c in enumerate(s.covariates):
        if c.kind == "categorical" and c.cardinality == 2:
            cols.append(future[i])
        elif c.kind == "categorical":
            angle = future[i] * (2.0 * np.pi / c.cardinality)
            cols.append(np.sin(angle))
            cols.append(np.cos(angle))
        else:
            cols.append(future[i])
    return np.stack(cols, axis=1)


@dataclass(frozen=True)
class LinearModel:
    """Least-squares forecaster with one coefficient vector shared by all
    horizon steps."""

    schema: FeatureSchema
    coefficients: np.ndarray
    intercept: float

    def __post_init__(self):
        coef = np.asarray(self.coefficients, dtype=np.float64)
        arity = len(linear_feature_names(self.schema))
        if coef.shape != (arity,):
            raise ValueError(
                f"expected {arity} coefficients, got {coef.shape}")
        object.__setattr__(self, "coefficients", coef)
        object.__setattr__(self, "intercept", float(self.intercept))

    @property
    def n_parameters(self) -> int:
        return self.coefficients.shape[0] + 1

    def predict(self, example: ForecastExample) -> np.ndarray:
        return _design_rows(example) @ self.coefficients + self.intercept

    def predict_many(self, examples: Sequence[ForecastExample]) -> np.ndarray:
        return np.stack([self.predict(ex) for ex in examples])

    def to_dict(self) -> dict:
        return {"coefficients": self.coefficients.tolist(),
                "intercept": self.intercept,
                "feature_names": list(linear_feature_names(self.schema))}


def fit_linear(examples: Sequence[ForecastExample]) -> LinearModel:
    """Fit the linear forecaster by ridge-stabilized normal equations.

    Every horizon step of every example contributes one row. The ridge
    term (1e-8, applied to the intercept as well) only matters for
    conditioning.
    """
    if not examples:
        raise ValueError("fit_linear needs training examples")
    schema = examples[0].schema
    arity = len(linear_feature_names(schema))
    X = np.concatenate([_design_rows(ex) for ex in examples])
    y = np.concatenate([ex.future_target.astype(np.float64)
                        for ex in examples])
    if X.shape[0] < arity + 1:
        raise ValueError(
            f"need at least {arity + 1} rows to fit {arity + 1} parameters, "
            f"got {X.shape[0]}")
    Xa = np.concatenate([X, np.ones((X.shape[0], 1))], axis=1)
    gram = Xa.T @ Xa + RIDGE * np.eye(arity + 1)
    try:
        beta = np.linalg.solve(gram, Xa.T @ y)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"design matrix is degenerate: {exc}") from exc
    if not np.all(np.isfinite(beta)):
        raise ValueError("design matrix is degenerate: non-finite solution")
    return LinearModel(schema=schema, coefficients=beta[:-1],
                       intercept=beta[-1])


@dataclass(frozen=True)
class MetricReport:
    """Forecast errors on the standardized scale, in physical units, and as
    mean absolute percentage error."""

    mae_scaled: float
    mse_scaled: float
    mae_units: float
    rmse_units: float
    mape_percent: float

    def __post_init__(self):
        for name in ("mae_scaled", "mse_scaled", "mae_units", "rmse_units",
                     "mape_percent"):
            value = float(getattr(self, name))
            if not (np.isfinite(value) and value >= 0.0):
                raise ValueError(f"{name} must be finite and >= 0, got {value}")
            object.__setattr__(self, name, value)
        # Jensen: root-mean-square dominates the mean absolute error.
        if self.rmse_units < self.mae_units * (1.0 - 1e-9):
            raise ValueError(
                f"rmse_units {self.rmse_units} < mae_units {self.mae_units}")

    def to_json_dict(self) -> dict:
        return {"mae_scaled": self.mae_scaled, "mse_scaled": self.mse_scaled,
                "mae_units": self.mae_units, "rmse_units": self.rmse_units,
                "mape_percent": self.mape_percent}

    @classmethod
    def from_json_dict(cls, d: dict) -> "MetricReport":
        return cls(d["mae_scaled"], d["mse_scaled"], d["mae_units"],
                   d["rmse_units"], d["mape_percent"])


def evaluate(predictions: np.ndarray, targets: np.ndarray,
             standardizer: Standardizer) -> MetricReport:
    """Score standardized predictions against standardized targets.

    MAPE is computed in physical units and skips targets whose standardized
    magnitude is below 1e-6; it is an error for every target to be skipped.
    """
    preds = np.asarray(predictions, dtype=np.float64).reshape(-1)
    tgts = np.asarray(targets, dtype=np.float64).reshape(-1)
    if preds.shape != tgts.shape:
        raise ValueError(
            f"predictions and targets differ in size: {preds.shape} "
            f"vs {tgts.shape}")
    if preds.size == 0:
        raise ValueError("cannot evaluate zero predictions")
    err = preds - tgts
    mae_scaled = float(np.mean(np.abs(err)))
    mse_scaled = float(np.mean(err ** 2))
    preds_u = standardizer.inverse_target(preds)
    tgts_u = standardizer.inverse_target(tgts)
    err_u = preds_u - tgts_u
    mae_units = float(np.mean(np.abs(err_u)))
    rmse_units = float(np.sqrt(np.mean(err_u ** 2)))
    keep = np.abs(tgts) >= MAPE_FLOOR
    if not np.any(keep):
        raise ValueError("all targets fall below the MAPE threshold")
    mape = float(100.0 * np.mean(np.abs(err_u[keep] / tgts_u[keep])))
    return MetricReport(mae_scaled=mae_scaled, mse_scaled=mse_scaled,
                        mae_units=mae_units, rmse_units=rmse_units,
                        mape_percent=mape)


METRIC_COLUMNS = ("mae_scaled", "mse_scaled", "mae_units", "rmse_units",
                  "mape_percent")


def metrics_to_csv(reports: Mapping[str, MetricReport]) -> str:
    """Render one CSV row per model with the five metric columns."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("model",) + METRIC_COLUMNS)
    for name, report in reports.items():
        writer.writerow([name] + ["%.9g" % getattr(report, c)
                                  for c in METRIC_COLUMNS])
    return buf.getvalue()
