"""Feature layout, coalition blocks, and windowed forecasting examples.

The coalition game is played over N blocks: seven groups of 24 past-target
steps (one per lookback day) followed by one block per covariate channel. A
covariate block spans all 336 steps (168 past + 168 future) of that channel.
Everything downstream (model masking, explainers, generators) shares this
layout, so it lives in one place.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

HOURS_PER_DAY = 24

__all__ = [
    "Covariate",
    "FeatureSchema",
    "GroupMask",
    "ForecastExample",
    "Standardizer",
    "AlignedTable",
    "real_schema",
    "synthetic_schema",
    "windowize",
    "mask_to_feature_set",
    "schema_to_dict",
    "schema_from_dict",
    "schema_fingerprint",
]


@dataclass(frozen=True)
class Covariate:
    """One covariate channel: categorical with a cardinality, or continuous."""

    name: str
    kind: str
    cardinality: int | None = None

    def __post_init__(self):
        if self.kind not in ("categorical", "continuous"):
            raise ValueError(f"unknown covariate kind: {self.kind!r}")
        if self.kind == "categorical" and (self.cardinality is None or self.cardinality < 2):
            raise ValueError(f"categorical covariate {self.name!r} needs a cardinality >= 2")
        if self.kind == "continuous" and self.cardinality is not None:
            raise ValueError(f"continuous covariate {self.name!r} cannot have a cardinality")


@dataclass(frozen=True)
class FeatureSchema:
    """Declares covariates, window sizes, and the day-group block count."""

    covariates: tuple[Covariate, ...]
    lookback: int = 168
    horizon: int = 168
    day_groups: int = 7

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if self.lookback != self.day_groups * HOURS_PER_DAY:
            raise ValueError(
                f"lookback {self.lookback} must equal day_groups*24 = "
                f"{self.day_groups * HOURS_PER_DAY}")
        if self.horizon < 1:
            raise ValueError("horizon must be positive")
        names = [c.name for c in self.covariates]
        if len(set(names)) != len(names):
            raise ValueError("covariate names must be unique")

    @property
    def n_covariates(self) -> int:
        return len(self.covariates)

    @property
    def n_groups(self) -> int:
        return self.day_groups + len(self.covariates)

    @property
    def window(self) -> int:
        return self.lookback + self.horizon

    def covariate(self, name: str) -> Covariate:
        for c in self.covariates:
            if c.name == name:
                return c
        raise KeyError(name)

    def covariate_index(self, name: str) -> int:
        for i, c in enumerate(self.covariates):
            if c.name == name:
                return i
        raise KeyError(name)

    def group_index(self, name: str) -> int:
        """Block index of a covariate by name (day groups come first)."""
        return self.day_groups + self.covariate_index(name)

    def group_labels(self) -> tuple[str, ...]:
        days = tuple(f"load_d{g}" for g in range(self.day_groups))
        return days + tuple(c.name for c in self.covariates)

    def day_group_steps(self, g: int) -> range:
        """Past-target steps covered by day group g."""
        if not 0 <= g < self.day_groups:
            raise ValueError(f"day group {g} out of range")
        return range(g * HOURS_PER_DAY, (g + 1) * HOURS_PER_DAY)

    def n_features(self) -> int:
        """Individual-feature count: past-target steps plus all covariate steps."""
        return self.lookback + self.window * len(self.covariates)


def real_schema() -> FeatureSchema:
    """Schema for real utility data: calendar covariates plus weather (N=13)."""
    return FeatureSchema(covariates=(
        Covariate("hour", "categorical", 24),
        Covariate("dow", "categorical", 7),
        Covariate("month", "categorical", 12),
        Covariate("holiday", "categorical", 2),
        Covariate("temperature", "continuous"),
        Covariate("precipitation", "continuous"),
    ))


def synthetic_schema() -> FeatureSchema:
    """Schema for generated data: calendar covariates, the continuous load
    multiplier (the generator's temperature walk), and two noise channels
    that the target does not depend on (N=14)."""
    return FeatureSchema(covariates=(
        Covariate("hour", "categorical", 24),
        Covariate("dow", "categorical", 7),
        Covariate("month", "categorical", 12),
        Covariate("holiday", "categorical", 2),
        Covariate("multiplier", "continuous"),
        Covariate("noise1", "continuous"),
        Covariate("noise2", "continuous"),
    ))


@dataclass(frozen=True)
class GroupMask:
    """Immutable presence flags, one per coalition block.

    Bit order follows the schema: day groups 0..day_groups-1, then covariates
    in declared order. Hashable, so masks can key coalition tables.
    """

    bits: tuple[bool, ...]

    def __post_init__(self):
        object.__setattr__(self, "bits", tuple(bool(b) for b in self.bits))
        if not self.bits:
            raise ValueError("mask must have at least one block")

    @classmethod
    def full(cls, n: int) -> "GroupMask":
        return cls((True,) * n)

    @classmethod
    def empty(cls, n: int) -> "GroupMask":
        return cls((False,) * n)

    @classmethod
    def from_int(cls, value: int, n: int) -> "GroupMask":
        if value < 0 or value >= 1 << n:
            raise ValueError(f"mask integer {value} out of range for {n} blocks")
        return cls(tuple(bool((value >> i) & 1) for i in range(n)))

    def to_int(self) -> int:
        v = 0
        for i, b in enumerate(self.bits):
            if b:
                v |= 1 << i
        return v

    def __len__(self) -> int:
        return len(self.bits)

    def __getitem__(self, i: int) -> bool:
        return self.bits[i]

    @property
    def is_full(self) -> bool:
        return all(self.bits)

    @property
    def is_empty(self) -> bool:
        return not any(self.bits)

    def count(self) -> int:
        return sum(self.bits)

    def with_bit(self, i: int, value: bool) -> "GroupMask":
        bits = list(self.bits)
        bits[i] = value
        return GroupMask(tuple(bits))

    def as_array(self) -> np.ndarray:
        return np.array(self.bits, dtype=bool)


@dataclass(frozen=True, eq=False)
class ForecastExample:
    """One windowed example: standardized past load, covariates over the full
    window, and the future target. Arrays are frozen after construction."""

    schema: FeatureSchema
    past_target: np.ndarray
    covariate_values: np.ndarray
    future_target: np.ndarray
    origin_timestamp: np.datetime64 | None = None

    def __post_init__(self):
        s = self.schema
        past = np.ascontiguousarray(self.past_target, dtype=np.float32)
        covs = np.ascontiguousarray(self.covariate_values, dtype=np.float32)
        future = np.ascontiguousarray(self.future_target, dtype=np.float32)
        if past.shape != (s.lookback,):
            raise ValueError(f"past_target must have shape ({s.lookback},), got {past.shape}")
        if covs.shape != (s.n_covariates, s.window):
            raise ValueError(
                f"covariate_values must have shape ({s.n_covariates}, {s.window}), "
                f"got {covs.shape}")
        if future.shape != (s.horizon,):
            raise ValueError(f"future_target must have shape ({s.horizon},), got {future.shape}")
        for arr, what in ((past, "past_target"), (covs, "covariate_values"),
                          (future, "future_target")):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite values in {what}")
        for i, c in enumerate(s.covariates):
            if c.kind == "categorical":
                row = covs[i]
                codes = np.rint(row)
                if np.any(codes != row) or row.min() < 0 or row.max() >= c.cardinality:
                    raise ValueError(
                        f"covariate {c.name!r} has codes outside [0, {c.cardinality})")
        for arr in (past, covs, future):
            arr.flags.writeable = False
        object.__setattr__(self, "past_target", past)
        object.__setattr__(self, "covariate_values", covs)
        object.__setattr__(self, "future_target", future)

    def covariate(self, name: str) -> np.ndarray:
        return self.covariate_values[self.schema.covariate_index(name)]


@dataclass(frozen=True)
class Standardizer:
    """Per-channel affine scaling fitted on the training split only.

    Applies to the target and continuous covariates; categorical codes pass
    through untouched since the model embeds them.
    """

    target_mean: float
    target_std: float
    covariate_means: dict[str, float] = field(default_factory=dict)
    covariate_stds: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.target_std > 0:
            raise ValueError("target std must be positive")
        for name, std in self.covariate_stds.items():
            if not std > 0:
                raise ValueError(f"std for {name!r} must be positive")

    @classmethod
    def fit(cls, table: "AlignedTable", schema: FeatureSchema,
            rows: slice | None = None) -> "Standardizer":
        rows = rows if rows is not None else slice(None)
        tgt = np.asarray(table.target, dtype=np.float64)[rows]
        t_mean, t_std = float(tgt.mean()), float(tgt.std())
        if t_std <= 1e-12:
            raise ValueError("target has zero variance on the fitting rows")
        means, stds = {}, {}
        for c in schema.covariates:
            if c.kind != "continuous":
                continue
            col = np.asarray(table.covariates[c.name], dtype=np.float64)[rows]
            m, s = float(col.mean()), float(col.std())
            if s <= 1e-12:
                raise ValueError(f"covariate {c.name!r} has zero variance on the fitting rows")
            means[c.name], stds[c.name] = m, s
        return cls(t_mean, t_std, means, stds)

    def transform_table(self, table: "AlignedTable") -> "AlignedTable":
        target = (np.asarray(table.target, dtype=np.float64) - self.target_mean) / self.target_std
        covs = {}
        for name, col in table.covariates.items():
            if name in self.covariate_means:
                covs[name] = ((np.asarray(col, dtype=np.float64) - self.covariate_means[name])
                              / self.covariate_stds[name])
            else:
                covs[name] = np.asarray(col).copy()
        return AlignedTable(table.timestamps.copy(), target, covs)

    def inverse_target(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.target_std + self.target_mean

    def transform_target(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.target_mean) / self.target_std

    def to_dict(self) -> dict:
        return {
            "target_mean": self.target_mean,
            "target_std": self.target_std,
            "covariate_means": dict(self.covariate_means),
            "covariate_stds": dict(self.covariate_stds),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(d["target_mean"], d["target_std"],
                   dict(d["covariate_means"]), dict(d["covariate_stds"]))


@dataclass(frozen=True, eq=False)
class AlignedTable:
    """Hourly-aligned series: timestamps, target, and covariate columns."""

    timestamps: np.ndarray
    target: np.ndarray
    covariates: dict[str, np.ndarray]

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype="datetime64[h]")
        tgt = np.asarray(self.target, dtype=np.float64)
        if ts.ndim != 1 or tgt.shape != ts.shape:
            raise ValueError("timestamps and target must be 1-D and equal length")
        covs = {}
        for name, col in self.covariates.items():
            arr = np.asarray(col, dtype=np.float64)
            if arr.shape != ts.shape:
                raise ValueError(f"covariate {name!r} length does not match timestamps")
            covs[name] = arr
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "target", tgt)
        object.__setattr__(self, "covariates", covs)

    def __len__(self) -> int:
        return len(self.timestamps)


def _check_contiguous(table: AlignedTable) -> None:
    if len(table) >= 2:
        deltas = np.diff(table.timestamps).astype("timedelta64[h]").astype(int)
        if np.any(deltas != 1):
            bad = int(np.argmax(deltas != 1))
            raise ValueError(
                f"timestamps are not hourly-contiguous at row {bad} "
                f"({table.timestamps[bad]} -> {table.timestamps[bad + 1]})")


def windowize(table: AlignedTable, schema: FeatureSchema,
              boundaries: Iterable[int] = ()) -> list[ForecastExample]:
    """Cut an aligned table into stride-1 sliding windows.

    ``boundaries`` are row indices where a new segment begins (split cut
    points); a window must lie entirely inside one segment, so windows that
    would straddle a cut are dropped from both sides. The table must already
    be standardized if standardized examples are wanted; windowize does not
    rescale.
    """
    _check_contiguous(table)
    for name in (c.name for c in schema.covariates):
        if name not in table.covariates:
            raise ValueError(f"table is missing covariate {name!r}")
    if np.isnan(table.target).any():
        raise ValueError("target contains missing values")
    for name, col in table.covariates.items():
        if np.isnan(col).any():
            raise ValueError(f"covariate {name!r} contains missing values")

    cuts = sorted(set(int(b) for b in boundaries))
    for b in cuts:
        if not 0 < b < len(table):
            raise ValueError(f"boundary {b} outside table of {len(table)} rows")
    edges = [0] + cuts + [len(table)]

    cov_matrix = np.stack([table.covariates[c.name] for c in schema.covariates]) \
        if schema.covariates else np.zeros((0, len(table)))
    examples: list[ForecastExample] = []
    w = schema.window
    for seg_start, seg_end in zip(edges[:-1], edges[1:]):
        for start in range(seg_start, seg_end - w + 1):
            examples.append(ForecastExample(
                schema=schema,
                past_target=table.target[start:start + schema.lookback],
                covariate_values=cov_matrix[:, start:start + w],
                future_target=table.target[start + schema.lookback:start + w],
                origin_timestamp=table.timestamps[start + schema.lookback],
            ))
    return examples


def schema_to_dict(schema: FeatureSchema) -> dict:
    return {
        "covariates": [
            {"name": c.name, "kind": c.kind, "cardinality": c.cardinality}
            for c in schema.covariates
        ],
        "lookback": schema.lookback,
        "horizon": schema.horizon,
        "day_groups": schema.day_groups,
    }


def schema_from_dict(d: dict) -> FeatureSchema:
    return FeatureSchema(
        covariates=tuple(Covariate(c["name"], c["kind"], c.get("cardinality"))
                         for c in d["covariates"]),
        lookback=d["lookback"],
        horizon=d["horizon"],
        day_groups=d["day_groups"],
    )


def schema_fingerprint(schema: FeatureSchema) -> str:
    """Stable short hash identifying the feature layout."""
    import hashlib
    import json

    canon = json.dumps(schema_to_dict(schema), sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def mask_to_feature_set(mask: GroupMask, schema: FeatureSchema) -> set[tuple[str, int]]:
    """Expand a block mask into the exact (channel, timestep) pairs it covers.

    Day-group bit g covers past-target steps [24g, 24g+24); a covariate bit
    covers all 336 steps of that channel. The blocks partition the feature
    set, so disjoint masks expand to disjoint pair sets.
    """
    if len(mask) != schema.n_groups:
        raise ValueError(f"mask has {len(mask)} blocks, schema declares {schema.n_groups}")
    pairs: set[tuple[str, int]] = set()
    for g in range(schema.day_groups):
        if mask[g]:
            pairs.update(("load", t) for t in schema.day_group_steps(g))
    for i, c in enumerate(schema.covariates):
        if mask[schema.day_groups + i]:
            pairs.update((c.name, t) for t in range(schema.window))
    return pairs
