"""Synthetic hourly load generator with generative ground-truth attributions.

Each example is two weeks of hourly load driven by explicit latent state:
a base level with an additive month term, a daily curve reused across
workdays, damped Saturday/Sunday variants, per-day holiday flags that force
the Sunday curve, a multiplicative temperature walk, and additive noise.
Because the latents are known, exact-in-expectation attributions can be
computed by rerunning the generator itself: a permutation walk over feature
blocks where absent blocks are resampled from their priors (respecting the
dependency rules below) and each coalition's value is the mean regenerated
target curve.

The generator and the attribution oracle share one sampling and assembly
code path, so the oracle explains exactly the process that produced the
data.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .schema import FeatureSchema, ForecastExample, GroupMask, synthetic_schema
from .shapley import Explanation

WINDOW = 336
LOOKBACK = 168
HOLIDAY_P = 0.1
N_DAY_SLOTS = 15

__all__ = [
    "GenLatents",
    "GroundTruthConfig",
    "SyntheticDataset",
    "sample_latents",
    "assemble_load",
    "assemble_covariates",
    "generate_example",
    "generate_dataset",
    "resample_coalition",
    "ground_truth_explanation",
    "write_dataset_csv",
    "read_dataset_csv",
    "write_ground_truth",
    "read_ground_truth",
]


@dataclass(frozen=True, eq=False)
class GenLatents:
    """Complete latent state of one generated example.

    ``day_pattern``/``saturday_pattern``/``sunday_pattern`` are the realized
    24-hour curves including their additive noise. ``holidays`` covers the 15
    calendar days a 336-hour window can touch when it starts mid-day.
    """

    month: int
    start_weekday: int
    start_hour: int
    base_load: float
    factor: float
    alpha: float
    beta: float
    day_pattern: np.ndarray
    s1: float
    s2: float
    saturday_pattern: np.ndarray
    sunday_pattern: np.ndarray
    holidays: tuple
    temperature: np.ndarray
    noise: np.ndarray

    def __post_init__(self):
        if not 1 <= self.month <= 12:
            raise ValueError(f"month must be in [1, 12], got {self.month}")
        if not 0 <= self.start_weekday <= 6:
            raise ValueError("start weekday must be in [0, 6]")
        if not 0 <= self.start_hour <= 23:
            raise ValueError("start hour must be in [0, 23]")
        if not -0.5 <= self.base_load <= 0.5:
            raise ValueError("base load must be in (-0.5, 0.5)")
        if not 0.5 <= self.factor <= 1.0:
            raise ValueError("daily factor must be in (0.5, 1)")
        if not (-0.5 <= self.alpha <= 0.5 and -0.5 <= self.beta <= 0.5):
            raise ValueError("alpha and beta must be in (-0.5, 0.5)")
        if not 0.5 <= self.s1 <= 0.9:
            raise ValueError("s1 must be in (0.5, 0.9)")
        if not 0.2 <= self.s2 <= self.s1:
            raise ValueError("s2 must be in (0.2, s1)")
        for name in ("day_pattern", "saturday_pattern", "sunday_pattern"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (24,):
                raise ValueError(f"{name} must have 24 values")
            object.__setattr__(self, name, arr)
        if len(self.holidays) != N_DAY_SLOTS:
            raise ValueError(f"holidays must cover {N_DAY_SLOTS} day slots")
        object.__setattr__(self, "holidays",
                           tuple(bool(h) for h in self.holidays))
        for name in ("temperature", "noise"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (WINDOW,):
                raise ValueError(f"{name} must have {WINDOW} values")
            object.__setattr__(self, name, arr)


@dataclass(frozen=True)
class GroundTruthConfig:
    """Settings for the generative attribution oracle."""

    resamples: int = 1000
    seed: int = 0
    dependency_rules: bool = True
    permutations: int = 4

    def __post_init__(self):
        if self.resamples < 1:
            raise ValueError("resamples must be >= 1")
        if self.permutations < 1:
            raise ValueError("permutations must be >= 1")


@dataclass
class SyntheticDataset:
    train: list
    val: list
    test: list
    latents: dict


# ---------------------------------------------------------------------------
# sampling pieces: each accepts size=None for one example or size=R for a
# batch of oracle resamples, so both consumers share a single code path

_PATTERN_HALF_WIDTH = float(np.sqrt(0.03))


def _draw_month(rng, size=None):
    return rng.integers(1, 13, size=size)


def _draw_weekday(rng, size=None):
    return rng.integers(0, 7, size=size)


def _draw_hour(rng, size=None):
    return rng.integers(0, 24, size=size)


def _draw_base(rng, size=None):
    return rng.uniform(-0.5, 0.5, size=size)


def _draw_patterns(rng, size=None, zero_noise=False):
    """Draw (factor, alpha, beta, s1, s2, day, saturday, sunday)."""
    shape = (24,) if size is None else (size, 24)
    factor = rng.uniform(0.5, 1.0, size=size)
    alpha = rng.uniform(-0.5, 0.5, size=size)
    beta = rng.uniform(-0.5, 0.5, size=size)
    day_noise = rng.uniform(-_PATTERN_HALF_WIDTH, _PATTERN_HALF_WIDTH, shape)
    day_noise = day_noise - day_noise.mean(axis=-1, keepdims=True)
    s1 = rng.uniform(0.5, 0.9, size=size)
    sat_noise = rng.normal(0.0, 0.1, shape)
    s2 = rng.uniform(0.2, s1)
    sun_noise = rng.normal(0.0, 0.1, shape)
    if zero_noise:
        day_noise = np.zeros(shape)
        sat_noise = np.zeros(shape)
        sun_noise = np.zeros(shape)

    theta = np.arange(24) * 2.0 * np.pi / 24.0
    curve = np.sin(theta - 0.5 * np.pi)
    f = factor if size is None else factor[:, None]
    a = alpha if size is None else alpha[:, None]
    b = beta if size is None else beta[:, None]
    day = f * (curve + a * np.sin(theta) + b * np.cos(theta)) + day_noise
    sat = (s1 if size is None else s1[:, None]) * day + sat_noise
    sun = (s2 if size is None else s2[:, None]) * day + sun_noise
    return factor, alpha, beta, s1, s2, day, sat, sun


def _draw_holidays(rng, size=None):
    shape = (N_DAY_SLOTS,) if size is None else (size, N_DAY_SLOTS)
    return rng.random(shape) < HOLIDAY_P


def _draw_temperature(rng, size=None, zero_noise=False):
    shape = (WINDOW,) if size is None else (size, WINDOW)
    start = rng.uniform(-0.5, 0.5, size=size)
    steps = rng.normal(0.0, 0.02, (WINDOW - 1,) if size is None
                       else (size, WINDOW - 1))
    if zero_noise:
        return np.zeros(shape)
    walk = np.zeros(shape)
    walk[..., 0] = start
    walk[..., 1:] = np.cumsum(steps, axis=-1)
    walk[..., 1:] += np.expand_dims(start, -1) if size is not None else start
    return walk


def _draw_target_noise(rng, size=None, zero_noise=False):
    shape = (WINDOW,) if size is None else (size, WINDOW)
    noise = rng.normal(0.0, 0.05, shape)
    return np.zeros(shape) if zero_noise else noise


def sample_latents(rng: np.random.Generator, zero_noise: bool = False) -> GenLatents:
    """Draw a full latent state from the generative priors.

    With ``zero_noise`` the structural draws (month, patterns' shape
    parameters, calendar) still happen but every noise term and the
    temperature walk are zeroed, which makes the load a closed-form function
    of the remaining latents.
    """
    month = int(_draw_month(rng))
    start_weekday = int(_draw_weekday(rng))
    start_hour = int(_draw_hour(rng))
    base = float(_draw_base(rng))
    factor, alpha, beta, s1, s2, day, sat, sun = _draw_patterns(
        rng, zero_noise=zero_noise)
    holidays = tuple(bool(h) for h in _draw_holidays(rng))
    temperature = _draw_temperature(rng, zero_noise=zero_noise)
    noise = _draw_target_noise(rng, zero_noise=zero_noise)
    return GenLatents(month=month, start_weekday=start_weekday,
                      start_hour=start_hour, base_load=base,
                      factor=float(factor), alpha=float(alpha),
                      beta=float(beta), day_pattern=day, s1=float(s1),
                      s2=float(s2), saturday_pattern=sat, sunday_pattern=sun,
                      holidays=holidays, temperature=temperature, noise=noise)


# ---------------------------------------------------------------------------
# assembly


def _assemble_batch(base, month, start_weekday, start_hour, day, sat, sun,
                    holidays, temperature, noise, steps) -> np.ndarray:
    """Assemble load values at the given step indices for a batch of latent
    rows. All latent inputs are (R,) or (R, k) arrays; returns (R, len(steps)).
    """
    steps = np.asarray(steps)
    pos = start_hour[:, None] + steps
    slots = pos // 24
    hours = pos % 24
    dows = (start_weekday[:, None] + slots) % 7
    hol = np.take_along_axis(holidays, slots, axis=1)
    day_v = np.take_along_axis(day, hours, axis=1)
    sat_v = np.take_along_axis(sat, hours, axis=1)
    sun_v = np.take_along_axis(sun, hours, axis=1)
    # Holidays always use the Sunday curve; Saturday is weekday 5, Sunday 6.
    pattern = np.where(hol | (dows == 6), sun_v,
                       np.where(dows == 5, sat_v, day_v))
    month_term = 0.1 * np.sin(month * 2.0 * np.pi / 12.0)
    level = base[:, None] + month_term[:, None] + pattern
    return level * (0.5 + 0.5 * temperature[:, steps]) + noise[:, steps]


def _latents_as_batch(lat: GenLatents) -> dict:
    return {
        "base": np.array([lat.base_load]),
        "month": np.array([lat.month]),
        "start_weekday": np.array([lat.start_weekday]),
        "start_hour": np.array([lat.start_hour]),
        "day": lat.day_pattern[None, :],
        "sat": lat.saturday_pattern[None, :],
        "sun": lat.sunday_pattern[None, :],
        "holidays": np.array([lat.holidays]),
        "temperature": lat.temperature[None, :],
        "noise": lat.noise[None, :],
    }


def assemble_load(latents: GenLatents) -> np.ndarray:
    """Deterministically rebuild the 336-value load series from latents."""
    parts = _latents_as_batch(latents)
    return _assemble_batch(steps=np.arange(WINDOW), **parts)[0]


def assemble_covariates(latents: GenLatents) -> dict:
    """Covariate series implied by the latents (noise channels excluded).

    The month covariate is emitted zero-based so it is a valid category
    index; the month term itself uses the one-based latent value.
    """
    steps = np.arange(WINDOW)
    pos = latents.start_hour + steps
    slots = pos // 24
    return {
        "hour": (pos % 24).astype(np.float64),
        "dow": ((latents.start_weekday + slots) % 7).astype(np.float64),
        "month": np.full(WINDOW, latents.month - 1, dtype=np.float64),
        "holiday": np.array([float(latents.holidays[s]) for s in slots]),
        "multiplier": latents.temperature.copy(),
    }


def generate_example(rng: np.random.Generator, zero_noise: bool = False
                     ) -> tuple[ForecastExample, GenLatents]:
    """Generate one example and the latent state that produced it."""
    schema = synthetic_schema()
    latents = sample_latents(rng, zero_noise=zero_noise)
    load = assemble_load(latents)
    series = assemble_covariates(latents)
    series["noise1"] = rng.normal(0.0, 1.0, WINDOW)
    series["noise2"] = rng.normal(0.0, 1.0, WINDOW)
    covs = np.stack([series[c.name] for c in schema.covariates])
    example = ForecastExample(schema,
                              past_target=load[:LOOKBACK],
                              covariate_values=covs,
                              future_target=load[LOOKBACK:])
    return example, latents


def generate_dataset(sizes: dict, seed: int, zero_noise: bool = False
                     ) -> SyntheticDataset:
    """Generate independent train/val/test splits.

    Every example gets its own spawned RNG stream, so the splits are
    disjoint and the result is deterministic regardless of generation order.
    """
    expected = ("train", "val", "test")
    if set(sizes) != set(expected):
        raise ValueError(f"sizes must have exactly the keys {expected}")
    for name in expected:
        if int(sizes[name]) < 1:
            raise ValueError(f"{name} size must be >= 1")
    root = np.random.SeedSequence(seed)
    split_seeds = dict(zip(expected, root.spawn(3)))
    splits, latents = {}, {}
    for name in expected:
        children = split_seeds[name].spawn(int(sizes[name]))
        examples, lats = [], []
        for child in children:
            ex, lat = generate_example(np.random.default_rng(child),
                                       zero_noise=zero_noise)
            examples.append(ex)
            lats.append(lat)
        splits[name] = examples
        latents[name] = lats
    return SyntheticDataset(train=splits["train"], val=splits["val"],
                            test=splits["test"], latents=latents)


# ---------------------------------------------------------------------------
# generative attribution oracle


def _group_indices(schema: FeatureSchema) -> dict:
    labels = schema.group_labels()
    needed = ("hour", "dow", "month", "holiday", "multiplier")
    missing = [n for n in needed if n not in labels]
    if missing:
        raise ValueError(f"schema lacks covariate groups {missing}")
    return {name: labels.index(name) for name in needed}


def resample_coalition(latents: GenLatents, mask: GroupMask,
                       schema: FeatureSchema, resamples: int,
                       rng: np.random.Generator, rules: bool = True) -> dict:
    """Resample the latents of absent blocks and regenerate target curves.

    Present blocks keep their latent determinants; absent blocks are drawn
    from the priors. With ``rules`` enabled, dependent inputs are held
    instead of resampled: day-of-week present holds the start hour, holiday
    present holds it too when the example contains a holiday, and any
    present past-load day holds the calendar, the past week's temperature,
    the base level, and all three day curves (they all shaped the observed
    past load). Target noise is always redrawn.

    Returns the resampled latent arrays plus ``"future"``, the (resamples,
    horizon) regenerated target curves.
    """
    idx = _group_indices(schema)
    bits = mask.bits
    if len(bits) != schema.n_groups:
        raise ValueError("mask size does not match schema")
    load_present = any(bits[:schema.day_groups])
    R = int(resamples)

    pin_hour = bits[idx["hour"]] or (rules and (
        bits[idx["dow"]]
        or (bits[idx["holiday"]] and any(latents.holidays))
        or load_present))
    pin_weekday = bits[idx["dow"]] or (rules and load_present)
    pin_month = bits[idx["month"]] or (rules and load_present)
    pin_base = load_present
    pin_patterns = load_present

    def tile(value, shape=()):
        return np.broadcast_to(np.asarray(value), (R,) + shape).copy()

    start_hour = (tile(latents.start_hour) if pin_hour
                  else _draw_hour(rng, size=R))
    start_weekday = (tile(latents.start_weekday) if pin_weekday
                     else _draw_weekday(rng, size=R))
    month = tile(latents.month) if pin_month else _draw_month(rng, size=R)
    base = tile(latents.base_load) if pin_base else _draw_base(rng, size=R)
    if pin_patterns:
        day = tile(latents.day_pattern, (24,))
        sat = tile(latents.saturday_pattern, (24,))
        sun = tile(latents.sunday_pattern, (24,))
    else:
        _, _, _, _, _, day, sat, sun = _draw_patterns(rng, size=R)

    if bits[idx["holiday"]]:
        holidays = tile(np.array(latents.holidays), (N_DAY_SLOTS,))
    else:
        holidays = _draw_holidays(rng, size=R)
        if rules and load_present:
            # Day slots touching the observed past week keep their flags.
            last_past_slot = (latents.start_hour + LOOKBACK - 1) // 24
            holidays[:, :last_past_slot + 1] = np.array(
                latents.holidays[:last_past_slot + 1])

    if bits[idx["multiplier"]]:
        temperature = tile(latents.temperature, (WINDOW,))
    elif rules and load_present:
        # Continue the walk from the last observed past value.
        temperature = np.empty((R, WINDOW))
        temperature[:, :LOOKBACK] = latents.temperature[:LOOKBACK]
        steps = rng.normal(0.0, 0.02, (R, WINDOW - LOOKBACK))
        temperature[:, LOOKBACK:] = (latents.temperature[LOOKBACK - 1]
                                     + np.cumsum(steps, axis=1))
    else:
        temperature = _draw_temperature(rng, size=R)

    noise = _draw_target_noise(rng, size=R)
    future = _assemble_batch(base=base, month=month,
                             start_weekday=start_weekday,
                             start_hour=start_hour, day=day, sat=sat, sun=sun,
                             holidays=holidays, temperature=temperature,
                             noise=noise, steps=np.arange(LOOKBACK, WINDOW))
    return {"start_hour": start_hour, "start_weekday": start_weekday,
            "month": month, "base": base, "day": day, "sat": sat, "sun": sun,
            "holidays": holidays, "temperature": temperature,
            "future": future}


def _check_example_matches_latents(example: ForecastExample,
                                   latents: GenLatents) -> None:
    load = assemble_load(latents).astype(np.float32)
    if not (np.array_equal(load[:LOOKBACK], example.past_target)
            and np.array_equal(load[LOOKBACK:], example.future_target)):
        raise ValueError("example was not generated from these latents")


def ground_truth_explanation(example: ForecastExample, latents: GenLatents,
                             config: GroundTruthConfig) -> Explanation:
    """Attribute the example's target curve to feature blocks by rerunning
    the generator.

    Runs antithetic permutation walks over the blocks; each coalition value
    is the mean of ``config.resamples`` regenerated target curves with the
    absent blocks resampled. Coalition values are cached per mask, so the
    empty and full coalitions are shared by all walks and the walk sum is
    exactly efficient against them.
    """
    t0 = time.perf_counter()
    schema = example.schema
    _group_indices(schema)
    _check_example_matches_latents(example, latents)
    n = schema.n_groups
    horizon = schema.horizon

    root = np.random.SeedSequence(config.seed)
    perm_rng = np.random.default_rng(root.spawn(1)[0])
    cache: dict[int, np.ndarray] = {}

    def value(bits: tuple) -> np.ndarray:
        key = GroupMask(bits).to_int()
        if key not in cache:
            eval_rng = np.random.default_rng(root.spawn(1)[0])
            out = resample_coalition(latents, GroupMask(bits), schema,
                                     config.resamples, eval_rng,
                                     rules=config.dependency_rules)
            cache[key] = out["future"].mean(axis=0)
        return cache[key]

    contrib = np.zeros((n, horizon))
    for _ in range(config.permutations):
        perm = perm_rng.permutation(n)
        for order in (perm, perm[::-1]):
            bits = [False] * n
            prev = value(tuple(bits))
            for player in order:
                bits[player] = True
                cur = value(tuple(bits))
                contrib[player] += cur - prev
                prev = cur
    contrib /= 2.0 * config.permutations

    elapsed = (time.perf_counter() - t0) * 1000.0
    return Explanation(base_value=value((False,) * n), attributions=contrib,
                       group_labels=schema.group_labels(), mode="permutation",
                       elapsed_ms=elapsed, mask_count=len(cache))


# ---------------------------------------------------------------------------
# serialization: one CSV per split, ground truth as JSON keyed by example id

_CSV_FLOAT_COLUMNS = ("load", "multiplier", "noise1", "noise2")


def _fmt(value: float) -> str:
    # 9 significant digits round-trip float32 exactly.
    return "%.9g" % float(value)


def write_dataset_csv(path: str, examples: Sequence[ForecastExample],
                      start_id: int = 0, fingerprint: str | None = None
                      ) -> None:
    """Write examples as rows (example_id, step, load, covariates...).

    When ``fingerprint`` is given it is recorded as a leading comment line so
    the file carries the configuration hash that produced it.
    """
    if not examples:
        raise ValueError("no examples to write")
    schema = examples[0].schema
    header = ["example_id", "step", "load"] + [c.name for c in schema.covariates]
    with open(path, "w", newline="") as fh:
        if fingerprint is not None:
            fh.write(f"# fingerprint: {fingerprint}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        for offset, ex in enumerate(examples):
            load = np.concatenate([ex.past_target, ex.future_target])
            for step in range(schema.window):
                row = [start_id + offset, step, _fmt(load[step])]
                for ci, cov in enumerate(schema.covariates):
                    v = ex.covariate_values[ci, step]
                    row.append(_fmt(v) if cov.kind == "continuous"
                               else str(int(v)))
                writer.writerow(row)


def read_dataset_csv(path: str, schema: FeatureSchema | None = None
                     ) -> list[ForecastExample]:
    """Read a dataset CSV written by ``write_dataset_csv``."""
    schema = schema or synthetic_schema()
    with open(path, newline="") as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        header = next(reader)
        expected = ["example_id", "step", "load"] + [c.name for c in schema.covariates]
        if header != expected:
            raise ValueError(f"unexpected CSV header {header}")
        buckets: dict[int, list] = {}
        for row in reader:
            buckets.setdefault(int(row[0]), []).append(row)
    examples = []
    for ex_id in sorted(buckets):
        rows = buckets[ex_id]
        if len(rows) != schema.window:
            raise ValueError(f"example {ex_id} has {len(rows)} rows, "
                             f"expected {schema.window}")
        rows.sort(key=lambda r: int(r[1]))
        if [int(r[1]) for r in rows] != list(range(schema.window)):
            raise ValueError(f"example {ex_id} has missing or duplicate steps")
        load = np.array([float(r[2]) for r in rows], dtype=np.float32)
        covs = np.array([[float(r[3 + ci]) for r in rows]
                         for ci in range(schema.n_covariates)],
                        dtype=np.float32)
        examples.append(ForecastExample(schema,
                                        past_target=load[:schema.lookback],
                                        covariate_values=covs,
                                        future_target=load[schema.lookback:]))
    return examples


def write_ground_truth(path: str, explanations: dict,
                       fingerprint: str | None = None) -> None:
    """Write {example_id: Explanation} as a JSON object keyed by id.

    A ``fingerprint`` is stored under the reserved "_fingerprint" key, which
    cannot collide with the numeric example ids. Oracle timing is dropped so
    that a fixed seed writes byte-identical files.
    """
    payload = {}
    for k in sorted(explanations):
        record = explanations[k].to_json_dict()
        record.pop("elapsed_ms", None)
        payload[str(k)] = record
    if fingerprint is not None:
        payload["_fingerprint"] = fingerprint
    with open(path, "w") as fh:
        json.dump(payload, fh)


def read_ground_truth(path: str) -> dict:
    with open(path) as fh:
        payload = json.load(fh)
    return {int(k): Explanation.from_json_dict(v)
            for k, v in payload.items() if not k.startswith("_")}
