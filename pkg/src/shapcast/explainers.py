"""Sampling-based attribution baselines for a full-input forecaster.

Both explainers walk random permutations of the inputs forward and backward,
accumulating marginal contributions. Absent inputs are replaced by draws
from background data: the permutation explainer works at the level of the
2184 individual feature values and replaces each from its background
marginal, while the custom masker works on the coalition blocks and keeps
replacements internally coherent (contiguous load runs, cyclically shifted
calendars, whole background series for other covariates).

Replacement draws are fixed per permutation and rows are updated
incrementally, so consecutive coalition states differ in exactly one input.
The empty and full states are shared between the two directions of a
permutation, which makes the model-call count exactly
2 * n_inputs * permutations * samples and the attribution sum exactly
efficient against the full-input prediction.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .schema import FeatureSchema, ForecastExample
from .shapley import Explanation

Predictor = Callable[[np.ndarray, np.ndarray], np.ndarray]

CYCLIC_COVARIATES = ("hour", "dow", "month")

__all__ = [
    "SamplerConfig",
    "BackgroundData",
    "permutation_explainer",
    "custom_masker_explainer",
    "run_permutation_walks",
]


@dataclass(frozen=True)
class SamplerConfig:
    """Permutation count, Monte-Carlo draws per coalition, and the seed."""

    permutations: int = 10
    samples: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.permutations < 1:
            raise ValueError("permutations must be >= 1")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")


class BackgroundData:
    """Reservoir of training examples that replacement values are drawn from.

    Contiguous runs never cross example boundaries: the target series of one
    example (past week plus future week) is one contiguous run, as is each
    covariate row.
    """

    def __init__(self, examples: Sequence[ForecastExample]):
        if not examples:
            raise ValueError("background data must contain examples")
        self.schema = examples[0].schema
        self.examples = list(examples)
        self.target = np.stack([
            np.concatenate([ex.past_target, ex.future_target])
            for ex in examples])
        self.covariates = np.stack([ex.covariate_values for ex in examples])
        # Feature layout: past target steps, then each covariate's window.
        flat = [self.target[:, :self.schema.lookback]]
        for c in range(self.schema.n_covariates):
            flat.append(self.covariates[:, c, :])
        self.features = np.concatenate(flat, axis=1)

    def __len__(self) -> int:
        return len(self.examples)

    def target_runs(self, rng: np.random.Generator, count: int,
                    length: int) -> np.ndarray:
        """Draw contiguous target slices, each from a single example."""
        window = self.target.shape[1]
        if length > window:
            raise ValueError(f"cannot draw a run of {length} values from "
                             f"series of length {window}")
        picks = rng.integers(0, len(self.examples), count)
        offsets = rng.integers(0, window - length + 1, count)
        return self.target[picks[:, None], offsets[:, None] + np.arange(length)]

    def covariate_runs(self, rng: np.random.Generator, channel: int,
                       count: int, length: int) -> np.ndarray:
        window = self.covariates.shape[2]
        if length > window:
            raise ValueError(f"cannot draw a run of {length} values from "
                             f"series of length {window}")
        picks = rng.integers(0, len(self.examples), count)
        offsets = rng.integers(0, window - length + 1, count)
        rows = self.covariates[picks, channel]
        return rows[np.arange(count)[:, None], offsets[:, None] + np.arange(length)]


def flatten_features(example: ForecastExample) -> np.ndarray:
    """Flatten an example into the canonical feature vector (past target
    steps first, then each covariate's full window)."""
    return np.concatenate([example.past_target.ravel(),
                           example.covariate_values.ravel()])


def feature_group_map(schema: FeatureSchema) -> np.ndarray:
    """Group index of every flattened feature."""
    day = np.repeat(np.arange(schema.day_groups), 24)
    cov = np.repeat(schema.day_groups + np.arange(schema.n_covariates),
                    schema.window)
    return np.concatenate([day, cov])


# ---------------------------------------------------------------------------
# permutation walk engine


def run_permutation_walks(walk, n: int, permutations: int,
                          perm_rng: np.random.Generator
                          ) -> tuple[np.ndarray, np.ndarray]:
    """Accumulate marginal contributions over antithetic permutation walks.

    ``walk`` provides three operations: ``begin()`` draws fresh replacements
    and evaluates the empty coalition, ``add(player)`` makes one player
    present and evaluates, and ``restart()`` resets to the empty coalition
    with the same replacements without evaluating. Each permutation is
    traversed forward and then backward; the empty and full values are
    shared between the directions, so a permutation costs 2n evaluations.

    Returns (attributions, base_value): the mean marginal contribution per
    player and the mean empty-coalition value.
    """
    attr = None
    base = None
    for _ in range(permutations):
        perm = perm_rng.permutation(n)
        v_empty = np.asarray(walk.begin(), dtype=np.float64)
        if attr is None:
            attr = np.zeros((n,) + v_empty.shape)
            base = np.zeros_like(v_empty)
        base += v_empty
        prev = v_empty
        for player in perm:
            cur = np.asarray(walk.add(player), dtype=np.float64)
            attr[player] += cur - prev
            prev = cur
        v_full = prev
        walk.restart()
        prev = v_empty
        for i, player in enumerate(perm[::-1]):
            if i == n - 1:
                cur = v_full
            else:
                cur = np.asarray(walk.add(player), dtype=np.float64)
            attr[player] += cur - prev
            prev = cur
    return attr / (2.0 * permutations), base / permutations


class _FeatureWalk:
    """Walk state over individual features, backed by one flat row matrix."""

    def __init__(self, x_flat, background: BackgroundData,
                 predictor: Predictor, samples: int,
                 draw_rng: np.random.Generator):
        self.x = x_flat
        self.bg = background
        self.predictor = predictor
        self.samples = samples
        self.rng = draw_rng
        self.n = x_flat.shape[0]
        self.calls = 0
        self._cols = np.arange(self.n)
        self._replacements = None
        self._rows = None

    def _evaluate(self) -> np.ndarray:
        schema = self.bg.schema
        lb = schema.lookback
        past = self._rows[:, :lb]
        covs = self._rows[:, lb:].reshape(self.samples, schema.n_covariates,
                                          schema.window)
        preds = np.asarray(self.predictor(past, covs))
        self.calls += self.samples
        return preds.astype(np.float64).mean(axis=0)

    def begin(self) -> np.ndarray:
        picks = self.rng.integers(0, len(self.bg), (self.samples, self.n))
        self._replacements = self.bg.features[picks, self._cols[None, :]]
        self._rows = self._replacements.copy()
        return self._evaluate()

    def restart(self) -> None:
        self._rows = self._replacements.copy()

    def add(self, feature: int) -> np.ndarray:
        self._rows[:, feature] = self.x[feature]
        return self._evaluate()


class _BlockWalk:
    """Walk state over coalition blocks with coherent replacements."""

    def __init__(self, example: ForecastExample, background: BackgroundData,
                 predictor: Predictor, samples: int,
                 draw_rng: np.random.Generator):
        self.schema = example.schema
        self.bg = background
        self.predictor = predictor
        self.samples = samples
        self.rng = draw_rng
        self.calls = 0
        self._orig_past = example.past_target
        self._orig_covs = example.covariate_values
        self._past = None
        self._covs = None
        self._repl = None

    def _draw_replacements(self) -> dict:
        s = self.schema
        S = self.samples
        repl = {}
        for g in range(s.day_groups):
            repl[g] = self.bg.target_runs(self.rng, S, 24)
        for ci, cov in enumerate(s.covariates):
            block = s.day_groups + ci
            if cov.name in CYCLIC_COVARIATES:
                offsets = self.rng.integers(0, cov.cardinality, (S, 1))
                repl[block] = (self._orig_covs[ci][None, :]
                               + offsets) % cov.cardinality
            else:
                repl[block] = self.bg.covariate_runs(self.rng, ci, S,
                                                     s.window)
        return repl

    def _evaluate(self) -> np.ndarray:
        preds = np.asarray(self.predictor(self._past, self._covs))
        self.calls += self.samples
        return preds.astype(np.float64).mean(axis=0)

    def _reset_rows(self) -> None:
        s = self.schema
        self._past = np.tile(self._orig_past, (self.samples, 1))
        self._covs = np.tile(self._orig_covs, (self.samples, 1, 1))
        for g in range(s.day_groups):
            steps = s.day_group_steps(g)
            self._past[:, steps.start:steps.stop] = self._repl[g]
        for ci in range(s.n_covariates):
            self._covs[:, ci, :] = self._repl[s.day_groups + ci]

    def begin(self) -> np.ndarray:
        self._repl = self._draw_replacements()
        self._reset_rows()
        return self._evaluate()

    def restart(self) -> None:
        self._reset_rows()

    def add(self, block: int) -> np.ndarray:
        s = self.schema
        if block < s.day_groups:
            steps = s.day_group_steps(block)
            self._past[:, steps.start:steps.stop] = self._orig_past[
                steps.start:steps.stop]
        else:
            ci = block - s.day_groups
            self._covs[:, ci, :] = self._orig_covs[ci]
        return self._evaluate()


def _spawn_rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    perm_child, draw_child = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(perm_child), np.random.default_rng(draw_child)


def permutation_explainer(example: ForecastExample, predictor: Predictor,
                          config: SamplerConfig,
                          background: BackgroundData) -> Explanation:
    """Estimate block attributions by permuting individual feature values.

    Every one of the ``lookback + n_covariates * window`` feature values is
    its own player; absent values are replaced by draws from the background
    marginal of the same position. Per-feature attributions are summed into
    the coalition blocks for comparability. ``mask_count`` on the result
    records the exact number of model calls,
    2 * n_features * permutations * samples.
    """
    t0 = time.perf_counter()
    schema = example.schema
    if background.schema != schema:
        raise ValueError("background schema does not match example schema")
    perm_rng, draw_rng = _spawn_rngs(config.seed)
    walk = _FeatureWalk(flatten_features(example), background, predictor,
                        config.samples, draw_rng)
    attr_features, base = run_permutation_walks(walk, walk.n,
                                                config.permutations, perm_rng)
    groups = feature_group_map(schema)
    attr = np.zeros((schema.n_groups, attr_features.shape[1]))
    np.add.at(attr, groups, attr_features)
    return Explanation(base_value=base, attributions=attr,
                       group_labels=schema.group_labels(), mode="permutation",
                       elapsed_ms=(time.perf_counter() - t0) * 1000.0,
                       mask_count=walk.calls)


def custom_masker_explainer(example: ForecastExample, predictor: Predictor,
                            config: SamplerConfig,
                            background: BackgroundData) -> Explanation:
    """Estimate block attributions by permuting whole coalition blocks.

    Absent blocks are replaced coherently: a past-load day by 24 consecutive
    background target values, hour/day-of-week/month by a cyclic offset of
    the original series, and any other covariate by a whole background
    series. ``mask_count`` records the exact model-call count,
    2 * n_groups * permutations * samples.
    """
    t0 = time.perf_counter()
    schema = example.schema
    if background.schema != schema:
        raise ValueError("background schema does not match example schema")
    perm_rng, draw_rng = _spawn_rngs(config.seed)
    walk = _BlockWalk(example, background, predictor, config.samples,
                      draw_rng)
    attr, base = run_permutation_walks(walk, schema.n_groups,
                                       config.permutations, perm_rng)
    return Explanation(base_value=base, attributions=attr,
                       group_labels=schema.group_labels(),
                       mode="custom_masker",
                       elapsed_ms=(time.perf_counter() - t0) * 1000.0,
                       mask_count=walk.calls)
