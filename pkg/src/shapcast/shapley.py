"""Exact coalition-game attribution: Shapley values, Owen values, oracles.

All routines operate on a complete CoalitionTable holding one prediction
vector per coalition of the N blocks, so attribution is sampling-free: the
classic weighted-marginal sums are evaluated over every subset. Weights are
built as exact rationals before conversion to float64, and all accumulation
over coalitions runs in float64.

Player counts are capped at 20 (2^20 predictions); the exhaustive approach
is the point of this module, not scale.
"""

from __future__ import annotations

import itertools
import json
import time
from dataclasses import dataclass, field
from fractions import Fraction
from math import comb, factorial
from typing import Iterable, Sequence

import numpy as np

from .schema import FeatureSchema, ForecastExample, GroupMask

MAX_PLAYERS = 20

VALID_MODES = ("exact_shap", "owen", "permutation", "custom_masker")

__all__ = [
    "CoalitionTable",
    "CoalitionStructure",
    "Explanation",
    "shap_weight",
    "exact_shap",
    "owen_values",
    "brute_force_shapley",
    "quotient_game",
    "gray_masks",
    "explain",
    "MAX_PLAYERS",
]


def gray_masks(n: int) -> list[int]:
    """All 2^n coalition masks in Gray order: consecutive masks differ by one bit."""
    return [k ^ (k >> 1) for k in range(1 << n)]


class CoalitionTable:
    """Map from coalition mask to the model's prediction vector.

    Masks are stored as integers (bit g = block g present). Values are
    float64 vectors of length ``horizon``.
    """

    def __init__(self, n_groups: int, horizon: int):
        if not 1 <= n_groups <= MAX_PLAYERS:
            raise ValueError(f"n_groups must be in [1, {MAX_PLAYERS}], got {n_groups}")
        self.n_groups = n_groups
        self.horizon = horizon
        self._entries: dict[int, np.ndarray] = {}

    @staticmethod
    def _key(mask: GroupMask | int) -> int:
        return mask.to_int() if isinstance(mask, GroupMask) else int(mask)

    def set(self, mask: GroupMask | int, values: np.ndarray) -> None:
        key = self._key(mask)
        if not 0 <= key < (1 << self.n_groups):
            raise ValueError(f"mask {key} out of range for {self.n_groups} blocks")
        arr = np.asarray(values, dtype=np.float64).reshape(-1)
        if arr.shape != (self.horizon,):
            raise ValueError(f"values must have shape ({self.horizon},), got {arr.shape}")
        self._entries[key] = arr

    def get(self, mask: GroupMask | int) -> np.ndarray:
        return self._entries[self._key(mask)]

    def __contains__(self, mask) -> bool:
        return self._key(mask) in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def is_complete(self) -> bool:
        return len(self._entries) == 1 << self.n_groups

    def require_complete(self) -> None:
        if not self.is_complete:
            raise ValueError(
                f"coalition table holds {len(self._entries)} of "
                f"{1 << self.n_groups} entries")

    def to_matrix(self) -> np.ndarray:
        """Dense (2^n, horizon) float64 matrix indexed by mask integer."""
        self.require_complete()
        out = np.empty((1 << self.n_groups, self.horizon), dtype=np.float64)
        for key, vec in self._entries.items():
            out[key] = vec
        return out

    @classmethod
    def from_function(cls, fn, n_groups: int, horizon: int) -> "CoalitionTable":
        """Fill a complete table by evaluating ``fn(mask_int) -> vector``."""
        table = cls(n_groups, horizon)
        for m in range(1 << n_groups):
            table.set(m, fn(m))
        return table


@dataclass(frozen=True)
class CoalitionStructure:
    """Ordered partition of the N blocks into unions used by Owen values."""

    blocks: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        blocks = tuple(tuple(int(i) for i in b) for b in self.blocks)
        object.__setattr__(self, "blocks", blocks)
        flat = [i for b in blocks for i in b]
        n = len(flat)
        if sorted(flat) != list(range(n)):
            raise ValueError("blocks must partition 0..n-1 exactly")
        if any(len(b) == 0 for b in blocks):
            raise ValueError("blocks must be non-empty")

    @property
    def n_players(self) -> int:
        return sum(len(b) for b in self.blocks)

    @classmethod
    def singletons(cls, n: int) -> "CoalitionStructure":
        return cls(tuple((i,) for i in range(n)))

    @classmethod
    def day_blocks(cls, schema: FeatureSchema) -> "CoalitionStructure":
        """The forecasting default: all day groups in one union, covariates solo."""
        days = tuple(range(schema.day_groups))
        singles = tuple((schema.day_groups + i,) for i in range(schema.n_covariates))
        return cls((days,) + singles)

    def block_mask(self, k: int) -> int:
        v = 0
        for i in self.blocks[k]:
            v |= 1 << i
        return v


@dataclass(eq=False)
class Explanation:
    """Per-block attribution vectors over the forecast horizon.

    ``base_value + attributions.sum(axis=0)`` reconstructs the full-input
    prediction when the method satisfies efficiency.
    """

    base_value: np.ndarray
    attributions: np.ndarray
    group_labels: tuple[str, ...]
    mode: str
    elapsed_ms: float | None = None
    mask_count: int | None = None

    def __post_init__(self):
        self.base_value = np.asarray(self.base_value, dtype=np.float64).reshape(-1)
        self.attributions = np.asarray(self.attributions, dtype=np.float64)
        self.group_labels = tuple(self.group_labels)
        if self.mode not in VALID_MODES:
            raise ValueError(f"mode must be one of {VALID_MODES}, got {self.mode!r}")
        if self.attributions.ndim != 2:
            raise ValueError("attributions must be (n_groups, horizon)")
        if self.attributions.shape != (len(self.group_labels), self.base_value.shape[0]):
            raise ValueError(
                f"attributions shape {self.attributions.shape} does not match "
                f"{len(self.group_labels)} labels and horizon {self.base_value.shape[0]}")

    @property
    def horizon(self) -> int:
        return self.base_value.shape[0]

    @property
    def n_groups(self) -> int:
        return len(self.group_labels)

    def prediction(self) -> np.ndarray:
        return self.base_value + self.attributions.sum(axis=0)

    def group(self, label: str) -> np.ndarray:
        return self.attributions[self.group_labels.index(label)]

    def to_json_dict(self, fingerprint: str | None = None) -> dict:
        d = {
            "base_value": self.base_value.tolist(),
            "groups": [
                {"label": label, "values": self.attributions[i].tolist()}
                for i, label in enumerate(self.group_labels)
            ],
            "mode": self.mode,
            "elapsed_ms": self.elapsed_ms,
            "mask_count": self.mask_count,
        }
        if fingerprint is not None:
            d["fingerprint"] = fingerprint
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "Explanation":
        return cls(
            base_value=np.array(d["base_value"], dtype=np.float64),
            attributions=np.array([g["values"] for g in d["groups"]], dtype=np.float64),
            group_labels=tuple(g["label"] for g in d["groups"]),
            mode=d["mode"],
            elapsed_ms=d.get("elapsed_ms"),
            mask_count=d.get("mask_count"),
        )

    def dumps(self, fingerprint: str | None = None) -> str:
        return json.dumps(self.to_json_dict(fingerprint))

    @classmethod
    def loads(cls, s: str) -> "Explanation":
        return cls.from_json_dict(json.loads(s))


def shap_weight(n: int, s: int) -> float:
    """Shapley coalition weight s!(n-s-1)!/n! as an exactly-rounded float64."""
    if not 1 <= n <= MAX_PLAYERS:
        raise ValueError(f"n must be in [1, {MAX_PLAYERS}]")
    if not 0 <= s <= n - 1:
        raise ValueError(f"coalition size {s} out of range for n={n}")
    return float(Fraction(factorial(s) * factorial(n - 1 - s), factorial(n)))


def _default_labels(n: int) -> tuple[str, ...]:
    return tuple(f"g{i}" for i in range(n))


def exact_shap(table: CoalitionTable,
               labels: Sequence[str] | None = None) -> Explanation:
    """Exact Shapley values from a complete coalition table.

    Every marginal contribution over every subset is summed with the exact
    rational weights, vectorized over the horizon. Base value is the
    empty-coalition prediction.
    """
    table.require_complete()
    n, horizon = table.n_groups, table.horizon
    preds = table.to_matrix()
    all_masks = np.arange(1 << n, dtype=np.int64)
    sizes = np.bitwise_count(all_masks).astype(np.int64)
    weights_by_size = np.array([shap_weight(n, s) for s in range(n)], dtype=np.float64)

    attributions = np.empty((n, horizon), dtype=np.float64)
    for i in range(n):
        without = all_masks[(all_masks >> i) & 1 == 0]
        w = weights_by_size[sizes[without]]
        marginals = preds[without | (1 << i)] - preds[without]
        attributions[i] = w @ marginals
    return Explanation(
        base_value=preds[0].copy(),
        attributions=attributions,
        group_labels=tuple(labels) if labels is not None else _default_labels(n),
        mode="exact_shap",
        mask_count=1 << n,
    )


def owen_values(table: CoalitionTable, structure: CoalitionStructure,
                labels: Sequence[str] | None = None) -> Explanation:
    """Exact Owen values: two-level Shapley respecting a block partition.

    For player i in union B_k, marginals are taken over pairs (R, T) where R
    ranges over subsets of the other unions (joined wholesale) and T over
    subsets of B_k minus i, weighted by
    1/(L*|B_k|) * 1/C(L-1,|R|) * 1/C(|B_k|-1,|T|) with L the union count.
    With singleton unions this reduces to plain Shapley; summed over a union
    it equals the quotient game's Shapley value for that union.
    """
    table.require_complete()
    if structure.n_players != table.n_groups:
        raise ValueError(
            f"structure covers {structure.n_players} players, table has {table.n_groups}")
    n, horizon = table.n_groups, table.horizon
    preds = table.to_matrix()
    L = len(structure.blocks)
    block_masks = [structure.block_mask(k) for k in range(L)]
    attributions = np.zeros((n, horizon), dtype=np.float64)

    for k, block in enumerate(structure.blocks):
        others = [m for j, m in enumerate(block_masks) if j != k]
        b = len(block)
        # every union-subset Q with its exact outer weight
        outer: list[tuple[int, Fraction]] = []
        for r in range(len(others) + 1):
            w_r = Fraction(1, L * comb(L - 1, r))
            for combo in itertools.combinations(others, r):
                q = 0
                for m in combo:
                    q |= m
                outer.append((q, w_r))
        for i in block:
            rest = [j for j in block if j != i]
            inner: list[tuple[int, Fraction]] = []
            for t in range(b):
                w_t = Fraction(1, b * comb(b - 1, t))
                for combo in itertools.combinations(rest, t):
                    tm = 0
                    for j in combo:
                        tm |= 1 << j
                    inner.append((tm, w_t))
            masks_without = []
            weights = []
            for q, w_r in outer:
                for tm, w_t in inner:
                    masks_without.append(q | tm)
                    weights.append(float(w_r * w_t))
            base_masks = np.array(masks_without, dtype=np.int64)
            w = np.array(weights, dtype=np.float64)
            marginals = preds[base_masks | (1 << i)] - preds[base_masks]
            attributions[i] = w @ marginals

    return Explanation(
        base_value=preds[0].copy(),
        attributions=attributions,
        group_labels=tuple(labels) if labels is not None else _default_labels(n),
        mode="owen",
        mask_count=1 << n,
    )


def brute_force_shapley(table: CoalitionTable,
                        labels: Sequence[str] | None = None) -> Explanation:
    """Shapley values by averaging marginals over all n! insertion orders.

    Independent of the weighted-subset formulation, so it serves as an oracle
    for exact_shap. Capped at n <= 8 (40320 permutations).
    """
    table.require_complete()
    n, horizon = table.n_groups, table.horizon
    if n > 8:
        raise ValueError(f"brute force enumerates n! orders; n={n} is too large")
    preds = table.to_matrix()
    perms = np.array(list(itertools.permutations(range(n))), dtype=np.int64)
    bits = (1 << perms).astype(np.int64)
    after = np.bitwise_or.accumulate(bits, axis=1)
    before = np.concatenate(
        [np.zeros((after.shape[0], 1), dtype=np.int64), after[:, :-1]], axis=1)
    marginals = preds[after] - preds[before]
    acc = np.zeros((n, horizon), dtype=np.float64)
    np.add.at(acc, perms.reshape(-1), marginals.reshape(-1, horizon))
    acc /= float(factorial(n))
    return Explanation(
        base_value=preds[0].copy(),
        attributions=acc,
        group_labels=tuple(labels) if labels is not None else _default_labels(n),
        mode="exact_shap",
        mask_count=1 << n,
    )


def quotient_game(table: CoalitionTable, structure: CoalitionStructure) -> CoalitionTable:
    """Collapse a table to the game between whole unions (blocks join or not)."""
    table.require_complete()
    L = len(structure.blocks)
    out = CoalitionTable(L, table.horizon)
    for union_mask in range(1 << L):
        m = 0
        for k in range(L):
            if (union_mask >> k) & 1:
                m |= structure.block_mask(k)
        out.set(union_mask, table.get(m))
    return out


def explain(example: ForecastExample, params,
            structure: CoalitionStructure | None = None,
            chunk: int = 256) -> Explanation:
    """Full exact explanation of one forecast: enumerate all 2^N group masks
    in Gray order, batch them through the masked model, and compute Owen
    values with the day-group union structure (unless another structure is
    given).

    Raises ValueError when the schema has more than MAX_PLAYERS blocks, since
    the enumeration is exhaustive by design.
    """
    from . import model as model_mod

    schema = example.schema
    n = schema.n_groups
    if n > MAX_PLAYERS:
        raise ValueError(
            f"{n} blocks would need 2^{n} model calls; the exact path is "
            f"capped at {MAX_PLAYERS}")
    start = time.perf_counter()
    masks = [GroupMask.from_int(m, n) for m in gray_masks(n)]
    table = model_mod.batched_forward(example, masks, params, chunk=chunk)
    if len(table) != (1 << n):
        raise AssertionError(
            f"expected {1 << n} coalition predictions, got {len(table)}")
    structure = structure if structure is not None else CoalitionStructure.day_blocks(schema)
    result = owen_values(table, structure, labels=schema.group_labels())
    result.elapsed_ms = (time.perf_counter() - start) * 1000.0
    result.mask_count = 1 << n
    return result
