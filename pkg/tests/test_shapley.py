"""Coalition-game tests: hand oracles, axioms, Owen reductions, Gray order."""

import itertools
from fractions import Fraction
from math import comb, factorial

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shapcast.schema import GroupMask, synthetic_schema
from shapcast.shapley import (
    CoalitionStructure,
    CoalitionTable,
    Explanation,
    brute_force_shapley,
    exact_shap,
    gray_masks,
    owen_values,
    quotient_game,
    shap_weight,
)


def random_table(n: int, horizon: int, seed: int) -> CoalitionTable:
    rng = np.random.default_rng(seed)
    return CoalitionTable.from_function(
        lambda m: rng.standard_normal(horizon), n, horizon)


def naive_shap(table: CoalitionTable) -> np.ndarray:
    """Direct subset-sum Shapley, written from the definition with Fractions.

    Serves as a second, independent route against the vectorized version.
    """
    n, horizon = table.n_groups, table.horizon
    out = np.zeros((n, horizon), dtype=np.float64)
    players = list(range(n))
    for i in players:
        rest = [p for p in players if p != i]
        for size in range(n):
            w = float(Fraction(factorial(size) * factorial(n - 1 - size), factorial(n)))
            for combo in itertools.combinations(rest, size):
                s = 0
                for p in combo:
                    s |= 1 << p
                out[i] += w * (table.get(s | (1 << i)) - table.get(s))
    return out


class TestShapWeight:
    def test_n3_values(self):
        assert shap_weight(3, 0) == pytest.approx(1 / 3, abs=1e-15)
        assert shap_weight(3, 1) == pytest.approx(1 / 6, abs=1e-15)
        assert shap_weight(3, 2) == pytest.approx(1 / 3, abs=1e-15)

    @pytest.mark.parametrize("n", [1, 2, 5, 13, 14, 20])
    def test_weights_normalize(self, n):
        # Sum over all coalitions S not containing i must be exactly 1:
        # sum_s C(n-1, s) * w(n, s) = 1.
        total = sum(comb(n - 1, s) * Fraction(factorial(s) * factorial(n - 1 - s),
                                              factorial(n)) for s in range(n))
        assert total == 1
        total_f = sum(comb(n - 1, s) * shap_weight(n, s) for s in range(n))
        assert total_f == pytest.approx(1.0, abs=1e-12)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            shap_weight(21, 0)
        with pytest.raises(ValueError):
            shap_weight(3, 3)


class TestExactShap:
    def test_two_player_hand_example(self):
        # f(empty)=0, f({0})=1, f({1})=2, f(both)=4:
        # phi_0 = (1-0)/2 + (4-2)/2 = 1.5, phi_1 = (2-0)/2 + (4-1)/2 = 2.5.
        table = CoalitionTable(2, 1)
        table.set(0b00, [0.0])
        table.set(0b01, [1.0])
        table.set(0b10, [2.0])
        table.set(0b11, [4.0])
        expl = exact_shap(table)
        assert expl.attributions[0, 0] == pytest.approx(1.5, abs=1e-12)
        assert expl.attributions[1, 0] == pytest.approx(2.5, abs=1e-12)
        assert expl.base_value[0] == 0.0

    def test_matches_naive_definition(self):
        for seed in range(5):
            table = random_table(5, 3, seed)
            expl = exact_shap(table)
            np.testing.assert_allclose(expl.attributions, naive_shap(table), atol=1e-9)

    def test_matches_brute_force_permutations(self):
        for seed in range(5):
            table = random_table(4, 168, seed + 50)
            a = exact_shap(table).attributions
            b = brute_force_shapley(table).attributions
            np.testing.assert_allclose(a, b, atol=1e-9)

    def test_efficiency(self):
        table = random_table(6, 12, 7)
        expl = exact_shap(table)
        np.testing.assert_allclose(expl.prediction(), table.get((1 << 6) - 1), atol=1e-9)

    def test_dummy_player(self):
        # Player 2 never changes the value: its attribution must be exactly 0.
        rng = np.random.default_rng(11)
        base = {m: rng.standard_normal(4) for m in range(1 << 2)}

        def fn(m):
            return base[m & 0b11]

        table = CoalitionTable.from_function(fn, 3, 4)
        expl = exact_shap(table)
        np.testing.assert_allclose(expl.attributions[2], 0.0, atol=1e-12)

    def test_symmetric_players(self):
        # Value depends only on coalition size, so all players are
        # interchangeable and must receive identical attributions.
        rng = np.random.default_rng(12)
        by_size = rng.standard_normal((6, 3))

        def fn(m):
            return by_size[bin(m).count("1")]

        table = CoalitionTable.from_function(fn, 5, 3)
        expl = exact_shap(table)
        for i in range(1, 5):
            np.testing.assert_allclose(expl.attributions[i], expl.attributions[0],
                                       atol=1e-12)

    def test_additivity(self):
        t1 = random_table(4, 5, 21)
        t2 = random_table(4, 5, 22)
        t_sum = CoalitionTable.from_function(
            lambda m: t1.get(m) + t2.get(m), 4, 5)
        a = exact_shap(t1).attributions + exact_shap(t2).attributions
        b = exact_shap(t_sum).attributions
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_incomplete_table_rejected(self):
        table = CoalitionTable(3, 2)
        table.set(0, [0.0, 0.0])
        with pytest.raises(ValueError, match="8"):
            exact_shap(table)

    @given(st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_axioms_property(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 7))
        table = random_table(n, 3, seed)
        expl = exact_shap(table)
        np.testing.assert_allclose(expl.prediction(), table.get((1 << n) - 1), atol=1e-9)
        np.testing.assert_allclose(expl.base_value, table.get(0), atol=1e-12)


class TestOwen:
    def test_singleton_blocks_reduce_to_shapley(self):
        for seed in range(5):
            n = 5
            table = random_table(n, 4, seed + 100)
            ow = owen_values(table, CoalitionStructure.singletons(n))
            sh = exact_shap(table)
            np.testing.assert_allclose(ow.attributions, sh.attributions, atol=1e-9)

    def test_block_sums_equal_quotient_shapley(self):
        for seed in range(5):
            table = random_table(6, 3, seed + 200)
            structure = CoalitionStructure(((0, 1, 2), (3,), (4, 5)))
            ow = owen_values(table, structure)
            quot = exact_shap(quotient_game(table, structure))
            for k, block in enumerate(structure.blocks):
                np.testing.assert_allclose(
                    ow.attributions[list(block)].sum(axis=0),
                    quot.attributions[k], atol=1e-9)

    def test_efficiency(self):
        table = random_table(6, 5, 301)
        structure = CoalitionStructure(((0, 1), (2, 3, 4), (5,)))
        ow = owen_values(table, structure)
        np.testing.assert_allclose(ow.prediction(), table.get((1 << 6) - 1), atol=1e-9)

    def test_matches_definition_small(self):
        # Direct Eq-style double sum for a 3-player game with blocks {0,1},{2}.
        table = random_table(3, 2, 302)
        structure = CoalitionStructure(((0, 1), (2,)))
        ow = owen_values(table, structure)
        # player 0: R in {[], [{2}]}, T in {[], [{1}]}; L=2, |B|=2
        p = table.to_matrix()
        expected = np.zeros(2)
        for r_mask, wr in [(0, Fraction(1, 2)), (0b100, Fraction(1, 2))]:
            for t_mask, wt in [(0, Fraction(1, 2)), (0b010, Fraction(1, 2))]:
                w = float(wr * wt) / 1.0
                expected += w * (p[r_mask | t_mask | 1] - p[r_mask | t_mask])
        # normalization 1/(L*|B_k|) is folded into wr, wt above via 1/2 each
        np.testing.assert_allclose(ow.attributions[0], expected, atol=1e-12)

    def test_structure_partition_enforced(self):
        with pytest.raises(ValueError):
            CoalitionStructure(((0, 1), (1, 2)))
        with pytest.raises(ValueError):
            CoalitionStructure(((0,), (2,)))

    def test_day_blocks_structure(self):
        s = synthetic_schema()
        st_ = CoalitionStructure.day_blocks(s)
        assert st_.blocks[0] == tuple(range(7))
        assert len(st_.blocks) == 1 + 7
        assert st_.n_players == 14


class TestBruteForce:
    def test_rejects_large_n(self):
        with pytest.raises(ValueError):
            brute_force_shapley(random_table(9, 1, 0))

    def test_matches_exact_on_random_tables(self):
        for seed in range(3):
            table = random_table(5, 7, seed + 400)
            np.testing.assert_allclose(
                brute_force_shapley(table).attributions,
                exact_shap(table).attributions, atol=1e-9)


class TestGrayOrder:
    def test_covers_all_masks(self):
        for n in [1, 4, 10]:
            ms = gray_masks(n)
            assert sorted(ms) == list(range(1 << n))

    def test_single_bit_steps(self):
        ms = gray_masks(6)
        for a, b in zip(ms[:-1], ms[1:]):
            assert bin(a ^ b).count("1") == 1


class TestExplanationSerialization:
    def test_json_roundtrip(self):
        expl = Explanation(
            base_value=np.arange(4, dtype=np.float64),
            attributions=np.ones((3, 4)),
            group_labels=("a", "b", "c"),
            mode="owen",
            elapsed_ms=12.5,
            mask_count=8,
        )
        again = Explanation.loads(expl.dumps(fingerprint="deadbeef"))
        np.testing.assert_array_equal(again.base_value, expl.base_value)
        np.testing.assert_array_equal(again.attributions, expl.attributions)
        assert again.group_labels == expl.group_labels
        assert again.mode == "owen"
        assert again.mask_count == 8

    def test_invalid_mode_rejected(self):
        with pytest.raises(ValueError, match="mode"):
            Explanation(np.zeros(2), np.zeros((1, 2)), ("a",), mode="magic")

    def test_group_lookup(self):
        expl = Explanation(np.zeros(2), np.array([[1.0, 2.0], [3.0, 4.0]]),
                           ("x", "y"), mode="exact_shap")
        np.testing.assert_array_equal(expl.group("y"), [3.0, 4.0])


class TestCoalitionTable:
    def test_group_mask_keys(self):
        table = CoalitionTable(3, 2)
        table.set(GroupMask.from_int(5, 3), [1.0, 2.0])
        assert 5 in table
        np.testing.assert_array_equal(table.get(5), [1.0, 2.0])

    def test_bad_shape_rejected(self):
        table = CoalitionTable(3, 2)
        with pytest.raises(ValueError):
            table.set(0, [1.0, 2.0, 3.0])

    def test_mask_out_of_range(self):
        table = CoalitionTable(3, 1)
        with pytest.raises(ValueError):
            table.set(8, [0.0])
