import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reg3dad.bank import (
    MAGIC, MemoryBank, ScoreVector, build_bank, combine_dual, coverage_radius, greedy_coreset,
    load_bank, load_bank_text, object_score, point_scores, reweight_factor, save_bank, save_bank_text,
)
from reg3dad.features import FeatureSet

from .oracles import naive_reweight, optimal_kcenter_radius


def fset(matrix, kind="test", blocks=None):
    matrix = np.asarray(matrix, dtype=float)
    return FeatureSet(matrix, np.arange(len(matrix)), kind, {"blocks": blocks or [matrix.shape[1]]})


class TestCoreset:
    def test_line_example(self):
        x = [[0.0], [1.0], [10.0]]
        assert list(greedy_coreset(x, 2, start=0)) == [0, 2]

    def test_m_equals_n_is_permutation(self, rng):
        x = rng.normal(size=(15, 4))
        assert sorted(greedy_coreset(x, 15)) == list(range(15))

    def test_duplicates_never_reselected(self):
        x = np.zeros((5, 2))
        sel = greedy_coreset(x, 5, start=0)
        assert sorted(sel) == list(range(5))

    def test_deterministic(self, rng):
        x = rng.normal(size=(300, 8))
        assert np.array_equal(greedy_coreset(x, 20, seed=4), greedy_coreset(x, 20, seed=4))

    def test_bad_size(self):
        with pytest.raises(ValueError):
            greedy_coreset(np.zeros((3, 2)), 4)

    @given(st.integers(3, 9), st.integers(1, 3), st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_two_approximation(self, n, m, seed):
        x = np.random.default_rng(seed).normal(size=(n, 2))
        m = min(m, n)
        sel = greedy_coreset(x, m, seed=seed)
        assert coverage_radius(x, sel) <= 2 * optimal_kcenter_radius(x, m) + 1e-9


class TestBuildBank:
    def test_sizes(self, rng):
        sets = [fset(rng.normal(size=(400, 5))) for _ in range(3)]
        assert len(build_bank(sets, 100)) == 100
        assert len(build_bank(sets, 5000)) == 1200
        assert len(build_bank(sets, None)) == 1200

    def test_source_tracks_prototype(self, rng):
        sets = [fset(rng.normal(size=(10, 3))), fset(rng.normal(size=(20, 3)))]
        bank = build_bank(sets, None)
        assert list(np.bincount(bank.source)) == [10, 20]

    def test_block_normalization(self, rng):
        a = np.hstack([rng.normal(size=(50, 3)) * 100, rng.normal(size=(50, 2))])
        bank = build_bank([fset(a, "concat", [3, 2])], None)
        norms = [np.linalg.norm(bank.rows[:, :3], axis=1).mean(), np.linalg.norm(bank.rows[:, 3:], axis=1).mean()]
        assert np.allclose(norms, 1.0)

    def test_zero_block_keeps_unit_scale(self, rng):
        a = np.hstack([rng.normal(size=(20, 3)), np.zeros((20, 2))])
        bank = build_bank([fset(a, "concat", [3, 2])], None)
        assert bank.scales[1] == 1.0

    def test_mismatched_sets(self, rng):
        with pytest.raises(ValueError):
            build_bank([fset(np.zeros((3, 3))), fset(np.zeros((3, 4)))])

    def test_empty(self):
        with pytest.raises(ValueError):
            build_bank([])


class TestReweight:
    def test_equal_distances(self):
        assert reweight_factor(1.0, [1.0, 1.0, 1.0]) == pytest.approx(2 / 3)

    def test_large_distances_stay_finite(self):
        assert np.isfinite(reweight_factor(800.0, [800.0, 801.0, 802.0]))

    def test_in_closed_unit_interval_when_self_included(self, rng):
        d = rng.uniform(0, 50, size=(1000, 3))
        f = reweight_factor(d[:, 0], d)
        assert np.all((f >= 0) & (f <= 1))

    @given(st.lists(st.floats(0, 30), min_size=3, max_size=3), st.floats(0, 30))
    @settings(max_examples=200, deadline=None)
    def test_matches_naive_formula(self, neighbors, d_star):
        got = float(reweight_factor(d_star, neighbors))
        expect = naive_reweight(d_star, neighbors)
        assert abs(got - expect) <= 1e-9 * max(1.0, abs(expect))


def _bank(rng, n=200, dim=4):
    return build_bank([fset(rng.normal(size=(n, dim)))], None, normalize=False)


class TestPointScores:
    def test_no_reweight_is_nn_distance(self, rng):
        bank = _bank(rng)
        q = rng.normal(size=(30, 4))
        _, d = bank.index.knn_batch(q, 1)
        assert np.array_equal(point_scores(bank, q, reweight=False), d[:, 0])

    def test_matches_naive(self, rng):
        bank = _bank(rng)
        q = rng.normal(size=(20, 4))
        got = point_scores(bank, q, b=3)
        for i, row in enumerate(q):
            dists = np.linalg.norm(bank.rows - row, axis=1)
            star = int(np.argmin(dists))
            nb = np.linalg.norm(bank.rows - bank.rows[star], axis=1)
            others = [j for j in np.lexsort((np.arange(len(nb)), nb)) if j != star][:2]
            neigh = [dists[star]] + [dists[j] for j in others]
            expect = naive_reweight(dists[star], neigh) * dists[star]
            assert abs(got[i] - expect) <= 1e-9

    def test_bank_member_scores_zero(self, rng):
        bank = _bank(rng)
        assert np.all(point_scores(bank, bank.rows[:10]) == 0)

    def test_errors(self, rng):
        bank = _bank(rng, n=2)
        with pytest.raises(ValueError):
            point_scores(bank, np.zeros((1, 4)), b=3)
        with pytest.raises(ValueError):
            point_scores(bank, np.zeros((1, 4)), b=1)
        with pytest.raises(ValueError):
            point_scores(bank, np.zeros((1, 5)), b=2)

    def test_permutation_equivariant(self, rng):
        bank = _bank(rng)
        q = rng.normal(size=(40, 4))
        perm = rng.permutation(40)
        assert np.array_equal(point_scores(bank, q)[perm], point_scores(bank, q[perm]))


def test_object_score_is_max():
    assert object_score([0.1, 0.7, 0.3]) == 0.7
    with pytest.raises(ValueError):
        object_score([])


def test_combine_dual():
    out = combine_dual(ScoreVector.from_points([1.0, 3.0]), ScoreVector.from_points([3.0, 1.0]))
    assert np.array_equal(out.scores, [2.0, 2.0]) and out.object_score == 3.0
    with pytest.raises(ValueError):
        combine_dual(ScoreVector.from_points([1.0]), ScoreVector.from_points([1.0, 2.0]))


class TestSerialization:
    def _bank(self, rng):
        a = np.hstack([rng.normal(size=(60, 3)) * 7, rng.normal(size=(60, 2))])
        return build_bank([fset(a, "concat", [3, 2]), fset(a[:20], "concat", [3, 2])], 50, seed=2)

    def test_binary_round_trip(self, tmp_path, rng):
        bank = self._bank(rng)
        save_bank(bank, tmp_path / "b.bin")
        back = load_bank(tmp_path / "b.bin")
        assert np.array_equal(back.rows, bank.rows) and np.array_equal(back.scales, bank.scales)
        assert np.array_equal(back.source, bank.source) and back.blocks == bank.blocks
        assert (tmp_path / "b.bin").read_bytes().startswith(MAGIC)

    def test_text_round_trip(self, tmp_path, rng):
        bank = self._bank(rng)
        save_bank_text(bank, tmp_path / "b.txt")
        back = load_bank_text(tmp_path / "b.txt")
        assert np.array_equal(back.rows, bank.rows) and np.array_equal(back.scales, bank.scales)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"garbage!" + bytes(16))
        with pytest.raises(ValueError):
            load_bank(tmp_path / "x.bin")


def test_memory_bank_validation():
    with pytest.raises(ValueError):
        MemoryBank(np.zeros((0, 3)), "fpfh", [3], [1.0])
    with pytest.raises(ValueError):
        MemoryBank(np.zeros((2, 3)), "fpfh", [2], [1.0])


def test_self_scale_positive(rng):
    assert _bank(rng).self_scale > 0 and math.isfinite(_bank(rng).self_scale)
