from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

import oracles
from shortmr.rankstats import (
    average_ranks, mean_rank_vector, permutation_test, rank_report, rank_vector, regional_means,
    spearman, top_shared_regions,
)
from shortmr.volume import Atlas

distinct = st.lists(st.floats(-50, 50, allow_nan=False), min_size=3, max_size=12, unique=True)
tied = st.lists(st.integers(0, 3), min_size=3, max_size=12)


def block_atlas():
    labels = np.zeros((2, 2, 2), dtype=int)
    labels.reshape(-1)[:4] = 1
    labels.reshape(-1)[4:] = 2
    return Atlas(labels, 2)


class TestRegionalMeans:
    def test_hand_sum(self):
        attr = np.zeros((2, 2, 2))
        attr.reshape(-1)[:4] = 1.0
        assert regional_means(attr, block_atlas()).tolist() == [1.0, 0.0]

    @pytest.mark.parametrize("value", [0.0, 1.0])
    def test_uniform(self, value):
        out = regional_means(np.full((2, 2, 2), value), block_atlas())
        assert out.tolist() == [value, value]

    def test_background_excluded(self):
        labels = np.array([[[0, 1, 2, 0]]])
        out = regional_means(np.array([[[100.0, 1.0, 2.0, 100.0]]]), Atlas(labels, 2))
        assert out.tolist() == [1.0, 2.0]

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            regional_means(np.zeros((2, 2, 3)), block_atlas())

    def test_matches_oracle(self, rng):
        labels = rng.integers(0, 6, size=(5, 6, 7))
        labels.reshape(-1)[:6] = np.arange(6)
        atlas = Atlas(labels, 5)
        attr = rng.random((5, 6, 7))
        np.testing.assert_allclose(
            regional_means(attr, atlas), oracles.regional_means(attr, labels, 5), rtol=0, atol=1e-12
        )

    @given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31))
    def test_linear(self, a, b, seed):
        r = np.random.default_rng(seed)
        atlas = Atlas(np.array([[[1, 2], [3, 1]], [[2, 3], [1, 1]]]), 3)
        l1 = r.integers(0, 10, size=(2, 2, 2)).astype(float)
        l2 = r.integers(0, 10, size=(2, 2, 2)).astype(float)
        lhs = regional_means(a * l1 + b * l2, atlas)
        rhs = a * regional_means(l1, atlas) + b * regional_means(l2, atlas)
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)


class TestRanks:
    def test_strict_order(self):
        assert rank_vector([0.9, 0.1, 0.5]).tolist() == [1.0, 3.0, 2.0]

    def test_pair_tie(self):
        assert rank_vector([0.5, 0.5]).tolist() == [1.5, 1.5]

    def test_inner_tie(self):
        assert rank_vector([3, 1, 1, 0]).tolist() == [1.0, 2.5, 2.5, 4.0]

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            rank_vector([1.0, np.nan, 2.0])

    def test_rows_ranked_independently(self):
        rows = np.array([[1, 2, 3], [3, 3, 1]])
        assert average_ranks(rows).tolist() == [[1.0, 2.0, 3.0], [2.5, 2.5, 1.0]]

    @given(tied)
    def test_matches_oracle_and_sum(self, values):
        r = rank_vector(values)
        assert r.tolist() == oracles.descending_ranks(values)
        n = len(values)
        assert r.sum() == n * (n + 1) / 2
        assert r.min() >= 1 and r.max() <= n

    @given(distinct, st.floats(0.1, 10), st.floats(-10, 10))
    def test_invariant_under_increasing_maps(self, values, slope, shift):
        v = np.asarray(values)
        base = rank_vector(v)
        assert np.array_equal(rank_vector(slope * v + shift), base) or _has_close_pair(slope * v + shift)
        assert np.array_equal(rank_vector(np.exp(v / 10)), base) or _has_close_pair(np.exp(v / 10))


def _has_close_pair(v):
    # floating point can merge values that were distinct before the map
    s = np.sort(v)
    return bool(np.any(np.diff(s) == 0))


class TestMeanRankVector:
    def test_single_sample(self, rng):
        atlas = Atlas(np.array([[[1, 2, 3, 3]]]), 3)
        a = rng.random((1, 1, 4))
        assert np.array_equal(mean_rank_vector([a], atlas), rank_vector(regional_means(a, atlas)))

    def test_opposite_orders(self):
        atlas = Atlas(np.array([[[1, 2]]]), 2)
        out = mean_rank_vector([np.array([[[1.0, 0.0]]]), np.array([[[0.0, 1.0]]])], atlas)
        assert out.tolist() == [1.5, 1.5]

    def test_identical_samples(self, rng):
        atlas = Atlas(np.array([[[1, 2, 3, 1]]]), 3)
        a = rng.random((1, 1, 4))
        assert np.array_equal(mean_rank_vector([a] * 5, atlas), mean_rank_vector([a], atlas))

    def test_empty(self):
        with pytest.raises(ValueError):
            mean_rank_vector([], block_atlas())

    @given(st.integers(0, 2**31), st.integers(1, 6))
    def test_bounds(self, seed, n):
        r = np.random.default_rng(seed)
        atlas = Atlas(np.array([[[1, 2], [3, 4]], [[4, 3], [2, 1]]]), 4)
        out = mean_rank_vector([r.integers(0, 3, (2, 2, 2)).astype(float) for _ in range(n)], atlas)
        assert np.all(out >= 1) and np.all(out <= 4)


class TestSpearman:
    def test_identity(self):
        assert spearman([1, 2, 3], [1, 2, 3]).rho == 1.0

    def test_reversal(self):
        assert spearman([1, 2, 3], [3, 2, 1]).rho == -1.0

    def test_five_element_example(self):
        c = spearman([1, 2, 3, 4, 5], [2, 1, 4, 3, 5])
        assert c.rho == pytest.approx(0.8, abs=1e-15)
        # frozen from the t approximation with 3 degrees of freedom
        assert c.p_param == pytest.approx(0.10408803866182788, rel=1e-12)

    def test_constant_is_undefined(self):
        c = spearman([1, 1, 1, 1], [1, 2, 3, 4])
        assert c.rho is None and c.p_param is None and not c.defined

    def test_too_short(self):
        with pytest.raises(ValueError):
            spearman([1, 2], [2, 1])

    def test_agrees_with_scipy(self, rng):
        x, y = rng.integers(0, 5, 15), rng.integers(0, 5, 15)
        ref = stats.spearmanr(x, y)
        c = spearman(x, y)
        assert c.rho == pytest.approx(ref.statistic, abs=1e-12)
        assert c.p_param == pytest.approx(ref.pvalue, rel=1e-9)

    @given(tied, st.data())
    def test_matches_oracle(self, x, data):
        y = data.draw(st.lists(st.integers(0, 3), min_size=len(x), max_size=len(x)))
        c, ref = spearman(x, y), oracles.spearman_rho(x, y)
        if ref is None:
            assert c.rho is None
        else:
            assert abs(c.rho - ref) <= 1e-12
            assert -1.0 <= c.rho <= 1.0

    @given(distinct, st.data())
    def test_equals_spearman_of_ranks(self, x, data):
        y = data.draw(st.lists(st.integers(-5, 5), min_size=len(x), max_size=len(x)))
        direct = spearman(x, y)
        ranked = spearman(rank_vector(x), rank_vector(y))
        assert direct.rho == ranked.rho


class TestPermutation:
    def test_degenerate(self):
        r = np.arange(1.0, 9.0)
        res = permutation_test(r, r, r, 99, rng=0)
        assert res.p_perm == 1.0 and res.degenerate

    def test_perfect_dependence_is_significant(self, rng):
        r_ba = rng.permutation(20) + 1.0
        r_bi = rng.permutation(20) + 1.0
        res = permutation_test(r_ba, r_bi, r_bi, 999, rng=1)
        assert res.rho_obs == pytest.approx(1.0)
        assert res.p_perm <= 0.05

    def test_needs_enough_permutations(self):
        with pytest.raises(ValueError):
            permutation_test([1, 2, 3], [3, 2, 1], [1, 3, 2], 50)

    def test_seeded(self):
        a, b, c = np.array([1.0, 2, 3, 4, 5]), np.array([2.0, 1, 4, 3, 5]), np.array([5.0, 4, 3, 1, 2])
        assert permutation_test(a, b, c, 199, rng=7).p_perm == permutation_test(a, b, c, 199, rng=7).p_perm

    @pytest.mark.parametrize("null", ["rank", "label"])
    def test_uniform_under_null(self, null):
        r = np.random.default_rng(99)
        ps = []
        for _ in range(200):
            r_ba, r_bi, r_pa = (r.permutation(20) + 1.0 for _ in range(3))
            ps.append(permutation_test(r_ba, r_bi, r_pa, 199, rng=r, null=null).p_perm)
        assert stats.kstest(ps, "uniform").pvalue > 0.01

    @given(st.integers(0, 2**31), st.integers(4, 10))
    def test_p_range(self, seed, n):
        r = np.random.default_rng(seed)
        m = 99
        res = permutation_test(*(r.permutation(n) + 1.0 for _ in range(3)), m, rng=r)
        assert 1 / (m + 1) <= res.p_perm <= 1.0


class TestTopShared:
    def test_all_tied(self):
        assert top_shared_regions(np.zeros(6), np.zeros(6), 3) == [1, 2, 3]

    def test_sorting(self):
        assert top_shared_regions([-3, 0, -1], [0, 0, 0], 2) == [1, 3]

    def test_full_list(self):
        assert top_shared_regions([2, -1, 0, -1], [0, 0, 0, -1], 4) == [4, 2, 3, 1]

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            top_shared_regions([0, 0], [0, 0], 3)

    @given(st.lists(st.integers(-4, 4), min_size=1, max_size=10), st.data())
    def test_matches_oracle(self, b, data):
        p = data.draw(st.lists(st.integers(-4, 4), min_size=len(b), max_size=len(b)))
        k = data.draw(st.integers(0, len(b)))
        assert top_shared_regions(b, p, k) == oracles.top_shared_regions(b, p, k)


def test_rank_report_identities(rng):
    r_ba, r_bi, r_pa = (rng.permutation(8) + 1.0 for _ in range(3))
    rep = rank_report(r_ba, r_bi, r_pa, 99, rng=0, k=3)
    assert np.array_equal(rep.b, r_bi - r_ba) and np.array_equal(rep.p, r_pa - r_ba)
    assert rep.top_regions == top_shared_regions(rep.b, rep.p, 3)
    d = rep.to_dict()
    assert d["region_names"][0] == "region_01"
    again = type(rep).from_dict(d)
    assert np.array_equal(again.b, rep.b) and again.rho == rep.rho
