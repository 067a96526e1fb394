from itertools import combinations

import numpy as np
import pytest
from scipy import stats

from fedsim.core import ParamVector, uniform_average
from fedsim.fomo import (
    CandidateModel,
    apply_fomo_update,
    fomo_model_average_raw,
    fomo_model_average_weights,
    fomo_raw_weights,
    initial_affinity,
    normalize_weights,
    select_downloads,
    update_affinity,
)
from tests.quadratic import make_instance, simplex_grid_best


def cand(owner, values, loss):
    return CandidateModel(owner=owner, params=ParamVector(np.asarray(values, float)), val_loss=loss)


class TestRawWeights:
    def test_direct_substitution(self):
        base = ParamVector(np.zeros(2))
        c = cand(1, [2.0, 0.0], 0.5)  # distance 2, improvement 0.5
        raw = fomo_raw_weights(base, 1.0, [c])
        assert abs(raw[0] - 0.25) < 1e-12

    def test_equal_loss_gives_zero(self):
        base = ParamVector(np.zeros(2))
        raw = fomo_raw_weights(base, 1.0, [cand(1, [1.0, 1.0], 1.0)])
        assert raw[0] == 0.0

    def test_worse_candidate_negative(self):
        base = ParamVector(np.zeros(2))
        raw = fomo_raw_weights(base, 1.0, [cand(1, [1.0, 0.0], 1.5)])
        assert abs(raw[0] - (-0.5)) < 1e-12

    def test_distance_floor_keeps_finite(self):
        base = ParamVector(np.zeros(2))
        raw = fomo_raw_weights(base, 1.0, [cand(1, [0.0, 0.0], 0.5)])
        assert np.isfinite(raw[0])
        assert raw[0] == 0.5 / 1e-8

    def test_sign_law_randomized(self, rng):
        for _ in range(1000):
            base = ParamVector(rng.standard_normal(3))
            base_loss = float(rng.uniform(0.1, 3.0))
            cands = [
                cand(k, rng.standard_normal(3), float(rng.uniform(0.05, 3.0))) for k in range(4)
            ]
            raw = fomo_raw_weights(base, base_loss, cands)
            wv = normalize_weights(raw)
            for k, c in enumerate(cands):
                assert np.sign(raw[k]) == np.sign(base_loss - c.val_loss)
                if wv.normalized[k] > 0:
                    assert raw[k] > 0

    def test_loss_scale_invariance(self, rng):
        for _ in range(200):
            base = ParamVector(rng.standard_normal(3))
            base_loss = float(rng.uniform(0.1, 3.0))
            cands = [cand(k, rng.standard_normal(3), float(rng.uniform(0.05, 3.0))) for k in range(3)]
            scale = float(rng.uniform(0.1, 10.0))
            scaled = [cand(c.owner, c.params.values, c.val_loss * scale) for c in cands]
            w1 = normalize_weights(fomo_raw_weights(base, base_loss, cands))
            w2 = normalize_weights(fomo_raw_weights(base, base_loss * scale, scaled))
            assert np.allclose(w1.normalized, w2.normalized, atol=1e-12)
            assert np.allclose(w2.raw, scale * w1.raw, rtol=1e-12)

    def test_parameter_scale_covariance(self, rng):
        for _ in range(200):
            base_vals = rng.standard_normal(3)
            base_loss = float(rng.uniform(0.1, 3.0))
            cands = [cand(k, rng.standard_normal(3), float(rng.uniform(0.05, 3.0))) for k in range(3)]
            scale = float(rng.uniform(0.5, 10.0))
            scaled = [cand(c.owner, scale * c.params.values, c.val_loss) for c in cands]
            w1 = normalize_weights(fomo_raw_weights(ParamVector(base_vals), base_loss, cands))
            w2 = normalize_weights(
                fomo_raw_weights(ParamVector(scale * base_vals), base_loss, scaled)
            )
            assert np.allclose(w2.raw, w1.raw / scale, rtol=1e-9)
            assert np.allclose(w1.normalized, w2.normalized, atol=1e-9)


class TestNormalizeWeights:
    def test_single_positive(self):
        wv = normalize_weights(np.array([0.25, -0.5]))
        assert np.array_equal(wv.normalized, [1.0, 0.0])

    def test_proportional(self):
        wv = normalize_weights(np.array([1.0, 3.0]))
        assert np.allclose(wv.normalized, [0.25, 0.75], atol=1e-15)
        assert abs(wv.normalized.sum() - 1.0) <= 1e-9

    def test_all_nonpositive_gives_zeros(self):
        wv = normalize_weights(np.array([-1.0, 0.0, -0.2]))
        assert np.array_equal(wv.normalized, [0.0, 0.0, 0.0])
        assert wv.is_zero


class TestApplyUpdate:
    def test_zero_weights_early_stop(self):
        base = ParamVector(np.array([1.0, 2.0]))
        cands = [cand(0, [5.0, 5.0], 2.0)]
        out = apply_fomo_update(base, cands, normalize_weights(np.array([-1.0])))
        assert out.values.tobytes() == base.values.tobytes()

    def test_one_hot_adopts_candidate(self):
        base = ParamVector(np.array([1.0, 2.0]))
        cands = [cand(0, [5.0, 5.0], 2.0), cand(1, [7.0, -1.0], 0.1)]
        out = apply_fomo_update(base, cands, normalize_weights(np.array([-0.3, 0.8])))
        assert out.values.tobytes() == cands[1].params.values.tobytes()

    def test_two_candidate_hand_expansion(self):
        # base + 0.5*(a-base) + 0.5*(b-base) on 2-dim vectors
        base = ParamVector(np.array([1.0, -1.0]))
        a = np.array([3.0, 1.0])
        b = np.array([-1.0, 5.0])
        cands = [cand(0, a, 0.5), cand(1, b, 0.5)]
        wv = normalize_weights(fomo_raw_weights(base, 1.0, cands))
        out = apply_fomo_update(base, cands, wv)
        expected = base.values + wv.normalized[0] * (a - base.values) + wv.normalized[1] * (
            b - base.values
        )
        assert np.allclose(out.values, expected, atol=1e-12)


class TestModelAverageVariant:
    def test_identical_models_score_zero(self):
        models = [ParamVector(np.array([1.0, 2.0]))] * 3
        loss_fn = lambda p: float((p.values**2).sum())
        for n in range(3):
            assert fomo_model_average_weights(loss_fn, models, n) == 0.0

    def test_two_model_identity(self):
        m0 = ParamVector(np.array([2.0, 0.0]))
        m1 = ParamVector(np.array([0.0, 2.0]))
        loss_fn = lambda p: float((p.values**2).sum())
        w0 = fomo_model_average_weights(loss_fn, [m0, m1], 0)
        assert abs(w0 - (loss_fn(m1) - loss_fn(uniform_average([m0, m1])))) < 1e-12

    def test_minimizer_gets_largest_weight(self):
        target = np.array([1.0, -2.0])
        loss_fn = lambda p: float(((p.values - target) ** 2).sum())
        models = [
            ParamVector(target),  # at the minimizer
            ParamVector(target + np.array([3.0, 0.0])),
            ParamVector(target + np.array([0.0, -4.0])),
        ]
        raw = fomo_model_average_raw(loss_fn, models)
        assert int(np.argmax(raw)) == 0

    def test_requires_two_models(self):
        with pytest.raises(ValueError):
            fomo_model_average_weights(lambda p: 0.0, [ParamVector(np.zeros(2))], 0)


class TestUpdateAffinity:
    def test_zero_raw_no_change(self):
        row = np.array([0.0, 1.0, 0.5])
        out = update_affinity(row, [cand(1, [0.0], 1.0)], np.array([0.0]))
        assert np.array_equal(out, row)

    def test_single_candidate_self_normalizes(self):
        row = np.zeros(3)
        out = update_affinity(row, [cand(2, [0.0], 1.0)], np.array([0.5]))
        assert out[2] == 1.0

    def test_negative_decreases_owner(self):
        row = np.zeros(3)
        out = update_affinity(row, [cand(0, [0.0], 1.0), cand(2, [0.0], 1.0)], np.array([-0.5, 1.5]))
        assert out[0] < 0.0 < out[2]
        assert abs(np.abs(out).sum() - 1.0) < 1e-12  # increments bounded by total magnitude

    def test_non_candidates_untouched(self):
        row = np.array([0.3, 0.6, 0.9])
        out = update_affinity(row, [cand(1, [0.0], 1.0)], np.array([2.0]))
        assert out[0] == row[0] and out[2] == row[2]


class TestSelectDownloads:
    def test_greedy_top_m_with_ties_by_id(self):
        row = np.array([0.0, 3.0, 5.0, 5.0, 1.0, 2.0])
        plan = select_downloads(row, 0, range(6), 3, 0.0, np.random.default_rng(0))
        assert plan.chosen == (2, 3, 1)
        assert plan.explored == (False, False, False)

    def test_never_includes_requester_or_duplicates(self, rng):
        row = np.zeros(8)
        for _ in range(50):
            plan = select_downloads(row, 3, range(8), 5, 0.7, rng)
            assert 3 not in plan.chosen
            assert len(set(plan.chosen)) == len(plan.chosen)

    def test_exhausts_available(self):
        row = np.zeros(4)
        plan = select_downloads(row, 1, [0, 1, 2], 10, 0.0, np.random.default_rng(0))
        assert sorted(plan.chosen) == [0, 2]

    def test_epsilon_one_is_uniform_over_subsets(self):
        row = np.array([0.0, 5.0, 1.0, 3.0, 2.0, 4.0])  # affinities must not matter
        rng = np.random.default_rng(11)
        counts: dict[tuple, int] = {}
        draws = 10000
        for _ in range(draws):
            plan = select_downloads(row, 0, range(6), 2, 1.0, rng)
            key = tuple(sorted(plan.chosen))
            counts[key] = counts.get(key, 0) + 1
        cells = [counts.get(tuple(sorted(c)), 0) for c in combinations(range(1, 6), 2)]
        _, p = stats.chisquare(cells)
        assert p > 0.01

    def test_deterministic_given_seed(self):
        row = np.arange(6, dtype=float)
        a = select_downloads(row, 0, range(6), 3, 0.5, np.random.default_rng(42))
        b = select_downloads(row, 0, range(6), 3, 0.5, np.random.default_rng(42))
        assert a == b


class TestInitialAffinity:
    def test_identity(self):
        p = initial_affinity(4)
        assert np.array_equal(p, np.eye(4))


class TestQuadraticOracles:
    """Independent convex-quadratic oracles for the first-order scores."""

    def test_first_order_sign_fidelity(self):
        rng = np.random.default_rng(321)
        hits = total = 0
        for _ in range(500):
            loss, base, cands = make_instance(rng, n_candidates=3)
            base_pv = ParamVector(base)
            models = [cand(k, c, loss(c)) for k, c in enumerate(cands)]
            raw = fomo_raw_weights(base_pv, loss(base), models)
            for k, c in enumerate(cands):
                improvement = loss(base) - loss(base + 0.1 * (c - base))
                hits += np.sign(raw[k]) == np.sign(improvement)
                total += 1
        assert hits / total >= 0.95

    def test_dominates_uniform_average(self):
        rng = np.random.default_rng(321)
        wins = 0
        for _ in range(500):
            loss, base, cands = make_instance(rng, n_candidates=3)
            base_pv = ParamVector(base)
            models = [cand(k, c, loss(c)) for k, c in enumerate(cands)]
            wv = normalize_weights(fomo_raw_weights(base_pv, loss(base), models))
            updated = apply_fomo_update(base_pv, models, wv)
            unif = uniform_average([m.params for m in models])
            wins += loss(updated.values) <= loss(unif.values)
        assert wins / 500 >= 0.80

    def test_near_optimal_against_grid_search(self):
        rng = np.random.default_rng(321)
        hits = 0
        for _ in range(200):
            loss, base, cands = make_instance(rng, n_candidates=2)
            base_pv = ParamVector(base)
            models = [cand(k, c, loss(c)) for k, c in enumerate(cands)]
            wv = normalize_weights(fomo_raw_weights(base_pv, loss(base), models))
            updated = apply_fomo_update(base_pv, models, wv)
            best = simplex_grid_best(loss, base, cands)
            hits += loss(updated.values) <= 1.1 * best
        assert hits / 200 >= 0.70
