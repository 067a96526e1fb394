import numpy as np
import pytest

from fedsim.core import (
    DimensionMismatch,
    FederationConfig,
    ConfigError,
    NonFiniteError,
    ParamVector,
    l2_distance,
    uniform_average,
    weighted_combination,
)


def pv(*vals):
    return ParamVector(np.array(vals, dtype=float))


class TestParamVector:
    def test_rejects_non_finite(self):
        with pytest.raises(NonFiniteError):
            ParamVector(np.array([1.0, np.nan]))
        with pytest.raises(NonFiniteError):
            ParamVector(np.array([np.inf, 0.0]))

    def test_rejects_non_1d(self):
        with pytest.raises(DimensionMismatch):
            ParamVector(np.zeros((2, 2)))

    def test_immutable(self):
        v = pv(1.0, 2.0)
        with pytest.raises(ValueError):
            v.values[0] = 3.0


class TestWeightedCombination:
    def test_zero_weights_return_base(self):
        base = pv(1.0, -2.0, 3.0)
        out = weighted_combination(base, [pv(9.0, 9.0, 9.0)], [0.0])
        assert np.array_equal(out.values, base.values)

    def test_one_hot_is_bit_exact(self):
        rng = np.random.default_rng(0)
        models = [ParamVector(1e12 * rng.standard_normal(5)) for _ in range(3)]
        base = ParamVector(rng.standard_normal(5))
        for k in range(3):
            w = np.zeros(3)
            w[k] = 1.0
            out = weighted_combination(base, models, w)
            assert out.values.tobytes() == models[k].values.tobytes()

    def test_symmetric_average(self):
        out = weighted_combination(pv(0.0, 0.0), [pv(1.0, 0.0), pv(0.0, 1.0)], [0.5, 0.5])
        assert np.allclose(out.values, [0.5, 0.5], atol=0, rtol=0)

    def test_affine_in_weights(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            base = ParamVector(rng.standard_normal(4))
            models = [ParamVector(rng.standard_normal(4)) for _ in range(3)]
            w1 = rng.dirichlet(np.ones(3))
            w2 = rng.dirichlet(np.ones(3))
            mid = weighted_combination(base, models, (w1 + w2) / 2.0)
            a = weighted_combination(base, models, w1)
            b = weighted_combination(base, models, w2)
            assert np.allclose(mid.values, (a.values + b.values) / 2.0, atol=1e-12)

    def test_rejects_bad_weights(self):
        base = pv(0.0)
        with pytest.raises(ValueError):
            weighted_combination(base, [pv(1.0)], [0.5])  # sums to 0.5
        with pytest.raises(ValueError):
            weighted_combination(base, [pv(1.0), pv(2.0)], [-0.5, 1.5])
        with pytest.raises(DimensionMismatch):
            weighted_combination(base, [pv(1.0, 2.0)], [1.0])
        with pytest.raises(NonFiniteError):
            weighted_combination(base, [pv(1.0)], [np.nan])

    def test_weight_sum_tolerance(self):
        out = weighted_combination(pv(0.0), [pv(2.0), pv(4.0)], [0.5, 0.5 + 5e-10])
        assert np.isfinite(out.values).all()


class TestL2Distance:
    def test_identical_is_zero(self):
        a = pv(1.0, 2.0, 3.0)
        assert l2_distance(a, a) == 0.0

    def test_3_4_5(self):
        assert l2_distance(pv(3.0, 0.0), pv(0.0, 4.0)) == 5.0

    def test_matches_sum_of_squares(self, rng):
        for _ in range(50):
            a = rng.standard_normal(8)
            b = rng.standard_normal(8)
            direct = np.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))
            assert abs(l2_distance(ParamVector(a), ParamVector(b)) - direct) < 1e-12

    def test_symmetry_and_triangle(self, rng):
        for _ in range(100):
            a, b, c = (ParamVector(rng.standard_normal(5)) for _ in range(3))
            assert abs(l2_distance(a, b) - l2_distance(b, a)) <= 1e-9
            assert l2_distance(a, c) <= l2_distance(a, b) + l2_distance(b, c) + 1e-9

    def test_dim_mismatch(self):
        with pytest.raises(DimensionMismatch):
            l2_distance(pv(1.0), pv(1.0, 2.0))


class TestUniformAverage:
    def test_single_model(self):
        m = pv(1.0, 2.0)
        assert np.array_equal(uniform_average([m]).values, m.values)

    def test_pairwise(self):
        out = uniform_average([pv(2.0, 2.0), pv(0.0, 0.0)])
        assert np.array_equal(out.values, [1.0, 1.0])

    def test_idempotent_on_copies(self):
        v = pv(0.3, -0.7, 1.1)
        out = uniform_average([v] * 5)
        assert np.allclose(out.values, v.values, atol=0, rtol=0)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            uniform_average([])


class TestFederationConfig:
    def test_valid(self):
        FederationConfig(total_clients=15, active_per_round=15, downloads_per_client=5, seed=0)

    @pytest.mark.parametrize(
        "overrides",
        [
            {"active_per_round": 0},
            {"active_per_round": 16},
            {"downloads_per_client": 15},
            {"downloads_per_client": -1},
            {"epsilon": 1.5},
            {"val_fraction": 0.0},
            {"lr": 0.0},
            {"momentum": 1.0},
            {"strategy": "bogus"},
        ],
    )
    def test_invalid(self, overrides):
        base = dict(total_clients=15, active_per_round=15, downloads_per_client=5, seed=0)
        base.update(overrides)
        with pytest.raises(ConfigError):
            FederationConfig(**base)
