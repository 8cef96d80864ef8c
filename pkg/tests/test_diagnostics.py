import math

import numpy as np
import pytest

from gevsar.diagnostics import (
    BiasCorrector,
    SmoothingSpline1D,
    are,
    empirical_madogram,
    fit_bias_corrector,
    median_iqr_standardize,
    qq_data,
    quantile_map,
    stack_madogram,
)
from gevsar.errors import DegenerateFieldError, DomainError
from gevsar.lattice import FieldStack
from gevsar.rng import substream


class TestMadogram:
    def test_constant_field_all_zero(self):
        curve = empirical_madogram(np.full((5, 5), 3.7), max_h=3.0)
        assert np.all(curve.values == 0.0)
        assert np.all(curve.pair_counts > 0)

    def test_checkerboard_enumeration(self):
        field = np.array([[0.0, 1.0], [1.0, 0.0]])
        curve = empirical_madogram(field, max_h=2.0)
        # 4 axis pairs at distance 1 (all |diff| = 1), 2 diagonal pairs at
        # sqrt(2) (all |diff| = 0)
        assert curve.distances == pytest.approx([1.0, math.sqrt(2.0)])
        assert curve.pair_counts.tolist() == [4, 2]
        assert curve.values == pytest.approx([1.0, 0.0])

    def test_shift_invariance(self):
        rng = substream(701)
        field = rng.standard_normal((8, 8))
        a = empirical_madogram(field, max_h=4.0)
        b = empirical_madogram(field + 11.5, max_h=4.0)
        assert np.allclose(a.values, b.values, atol=1e-12)

    def test_symmetry_under_transpose_and_rotation(self):
        rng = substream(703)
        field = rng.standard_normal((9, 9))
        base = empirical_madogram(field, max_h=4.0)
        for variant in (field.T, np.rot90(field)):
            other = empirical_madogram(variant, max_h=4.0)
            assert np.allclose(base.values, other.values, atol=1e-12)
            assert np.array_equal(base.pair_counts, other.pair_counts)

    def test_iid_noise_flat(self):
        rng = substream(707)
        curves = []
        for _ in range(200):
            field = rng.standard_normal((12, 12))
            curves.append(empirical_madogram(field, max_h=6.0).values)
        mean_curve = np.mean(curves, axis=0)
        distances = empirical_madogram(np.zeros((12, 12)) + rng.standard_normal((12, 12)), max_h=6.0).distances
        beyond = distances > 1.0
        rel_spread = np.abs(mean_curve[beyond] - mean_curve[beyond].mean()) / mean_curve[beyond].mean()
        assert np.max(rel_spread) < 0.10

    def test_n_bins_merging(self):
        rng = substream(709)
        field = rng.standard_normal((10, 10))
        curve = empirical_madogram(field, max_h=5.0, n_bins=4)
        assert curve.distances.size <= 4
        full = empirical_madogram(field, max_h=5.0)
        assert full.pair_counts.sum() == curve.pair_counts.sum()

    def test_zero_bins_rejected(self):
        with pytest.raises(DomainError):
            empirical_madogram(np.zeros((4, 4)), max_h=2.0, n_bins=0)

    def test_stack_madogram_is_mean_of_replicates(self):
        rng = substream(711)
        stack = FieldStack(rng.standard_normal((6, 6, 3)))
        merged = stack_madogram(stack, max_h=3.0)
        singles = [empirical_madogram(stack.values[:, :, j], max_h=3.0).values for j in range(3)]
        assert np.allclose(merged.values, np.mean(singles, axis=0), atol=1e-12)
        assert np.array_equal(merged.pair_counts, empirical_madogram(stack.values[:, :, 0], max_h=3.0).pair_counts * 3)


class TestMedianIqr:
    def test_output_moments(self):
        rng = substream(721)
        stack = FieldStack(rng.standard_normal((8, 8, 4)) * 7 + 3)
        out = median_iqr_standardize(stack)
        assert abs(np.median(out.values)) < 1e-12
        q25, q75 = np.percentile(out.values, [25, 75])
        assert q75 - q25 == pytest.approx(1.0, abs=1e-12)

    def test_idempotent(self):
        rng = substream(723)
        stack = FieldStack(rng.standard_normal((8, 8, 2)))
        once = median_iqr_standardize(stack)
        twice = median_iqr_standardize(once)
        assert np.max(np.abs(twice.values - once.values)) < 1e-12

    def test_affine_invariance(self):
        rng = substream(727)
        base = rng.standard_normal((6, 6, 2))
        a = median_iqr_standardize(FieldStack(base))
        b = median_iqr_standardize(FieldStack(4.2 * base - 17.0))
        assert np.max(np.abs(a.values - b.values)) < 1e-10

    def test_zero_iqr_rejected(self):
        with pytest.raises(DegenerateFieldError):
            median_iqr_standardize(FieldStack(np.ones((4, 4, 1))))


class TestQq:
    def test_identical_samples_on_diagonal(self):
        rng = substream(731)
        sample = rng.standard_normal(500)
        res = qq_data(sample, sample.copy(), np.linspace(0.05, 0.95, 19))
        assert np.allclose(res.obs_q, res.sim_q, atol=1e-12)

    def test_interpolation_convention(self):
        obs = np.arange(1.0, 101.0)
        res = qq_data(obs, obs, np.array([0.5]))
        # type-7 linear interpolation of order statistics
        assert res.obs_q[0] == pytest.approx(50.5, abs=1e-12)

    def test_envelope_contains_median_curve(self):
        rng = substream(733)
        sims = [rng.standard_normal(400) for _ in range(400)]
        res = qq_data(rng.standard_normal(400), sims, np.linspace(0.1, 0.9, 9))
        assert res.sim_lo is not None
        assert np.all(res.sim_lo <= res.sim_q + 1e-12)
        assert np.all(res.sim_q <= res.sim_hi + 1e-12)

    def test_empty_rejected(self):
        with pytest.raises(DomainError):
            qq_data(np.array([]), np.array([1.0]), np.array([0.5]))
        with pytest.raises(DomainError):
            qq_data(np.array([1.0]), np.array([1.0]), np.array([1.5]))


class TestQuantileMap:
    def test_identity_when_distributions_match(self):
        rng = substream(741)
        sample = rng.standard_normal(1000)
        mapped = quantile_map(sample, sample.copy())
        assert np.max(np.abs(mapped - sample)) < 1e-10

    def test_shift_removed(self):
        rng = substream(743)
        obs = rng.standard_normal(2000)
        sim = obs + 5.0
        mapped = quantile_map(sim, obs)
        assert np.max(np.abs(np.sort(mapped) - np.sort(obs))) < 1e-8

    def test_rank_preservation(self):
        rng = substream(747)
        sim = rng.standard_normal(500)
        obs = rng.gamma(2.0, size=800)
        mapped = quantile_map(sim, obs)
        assert np.array_equal(np.argsort(mapped, kind="stable"), np.argsort(sim, kind="stable"))

    def test_double_map_with_swapped_references(self):
        rng = substream(749)
        sim = rng.standard_normal(1000)
        obs = rng.gamma(3.0, size=1000)
        there = quantile_map(sim, obs)
        back = quantile_map(there, sim)
        assert np.max(np.abs(back - sim)) < 1e-8


class TestAre:
    def test_equal_inputs_flagged_zero(self):
        obs = np.array([1.0, 2.0, 3.0])
        res = are(obs, obs.copy())
        assert np.all(res.values == 0.0)
        assert np.all(res.flagged)
        assert np.all(np.isnan(res.log_values))

    def test_hand_value(self):
        res = are(np.array([2.0]), np.array([1.0]))
        assert res.values[0] == pytest.approx(0.5)
        assert res.log_values[0] == pytest.approx(math.log(0.5), abs=1e-12)
        assert not res.flagged[0]

    def test_scale_invariance(self):
        rng = substream(751)
        obs = rng.uniform(1, 5, 50)
        sim = obs + rng.standard_normal(50) * 0.2
        a = are(obs, sim)
        b = are(3.7 * obs, 3.7 * sim)
        assert np.allclose(a.values, b.values, atol=1e-12)

    def test_zero_observation_flagged(self):
        res = are(np.array([0.0, 1.0]), np.array([1.0, 2.0]))
        assert res.flagged[0]
        assert np.isnan(res.values[0]) and np.isnan(res.log_values[0])
        assert res.values[1] == 1.0

    def test_length_mismatch(self):
        with pytest.raises(DomainError):
            are(np.zeros(3), np.zeros(4))


class TestSmoothingSpline:
    def test_linear_data_fit_exactly(self):
        rng = substream(761)
        x = np.sort(rng.uniform(0, 1, 200))
        y = 2.0 * x - 0.5
        s = SmoothingSpline1D(x, y)
        grid = np.linspace(0, 1, 50)
        assert np.max(np.abs(s(grid) - (2.0 * grid - 0.5))) < 1e-8

    def test_linear_extrapolation(self):
        rng = substream(763)
        x = np.sort(rng.uniform(0, 1, 200))
        y = 3.0 * x + 1.0
        s = SmoothingSpline1D(x, y)
        assert s(2.0) == pytest.approx(7.0, abs=1e-4)
        assert s(-1.0) == pytest.approx(-2.0, abs=1e-4)

    def test_recovers_smooth_signal(self):
        rng = substream(767)
        x = np.sort(rng.uniform(0, 2 * np.pi, 600))
        y = np.sin(x) + 0.05 * rng.standard_normal(600)
        s = SmoothingSpline1D(x, y)
        grid = np.linspace(0.3, 2 * np.pi - 0.3, 100)
        assert np.max(np.abs(s(grid) - np.sin(grid))) < 0.08


class TestBiasCorrector:
    def _pairs(self, bias_fn, n=400, seed=771):
        rng = substream(seed)
        truths = np.column_stack(
            [
                rng.uniform(0.05, 0.85, n),
                np.exp(rng.uniform(np.log(0.01), np.log(1.5), n)),
                np.exp(rng.uniform(np.log(0.001), np.log(0.08), n)),
            ]
        )
        estimates = bias_fn(truths)
        return truths, estimates

    def test_identity_when_unbiased(self):
        truths, estimates = self._pairs(lambda t: t.copy())
        corrector = fit_bias_corrector(truths, estimates)
        grid = np.column_stack(
            [np.linspace(0.1, 0.8, 20), np.geomspace(0.02, 1.0, 20), np.geomspace(0.002, 0.05, 20)]
        )
        corrected = corrector.apply_array(grid)
        assert np.max(np.abs(corrected[:, 0] - grid[:, 0])) < 1e-3
        assert np.max(np.abs(np.log(corrected[:, 1]) - np.log(grid[:, 1]))) < 1e-3

    def test_synthetic_bias_halving(self):
        # estimates are twice the truth, so the corrector must halve inputs
        truths, estimates = self._pairs(lambda t: 2.0 * t)
        corrector = fit_bias_corrector(truths, estimates)
        grid = np.column_stack(
            [np.linspace(0.2, 1.5, 10), np.geomspace(0.05, 2.0, 10), np.geomspace(0.005, 0.1, 10)]
        )
        corrected = corrector.apply_array(grid)
        assert np.max(np.abs(corrected / (grid / 2.0) - 1.0)) < 0.02

    def test_json_round_trip(self):
        truths, estimates = self._pairs(lambda t: 1.5 * t)
        corrector = fit_bias_corrector(truths, estimates)
        back = BiasCorrector.from_json(corrector.to_json())
        grid = np.column_stack([np.linspace(0.2, 1.0, 7), np.geomspace(0.05, 1.0, 7), np.geomspace(0.005, 0.1, 7)])
        assert np.allclose(back.apply_array(grid), corrector.apply_array(grid), atol=1e-12)

    def test_too_few_pairs_rejected(self):
        truths = np.tile([[0.5, 0.1, 0.01]], (20, 1))
        with pytest.raises(DomainError):
            fit_bias_corrector(truths, truths)
