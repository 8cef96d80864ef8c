import json
import math

import numpy as np
import pytest
from scipy import stats

from gevsar.dataset import (
    Dataset,
    NormStats,
    ParamRanges,
    denormalize_params,
    load_dataset,
    make_dataset,
    normalize_param_array,
    normalize_params,
    sample_params,
    save_dataset,
    train_val_split,
)
from gevsar.errors import ChecksumError, DomainError, FormatError, TruncatedPayloadError, VersionError
from gevsar.lattice import LatticeConfig, ModelParams
from gevsar.rng import substream

CFG = LatticeConfig(grid_dim=8, buffer=2)


class TestSampleParams:
    def test_range_containment(self):
        ranges = ParamRanges()
        draws = sample_params(10_000, ranges, substream(71))
        assert draws[:, 0].min() >= 0.01 and draws[:, 0].max() <= 0.9
        assert draws[:, 1].min() >= 0.001 and draws[:, 1].max() <= 2.0
        assert draws[:, 2].min() >= 0.0001 and draws[:, 2].max() <= 0.1

    def test_log_uniform_kappa2(self):
        ranges = ParamRanges()
        draws = sample_params(100_000, ranges, substream(73))
        result = stats.kstest(
            np.log(draws[:, 1]), stats.uniform(math.log(0.001), math.log(2.0) - math.log(0.001)).cdf
        )
        assert result.pvalue > 0.01

    def test_linear_xi_uniform(self):
        ranges = ParamRanges()
        draws = sample_params(100_000, ranges, substream(79))
        result = stats.kstest(draws[:, 0], stats.uniform(0.01, 0.89).cdf)
        assert result.pvalue > 0.01

    def test_same_seed_identical(self):
        ranges = ParamRanges()
        a = sample_params(500, ranges, substream(83))
        b = sample_params(500, ranges, substream(83))
        assert np.array_equal(a, b)

    def test_linear_scale_option(self):
        ranges = ParamRanges(kappa2_scale="linear")
        draws = sample_params(100_000, ranges, substream(89))
        result = stats.kstest(draws[:, 1], stats.uniform(0.001, 1.999).cdf)
        assert result.pvalue > 0.01

    def test_bad_ranges_rejected(self):
        with pytest.raises(DomainError):
            ParamRanges(xi_range=(0.9, 0.1))
        with pytest.raises(DomainError):
            ParamRanges(kappa2_range=(0.0, 2.0))  # log scale needs positive lower bound


class TestNormalization:
    NORM = NormStats(
        xi_mean=0.5,
        xi_sd=0.25,
        log_kappa2_mean=-2.0,
        log_kappa2_sd=1.5,
        log_tau2_mean=-6.0,
        log_tau2_sd=2.0,
    )

    def test_hand_example(self):
        theta = ModelParams(0.75, math.exp(-2.0), math.exp(-6.0))
        assert np.allclose(normalize_params(theta, self.NORM), [1.0, 0.0, 0.0], atol=1e-14)

    def test_at_means_gives_zero(self):
        theta = ModelParams(0.5, math.exp(-2.0), math.exp(-6.0))
        assert np.allclose(normalize_params(theta, self.NORM), [0.0, 0.0, 0.0], atol=1e-14)

    def test_round_trip(self):
        theta = ModelParams(0.37, 0.42, 0.007)
        back = denormalize_params(normalize_params(theta, self.NORM), self.NORM)
        assert back.xi == pytest.approx(theta.xi, abs=1e-12)
        assert back.kappa2 == pytest.approx(theta.kappa2, rel=1e-12)
        assert back.tau2 == pytest.approx(theta.tau2, rel=1e-12)

    def test_zero_tau2_rejected(self):
        with pytest.raises(DomainError):
            normalize_params(ModelParams(0.5, 0.1, 0.0), self.NORM)

    def test_norm_stats_standardize_to_unit_moments(self):
        params = sample_params(5_000, ParamRanges(), substream(97))
        norm = NormStats.from_params(params)
        z = normalize_param_array(params, norm)
        assert np.max(np.abs(z.mean(axis=0))) < 1e-9
        assert np.max(np.abs(z.std(axis=0, ddof=1) - 1.0)) < 1e-9


class TestMakeDataset:
    def test_shapes(self):
        ds = make_dataset(10, 1, CFG, ParamRanges(), seed=101)
        assert ds.fields.shape == (10, 8, 8, 1)
        assert ds.params.shape == (10, 3)
        assert ds.fields.dtype == np.float32

    def test_each_stack_standardized(self):
        ds = make_dataset(6, 3, CFG, ParamRanges(), seed=103)
        for i in range(ds.n):
            assert abs(np.median(ds.fields[i])) < 1e-6
            assert np.std(ds.fields[i].astype(float)) == pytest.approx(1.0, abs=1e-5)

    def test_regeneration_bitwise(self):
        a = make_dataset(5, 2, CFG, ParamRanges(), seed=107)
        b = make_dataset(5, 2, CFG, ParamRanges(), seed=107)
        assert np.array_equal(a.params, b.params)
        assert np.array_equal(a.fields, b.fields)

    def test_worker_count_invariance(self):
        a = make_dataset(8, 2, CFG, ParamRanges(), seed=109, workers=1)
        b = make_dataset(8, 2, CFG, ParamRanges(), seed=109, workers=3)
        assert np.array_equal(a.fields, b.fields)
        assert np.array_equal(a.params, b.params)


class TestPersistence:
    def _ds(self):
        return make_dataset(4, 2, CFG, ParamRanges(), seed=113)

    def test_round_trip(self, tmp_path):
        ds = self._ds()
        save_dataset(ds, tmp_path / "ds")
        back = load_dataset(tmp_path / "ds")
        assert np.array_equal(back.fields, ds.fields)
        assert np.max(np.abs(back.params - ds.params)) < 1e-7
        assert np.array_equal(back.params, ds.params)  # stored at 64-bit
        assert back.norm == ds.norm
        assert back.cfg == ds.cfg
        assert back.ranges == ds.ranges
        assert back.seed == ds.seed

    def test_corrupted_marker(self, tmp_path):
        save_dataset(self._ds(), tmp_path / "ds")
        manifest = json.loads((tmp_path / "ds" / "manifest.json").read_text())
        manifest["format"] = "something-else"
        (tmp_path / "ds" / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(FormatError):
            load_dataset(tmp_path / "ds")

    def test_future_version(self, tmp_path):
        save_dataset(self._ds(), tmp_path / "ds")
        manifest = json.loads((tmp_path / "ds" / "manifest.json").read_text())
        manifest["format_version"] = 99
        (tmp_path / "ds" / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(VersionError) as err:
            load_dataset(tmp_path / "ds")
        assert "99" in str(err.value) and "1" in str(err.value)

    def test_truncated_payload(self, tmp_path):
        save_dataset(self._ds(), tmp_path / "ds")
        raw = (tmp_path / "ds" / "fields.bin").read_bytes()
        (tmp_path / "ds" / "fields.bin").write_bytes(raw[:-8])
        with pytest.raises(TruncatedPayloadError):
            load_dataset(tmp_path / "ds")

    def test_checksum_failure(self, tmp_path):
        save_dataset(self._ds(), tmp_path / "ds")
        raw = bytearray((tmp_path / "ds" / "params.bin").read_bytes())
        raw[0] ^= 0xFF
        (tmp_path / "ds" / "params.bin").write_bytes(bytes(raw))
        with pytest.raises(ChecksumError):
            load_dataset(tmp_path / "ds")


class TestSplit:
    def test_deterministic_ninety_ten(self):
        train_idx, val_idx = train_val_split(100)
        assert len(train_idx) == 90 and len(val_idx) == 10
        assert val_idx[0] == 90
        again = train_val_split(100)
        assert np.array_equal(train_idx, again[0])
