"""Synthetic generators, normalization, and the CSV dataset format."""

import numpy as np
import pytest

from mrgpssm.datagen import (
    MultiScaleConfig,
    OscillatorSpec,
    PendulumConfig,
    apply_normalization,
    gen_multiscale,
    gen_pendulum,
    normalize,
    pendulum_dense_path,
    read_csv,
    write_csv,
)
from mrgpssm.errors import MalformedHeader, NonFiniteValue, NonUniformSpacing
from mrgpssm.model import Dataset
from mrgpssm.rng import RngStream


class TestPendulum:
    def test_damped_energy_monotone(self):
        cfg = PendulumConfig(diffusion=0.0, damping=0.3, dt_sim=1e-4,
                             subsample=100, T_out=400, obs_noise=0.0)
        dense = pendulum_dense_path(cfg, RngStream(1))
        th, om = dense[:, 0], dense[:, 1]
        energy = 0.5 * om**2 + cfg.g_over_l * (1 - np.cos(th))
        # non-increasing up to the integrator's O(dt^2) local error
        assert np.all(np.diff(energy) <= 1e-6)
        assert energy[-1] < 0.7 * energy[0]

    def test_small_angle_period(self):
        cfg = PendulumConfig(diffusion=0.0, damping=0.0, dt_sim=1e-4,
                             subsample=1, T_out=40000, obs_noise=0.0,
                             theta0=0.05, omega0=0.0)
        data = gen_pendulum(cfg, RngStream(2))
        th = data.y[:, 0]
        # measure the period from zero crossings of the dense path
        crossings = np.where(np.diff(np.sign(th)) != 0)[0]
        periods = 2 * np.diff(crossings) * cfg.dt_sim
        expected = 2 * np.pi / np.sqrt(cfg.g_over_l)
        assert abs(periods.mean() - expected) / expected < 0.02

    def test_seed_reproducibility(self):
        cfg = PendulumConfig(subsample=5, T_out=50)
        a = gen_pendulum(cfg, RngStream(3))
        b = gen_pendulum(cfg, RngStream(3))
        np.testing.assert_array_equal(a.y, b.y)

    def test_subsample_thins_the_dense_path(self):
        base = dict(diffusion=0.1, dt_sim=1e-3, obs_noise=0.0)
        cfg_sub = PendulumConfig(subsample=4, T_out=100, **base)
        cfg_dense = PendulumConfig(subsample=1, T_out=4 * 99 + 1, **base)
        sub = gen_pendulum(cfg_sub, RngStream(4))
        dense = gen_pendulum(cfg_dense, RngStream(4))
        np.testing.assert_allclose(sub.y[:, 0], dense.y[::4, 0], atol=1e-12)

    def test_dataset_grid_spacing(self):
        cfg = PendulumConfig(dt_sim=1e-3, subsample=20, T_out=50)
        data = gen_pendulum(cfg, RngStream(5))
        assert data.dt == pytest.approx(0.02)
        assert data.input_dim == 0


class TestMultiscale:
    def test_slow_amplitude_zero_gives_fast_only(self):
        cfg = MultiScaleConfig(T=600, slow=OscillatorSpec(600.0, 0.0),
                               obs_noise=0.02)
        data, truth = gen_multiscale(cfg, RngStream(6))
        np.testing.assert_array_equal(truth.components[:, 1], 0.0)
        np.testing.assert_allclose(
            data.y[:, 0], truth.components[:, 0] + truth.noise, atol=1e-12)

    def test_fast_amplitude_zero_gives_slow_only(self):
        cfg = MultiScaleConfig(T=600, fast=OscillatorSpec(12.0, 0.0, 1.0))
        data, truth = gen_multiscale(cfg, RngStream(7))
        np.testing.assert_array_equal(truth.components[:, 0], 0.0)
        assert truth.components[:, 1].std() > 0

    def test_truth_plus_noise_reconstructs_exactly(self):
        cfg = MultiScaleConfig(T=500)
        data, truth = gen_multiscale(cfg, RngStream(8))
        recon = truth.components.sum(axis=1) + truth.noise
        np.testing.assert_array_equal(data.y[:, 0], recon)

    def test_spectral_peaks_at_configured_periods(self):
        cfg = MultiScaleConfig(T=4000)
        data, _ = gen_multiscale(cfg, RngStream(9))
        y = data.y[:, 0] - data.y[:, 0].mean()
        power = np.abs(np.fft.rfft(y)) ** 2
        freqs = np.fft.rfftfreq(y.size)
        bin_width = 1.0 / y.size

        def band_peak(band_lo_period, band_hi_period):
            mask = (freqs >= 1 / band_hi_period) & (freqs <= 1 / band_lo_period)
            idx = np.where(mask)[0]
            return freqs[idx[np.argmax(power[idx])]]

        assert abs(band_peak(6, 36) - 1 / 12) <= bin_width
        assert abs(band_peak(200, 1800) - 1 / 600) <= bin_width

    def test_period_separation_guard(self):
        with pytest.raises(ValueError):
            MultiScaleConfig(T=100, fast=OscillatorSpec(20.0, 1.0, 1.0),
                             slow=OscillatorSpec(100.0, 1.0))

    def test_seed_field_fallback(self):
        cfg = MultiScaleConfig(T=300, seed=77)
        a, _ = gen_multiscale(cfg)
        b, _ = gen_multiscale(cfg, RngStream(77))
        np.testing.assert_array_equal(a.y, b.y)


class TestNormalize:
    def test_already_normalized_is_identity(self):
        rng = RngStream(10)
        y = rng.normal((500, 2))
        y = (y - y.mean(0)) / y.std(0)
        u = rng.normal((500, 1))
        u = (u - u.mean(0)) / u.std(0)
        data = Dataset(y=y, u=u, dt=1.0)
        out = normalize(data)
        np.testing.assert_allclose(out.y, y, atol=1e-10)
        np.testing.assert_allclose(np.asarray(out.normalization["y_std"]), 1.0,
                                   atol=1e-12)
        np.testing.assert_allclose(np.asarray(out.normalization["y_mean"]), 0.0,
                                   atol=1e-12)

    def test_constant_column_warns_and_keeps_scale(self):
        data = Dataset(y=np.full((10, 1), 3.0), u=np.zeros((10, 0)), dt=1.0)
        with pytest.warns(UserWarning):
            out = normalize(data)
        np.testing.assert_allclose(out.y, 0.0, atol=1e-15)
        assert out.normalization["y_std"] == [1.0]

    def test_post_normalization_statistics(self):
        rng = RngStream(11)
        data = Dataset(y=3 + 2 * rng.normal((400, 1)),
                       u=5 * rng.normal((400, 2)), dt=1.0)
        out = normalize(data)
        assert abs(out.y.mean()) < 1e-12
        assert abs(out.y.std() - 1) < 1e-12
        assert np.all(np.abs(out.u.mean(0)) < 1e-12)
        # inverse application reproduces the transform
        again = apply_normalization(data, out.normalization)
        np.testing.assert_allclose(again.y, out.y, atol=1e-14)


class TestCsv:
    def test_round_trip_bitwise(self, tmp_path):
        rng = RngStream(12)
        data = Dataset(y=rng.normal((30, 2)), u=rng.normal((30, 1)), dt=0.25)
        path = tmp_path / "data.csv"
        write_csv(data, path)
        back = read_csv(path)
        np.testing.assert_array_equal(back.y, data.y)
        np.testing.assert_array_equal(back.u, data.u)
        assert back.dt == data.dt

    def test_no_input_columns(self, tmp_path):
        data = Dataset(y=np.arange(10.0)[:, None], u=np.zeros((10, 0)), dt=1.0)
        path = tmp_path / "data.csv"
        write_csv(data, path)
        back = read_csv(path)
        assert back.input_dim == 0
        np.testing.assert_array_equal(back.y, data.y)

    def test_missing_column_named(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("t,u1,z9\n0,1,2\n1,3,4\n")
        with pytest.raises(MalformedHeader, match="z9"):
            read_csv(path)

    def test_missing_y_column(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("t,u1\n0,1\n1,3\n")
        with pytest.raises(MalformedHeader, match="y1"):
            read_csv(path)

    def test_non_uniform_spacing_reports_row(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("t,y1\n0,1\n1,2\n2.5,3\n")
        with pytest.raises(NonUniformSpacing, match="row 4"):
            read_csv(path)

    def test_non_finite_value_reports_row(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("t,y1\n0,1\n1,nan\n2,3\n")
        with pytest.raises(NonFiniteValue, match="row 3"):
            read_csv(path)
