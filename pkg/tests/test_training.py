"""Backfitting trainer: Adam, the learning-rate schedule, latent caching,
component updates, and end-to-end optimization sanity."""

import json
import time

import numpy as np
import pytest

from mrgpssm.datagen import OscillatorSpec, MultiScaleConfig, gen_multiscale, normalize
from mrgpssm.elbo import elbo_minibatch
from mrgpssm.errors import WindowTooLong
from mrgpssm.model import (
    ComponentParams,
    Dataset,
    default_model,
    model_to_dict,
)
from mrgpssm.rng import RngStream
from mrgpssm.training import (
    AdamState,
    CachedLatents,
    TrainConfig,
    adam_step,
    backfit,
    component_order,
    lr_schedule,
    refresh_cache,
    update_component,
)

from test_model import tiny_component


def small_training_problem(seed=0, T=60, d_u=1, resolution=1):
    rng = RngStream(seed)
    t = np.arange(T)
    u = np.sin(0.3 * t)[:, None] if d_u else np.zeros((T, 0))
    y = (0.4 * np.sin(0.3 * t + 0.5) + 0.05 * rng.normal(T))[:, None]
    data = Dataset(y=y, u=u, dt=1.0)
    mdl = default_model(dims=[1], resolutions=[resolution], out_dim=1,
                        input_dim=d_u, n_inducing=4, rng=rng.child(1),
                        obs_noise=0.05)
    return mdl, data


class TestAdam:
    def test_zero_gradient_keeps_parameters(self):
        st = AdamState.init(np.array([1.0, -2.0]))
        st2 = adam_step(st, np.zeros(2), lr=0.1)
        np.testing.assert_array_equal(st2.theta, st.theta)
        assert st2.t == 1

    def test_zero_lr_keeps_parameters(self):
        st = AdamState.init(np.array([1.0, -2.0]))
        st2 = adam_step(st, np.array([0.5, -0.3]), lr=0.0)
        np.testing.assert_array_equal(st2.theta, st.theta)

    def test_constant_gradient_step_size_limit(self):
        st = AdamState.init(np.zeros(1))
        g = np.array([3.7])
        lr = 0.01
        for _ in range(500):
            prev = st.theta.copy()
            st = adam_step(st, g, lr)
        assert abs(prev[0] - st.theta[0]) == pytest.approx(lr, rel=1e-3)

    def test_quadratic_convergence(self):
        A = np.diag([1.0, 4.0])
        target = np.array([2.0, -1.0])
        st = AdamState.init(np.zeros(2))
        for _ in range(500):
            g = A @ (st.theta - target)
            st = adam_step(st, g, lr=0.05)
        assert np.linalg.norm(st.theta - target) < 1e-3


class TestLrSchedule:
    def test_initial_plateau(self):
        cfg = TrainConfig()
        for step in range(10):
            assert lr_schedule(step, 0.05, cfg) == 0.05

    def test_first_decay_step(self):
        cfg = TrainConfig()
        assert lr_schedule(10, 0.05, cfg) == pytest.approx(0.99 * 0.05)

    def test_closed_form_at_100(self):
        cfg = TrainConfig()
        assert lr_schedule(100, 0.05, cfg) == pytest.approx(
            0.99**10 * 0.05, rel=1e-12)


class TestRefreshCache:
    def test_deterministic_component_rollout(self):
        from mrgpssm.kernels import InducingSet, RbfKernel, SparsePosterior

        c = ComponentParams(
            kernels=[RbfKernel(1e-14, np.array([1.0, 1.0]))],
            inducing=InducingSet(np.array([[0.0, 0.0], [1.0, 1.0]])),
            q_fM=[SparsePosterior(np.zeros(2), 1e-12 * np.eye(2))],
            m_0=np.array([0.25]), S_0_chol=1e-14 * np.eye(1),
            Q_diag=np.array([1e-30]), resolution=1)
        from mrgpssm.model import EmissionParams, Model

        mdl = Model(components=[c], emission=EmissionParams(1, np.array([0.1])),
                    dt=1.0)
        data = Dataset(y=np.zeros((20, 1)), u=np.zeros((20, 1)), dt=1.0)
        cache = refresh_cache(mdl, data, 0, S=5, rng=RngStream(1))
        np.testing.assert_allclose(cache, 0.25, atol=1e-5)

    def test_cache_length_is_T_for_any_resolution(self):
        for r in (1, 3, 7):
            mdl, data = small_training_problem(seed=r, resolution=r)
            cache = refresh_cache(mdl, data, 0, S=3, rng=RngStream(2))
            assert cache.shape == (data.T, 1)

    def test_variance_shrinks_with_samples(self):
        mdl, data = small_training_problem(seed=3)
        probes = []
        for S in (1, 64):
            vals = np.array([
                refresh_cache(mdl, data, 0, S=S, rng=RngStream(100 + k))[30, 0]
                for k in range(40)
            ])
            probes.append(vals.var())
        ratio = probes[0] / probes[1]
        assert 16 < ratio < 256  # ~64 expected


class TestUpdateComponent:
    def test_zero_lr_keeps_parameters(self):
        mdl, data = small_training_problem(seed=4)
        cfg = TrainConfig(iters_per_component=3, batch=10, buffer=2, samples=2,
                          minibatches_per_iter=2, lr0=0.0, seed=0)
        cached = CachedLatents(paths={0: np.zeros((data.T, 1))},
                               n_components=1, sample_count=1)
        out, recs = update_component(mdl, data, cached, 0, cfg, RngStream(5))
        np.testing.assert_allclose(out.components[0].q_fM[0].m_M,
                                   mdl.components[0].q_fM[0].m_M, atol=1e-12)
        np.testing.assert_allclose(out.emission.obs_noise_diag,
                                   mdl.emission.obs_noise_diag, atol=1e-12)

    def test_other_components_bitwise_frozen(self):
        rng = RngStream(6)
        comps = [tiny_component(rng.child(0), d_u=1),
                 tiny_component(rng.child(1), d_u=1)]
        from mrgpssm.model import EmissionParams, Model

        mdl = Model(components=comps, emission=EmissionParams(1, np.array([0.05])),
                    dt=1.0)
        _, data = small_training_problem(seed=6)
        cached = CachedLatents(
            paths={0: np.zeros((data.T, 1)), 1: np.zeros((data.T, 1))},
            n_components=2, sample_count=1)
        snapshot = json.dumps(model_to_dict(mdl)["components"][1])
        cfg = TrainConfig(iters_per_component=4, batch=10, buffer=2, samples=2,
                          minibatches_per_iter=2, lr0=0.05, seed=0)
        out, _ = update_component(mdl, data, cached, 0, cfg, RngStream(7))
        assert json.dumps(model_to_dict(out)["components"][1]) == snapshot
        # the active block did move
        assert not np.allclose(out.components[0].q_fM[0].m_M,
                               mdl.components[0].q_fM[0].m_M)

    def test_window_guard(self):
        mdl, data = small_training_problem(seed=7, resolution=10)
        cfg = TrainConfig(iters_per_component=1, batch=10, buffer=1, samples=1,
                          minibatches_per_iter=1, seed=0)
        with pytest.raises(WindowTooLong):
            update_component(mdl, data, None, 0, cfg, RngStream(8))

    def test_matches_reference_loop_at_unit_resolution(self):
        # hand-rolled Adam loop over the same objective and draw addressing
        mdl, data = small_training_problem(seed=9, d_u=0)
        cfg = TrainConfig(iters_per_component=5, batch=data.T, buffer=0,
                          samples=2, minibatches_per_iter=2, lr0=0.03, seed=0)
        rng = RngStream(10)
        out, recs = update_component(mdl, data, None, 0, cfg, rng)

        from mrgpssm.elbo import draw_noise, make_objective, model_with_blocks
        from mrgpssm.sampling import sample_dilated

        pvec, theta, objective = make_objective(mdl, data, 0, None, 1,
                                                data.T, 0, 2)
        m = np.zeros_like(theta)
        v = np.zeros_like(theta)
        ref_vals = []
        for it in range(5):
            it_rng = RngStream(10).child(it)
            starts = [sample_dilated(data.y, 1, data.T, it_rng)[0]
                      for _ in range(2)]
            noise = draw_noise(mdl, [0], data.T, 4, it_rng)
            est, grad = objective(theta, starts, noise)
            ref_vals.append(est.value)
            g = -grad
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mh = m / (1 - 0.9 ** (it + 1))
            vh = v / (1 - 0.999 ** (it + 1))
            theta = theta - 0.03 * mh / (np.sqrt(vh) + 1e-8)
        ref_model = model_with_blocks(mdl, pvec.constrain(theta))
        np.testing.assert_allclose(
            out.components[0].q_fM[0].m_M,
            ref_model.components[0].q_fM[0].m_M, atol=1e-12)
        np.testing.assert_allclose([r.elbo for r in recs], ref_vals, atol=1e-12)


class TestBackfit:
    def test_zero_cycles_returns_model_unchanged(self):
        mdl, data = small_training_problem(seed=11)
        cfg = TrainConfig(cycles=0, iters_per_component=5, batch=10, buffer=2,
                          samples=2, minibatches_per_iter=2, seed=0)
        out, recs = backfit(mdl, data, cfg, RngStream(12))
        assert recs == []
        assert json.dumps(model_to_dict(out)) == json.dumps(model_to_dict(mdl))

    def test_zero_iterations_round_trips_parameters(self):
        mdl, data = small_training_problem(seed=13)
        cfg = TrainConfig(cycles=1, iters_per_component=0, batch=10, buffer=2,
                          samples=2, minibatches_per_iter=2, seed=0)
        out, recs = backfit(mdl, data, cfg, RngStream(14))
        np.testing.assert_allclose(out.components[0].q_fM[0].m_M,
                                   mdl.components[0].q_fM[0].m_M, atol=1e-12)

    def test_single_component_equals_plain_training(self):
        mdl, data = small_training_problem(seed=15)
        cfg = TrainConfig(cycles=1, iters_per_component=4, batch=10, buffer=2,
                          samples=2, minibatches_per_iter=2, lr0=0.05, seed=0)
        out, recs = backfit(mdl, data, cfg, RngStream(16))
        cached = CachedLatents(paths={0: refresh_cache(
            mdl, data, 0, cfg.samples, RngStream(16).child(0, 0, 0))},
            n_components=1, sample_count=cfg.samples)
        ref, _ = update_component(mdl, data, cached, 0, cfg,
                                  RngStream(16).child(1, 0, 0))
        np.testing.assert_allclose(out.components[0].q_fM[0].m_M,
                                   ref.components[0].q_fM[0].m_M, atol=1e-14)

    def test_reproducible_bitwise(self):
        mdl, data = small_training_problem(seed=17)
        cfg = TrainConfig(cycles=2, iters_per_component=3, batch=10, buffer=2,
                          samples=2, minibatches_per_iter=2, seed=0)
        out1, _ = backfit(mdl, data, cfg, RngStream(18))
        out2, _ = backfit(mdl, data, cfg, RngStream(18))
        assert json.dumps(model_to_dict(out1)) == json.dumps(model_to_dict(out2))

    def test_update_order(self):
        rng = RngStream(19)
        comps = [tiny_component(rng.child(0), resolution=1),
                 tiny_component(rng.child(1), resolution=30)]
        from mrgpssm.model import EmissionParams, Model

        mdl = Model(components=comps, emission=EmissionParams(1, np.array([0.1])),
                    dt=1.0)
        assert component_order(mdl, TrainConfig()) == [0, 1]  # fast first
        assert component_order(mdl, TrainConfig(update_order="slow-first")) == [1, 0]
        assert component_order(mdl, TrainConfig(update_order="index")) == [0, 1]

    def test_optimization_improves_elbo_under_crn(self):
        # smoke run on a small two-timescale series; the bound after
        # training beats the bound before, on common random windows
        cfg_d = MultiScaleConfig(
            T=400, fast=OscillatorSpec(10.0, 1.0, 1.0),
            slow=OscillatorSpec(100.0, 0.0), obs_noise=0.05, input_dim=1)
        data, _ = gen_multiscale(cfg_d, RngStream(20))
        data = normalize(data)
        mdl = default_model(dims=[2], resolutions=[1], out_dim=1, input_dim=1,
                            n_inducing=8, rng=RngStream(21), obs_noise=0.05)
        cfg = TrainConfig(cycles=2, iters_per_component=20, batch=40, buffer=5,
                          samples=4, minibatches_per_iter=4, lr0=0.02, seed=0)
        trained, recs = backfit(mdl, data, cfg, RngStream(22))

        def avg_bound(model):
            return np.mean([
                elbo_minibatch(model, data, 0, None, (1, 40, 5), 8,
                               RngStream(500 + k)).value
                for k in range(5)
            ])

        assert avg_bound(trained) > avg_bound(mdl)

    def test_resolution_override(self):
        mdl, data = small_training_problem(seed=23)
        cfg = TrainConfig(cycles=0, resolutions=[5], seed=0)
        out, _ = backfit(mdl, data, cfg, RngStream(24))
        assert out.components[0].resolution == 5


class TestRuntimeScaling:
    def test_batch_size_scales_iteration_time(self):
        # doubling B roughly doubles per-iteration cost
        mdl, data = small_training_problem(seed=25, T=200)
        times = {}
        for B in (20, 40):
            cfg = TrainConfig(cycles=1, iters_per_component=6, batch=B,
                              buffer=0, samples=4, minibatches_per_iter=4,
                              lr0=0.01, seed=0)
            _, recs = backfit(mdl, data, cfg, RngStream(26))
            times[B] = np.median([r.wall_ms for r in recs])
        ratio = times[40] / times[20]
        assert 1.3 < ratio < 3.2


class TestSampledResiduals:
    def test_sampled_residual_targets_differ_from_mean(self):
        rng = RngStream(30)
        comps = [tiny_component(rng.child(0), d_u=1),
                 tiny_component(rng.child(1), d_u=1)]
        from mrgpssm.model import EmissionParams, Model
        from mrgpssm.elbo import partial_residual
        from mrgpssm.training import simulate_latents

        mdl = Model(components=comps, emission=EmissionParams(1, np.array([0.1])),
                    dt=1.0)
        _, data = small_training_problem(seed=30)
        paths = {l: simulate_latents(mdl, data, l, 4, RngStream(31, (l,)))
                 for l in range(2)}
        cached = CachedLatents(
            paths={l: p.mean(axis=0) for l, p in paths.items()},
            n_components=2, sample_count=4, samples=paths)
        mean_resid = partial_residual(data, cached, 0)
        samp_resid = partial_residual(data, cached, 0, sample_index=2)
        np.testing.assert_allclose(
            samp_resid, data.y - paths[1][2][:, :1], atol=1e-14)
        assert not np.allclose(mean_resid, samp_resid)

    def test_backfit_sampled_mode_runs_and_differs(self):
        rng = RngStream(32)
        comps = [tiny_component(rng.child(0), d_u=1),
                 tiny_component(rng.child(1), d_u=1)]
        from mrgpssm.model import EmissionParams, Model

        mdl = Model(components=comps, emission=EmissionParams(1, np.array([0.1])),
                    dt=1.0)
        _, data = small_training_problem(seed=32)
        base = dict(cycles=1, iters_per_component=3, batch=10, buffer=2,
                    samples=2, minibatches_per_iter=2, lr0=0.05, seed=0)
        out_mean, _ = backfit(mdl, data, TrainConfig(**base), RngStream(33))
        out_samp, _ = backfit(mdl, data,
                              TrainConfig(residual_mode="sampled", **base),
                              RngStream(33))
        a = out_mean.components[0].q_fM[0].m_M
        b = out_samp.components[0].q_fM[0].m_M
        assert not np.allclose(a, b)
