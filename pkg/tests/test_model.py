"""Model containers, emission, the two transition densities, and
serialization."""

import json

import numpy as np
import pytest

from mrgpssm.errors import DimensionMismatch, NonPositiveStep
from mrgpssm.kernels import InducingSet, RbfKernel, SparsePosterior
from mrgpssm.model import (
    ComponentParams,
    Dataset,
    EmissionParams,
    Model,
    default_component,
    default_model,
    emission_logpdf,
    emission_mean,
    gpssm_transition,
    model_from_dict,
    model_to_dict,
    prior_transition_given_fM,
    sde_transition,
)
from mrgpssm.gauss import Gaussian, mvn_logpdf
from mrgpssm.kernels import conditional_given_fM
from mrgpssm.rng import RngStream


def tiny_component(rng, dim=1, d_u=0, m=3, resolution=1, q_scale=0.3,
                   tiny_S=False, Q=1e-3):
    d_in = dim + d_u
    zeta = rng.uniform(-2, 2, (m, d_in))
    kers = [RbfKernel(0.5, rng.uniform(0.8, 1.5, d_in)) for _ in range(dim)]
    qs = []
    for _ in range(dim):
        if tiny_S:
            L = 1e-9 * np.eye(m)
        else:
            L = np.tril(0.05 * rng.normal((m, m)), k=-1) + np.diag(
                rng.uniform(0.05, 0.2, m))
        qs.append(SparsePosterior(q_scale * rng.normal(m), L))
    return ComponentParams(
        kernels=kers, inducing=InducingSet(zeta), q_fM=qs,
        m_0=np.zeros(dim), S_0_chol=0.1 * np.eye(dim),
        Q_diag=np.full(dim, Q), resolution=resolution,
    )


def tiny_model(rng, dims=(1,), d_u=0, out_dim=1, resolutions=None):
    resolutions = resolutions or [1] * len(dims)
    comps = [tiny_component(rng.child(i), dim=d, d_u=d_u, resolution=r)
             for i, (d, r) in enumerate(zip(dims, resolutions))]
    emission = EmissionParams(out_dim, np.full(out_dim, 0.04))
    return Model(components=comps, emission=emission, dt=1.0)


class TestEmission:
    def test_identity_pick(self):
        mdl = tiny_model(RngStream(1), dims=(1,))
        assert emission_mean(mdl, [np.array([0.7])])[0] == 0.7

    def test_additive_combination(self):
        mdl = tiny_model(RngStream(2), dims=(2, 2))
        out = emission_mean(mdl, [np.array([1.5, 9.0]), np.array([-0.25, 3.0])])
        assert out[0] == pytest.approx(1.25)

    def test_dense_matrix_oracle(self):
        rng = RngStream(3)
        mdl = tiny_model(rng, dims=(3, 2, 4), out_dim=2)
        xs = [rng.child(i).normal(d) for i, d in enumerate((3, 2, 4))]
        total = np.zeros(2)
        for x in xs:
            C = np.hstack([np.eye(2), np.zeros((2, x.size - 2))])
            total += C @ x
        np.testing.assert_allclose(emission_mean(mdl, xs), total, atol=1e-14)

    def test_linearity(self):
        rng = RngStream(4)
        mdl = tiny_model(rng, dims=(2, 3))
        xs = [rng.normal(2), rng.normal(3)]
        ys = [rng.normal(2), rng.normal(3)]
        lhs = emission_mean(mdl, [a + b for a, b in zip(xs, ys)])
        rhs = emission_mean(mdl, xs) + emission_mean(mdl, ys)
        np.testing.assert_allclose(lhs, rhs, atol=1e-14)

    def test_logpdf_at_mean_unit_noise(self):
        rng = RngStream(5)
        comps = [tiny_component(rng, dim=2)]
        mdl = Model(components=comps, emission=EmissionParams(1, np.ones(1)),
                    dt=1.0)
        x = [np.array([0.3, -0.1])]
        y = emission_mean(mdl, x)
        assert emission_logpdf(mdl, y, x) == pytest.approx(
            -0.5 * np.log(2 * np.pi), abs=1e-12)

    def test_logpdf_flattens_with_large_noise(self):
        rng = RngStream(6)
        comps = [tiny_component(rng, dim=1)]
        mdl = Model(components=comps, emission=EmissionParams(1, np.array([1e12])),
                    dt=1.0)
        x = [np.array([0.0])]
        a = emission_logpdf(mdl, np.array([0.0]), x)
        b = emission_logpdf(mdl, np.array([5.0]), x)
        assert abs(a - b) < 1e-10

    def test_logpdf_matches_mvn(self):
        rng = RngStream(7)
        mdl = tiny_model(rng, dims=(2, 2), out_dim=2)
        xs = [rng.normal(2), rng.normal(2)]
        y = rng.normal(2)
        g = Gaussian(emission_mean(mdl, xs),
                     np.diag(mdl.emission.obs_noise_diag))
        assert emission_logpdf(mdl, y, xs) == pytest.approx(
            mvn_logpdf(y, g), rel=1e-12)


class TestGpssmTransition:
    def test_zero_drift_random_walk(self):
        rng = RngStream(8)
        c = tiny_component(rng, tiny_S=True, q_scale=0.0)
        x = np.array([0.4])
        g = gpssm_transition(c, x, None)
        assert g.mean[0] == pytest.approx(0.4, abs=1e-12)
        # variance = Q + prior conditional variance at x
        from mrgpssm.kernels import sparse_conditional

        _, v = sparse_conditional(c.kernels[0], c.inducing, c.q_fM[0], x)
        assert g.cov[0, 0] == pytest.approx(c.Q_diag[0] + v, rel=1e-12)

    def test_interpolation_at_inducing_input(self):
        rng = RngStream(9)
        c = tiny_component(rng, tiny_S=True)
        x = c.inducing.inputs[0]
        g = gpssm_transition(c, x, None)
        assert g.mean[0] == pytest.approx(x[0] + c.q_fM[0].m_M[0], abs=1e-5)

    def test_diagonal_covariance_floor(self):
        rng = RngStream(10)
        c = tiny_component(rng, dim=3)
        g = gpssm_transition(c, rng.normal(3), None)
        off = g.cov - np.diag(np.diag(g.cov))
        assert np.abs(off).max() == 0.0
        assert np.diag(g.cov).min() >= c.Q_diag.min()


class TestSdeTransition:
    def test_step_to_zero_limit(self):
        rng = RngStream(11)
        c = tiny_component(rng, resolution=4)
        x = np.array([0.3])
        for step, tol in ((1e-4, 1e-3), (1e-7, 1e-6)):
            g = sde_transition(c, x, None, step=step)
            assert abs(g.mean[0] - 0.3) < tol
            assert g.cov[0, 0] < tol

    def test_equals_native_at_unit_step(self):
        rng = RngStream(12)
        for i in range(20):
            r = rng.child(i)
            d_u = int(r.integers(0, 2))
            c = tiny_component(r, d_u=d_u)
            x = r.normal(1)
            u = r.normal(d_u) if d_u else None
            g1 = gpssm_transition(c, x, u)
            g2 = sde_transition(c, x, u, step=1.0, dt=1.0)
            assert g2.mean[0] == pytest.approx(g1.mean[0], rel=1e-12, abs=1e-12)
            assert g2.cov[0, 0] == pytest.approx(g1.cov[0, 0], rel=1e-12)

    def test_richardson_mean_convergence(self):
        # one Euler step of size h vs two of size h/2 with frozen drift
        # weights: the mean gap shrinks like O(h^2)
        rng = RngStream(13)
        c = tiny_component(rng, q_scale=0.5, resolution=1)
        f_M = c.q_fM[0].m_M[None, :]

        def chained_mean(x0, h, n):
            x = np.array([x0])
            for _ in range(n):
                from mrgpssm.kernels import conditional_given_fM as cnd

                m, _ = cnd(c.kernels[0], c.inducing, f_M[0], x)
                # Euler mean update at step h under the unit-scale mapping
                x = x + h * m
            return x[0]

        x0 = 0.2
        gaps = []
        for h in (1.0, 0.5):
            one = chained_mean(x0, h, 1)
            two = chained_mean(x0, h / 2, 2)
            gaps.append(abs(one - two))
        ratio = gaps[0] / gaps[1]
        assert 2.5 < ratio < 6.0  # ~4 for O(h^2)

    def test_variance_contributions_scale_separately(self):
        rng = RngStream(14)
        c = tiny_component(rng, resolution=2)
        x, u = np.array([0.5]), None
        map_scale = 2.0

        def parts(step):
            g_full = sde_transition(c, x, u, step=step)
            c0 = ComponentParams(
                kernels=c.kernels, inducing=c.inducing,
                q_fM=[SparsePosterior(c.q_fM[0].m_M, c.q_fM[0].S_M_chol)],
                m_0=c.m_0, S_0_chol=c.S_0_chol,
                Q_diag=np.full(1, 1e-300), resolution=c.resolution)
            g_noq = sde_transition(c0, x, u, step=step)
            gp_part = g_noq.cov[0, 0]
            q_part = g_full.cov[0, 0] - gp_part
            return gp_part, q_part

        gp1, q1 = parts(0.5)
        gp2, q2 = parts(1.0)
        assert q2 / q1 == pytest.approx(2.0, rel=1e-9)  # linear in step
        assert gp2 / gp1 == pytest.approx(4.0, rel=1e-9)  # quadratic in step

    def test_non_positive_step(self):
        c = tiny_component(RngStream(15))
        with pytest.raises(NonPositiveStep):
            sde_transition(c, [0.0], None, step=0.0)


class TestPriorTransitionGivenFm:
    def test_zero_outputs_random_walk(self):
        rng = RngStream(16)
        c = tiny_component(rng)
        g = prior_transition_given_fM(c, [0.3], None, np.zeros((1, 3)))
        assert g.mean[0] == pytest.approx(0.3, abs=1e-15)

    def test_variance_at_inducing_input(self):
        rng = RngStream(17)
        c = tiny_component(rng)
        x = c.inducing.inputs[1]
        g = prior_transition_given_fM(c, x, None, np.zeros((1, 3)))
        assert g.cov[0, 0] == pytest.approx(c.Q_diag[0], abs=1e-5)

    def test_matches_conditional_composition(self):
        rng = RngStream(18)
        c = tiny_component(rng, dim=2, d_u=1, m=4)
        f_M = rng.normal((2, 4))
        x, u = rng.normal(2), rng.normal(1)
        g = prior_transition_given_fM(c, x, u, f_M)
        inp = np.concatenate([x, u])
        for d in range(2):
            m, v = conditional_given_fM(c.kernels[d], c.inducing, f_M[d], inp)
            assert g.mean[d] == pytest.approx(x[d] + m, rel=1e-12)
            assert g.cov[d, d] == pytest.approx(c.Q_diag[d] + v, rel=1e-12)


class TestSerialization:
    def test_round_trip_bit_stable(self):
        rng = RngStream(19)
        mdl = default_model(dims=[2, 1], resolutions=[30, 1], out_dim=1,
                            input_dim=2, n_inducing=5, rng=rng,
                            normalization={"y_mean": [0.1], "y_std": [2.0],
                                           "u_mean": [0.0, 0.0],
                                           "u_std": [1.0, 1.0]})
        doc = model_to_dict(mdl)
        text = json.dumps(doc)
        back = model_from_dict(json.loads(text))
        assert json.dumps(model_to_dict(back)) == text
        for c1, c2 in zip(mdl.components, back.components):
            np.testing.assert_array_equal(c1.inducing.inputs, c2.inducing.inputs)
            np.testing.assert_array_equal(c1.m_0, c2.m_0)
            for q1, q2 in zip(c1.q_fM, c2.q_fM):
                np.testing.assert_array_equal(q1.S_M_chol, q2.S_M_chol)
            assert c1.resolution == c2.resolution

    def test_version_guard(self):
        with pytest.raises(ValueError):
            model_from_dict({"version": 99})


class TestValidation:
    def test_dataset_checks(self):
        with pytest.raises(DimensionMismatch):
            Dataset(y=np.zeros((5, 1)), u=np.zeros((4, 1)))
        with pytest.raises(ValueError):
            Dataset(y=np.array([[np.nan], [0.0]]), u=np.zeros((2, 0)))

    def test_component_checks(self):
        rng = RngStream(20)
        with pytest.raises(ValueError):
            tiny_component(rng, Q=-1.0)

    def test_model_out_dim_guard(self):
        rng = RngStream(21)
        comps = [tiny_component(rng, dim=1)]
        with pytest.raises(DimensionMismatch):
            Model(components=comps, emission=EmissionParams(2, np.ones(2)),
                  dt=1.0)
