"""Numerical certification of the model's equivalence results.

Each check is a named, seeded procedure returning an observed value and a
pass/fail verdict against a fixed tolerance:

* transition equivalence: the SDE Euler step under the parameter mapping
  reproduces the native transition moments exactly at R = 1;
* bound equality: the dilated-bound estimator at R = 1 equals the native
  estimator under shared random draws;
* posterior/prior marginal recursions: the exact history-conditional
  recursion reproduces Monte Carlo marginals;
* affine factorization: p(x|y) p(y) = p(y|x) p(x) pointwise;
* kernel rescaling values: the two mixed/state scaling cases;
* sampling-scheme bias: cross-step correlation contrast between the shared
  inducing-output scheme and the per-step marginalized scheme;
* gradient correctness of the bound against central differences.

``mutate_kernel_rescale=True`` deliberately breaks the state-state kernel
scaling so the suite can demonstrate it detects a wrong implementation.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from unittest import mock

import numpy as np
from scipy.linalg import solve_triangular

from . import autodiff as ad
from . import kernels as kernels_mod
from .elbo import draw_noise, elbo_minibatch, make_objective
from .gauss import Gaussian, affine_condition, chol_psd, mvn_logpdf
from .kernels import InducingSet, KernelView, RbfKernel, SparsePosterior, cross_gram, gram
from .model import ComponentParams, Dataset, default_model, gpssm_transition, sde_transition
from .rng import RngStream
from .sampling import AnalyticState, analytic_step, prior_analytic_step, sample_seq_fullmc, sample_seq_prssm


@dataclass
class CheckResult:
    check: str
    tolerance: str
    observed: float
    passed: bool
    detail: str = ""


def _broken_view_factory(k, step):
    if step <= 0:
        raise kernels_mod.NonPositiveStep(f"step must be > 0, got {step}")
    return KernelView(base=k, step=float(step), state_state_power=1)


@contextlib.contextmanager
def _maybe_mutated(mutate: bool):
    if mutate:
        with mock.patch.object(kernels_mod, "sde_rescaled", _broken_view_factory):
            yield
    else:
        yield


def _random_tiny_component(rng: RngStream, m: int, d_u: int, resolution: int = 1):
    """Well-conditioned random instance: separated inducing inputs and
    moderate hyperparameters, so K_MM stays far from singular."""
    d_in = 1 + d_u
    for attempt in range(100):
        zeta = rng.uniform(-2.0, 2.0, (m, d_in))
        dists = np.linalg.norm(zeta[:, None] - zeta[None, :], axis=-1)
        dists[np.diag_indices(m)] = np.inf
        if dists.min() > 0.6:
            break
    ker = RbfKernel(float(rng.uniform(0.2, 1.0)),
                    rng.uniform(0.6, 1.2, d_in))
    L = np.tril(0.1 * rng.normal((m, m)))
    L[np.diag_indices(m)] = rng.uniform(0.05, 0.3, m)
    q = SparsePosterior(0.2 * rng.normal(m), L)
    return ComponentParams(
        kernels=[ker],
        inducing=InducingSet(zeta),
        q_fM=[q],
        m_0=np.zeros(1),
        S_0_chol=0.1 * np.eye(1),
        Q_diag=np.array([float(rng.uniform(1e-3, 1e-2))]),
        resolution=resolution,
    )


def check_transition_equivalence(seed: int = 0, mutate: bool = False) -> CheckResult:
    """Native vs mapped-SDE transition moments at R = 1 (20 models x 50 states)."""
    rng = RngStream(seed, (101,))
    worst = 0.0
    with _maybe_mutated(mutate):
        for i in range(20):
            r = rng.child(i)
            m = int(r.integers(0, 2)) * 2 + 2  # 2 or 4
            d_u = int(r.integers(0, 2))
            c = _random_tiny_component(r.child(0), m, d_u)
            # exactly representable steps: scaling then commutes with rounding
            dt = float((0.5, 2.0, 0.25)[int(r.integers(0, 3))])
            for j in range(50):
                x = r.uniform(-2.0, 2.0, 1)
                u = r.uniform(-2.0, 2.0, d_u) if d_u else np.empty(0)
                g_native = gpssm_transition(c, x, u)
                g_sde = sde_transition(c, x, u, step=dt, dt=dt)
                rel_m = abs(g_native.mean[0] - g_sde.mean[0]) / max(
                    abs(g_native.mean[0]), abs(g_sde.mean[0]), 1.0)
                rel_v = abs(g_native.cov[0, 0] - g_sde.cov[0, 0]) / g_native.cov[0, 0]
                worst = max(worst, rel_m, rel_v)
    return CheckResult("transition_equivalence", "rel err <= 1e-12", worst,
                       worst <= 1e-12)


def check_bound_equality(seed: int = 0, mutate: bool = False) -> CheckResult:
    """Native-route vs SDE-route bound with shared draws (T = 12, dt = 0.7)."""
    dt = 0.7
    mdl = default_model(dims=[1], resolutions=[1], out_dim=1, input_dim=1,
                        n_inducing=3, rng=RngStream(seed, (102,)), dt=dt,
                        obs_noise=0.05)
    T = 12
    t = np.arange(T)
    data = Dataset(y=(0.2 * np.sin(0.7 * t))[:, None],
                   u=np.cos(0.9 * t)[:, None], dt=dt)
    with _maybe_mutated(mutate):
        e_native = elbo_minibatch(mdl, data, 0, None, (1, T, 0), 5,
                                  RngStream(seed, (103,)), route="gpssm")
        e_sde = elbo_minibatch(mdl, data, 0, None, (1, T, 0), 5,
                               RngStream(seed, (103,)), route="sde")
    diff = abs(e_native.value - e_sde.value)
    return CheckResult("bound_equality", "abs diff <= 1e-10", diff, diff <= 1e-10)


# -- batched replica of the analytic recursion (1-dim latent), used to drive
#    the large-sample marginal checks at acceptable cost. Its exact agreement
#    with the per-path implementation is itself one of the checks below.


def batched_analytic_paths(
    c: ComponentParams,
    x0: np.ndarray,  # (N,)
    u_seq,  # (T, D_u) inputs paired with drawn states (index 1..T) or None
    n_steps: int,
    z: np.ndarray,  # (n_steps, N) standard normal draws
    posterior: bool = True,
) -> np.ndarray:
    """States after n_steps of the exact marginalization recursion, (N,)."""
    if c.dim != 1:
        raise ValueError("batched recursion supports 1-dim components only")
    N = x0.size
    m = c.inducing.m
    K = gram(c.kernels[0], c.inducing.inputs)
    L = chol_psd(K)
    Kinv = solve_triangular(L.T, solve_triangular(L, np.eye(m), lower=True),
                            lower=False)
    if posterior:
        beta = Kinv @ c.q_fM[0].m_M
        G = Kinv @ c.q_fM[0].cov() @ Kinv
    else:
        beta = np.zeros(m)
        G = Kinv

    def krow(xs, step_idx):
        if c.input_dim:
            u = np.broadcast_to(u_seq[step_idx], (N, c.input_dim))
            inp = np.concatenate([xs[:, None], u], axis=1)
        else:
            inp = xs[:, None]
        return cross_gram(c.kernels[0], inp, c.inducing.inputs)  # (N, m)

    def diag_extra(kr):
        w = solve_triangular(L, kr.T, lower=True)
        prior = np.maximum(c.kernels[0].variance - np.sum(w * w, axis=0), 0.0)
        return c.Q_diag[0] + prior

    X = x0.copy()
    kr = krow(X, 0)
    mu = [X + kr @ beta]
    k_rows = [kr]
    Smat = np.empty((N, 1, 1))
    Smat[:, 0, 0] = np.einsum("nm,mk,nk->n", kr, G, kr) + diag_extra(kr)
    xs_hist = [X]
    for step in range(1, n_steps + 1):
        h = step  # history length - 1 == index of newest anchor
        if h == 1:
            mu_hat = mu[0]
            var_hat = Smat[:, 0, 0]
        else:
            A = Smat[:, : h - 1, : h - 1]
            b = Smat[:, h - 1, : h - 1]
            resid = np.stack(
                [xs_hist[j + 1] - mu[j] for j in range(h - 1)], axis=1
            )
            sol_b = np.linalg.solve(A, b[:, :, None])[:, :, 0]
            mu_hat = mu[h - 1] + np.einsum("nj,nj->n", sol_b, resid)
            var_hat = Smat[:, h - 1, h - 1] - np.einsum("nj,nj->n", b, sol_b)
        x_new = mu_hat + np.sqrt(np.maximum(var_hat, 0.0)) * z[step - 1]
        kr = krow(x_new, step)
        mu.append(x_new + kr @ beta)
        xs_hist.append(x_new)
        cross = np.stack(
            [np.einsum("nm,mk,nk->n", kr, G, past) for past in k_rows], axis=1
        )
        k_rows.append(kr)
        newS = np.empty((N, h + 1, h + 1))
        newS[:, :h, :h] = Smat
        newS[:, h, :h] = cross
        newS[:, :h, h] = cross
        newS[:, h, h] = np.einsum("nm,mk,nk->n", kr, G, kr) + diag_extra(kr)
        Smat = newS
    return xs_hist[-1]


def _marginal_check(name: str, posterior: bool, seed: int) -> CheckResult:
    """Analytic-recursion marginal of x_3 vs brute-force Monte Carlo."""
    rng = RngStream(seed, (104 if posterior else 105,))
    c = _random_tiny_component(rng.child(0), m=3, d_u=0)
    n = 200_000
    n_steps = 3
    # Monte Carlo side: full rollout with one inducing-output draw per path
    if posterior:
        mc_rng = rng.child(1)
        path = sample_seq_fullmc(c, np.zeros((n_steps, 0)), 1.0, B=n_steps,
                                 B0=0, S=n, rng=mc_rng)
        mc = path.samples[:, -1, 0]
        x0 = c.m_0 + (rng.child(2).normal(n)) * c.S_0_chol[0, 0]
    else:
        mc_rng = rng.child(1)
        K = gram(c.kernels[0], c.inducing.inputs)
        LK = chol_psd(K)
        f_M = (mc_rng.normal((n, c.inducing.m))) @ LK.T
        x = np.full(n, 0.1) + 0.05 * mc_rng.normal(n)
        x0_mc = x.copy()
        for _ in range(n_steps):
            kr = cross_gram(c.kernels[0], x[:, None], c.inducing.inputs)
            w = solve_triangular(LK, kr.T, lower=True)
            prior_var = np.maximum(c.kernels[0].variance - np.sum(w * w, axis=0), 0.0)
            alpha = solve_triangular(LK.T, solve_triangular(LK, f_M.T, lower=True),
                                     lower=False).T
            drift = np.sum(kr * alpha, axis=1)
            x = x + drift + np.sqrt(prior_var + c.Q_diag[0]) * mc_rng.normal(n)
        mc = x
        x0 = np.full(n, 0.1) + 0.05 * rng.child(2).normal(n)
    # analytic side (batched replica of the per-path recursion)
    z = rng.child(3).normal((n_steps, n))
    an = batched_analytic_paths(c, x0, None, n_steps, z, posterior=posterior)
    se = np.sqrt(mc.var() / n + an.var() / n)
    mean_gap = abs(mc.mean() - an.mean()) / se
    var_gap = abs(mc.var() - an.var()) / mc.var()
    passed = (mean_gap <= 3.0) and (var_gap <= 0.05)
    return CheckResult(
        name, "mean within 3 SE, var within 5%",
        float(max(mean_gap / 3.0, var_gap / 0.05)), passed,
        detail=f"mean_gap={mean_gap:.2f} SE, var_gap={100 * var_gap:.2f}%",
    )


def check_posterior_marginals(seed: int = 0, mutate: bool = False) -> CheckResult:
    return _marginal_check("posterior_marginal_recursion", True, seed)


def check_prior_marginals(seed: int = 0, mutate: bool = False) -> CheckResult:
    return _marginal_check("prior_marginal_recursion", False, seed)


def check_recursion_consistency(seed: int = 0, mutate: bool = False) -> CheckResult:
    """Per-path recursion vs its batched replica with injected common draws,
    for the posterior and for the prior substitution."""
    rng = RngStream(seed, (106,))
    c = _random_tiny_component(rng.child(0), m=3, d_u=0)
    n = 64
    n_steps = 3

    class _Inject:
        def __init__(self, cols):
            self.cols = list(cols)

        def normal(self, size=None):
            return np.array([self.cols.pop(0)])

    worst = 0.0
    for posterior in (True, False):
        x0 = rng.child(1, int(posterior)).normal(n) * 0.3
        z = rng.child(2, int(posterior)).normal((n_steps, n))
        batched = batched_analytic_paths(c, x0, None, n_steps, z,
                                         posterior=posterior)
        step_fn = analytic_step if posterior else prior_analytic_step
        for i in range(n):
            st = AnalyticState(c, posterior=posterior, x0=[x0[i]], u0=None)
            inj = _Inject(z[:, i])
            for _ in range(n_steps):
                _, st = step_fn(st, c, None, inj)
            worst = max(worst, abs(st.x_hist[-1][0] - batched[i]))
    return CheckResult("recursion_consistency", "abs diff <= 1e-10", worst,
                       worst <= 1e-10)


def check_affine_factorization(seed: int = 0, mutate: bool = False) -> CheckResult:
    """log p(x|y) + log p(y) == log p(y|x) + log p(x) at random points."""
    rng = RngStream(seed, (107,))
    worst = 0.0
    for i in range(20):
        r = rng.child(i)
        B = r.normal((2, 2))
        prior_y = Gaussian(r.normal(2), B @ B.T + 0.5 * np.eye(2))
        a = r.normal(2)
        F = r.normal((2, 2))
        A_half = r.normal((2, 2))
        A = A_half @ A_half.T + 0.3 * np.eye(2)
        marg, cond = affine_condition(prior_y, a, F, A)
        for _ in range(20):
            y = r.normal(2)
            x = r.normal(2)
            lhs = mvn_logpdf(x, Gaussian(a + F @ y, A)) + mvn_logpdf(y, prior_y)
            rhs = mvn_logpdf(y, cond.condition_on(x)) + mvn_logpdf(x, marg)
            worst = max(worst, abs(lhs - rhs))
    return CheckResult("affine_factorization", "abs log-density err <= 1e-9",
                       worst, worst <= 1e-9)


def check_kernel_rescaling(seed: int = 0, mutate: bool = False) -> CheckResult:
    """Mixed and state-state scalings at step 2: k/2 and k/4."""
    ker = RbfKernel(0.25, np.array([2.0]))
    x, y = np.array([0.3]), np.array([-0.7])
    base = kernels_mod.kernel_eval(ker, x, y)
    with _maybe_mutated(mutate):
        view = kernels_mod.sde_rescaled(ker, 2.0)
        ss = view.eval(x, kernels_mod.STATE, y, kernels_mod.STATE)
        ms = view.eval(x, kernels_mod.INDUCING, y, kernels_mod.STATE)
        sm = view.eval(x, kernels_mod.STATE, y, kernels_mod.INDUCING)
        mm = view.eval(x, kernels_mod.INDUCING, y, kernels_mod.INDUCING)
    worst = max(abs(ss - base / 4.0), abs(ms - base / 2.0),
                abs(sm - base / 2.0), abs(mm - base))
    return CheckResult("kernel_rescaling", "abs err <= 1e-15", worst,
                       worst <= 1e-15)


def check_scheme_bias(seed: int = 0, mutate: bool = False) -> CheckResult:
    """Cross-step increment correlation: shared f_M draws correlate
    consecutive steps, per-step marginalization does not."""
    c = ComponentParams(
        kernels=[RbfKernel(1.0, np.array([2.0]))],
        inducing=InducingSet(np.array([[1.0]])),
        q_fM=[SparsePosterior(np.zeros(1), 2.0 * np.eye(1))],
        m_0=np.zeros(1),
        S_0_chol=1e-6 * np.eye(1),
        Q_diag=np.array([1e-4]),
        resolution=1,
    )
    n = 100_000
    u = np.zeros((2, 0))

    def incr_corr(path):
        x = path.samples[:, :, 0]
        x0 = np.zeros(n)  # S_0 ~ 0
        d1 = x[:, 0] - x0
        d2 = x[:, 1] - x[:, 0]
        return float(np.corrcoef(d1, d2)[0, 1])

    rho_full = incr_corr(sample_seq_fullmc(c, u, 1.0, B=2, B0=0, S=n,
                                           rng=RngStream(seed, (108,))))
    rho_pr = incr_corr(sample_seq_prssm(c, u, 1.0, B=2, B0=0, S=n,
                                        rng=RngStream(seed, (109,))))
    passed = (rho_full > 0.2) and (abs(rho_pr) < 0.02)
    return CheckResult(
        "scheme_bias", "full-MC corr > 0.2, marginalized |corr| < 0.02",
        rho_full, passed, detail=f"rho_full={rho_full:.3f}, rho_pr={rho_pr:.4f}",
    )


def check_gradients(seed: int = 0, mutate: bool = False) -> CheckResult:
    """Bound gradient vs central differences on a tiny instance."""
    mdl = default_model(dims=[1], resolutions=[1], out_dim=1, input_dim=0,
                        n_inducing=2, rng=RngStream(seed, (110,)), obs_noise=0.3)
    T = 6
    data = Dataset(y=(0.3 * np.sin(np.arange(T)))[:, None],
                   u=np.zeros((T, 0)), dt=1.0)
    pvec, theta0, objective = make_objective(mdl, data, 0, None, 1, T, 0, 1)
    noise = draw_noise(mdl, [0], T, 1, RngStream(seed, (111,)))

    def f(theta):
        est, grad = objective(theta, [0], noise)
        return est.value, grad

    err = ad.check_grad(f, theta0, h=1e-5)
    return CheckResult("gradient_check", "max rel err < 1e-4", err, err < 1e-4)


ALL_CHECKS = [
    check_transition_equivalence,
    check_bound_equality,
    check_posterior_marginals,
    check_prior_marginals,
    check_recursion_consistency,
    check_affine_factorization,
    check_kernel_rescaling,
    check_scheme_bias,
    check_gradients,
]


def run_all(seed: int = 1, mutate_kernel_rescale: bool = False) -> list[CheckResult]:
    return [fn(seed=seed, mutate=mutate_kernel_rescale) for fn in ALL_CHECKS]


def results_to_dicts(results: list[CheckResult]) -> list[dict]:
    return [
        {
            "check": r.check,
            "tolerance": r.tolerance,
            "observed": float(r.observed),
            "passed": bool(r.passed),
            "detail": r.detail,
        }
        for r in results
    ]
