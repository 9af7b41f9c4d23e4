"""Latent-state sampling and marginalization schemes.

Four ways to obtain latent trajectories under the variational (or prior)
process:

* full Monte Carlo: draw the inducing outputs once per sample path and roll
  the f_M-conditioned transition (unbiased, O(t));
* the marginalized scheme: integrate the inducing outputs out of every step
  independently (biased joint law, O(t));
* the analytic recursion: exact conditionals of each state given the whole
  sampled history (O(t^3)), for the posterior and for the prior.

Plus dilated window extraction for resolution-R mini-batches.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DimensionMismatch, NonPositiveStep, Singular, WindowTooLong
from .gauss import Gaussian, chol_psd
from .kernels import cross_gram, gram
from .model import ComponentParams
from .rng import RngStream


class Scheme(Enum):
    FULL_MC = "fullmc"
    PRSSM = "prssm"
    ANALYTIC = "analytic"


@dataclass
class LatentPath:
    """Simulated latent states of one component over a window."""

    samples: np.ndarray  # (S, B, D_l)
    start_index: int
    stride: int
    scheme: Scheme

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("latent path contains non-finite values")

    def mean_path(self) -> np.ndarray:
        return self.samples.mean(axis=0)


class _ComponentSolves:
    """Per-dimension factorizations reused across rollout steps."""

    def __init__(self, c: ComponentParams):
        self.c = c
        self.L = []  # chol of K_MM + jitter per dim
        self.a_mean = []  # K_MM^-1 m_M per dim
        for d in range(c.dim):
            L = chol_psd(gram(c.kernels[d], c.inducing.inputs))
            self.L.append(L)
            self.a_mean.append(
                solve_triangular(
                    L.T, solve_triangular(L, c.q_fM[d].m_M, lower=True), lower=False
                )
            )

    def alpha_for(self, d: int, f_M_d: np.ndarray) -> np.ndarray:
        """K_MM^-1 f_M per sample; f_M_d is (S, M), returns (S, M)."""
        L = self.L[d]
        half = solve_triangular(L, f_M_d.T, lower=True)
        return solve_triangular(L.T, half, lower=False).T


def _check_window(c: ComponentParams, u_window: np.ndarray, n_steps: int):
    u_window = np.asarray(u_window, dtype=float)
    if u_window.ndim == 1:
        u_window = u_window[:, None]
    if u_window.shape != (n_steps, c.input_dim):
        raise DimensionMismatch(
            f"u_window shape {u_window.shape} != ({n_steps}, {c.input_dim})"
        )
    return u_window


def _rollout(
    c: ComponentParams,
    solves: _ComponentSolves,
    x: np.ndarray,  # (S, D_l) initial states
    u_window: np.ndarray,  # (n_steps, D_u)
    z_steps: np.ndarray,  # (n_steps, S, D_l)
    ratio: float,
    f_M: np.ndarray | None,  # (D_l, S, M) for full MC, None for marginalized
) -> np.ndarray:
    """Shared Euler recursion; returns states after each step (n_steps, S, D_l)."""
    S = x.shape[0]
    n_steps = z_steps.shape[0]
    out = np.empty((n_steps, S, c.dim))
    alphas = None
    if f_M is not None:
        alphas = [solves.alpha_for(d, f_M[d]) for d in range(c.dim)]
    for i in range(n_steps):
        inp = np.concatenate([x, np.broadcast_to(u_window[i], (S, c.input_dim))], axis=1)
        x_next = np.empty_like(x)
        for d in range(c.dim):
            k = c.kernels[d]
            Kxm = cross_gram(k, inp, c.inducing.inputs)  # (S, M)
            W = solve_triangular(solves.L[d], Kxm.T, lower=True)  # (M, S)
            prior_var = np.maximum(k.variance - np.sum(W * W, axis=0), 0.0)
            if f_M is not None:
                drift = np.sum(Kxm * alphas[d], axis=1)
                var = ratio * ratio * prior_var + ratio * c.Q_diag[d]
            else:
                drift = Kxm @ solves.a_mean[d]
                U = solve_triangular(solves.L[d].T, W, lower=False)
                V = c.q_fM[d].S_M_chol.T @ U
                post_var = np.sum(V * V, axis=0)
                var = ratio * ratio * (prior_var + post_var) + ratio * c.Q_diag[d]
            x_next[:, d] = (
                x[:, d]
                + ratio * drift
                + np.sqrt(np.maximum(var, 0.0)) * z_steps[i, :, d]
            )
        x = x_next
        out[i] = x
    return out


def _draw_init(c: ComponentParams, S: int, rng: RngStream):
    """f_M per dim, then x_0, then per-step noise (fixed draw order)."""
    z_f = rng.normal((c.dim, S, c.inducing.m))
    f_M = np.empty_like(z_f)
    for d in range(c.dim):
        f_M[d] = c.q_fM[d].m_M + z_f[d] @ c.q_fM[d].S_M_chol.T
    z0 = rng.normal((S, c.dim))
    x0 = c.m_0 + z0 @ c.S_0_chol.T
    return f_M, x0


def sample_seq_fullmc(
    c: ComponentParams,
    u_window,
    step: float,
    B: int,
    B0: int,
    S: int,
    rng: RngStream,
    dt: float = 1.0,
) -> LatentPath:
    """Roll B0+B transitions with one q(f_M) draw per sample path.

    ``u_window[i]`` is the exogenous input for transition i (source state);
    the returned path holds the last B states.
    """
    if B < 1 or B0 < 0 or S < 1:
        raise ValueError("need B >= 1, B0 >= 0, S >= 1")
    if step <= 0:
        raise NonPositiveStep(f"step must be > 0, got {step}")
    u_window = _check_window(c, u_window, B0 + B)
    solves = _ComponentSolves(c)
    f_M, x0 = _draw_init(c, S, rng)
    z_steps = rng.normal((B0 + B, S, c.dim))
    ratio = step / (c.resolution * dt)
    states = _rollout(c, solves, x0, u_window, z_steps, ratio, f_M)
    return LatentPath(states[B0:].transpose(1, 0, 2), 0, max(int(round(step / dt)), 1),
                      Scheme.FULL_MC)


def sample_seq_prssm(
    c: ComponentParams,
    u_window,
    step: float,
    B: int,
    B0: int,
    S: int,
    rng: RngStream,
    dt: float = 1.0,
) -> LatentPath:
    """As :func:`sample_seq_fullmc` but each step integrates q(f_M) out
    independently (no shared inducing-output draw across steps)."""
    if B < 1 or B0 < 0 or S < 1:
        raise ValueError("need B >= 1, B0 >= 0, S >= 1")
    if step <= 0:
        raise NonPositiveStep(f"step must be > 0, got {step}")
    u_window = _check_window(c, u_window, B0 + B)
    solves = _ComponentSolves(c)
    # keep the draw order of the full MC scheme so seeds are comparable
    _, x0 = _draw_init(c, S, rng)
    z_steps = rng.normal((B0 + B, S, c.dim))
    ratio = step / (c.resolution * dt)
    states = _rollout(c, solves, x0, u_window, z_steps, ratio, None)
    return LatentPath(states[B0:].transpose(1, 0, 2), 0, max(int(round(step / dt)), 1),
                      Scheme.PRSSM)


# ---------------------------------------------------------------------------
# Analytic marginalization of the inducing outputs


class AnalyticState:
    """Growing history of the exact marginalization recursion.

    Tracks, per latent dimension, the conditional-mean anchors, the full
    history covariance, and an incrementally extended Cholesky factor of its
    leading block. Single-owner mutable; one instance per sampled path.
    """

    def __init__(self, c: ComponentParams, posterior: bool, x0, u0, dt: float = 1.0):
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        if x0.size != c.dim:
            raise DimensionMismatch("x0 does not match component dim")
        self.c = c
        self.posterior = posterior
        self.dt = dt
        self.x_hist = [x0.copy()]
        # per-dim precomputations
        self.L_K = []
        self.beta = []  # K_MM^-1 m_M (zero for the prior)
        self.G = []  # K^-1 S_M K^-1 (posterior) or K^-1 (prior)
        m = c.inducing.m
        for d in range(c.dim):
            K = gram(c.kernels[d], c.inducing.inputs)
            L = chol_psd(K)
            self.L_K.append(L)
            Kinv = solve_triangular(
                L.T, solve_triangular(L, np.eye(m), lower=True), lower=False
            )
            if posterior:
                self.beta.append(Kinv @ c.q_fM[d].m_M)
                S_M = c.q_fM[d].cov()
                self.G.append(Kinv @ S_M @ Kinv)
            else:
                self.beta.append(np.zeros(m))
                self.G.append(Kinv)
        self.k_rows = [[] for _ in range(c.dim)]  # K_{x_t, M} per dim
        self.mu_tilde = [[] for _ in range(c.dim)]
        self.S_tilde = [np.zeros((0, 0)) for _ in range(c.dim)]
        self.chol = [np.zeros((0, 0)) for _ in range(c.dim)]
        self._append_anchor(x0, u0)

    @property
    def t(self) -> int:
        return len(self.x_hist)

    def _append_anchor(self, x, u):
        """Extend mu_tilde and S_tilde with the entry for a newly drawn state."""
        c = self.c
        u = np.atleast_1d(np.asarray(u, dtype=float)) if u is not None else np.empty(0)
        inp = np.concatenate([x, u])[None, :]
        for d in range(c.dim):
            krow = cross_gram(c.kernels[d], inp, c.inducing.inputs)[0]
            n = len(self.k_rows[d])
            self.k_rows[d].append(krow)
            self.mu_tilde[d].append(float(x[d] + krow @ self.beta[d]))
            Gk = self.G[d] @ krow
            new = np.empty((n + 1, n + 1))
            new[:n, :n] = self.S_tilde[d]
            cross = np.array([past @ Gk for past in self.k_rows[d][:n]])
            new[n, :n] = cross
            new[:n, n] = cross
            kk = float(krow @ Gk)
            w = solve_triangular(self.L_K[d], krow, lower=True)
            prior_cond = max(c.kernels[d].variance - float(w @ w), 0.0)
            new[n, n] = kk + c.Q_diag[d] + prior_cond
            self.S_tilde[d] = new

    def conditional(self) -> Gaussian:
        """q(x_t | x_{t-1}, ..., x_0) for the next index t = len(history)."""
        c = self.c
        h = self.t
        means = np.empty(c.dim)
        variances = np.empty(c.dim)
        self._pending_chol_rows = []
        for d in range(c.dim):
            S = self.S_tilde[d]
            mu = self.mu_tilde[d]
            if h == 1:
                mu_hat = mu[0]
                var_hat = S[0, 0]
                w = np.zeros(0)
            else:
                b = S[h - 1, : h - 1]
                resid = np.array(
                    [self.x_hist[j + 1][d] - mu[j] for j in range(h - 1)]
                )
                w = solve_triangular(self.chol[d], b, lower=True)
                v = solve_triangular(self.chol[d], resid, lower=True)
                mu_hat = mu[h - 1] + float(w @ v)
                var_hat = S[h - 1, h - 1] - float(w @ w)
            if var_hat <= 0:
                raise Singular("history covariance update lost positive definiteness")
            means[d] = mu_hat
            variances[d] = var_hat
            self._pending_chol_rows.append((w, np.sqrt(var_hat)))
        return Gaussian(means, np.diag(variances))

    def advance(self, cond: Gaussian, u, rng: RngStream) -> np.ndarray:
        """Draw x_t from the conditional, extend history and factors."""
        c = self.c
        z = rng.normal(c.dim)
        x_new = cond.mean + np.sqrt(np.diag(cond.cov)) * z
        # extend the Cholesky factor to cover the block ending at index t-1
        for d in range(c.dim):
            w, dd = self._pending_chol_rows[d]
            n = self.chol[d].shape[0]
            newL = np.zeros((n + 1, n + 1))
            newL[:n, :n] = self.chol[d]
            newL[n, :n] = w
            newL[n, n] = dd
            self.chol[d] = newL
        self.x_hist.append(x_new)
        self._append_anchor(x_new, u)
        return x_new


def analytic_step(state: AnalyticState, c: ComponentParams, u, x_next_rng: RngStream):
    """One exact-marginalization step of the variational process.

    Returns the conditional Gaussian of the next state given the sampled
    history, draws the state, and extends the recursion. ``u`` is the
    exogenous input paired with the newly drawn state.
    """
    if not state.posterior:
        raise ValueError("state was initialized for the prior recursion")
    cond = state.conditional()
    state.advance(cond, u, x_next_rng)
    return cond, state


def prior_analytic_step(state: AnalyticState, c: ComponentParams, u, rng: RngStream):
    """Same recursion under the prior substitution (m_M = 0, S_M = K_MM)."""
    if state.posterior:
        raise ValueError("state was initialized for the posterior recursion")
    cond = state.conditional()
    state.advance(cond, u, rng)
    return cond, state


def direct_history_covariance(state: AnalyticState, d: int) -> np.ndarray:
    """Non-incremental evaluation of the history covariance for dimension d
    from the realized states (test oracle for the recursion)."""
    c = state.c
    rows = state.k_rows[d]
    n = len(rows)
    out = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            out[i, j] = rows[i] @ state.G[d] @ rows[j]
            if i == j:
                w = solve_triangular(state.L_K[d], rows[i], lower=True)
                out[i, j] += c.Q_diag[d] + max(
                    c.kernels[d].variance - float(w @ w), 0.0
                )
    return out


# ---------------------------------------------------------------------------
# Dilated windows


def sample_dilated(series, R: int, B: int, rng: RngStream):
    """Uniform dilated window: rows t0, t0+R, ..., t0+(B-1)R of ``series``."""
    series = np.asarray(series)
    T = series.shape[0]
    if R < 1 or B < 1:
        raise ValueError("R and B must be >= 1")
    if T < R * B:
        raise WindowTooLong(f"window of R*B = {R * B} rows exceeds T = {T}")
    start = int(rng.integers(0, T - R * B + 1))
    rows = series[start + R * np.arange(B)]
    return start, rows


def dilated_indices(start: int, R: int, B: int) -> np.ndarray:
    return start + R * np.arange(B)
