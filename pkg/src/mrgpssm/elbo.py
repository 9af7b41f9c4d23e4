"""Evidence lower bound assembly.

Builds the mini-batch bound on an autodiff tape: dilated windows, a full
Monte Carlo rollout of the active component with reparameterized draws,
likelihood rescaling by (T/R)/B, and the two KL terms. Partial residuals
turn the multi-component emission into a single-component target during
backfitting.

Two numerically distinct but mathematically equivalent code paths exist for
the transition arithmetic: ``route="gpssm"`` uses the native per-observation
formulas, ``route="sde"`` goes through the step-rescaled kernel view and the
Euler-step composition. Their agreement (with shared random draws) is the
executable content of the bound-equality corollary and is enforced by the
verification suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import BlockSpec, ParamVector, Tape, Var
from .errors import MissingCache, WindowTooLong
from .gauss import LOG_2PI, Gaussian, kl_gaussian
from .kernels import RbfKernel, InducingSet, SparsePosterior, gram
from .model import ComponentParams, Dataset, Model
from .rng import RngStream
from .sampling import sample_dilated

JITTER_BASE = 1e-8


@dataclass(frozen=True)
class ElboEstimate:
    """One evaluation of the bound with its three-term decomposition."""

    value: float
    loglik_term: float
    kl_x0: float
    kl_fM: float
    n_samples: int
    batch: tuple  # (start, B, R)

    def __post_init__(self):
        resid = self.value - (self.loglik_term - self.kl_x0 - self.kl_fM)
        if abs(resid) > 1e-12 * max(1.0, abs(self.value)):
            raise ValueError("ELBO decomposition identity violated")


# ---------------------------------------------------------------------------
# KL terms (plain numpy; the on-tape versions live in the graph builder)


def kl_terms_component(model: Model, l: int) -> tuple[float, float]:
    c = model.components[l]
    kl_x0 = kl_gaussian(Gaussian.from_chol(c.m_0, c.S_0_chol), model.prior_x0[l])
    kl_fm = 0.0
    for d in range(c.dim):
        K = gram(c.kernels[d], c.inducing.inputs)
        q = Gaussian.from_chol(c.q_fM[d].m_M, c.q_fM[d].S_M_chol)
        kl_fm += kl_gaussian(q, Gaussian(np.zeros(c.inducing.m), K))
    return kl_x0, kl_fm


def kl_terms(model: Model) -> tuple[float, float]:
    """Summed KL(q(x_0)||p(x_0)) and KL(q(f_M)||p(f_M)) over components."""
    kl_x0 = 0.0
    kl_fm = 0.0
    for l in range(model.n_components):
        a, b = kl_terms_component(model, l)
        kl_x0 += a
        kl_fm += b
    return kl_x0, kl_fm


def partial_residual(data: Dataset, cached, l: int,
                     sample_index: int | None = None) -> np.ndarray:
    """Observations minus the emissions of all components except l.

    Mean cached latents are used by default. ``sample_index`` switches to a
    single retained sample path per component (ablation mode; the cache must
    have been built with samples kept).
    """
    paths = getattr(cached, "paths", cached)
    if sample_index is not None:
        samples = getattr(cached, "samples", None)
        if not samples:
            raise MissingCache("cache holds no sample paths")
        paths = {lp: p[sample_index] for lp, p in samples.items()}
    resid = data.y.copy()
    d_y = data.out_dim
    n_components = getattr(cached, "n_components", None)
    keys = range(n_components) if n_components is not None else sorted(paths)
    for lp in keys:
        if lp == l:
            continue
        if paths is None or lp not in paths:
            raise MissingCache(f"no cached latents for component {lp}")
        mean_path = paths[lp]
        if mean_path.shape[0] != data.T:
            raise MissingCache(f"cached path for component {lp} has wrong length")
        resid -= mean_path[:, :d_y]
    return resid


# ---------------------------------------------------------------------------
# Parameter blocks


def component_specs(model: Model, l: int) -> list[BlockSpec]:
    c = model.components[l]
    m, d_in = c.inducing.m, c.inducing.input_dim
    specs = [
        BlockSpec(f"c{l}.m0", (c.dim,), "identity"),
        BlockSpec(f"c{l}.S0", (c.dim, c.dim), "chol"),
        BlockSpec(f"c{l}.zeta", (m, d_in), "identity"),
        BlockSpec(f"c{l}.Q", (c.dim,), "softplus"),
    ]
    for d in range(c.dim):
        specs += [
            BlockSpec(f"c{l}.d{d}.mM", (m,), "identity"),
            BlockSpec(f"c{l}.d{d}.SM", (m, m), "chol"),
            BlockSpec(f"c{l}.d{d}.kvar", (), "softplus"),
            BlockSpec(f"c{l}.d{d}.kls", (d_in,), "softplus"),
        ]
    return specs


def trainable_specs(model: Model, active: list[int]) -> list[BlockSpec]:
    specs = []
    for l in active:
        specs += component_specs(model, l)
    specs.append(BlockSpec("omega", (model.emission.out_dim,), "softplus"))
    return specs


def block_values(model: Model, active: list[int]) -> dict[str, np.ndarray]:
    """Constrained values of the trainable blocks, ready for unconstrain()."""
    out = {}
    for l in active:
        c = model.components[l]
        out[f"c{l}.m0"] = c.m_0.copy()
        out[f"c{l}.S0"] = c.S_0_chol.copy()
        out[f"c{l}.zeta"] = c.inducing.inputs.copy()
        out[f"c{l}.Q"] = c.Q_diag.copy()
        for d in range(c.dim):
            out[f"c{l}.d{d}.mM"] = c.q_fM[d].m_M.copy()
            out[f"c{l}.d{d}.SM"] = c.q_fM[d].S_M_chol.copy()
            out[f"c{l}.d{d}.kvar"] = np.asarray(c.kernels[d].variance)
            out[f"c{l}.d{d}.kls"] = c.kernels[d].lengthscales.copy()
    out["omega"] = model.emission.obs_noise_diag.copy()
    return out


def model_with_blocks(model: Model, values: dict[str, np.ndarray]) -> Model:
    """New model with the given constrained block values substituted."""
    comps = list(model.components)
    for l in range(model.n_components):
        if f"c{l}.m0" not in values:
            continue
        old = model.components[l]
        kers = [
            RbfKernel(float(values[f"c{l}.d{d}.kvar"]), values[f"c{l}.d{d}.kls"])
            for d in range(old.dim)
        ]
        qs = [
            SparsePosterior(values[f"c{l}.d{d}.mM"], values[f"c{l}.d{d}.SM"])
            for d in range(old.dim)
        ]
        comps[l] = ComponentParams(
            kernels=kers,
            inducing=InducingSet(values[f"c{l}.zeta"]),
            q_fM=qs,
            m_0=values[f"c{l}.m0"],
            S_0_chol=values[f"c{l}.S0"],
            Q_diag=values[f"c{l}.Q"],
            resolution=old.resolution,
        )
    emission = model.emission
    if "omega" in values:
        emission = type(emission)(emission.out_dim, values["omega"])
    return Model(
        components=comps,
        emission=emission,
        dt=model.dt,
        prior_x0=model.prior_x0,
        normalization=model.normalization,
    )


# ---------------------------------------------------------------------------
# Noise packs (frozen reparameterization draws)


def draw_noise(model: Model, active: list[int], n_steps: int, n_rows: int,
               rng: RngStream) -> list[dict]:
    packs = []
    for l in active:
        c = model.components[l]
        packs.append({
            "zf": rng.normal((c.dim, n_rows, c.inducing.m)),
            "z0": rng.normal((n_rows, c.dim)),
            "zs": rng.normal((n_steps, n_rows, c.dim)),
        })
    return packs


# ---------------------------------------------------------------------------
# Graph construction


class _TapeComponent:
    """On-tape view of one component: constrained parameter Vars plus the
    per-dimension precomputations reused across rollout steps."""

    def __init__(self, tape: Tape, model: Model, l: int, cvars: dict[str, Var],
                 noise: dict, route: str):
        c = model.components[l]
        self.c = c
        self.dim = c.dim
        self.route = route
        self.map_scale = c.resolution * model.dt
        p = f"c{l}."
        self.m0 = cvars[p + "m0"]
        self.S0 = cvars[p + "S0"]
        self.zeta = cvars[p + "zeta"]
        q_vec = cvars[p + "Q"]
        q_row = ad.reshape(q_vec, (1, c.dim))
        self.q_d = [
            ad.reshape(ad.slice_cols(q_row, d, d + 1), ()) for d in range(c.dim)
        ]
        self.mM = [cvars[p + f"d{d}.mM"] for d in range(c.dim)]
        self.SM = [cvars[p + f"d{d}.SM"] for d in range(c.dim)]
        self.kvar = [cvars[p + f"d{d}.kvar"] for d in range(c.dim)]
        self.kls = [cvars[p + f"d{d}.kls"] for d in range(c.dim)]
        self.noise = noise
        m, d_in = c.inducing.m, c.inducing.input_dim
        jit_eye = JITTER_BASE * np.eye(m)
        self.V = []
        self.colsq = []
        self.L = []
        self.alpha = []
        for d in range(c.dim):
            ls_row = ad.reshape(self.kls[d], (1, d_in))
            V = ad.div(self.zeta, ls_row)
            vsq = ad.vsum(ad.square(V), axis=1)
            sqmm = ad.add(
                ad.sub(ad.reshape(vsq, (m, 1)), ad.mul(ad.matmul(V, ad.transpose(V)), 2.0)),
                ad.reshape(vsq, (1, m)),
            )
            Kmm = ad.add(ad.mul(ad.exp(ad.mul(sqmm, -0.5)), self.kvar[d]), jit_eye)
            L = ad.cholesky(Kmm)
            # one q(f_M) draw per row, reused at every step of the rollout
            f_M = ad.reparam_sample(self.mM[d], self.SM[d], noise["zf"][d])
            half = ad.triangular_solve(L, ad.transpose(f_M))
            alpha = ad.transpose(ad.triangular_solve(L, half, trans=True))
            self.V.append(V)
            self.colsq.append(ad.reshape(vsq, (1, m)))
            self.L.append(L)
            self.alpha.append(alpha)
        self.x_cols = None  # set by init_state

    def init_state(self):
        x0 = ad.reparam_sample(self.m0, self.S0, self.noise["z0"])
        n = self.noise["z0"].shape[0]
        self.x_cols = [
            ad.reshape(ad.slice_cols(x0, d, d + 1), (n,)) for d in range(self.dim)
        ]

    def step(self, i: int, u_rows: np.ndarray):
        """One transition for all rows; updates the per-dim state columns."""
        c = self.c
        x_mat = ad.stack_cols(self.x_cols)
        if c.input_dim > 0:
            inp = ad.concat_cols(x_mat, u_rows)
        else:
            inp = x_mat
        s = self.map_scale
        new_cols = []
        for d in range(c.dim):
            d_in = c.inducing.input_dim
            ls_row = ad.reshape(self.kls[d], (1, d_in))
            U = ad.div(inp, ls_row)
            rowsq = ad.vsum(ad.square(U), axis=1, keepdims=True)
            sq = ad.add(
                ad.sub(rowsq, ad.mul(ad.matmul(U, ad.transpose(self.V[d])), 2.0)),
                self.colsq[d],
            )
            Kxm = ad.mul(ad.exp(ad.mul(sq, -0.5)), self.kvar[d])
            z = self.noise["zs"][i][:, d]
            if self.route == "gpssm":
                drift = ad.vsum(ad.mul(Kxm, self.alpha[d]), axis=1)
                W = ad.triangular_solve(self.L[d], ad.transpose(Kxm))
                prior_var = ad.maximum_const(
                    ad.sub(self.kvar[d], ad.vsum(ad.square(W), axis=0)), 0.0
                )
                var = ad.add(prior_var, self.q_d[d])
                inc = drift
            else:  # sde: through the step-rescaled view
                Kxm_v = ad.mul(Kxm, 1.0 / s)
                drift_rate = ad.vsum(ad.mul(Kxm_v, self.alpha[d]), axis=1)
                W = ad.triangular_solve(self.L[d], ad.transpose(Kxm_v))
                var_rate = ad.maximum_const(
                    ad.sub(ad.mul(self.kvar[d], 1.0 / (s * s)),
                           ad.vsum(ad.square(W), axis=0)),
                    0.0,
                )
                inc = ad.mul(drift_rate, s)
                var = ad.add(ad.mul(var_rate, s * s),
                             ad.mul(ad.div(self.q_d[d], s), s))
            new_cols.append(
                ad.add(ad.add(self.x_cols[d], inc), ad.mul(ad.sqrt(var), z))
            )
        self.x_cols = new_cols

    def emission_cols(self, d_y: int):
        return ad.stack_cols(self.x_cols[:d_y])

    def kl_on_tape(self, prior: Gaussian):
        c = self.c
        m = c.inducing.m
        Lp = prior.chol
        half_S = ad.triangular_solve(Lp, self.S0)
        half_m = ad.triangular_solve(Lp, ad.sub(self.m0, prior.mean))
        logdet_q0 = ad.mul(ad.vsum(ad.log(ad.diag_part(self.S0))), 2.0)
        kl_x0 = ad.mul(
            ad.add(
                ad.sub(
                    ad.add(ad.vsum(ad.square(half_S)), ad.vsum(ad.square(half_m))),
                    float(c.dim) - prior.logdet_cov(),
                ),
                ad.mul(logdet_q0, -1.0),
            ),
            0.5,
        )
        kl_fm = None
        for d in range(c.dim):
            A = ad.triangular_solve(self.L[d], self.SM[d])
            y = ad.triangular_solve(self.L[d], self.mM[d])
            logdet_K = ad.mul(ad.vsum(ad.log(ad.diag_part(self.L[d]))), 2.0)
            logdet_S = ad.mul(ad.vsum(ad.log(ad.diag_part(self.SM[d]))), 2.0)
            term = ad.mul(
                ad.add(
                    ad.sub(
                        ad.add(ad.vsum(ad.square(A)), ad.vsum(ad.square(y))),
                        float(m),
                    ),
                    ad.sub(logdet_K, logdet_S),
                ),
                0.5,
            )
            kl_fm = term if kl_fm is None else ad.add(kl_fm, term)
        return kl_x0, kl_fm


@dataclass
class ElboGraph:
    root: Var
    loglik: Var
    kl_x0: Var
    kl_fM: Var


def build_elbo_graph(
    tape: Tape,
    model: Model,
    cvars: dict[str, Var],
    targets: np.ndarray,  # residual targets (T, D_y)
    u_series: np.ndarray,  # (T, D_u)
    active: list[int],
    starts: list[int],
    R: int,
    B: int,
    B0: int,
    S: int,
    noise: list[dict],
    route: str = "sde",
) -> ElboGraph:
    T = targets.shape[0]
    d_y = targets.shape[1]
    n_w = len(starts)
    n_steps = B0 + B
    comps = [
        _TapeComponent(tape, model, l, cvars, noise[j], route)
        for j, l in enumerate(active)
    ]
    for tc in comps:
        tc.init_state()
    omega = cvars["omega"]
    om_row = ad.reshape(omega, (1, d_y))
    log_om = ad.log(om_row)
    starts_arr = np.asarray(starts, dtype=int)
    ll_sum = None
    for i in range(n_steps):
        # exogenous input at the source state's observation index
        u_idx = np.clip(starts_arr + (i - B0 - 1) * R, 0, T - 1)
        u_rows = np.repeat(u_series[u_idx], S, axis=0)
        for tc in comps:
            tc.step(i, u_rows)
        if i >= B0:
            obs_idx = starts_arr + (i - B0) * R
            resid = np.repeat(targets[obs_idx], S, axis=0)
            pred = comps[0].emission_cols(d_y)
            for tc in comps[1:]:
                pred = ad.add(pred, tc.emission_cols(d_y))
            err = ad.sub(resid, pred)
            term = ad.add(ad.add(ad.div(ad.square(err), om_row), log_om), LOG_2PI)
            step_ll = ad.mul(ad.vsum(term), -0.5)
            ll_sum = step_ll if ll_sum is None else ad.add(ll_sum, step_ll)
    J = float(T) / R
    loglik = ad.mul(ll_sum, J / (B * S * n_w))
    kl_x0 = None
    kl_fm = None
    for tc, l in zip(comps, active):
        a, b = tc.kl_on_tape(model.prior_x0[l])
        kl_x0 = a if kl_x0 is None else ad.add(kl_x0, a)
        kl_fm = b if kl_fm is None else ad.add(kl_fm, b)
    # frozen components contribute constant KL
    const_x0 = 0.0
    const_fm = 0.0
    for l in range(model.n_components):
        if l in active:
            continue
        a, b = kl_terms_component(model, l)
        const_x0 += a
        const_fm += b
    if const_x0 or const_fm:
        kl_x0 = ad.add(kl_x0, const_x0)
        kl_fm = ad.add(kl_fm, const_fm)
    root = ad.sub(ad.sub(loglik, kl_x0), kl_fm)
    return ElboGraph(root=root, loglik=loglik, kl_x0=kl_x0, kl_fM=kl_fm)


# ---------------------------------------------------------------------------
# Objective factory and the public estimator


def make_objective(
    model: Model,
    data: Dataset,
    l_active: int | None,
    cached,
    R: int,
    B: int,
    B0: int,
    S: int,
    route: str = "sde",
    residual_sample: int | None = None,
):
    """Bundle (ParamVector, theta0, objective) for the trainable blocks.

    objective(theta, starts, noise) returns (ElboEstimate, flat gradient of
    the bound w.r.t. the unconstrained vector).
    """
    if data.T < R * B:
        raise WindowTooLong(
            f"T = {data.T} < R*B = {R * B}; need at least {R * B} rows"
        )
    active = list(range(model.n_components)) if l_active is None else [l_active]
    if l_active is not None and model.n_components > 1:
        targets = partial_residual(data, cached, l_active,
                                   sample_index=residual_sample)
    else:
        targets = data.y
    pvec = ParamVector(trainable_specs(model, active))
    theta0 = pvec.unconstrain(block_values(model, active))

    def objective(theta: np.ndarray, starts: list[int], noise: list[dict]):
        tape = Tape()
        cvars = pvec.constrained_vars(tape, theta)
        graph = build_elbo_graph(
            tape, model, cvars, targets, data.u, active, starts,
            R, B, B0, S, noise, route=route,
        )
        grads = tape.backward(graph.root)
        flat = pvec.join(grads)
        est = ElboEstimate(
            value=float(graph.root.value),
            loglik_term=float(graph.loglik.value),
            kl_x0=float(graph.kl_x0.value),
            kl_fM=float(graph.kl_fM.value),
            n_samples=S,
            batch=(starts[0], B, R),
        )
        return est, flat

    return pvec, theta0, objective


def elbo_minibatch(
    model: Model,
    data: Dataset,
    l_active: int | None,
    cached,
    batch: tuple[int, int, int],
    S: int,
    rng: RngStream,
    route: str = "sde",
) -> ElboEstimate:
    """One dilated-window estimate of the bound (value only).

    ``batch`` is (R, B, B0). The window start, the q(f_M)/q(x_0) draws and
    the per-step noise are all taken from ``rng`` in a fixed order, so two
    calls with equal seeds share their randomness exactly. The estimator is
    reentrant: concurrent evaluations only need independent streams.
    """
    R, B, B0 = batch
    if data.T < R * B:
        raise WindowTooLong(
            f"T = {data.T} < R*B = {R * B}; need at least {R * B} rows"
        )
    start, _ = sample_dilated(data.y, R, B, rng)
    active = list(range(model.n_components)) if l_active is None else [l_active]
    pvec, theta0, objective = make_objective(
        model, data, l_active, cached, R, B, B0, S, route=route
    )
    noise = draw_noise(model, active, B0 + B, S, rng)
    est, _ = objective(theta0, [start], noise)
    return est
