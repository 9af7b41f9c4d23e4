"""Model containers for the multi-component GP state-space model, the
emission model, the two transition densities (native and SDE-discretized),
and JSON serialization of all parameters.

Parameter storage convention: each component stores native per-observation
parameters (kernel, Q, m_M, S_M). SDE quantities are derived on demand
through the step-rescaling mapping anchored at the component's training
resolution (map scale R * dt, Q_sde = Q / (R * dt), rescaled kernel view),
so a component trained at resolution R can be simulated at any Euler step.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from . import kernels
from .errors import DimensionMismatch, NonPositiveStep
from .gauss import LOG_2PI, Gaussian, chol_psd
from .kernels import (
    INDUCING,
    STATE,
    InducingSet,
    RbfKernel,
    SparsePosterior,
    cross_gram,
    gram,
)
from .rng import RngStream


@dataclass
class ComponentParams:
    """All model and variational parameters of one latent component.

    Each latent dimension owns an independent kernel and sparse posterior;
    the inducing input locations are shared across dimensions.
    """

    kernels: list[RbfKernel]
    inducing: InducingSet
    q_fM: list[SparsePosterior]
    m_0: np.ndarray
    S_0_chol: np.ndarray
    Q_diag: np.ndarray
    resolution: int = 1

    def __post_init__(self):
        self.m_0 = np.atleast_1d(np.asarray(self.m_0, dtype=float))
        self.S_0_chol = np.atleast_2d(np.asarray(self.S_0_chol, dtype=float))
        self.Q_diag = np.atleast_1d(np.asarray(self.Q_diag, dtype=float))
        d = self.dim
        if len(self.q_fM) != d or self.Q_diag.size != d:
            raise DimensionMismatch("per-dimension parameter lists disagree on D_l")
        if self.S_0_chol.shape != (d, d):
            raise DimensionMismatch("S_0_chol shape does not match dim")
        if np.any(self.Q_diag <= 0):
            raise ValueError("process noise must be strictly positive")
        if self.resolution < 1:
            raise ValueError("resolution must be >= 1")
        for k in self.kernels:
            if k.input_dim != self.inducing.input_dim:
                raise DimensionMismatch("kernel input dim != inducing input dim")

    @property
    def dim(self) -> int:
        return len(self.kernels)

    @property
    def input_dim(self) -> int:
        """Exogenous input dimension implied by the inducing inputs."""
        return self.inducing.input_dim - self.dim


@dataclass
class EmissionParams:
    """Linear emission with fixed per-component selector [I, 0] and shared
    diagonal observation noise."""

    out_dim: int
    obs_noise_diag: np.ndarray

    def __post_init__(self):
        self.obs_noise_diag = np.atleast_1d(np.asarray(self.obs_noise_diag, dtype=float))
        if self.obs_noise_diag.size != self.out_dim:
            raise DimensionMismatch("obs noise size != out_dim")
        if np.any(self.obs_noise_diag <= 0):
            raise ValueError("observation noise must be strictly positive")


@dataclass
class Model:
    components: list[ComponentParams]
    emission: EmissionParams
    dt: float = 1.0
    prior_x0: list[Gaussian] = field(default_factory=list)
    normalization: dict | None = None

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be > 0")
        if not self.prior_x0:
            self.prior_x0 = [
                Gaussian(np.zeros(c.dim), np.eye(c.dim)) for c in self.components
            ]
        d_u = self.components[0].input_dim
        for c in self.components:
            if c.input_dim != d_u:
                raise DimensionMismatch("components disagree on exogenous input dim")
            if c.dim < self.emission.out_dim:
                raise DimensionMismatch("component dim must be >= out_dim")

    @property
    def n_components(self) -> int:
        return len(self.components)

    @property
    def input_dim(self) -> int:
        return self.components[0].input_dim


@dataclass
class Dataset:
    """Time-indexed observations and exogenous inputs on a uniform grid."""

    y: np.ndarray
    u: np.ndarray
    dt: float = 1.0
    normalization: dict | None = None

    def __post_init__(self):
        self.y = np.atleast_2d(np.asarray(self.y, dtype=float))
        self.u = np.asarray(self.u, dtype=float)
        if self.u.ndim == 1:
            self.u = self.u[:, None]
        if self.y.shape[0] < 2:
            raise ValueError("need at least two time points")
        if self.u.shape[0] != self.y.shape[0]:
            raise DimensionMismatch("u and y disagree on T")
        if not (np.all(np.isfinite(self.y)) and np.all(np.isfinite(self.u))):
            raise ValueError("dataset contains non-finite entries")

    @property
    def T(self) -> int:
        return self.y.shape[0]

    @property
    def out_dim(self) -> int:
        return self.y.shape[1]

    @property
    def input_dim(self) -> int:
        return self.u.shape[1]


# ---------------------------------------------------------------------------
# Emission


def emission_mean(model: Model, xs: list[np.ndarray]) -> np.ndarray:
    """Sum over components of the first out_dim latent coordinates."""
    d_y = model.emission.out_dim
    if len(xs) != model.n_components:
        raise DimensionMismatch("one latent vector per component required")
    out = np.zeros(d_y)
    for c, x in zip(model.components, xs):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if x.size != c.dim:
            raise DimensionMismatch("latent vector does not match component dim")
        out += x[:d_y]
    return out


def emission_logpdf(model: Model, y, xs: list[np.ndarray]) -> float:
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if y.size != model.emission.out_dim:
        raise DimensionMismatch("observation size != out_dim")
    mean = emission_mean(model, xs)
    var = model.emission.obs_noise_diag
    r = y - mean
    return float(-0.5 * np.sum(LOG_2PI + np.log(var) + r * r / var))


# ---------------------------------------------------------------------------
# Transitions


def _component_input(c: ComponentParams, x, u) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float)) if u is not None else np.empty(0)
    if x.size != c.dim or u.size != c.input_dim:
        raise DimensionMismatch(
            f"state/input sizes ({x.size},{u.size}) do not match component "
            f"({c.dim},{c.input_dim})"
        )
    return np.concatenate([x, u])


def gpssm_transition(c: ComponentParams, x, u) -> Gaussian:
    """Native transition with the inducing outputs marginalized under q.

    N(x + mu(x), Q + Sigma(x)) with diagonal covariance across latent dims.
    """
    inp = _component_input(c, x, u)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    means = np.empty(c.dim)
    variances = np.empty(c.dim)
    for d in range(c.dim):
        m, v = kernels.sparse_conditional(c.kernels[d], c.inducing, c.q_fM[d], inp)
        means[d] = x[d] + m
        variances[d] = c.Q_diag[d] + v
    return Gaussian(means, np.diag(variances))


def sde_transition(c: ComponentParams, x, u, step: float, dt: float = 1.0) -> Gaussian:
    """Euler step of the SDE whose parameters are tied to the native ones.

    The rescaling is anchored at the component's training resolution
    (map scale = resolution * dt); ``step`` is the Euler step size. With
    step = resolution * dt this reproduces :func:`gpssm_transition`.
    """
    if step <= 0:
        raise NonPositiveStep(f"step must be > 0, got {step}")
    inp = _component_input(c, x, u)[None, :]
    x = np.atleast_1d(np.asarray(x, dtype=float))
    map_scale = c.resolution * dt
    means = np.empty(c.dim)
    variances = np.empty(c.dim)
    for d in range(c.dim):
        view = kernels.sde_rescaled(c.kernels[d], map_scale)
        Z = c.inducing.inputs
        Kmm = view.cross_gram(Z, INDUCING, Z, INDUCING)
        Kmm = 0.5 * (Kmm + Kmm.T) + kernels.DEFAULT_JITTER.base * np.eye(Z.shape[0])
        Kxm = view.cross_gram(inp, STATE, Z, INDUCING)
        L = chol_psd(Kmm)
        W = solve_triangular(L, Kxm.T, lower=True)
        U = solve_triangular(L.T, W, lower=False)
        drift = float((Kxm @ solve_triangular(
            L.T, solve_triangular(L, c.q_fM[d].m_M, lower=True),
            lower=False))[0])
        prior_rate = view.state_variance() - float(np.sum(W * W))
        V = c.q_fM[d].S_M_chol.T @ U
        post_rate = float(np.sum(V * V))
        rate_var = max(prior_rate + post_rate, 0.0)
        q_rate = c.Q_diag[d] / map_scale
        means[d] = x[d] + step * drift
        variances[d] = max(step * step * rate_var + step * q_rate, kernels.VAR_FLOOR)
    return Gaussian(means, np.diag(variances))


def prior_transition_given_fM(c: ComponentParams, x, u, f_M) -> Gaussian:
    """Native transition conditioned on a realization of the inducing outputs."""
    inp = _component_input(c, x, u)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    f_M = np.atleast_2d(np.asarray(f_M, dtype=float))
    if f_M.shape != (c.dim, c.inducing.m):
        raise DimensionMismatch("f_M must have shape (dim, M)")
    means = np.empty(c.dim)
    variances = np.empty(c.dim)
    for d in range(c.dim):
        m, v = kernels.conditional_given_fM(c.kernels[d], c.inducing, f_M[d], inp)
        means[d] = x[d] + m
        variances[d] = c.Q_diag[d] + v
    return Gaussian(means, np.diag(variances))


# ---------------------------------------------------------------------------
# Default initialization


def default_component(
    dim: int,
    input_dim: int,
    n_inducing: int,
    resolution: int,
    rng: RngStream,
    kernel_variance: float = 0.25,
    lengthscale: float = 2.0,
    process_noise: float = 0.002**2,
) -> ComponentParams:
    """Standard initialization: inducing inputs U(-2,2), inducing output
    means N(0, 0.05^2) with 0.01^2 I covariance, per-dim ARD kernel."""
    d_in = dim + input_dim
    zeta = rng.uniform(-2.0, 2.0, size=(n_inducing, d_in))
    kers = [RbfKernel(kernel_variance, np.full(d_in, lengthscale)) for _ in range(dim)]
    q = [
        SparsePosterior(0.05 * rng.normal(n_inducing), 0.01 * np.eye(n_inducing))
        for _ in range(dim)
    ]
    return ComponentParams(
        kernels=kers,
        inducing=InducingSet(zeta),
        q_fM=q,
        m_0=np.zeros(dim),
        S_0_chol=0.1 * np.eye(dim),
        Q_diag=np.full(dim, process_noise),
        resolution=int(resolution),
    )


def default_model(
    dims: list[int],
    resolutions: list[int],
    out_dim: int,
    input_dim: int,
    n_inducing: int,
    rng: RngStream,
    dt: float = 1.0,
    obs_noise: float = 1.0,
    normalization: dict | None = None,
) -> Model:
    if len(dims) != len(resolutions):
        raise DimensionMismatch("dims and resolutions must align")
    comps = [
        default_component(d, input_dim, n_inducing, r, rng.child(10 + i))
        for i, (d, r) in enumerate(zip(dims, resolutions))
    ]
    emission = EmissionParams(out_dim, np.full(out_dim, obs_noise))
    return Model(components=comps, emission=emission, dt=dt,
                 normalization=normalization)


# ---------------------------------------------------------------------------
# Serialization (decimal arrays; bit-stable round trip via repr floats)


def _arr(a) -> list:
    return np.asarray(a, dtype=float).tolist()


def model_to_dict(model: Model) -> dict:
    return {
        "version": 1,
        "dt": model.dt,
        "emission": {
            "out_dim": model.emission.out_dim,
            "obs_noise_diag": _arr(model.emission.obs_noise_diag),
        },
        "components": [
            {
                "dim": c.dim,
                "resolution": c.resolution,
                "inducing_inputs": _arr(c.inducing.inputs),
                "kernels": [
                    {"variance": k.variance, "lengthscales": _arr(k.lengthscales)}
                    for k in c.kernels
                ],
                "q_fM": [
                    {"m_M": _arr(q.m_M), "S_M_chol": _arr(q.S_M_chol)}
                    for q in c.q_fM
                ],
                "m_0": _arr(c.m_0),
                "S_0_chol": _arr(c.S_0_chol),
                "Q_diag": _arr(c.Q_diag),
            }
            for c in model.components
        ],
        "prior_x0": [
            {"mean": _arr(g.mean), "cov": _arr(g.cov)} for g in model.prior_x0
        ],
        "normalization": model.normalization,
    }


def model_from_dict(doc: dict) -> Model:
    if doc.get("version") != 1:
        raise ValueError(f"unsupported model file version {doc.get('version')!r}")
    comps = []
    for cd in doc["components"]:
        comps.append(
            ComponentParams(
                kernels=[
                    RbfKernel(kd["variance"], np.asarray(kd["lengthscales"]))
                    for kd in cd["kernels"]
                ],
                inducing=InducingSet(np.asarray(cd["inducing_inputs"])),
                q_fM=[
                    SparsePosterior(np.asarray(qd["m_M"]), np.asarray(qd["S_M_chol"]))
                    for qd in cd["q_fM"]
                ],
                m_0=np.asarray(cd["m_0"]),
                S_0_chol=np.asarray(cd["S_0_chol"]),
                Q_diag=np.asarray(cd["Q_diag"]),
                resolution=int(cd["resolution"]),
            )
        )
    emission = EmissionParams(
        doc["emission"]["out_dim"], np.asarray(doc["emission"]["obs_noise_diag"])
    )
    prior = [
        Gaussian(np.asarray(g["mean"]), np.asarray(g["cov"]))
        for g in doc["prior_x0"]
    ]
    return Model(
        components=comps,
        emission=emission,
        dt=float(doc["dt"]),
        prior_x0=prior,
        normalization=doc.get("normalization"),
    )


def save_model(model: Model, path) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh, indent=2)
        fh.write("\n")


def load_model(path) -> Model:
    with open(path) as fh:
        return model_from_dict(json.load(fh))
