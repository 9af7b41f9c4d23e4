"""RBF-ARD kernel, Gram construction, sparse GP conditionals, and the
step-rescaled kernel view that links the state-space and SDE formulations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DimensionMismatch, NonPositiveStep
from .gauss import DEFAULT_JITTER, Jitter, chol_psd

VAR_FLOOR = 1e-12


@dataclass(frozen=True)
class RbfKernel:
    """Squared-exponential kernel with per-dimension lengthscales."""

    variance: float
    lengthscales: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lengthscales",
                           np.atleast_1d(np.asarray(self.lengthscales, dtype=float)))
        if self.variance <= 0:
            raise ValueError("kernel variance must be > 0")
        if np.any(self.lengthscales <= 0):
            raise ValueError("lengthscales must be > 0")

    @property
    def input_dim(self) -> int:
        return self.lengthscales.size


@dataclass(frozen=True)
class InducingSet:
    """Pseudo-input locations shared by all latent dimensions of a component."""

    inputs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "inputs",
                           np.atleast_2d(np.asarray(self.inputs, dtype=float)))
        if self.inputs.shape[0] < 1:
            raise ValueError("need at least one inducing input")
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError("inducing inputs must be finite")

    @property
    def m(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]


@dataclass(frozen=True)
class SparsePosterior:
    """Variational factor over inducing outputs, N(m_M, L L^T)."""

    m_M: np.ndarray
    S_M_chol: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "m_M", np.atleast_1d(np.asarray(self.m_M, dtype=float)))
        object.__setattr__(self, "S_M_chol",
                           np.atleast_2d(np.asarray(self.S_M_chol, dtype=float)))
        m = self.m_M.size
        if self.S_M_chol.shape != (m, m):
            raise DimensionMismatch("S_M_chol shape does not match m_M")
        if np.any(np.diag(self.S_M_chol) <= 0):
            raise ValueError("S_M_chol diagonal must be strictly positive")

    @property
    def m(self) -> int:
        return self.m_M.size

    def cov(self) -> np.ndarray:
        return self.S_M_chol @ self.S_M_chol.T


def kernel_eval(k: RbfKernel, x, x2) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    if x.shape != x2.shape or x.size != k.input_dim:
        raise DimensionMismatch(
            f"inputs of shape {x.shape}/{x2.shape} vs kernel dim {k.input_dim}"
        )
    d = (x - x2) / k.lengthscales
    return float(k.variance * np.exp(-0.5 * np.sum(d * d)))


def cross_gram(k: RbfKernel, X, X2) -> np.ndarray:
    """Pairwise kernel matrix {k(X[i], X2[j])} of shape (n, m)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    X2 = np.atleast_2d(np.asarray(X2, dtype=float))
    if X.shape[1] != k.input_dim or X2.shape[1] != k.input_dim:
        raise DimensionMismatch("input columns do not match kernel dimension")
    U = X / k.lengthscales
    V = X2 / k.lengthscales
    sq = (
        np.sum(U * U, axis=1)[:, None]
        - 2.0 * U @ V.T
        + np.sum(V * V, axis=1)[None, :]
    )
    return k.variance * np.exp(-0.5 * np.maximum(sq, 0.0))


def gram(k: RbfKernel, X, jitter: Jitter = DEFAULT_JITTER) -> np.ndarray:
    """Symmetric PSD Gram matrix with jitter.base added to the diagonal."""
    K = cross_gram(k, X, X)
    K = 0.5 * (K + K.T)
    return K + jitter.base * np.eye(K.shape[0])


def sparse_conditional(k: RbfKernel, Z: InducingSet, q: SparsePosterior, x):
    """Posterior-marginalized GP prediction at a single input.

    mean = K_xM K_MM^-1 m_M
    var  = K_xx - K_xM K_MM^-1 K_Mx + K_xM K_MM^-1 S_M K_MM^-1 K_Mx
    with var clamped at VAR_FLOOR.
    """
    means, variances = sparse_conditional_batch(k, Z, q, np.atleast_2d(x))
    return float(means[0]), float(variances[0])


def sparse_conditional_batch(k: RbfKernel, Z: InducingSet, q: SparsePosterior, X):
    """Vectorized ``sparse_conditional`` over rows of X."""
    L = chol_psd(gram(k, Z.inputs))
    Kxm = cross_gram(k, X, Z.inputs)  # (n, M)
    W = solve_triangular(L, Kxm.T, lower=True)  # (M, n)
    U = solve_triangular(L.T, W, lower=False)  # K_MM^-1 K_Mx
    means = U.T @ q.m_M
    prior_var = k.variance - np.sum(W * W, axis=0)
    V = q.S_M_chol.T @ U  # (M, n)
    post_var = np.sum(V * V, axis=0)
    return means, np.maximum(prior_var + post_var, VAR_FLOOR)


def conditional_given_fM(k: RbfKernel, Z: InducingSet, f_M, x):
    """Prior GP conditional given a realization of the inducing outputs."""
    means, variances = conditional_given_fM_batch(k, Z, f_M, np.atleast_2d(x))
    return float(means[0]), float(variances[0])


def conditional_given_fM_batch(k: RbfKernel, Z: InducingSet, f_M, X):
    f_M = np.atleast_1d(np.asarray(f_M, dtype=float))
    if f_M.size != Z.m:
        raise DimensionMismatch("f_M size does not match inducing set")
    L = chol_psd(gram(k, Z.inputs))
    Kxm = cross_gram(k, X, Z.inputs)
    W = solve_triangular(L, Kxm.T, lower=True)
    alpha = solve_triangular(L.T, solve_triangular(L, f_M, lower=True), lower=False)
    means = Kxm @ alpha
    variances = np.maximum(k.variance - np.sum(W * W, axis=0), 0.0)
    return means, variances


INDUCING = "inducing"
STATE = "state"


@dataclass(frozen=True)
class KernelView:
    """Step-rescaled view of a kernel.

    Entries between two inducing inputs are unscaled; entries between two
    state inputs are divided by step^2; mixed entries by step. Callers tag
    each side of an evaluation as inducing or state to select the scaling.
    """

    base: RbfKernel
    step: float
    state_state_power: int = 2  # test hook: a broken view uses 1

    def __post_init__(self):
        if self.step <= 0:
            raise NonPositiveStep(f"step must be > 0, got {self.step}")

    def scale(self, kind_a: str, kind_b: str) -> float:
        n_state = (kind_a, kind_b).count(STATE)
        if n_state == 2:
            n_state = self.state_state_power
        return self.step ** (-n_state)

    def eval(self, x, kind_a: str, x2, kind_b: str) -> float:
        return kernel_eval(self.base, x, x2) * self.scale(kind_a, kind_b)

    def cross_gram(self, X, kind_a: str, X2, kind_b: str) -> np.ndarray:
        return cross_gram(self.base, X, X2) * self.scale(kind_a, kind_b)

    def state_variance(self) -> float:
        """k^step(x, x) for a state input (constant for an RBF kernel)."""
        return self.base.variance * self.scale(STATE, STATE)


def sde_rescaled(k: RbfKernel, step: float) -> KernelView:
    """Kernel view realizing the SDE parameter mapping for step = R * dt."""
    if step <= 0:
        raise NonPositiveStep(f"step must be > 0, got {step}")
    return KernelView(base=k, step=float(step))
