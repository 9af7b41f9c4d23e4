"""Dense Gaussian primitives: factorization, sampling, densities, KL,
affine conditioning and block inversion.

All functions are pure; ``Gaussian`` values are immutable after construction
and safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DimensionMismatch, NotPositiveDefinite, Singular
from .rng import RngStream

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class Jitter:
    """Retry ladder for Cholesky factorizations of nearly singular matrices.

    The first attempt uses no jitter; afterwards ``base * growth**k`` is added
    to the diagonal for k = 0..max_retries-1.
    """

    base: float = 1e-8
    growth: float = 10.0
    max_retries: int = 5

    def __post_init__(self):
        if self.base <= 0:
            raise ValueError("jitter base must be > 0")
        if self.growth <= 1:
            raise ValueError("jitter growth must be > 1")

    def ladder(self):
        yield 0.0
        for k in range(self.max_retries):
            yield self.base * self.growth**k


DEFAULT_JITTER = Jitter()


def _sym(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def chol_psd(m: np.ndarray, jitter: Jitter = DEFAULT_JITTER) -> np.ndarray:
    """Lower Cholesky factor of a symmetric PSD matrix with retry jitter.

    Returns L with L L^T = m + eps*I for the smallest eps in the ladder
    (possibly 0) that factorizes. The input is symmetrized as (m + m^T)/2
    first to protect against round-off asymmetry.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionMismatch(f"expected square matrix, got shape {m.shape}")
    if not m.any():
        # the zero matrix factors exactly as L = 0
        return np.zeros_like(m)
    sym = _sym(m)
    eye = np.eye(m.shape[0])
    for eps in jitter.ladder():
        try:
            return np.linalg.cholesky(sym + eps * eye)
        except np.linalg.LinAlgError:
            continue
    raise NotPositiveDefinite(
        f"cholesky failed after jitter ladder up to "
        f"{jitter.base * jitter.growth ** (jitter.max_retries - 1):g}"
    )


class Gaussian:
    """Mean vector plus covariance, with a lazily cached Cholesky factor."""

    __slots__ = ("mean", "cov", "_chol")

    def __init__(self, mean, cov, chol: np.ndarray | None = None):
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        if mean.ndim != 1:
            raise DimensionMismatch(f"mean must be a vector, got shape {mean.shape}")
        if cov.shape != (mean.size, mean.size):
            raise DimensionMismatch(
                f"cov shape {cov.shape} does not match mean size {mean.size}"
            )
        scale = max(float(np.abs(cov).max()), 1.0)
        if np.abs(cov - cov.T).max() > 1e-12 * scale:
            raise DimensionMismatch("covariance is not symmetric within tolerance")
        self.mean = mean
        self.cov = _sym(cov)
        self._chol = chol

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def chol(self) -> np.ndarray:
        """Lower-triangular factor, computed on first access and cached."""
        if self._chol is None:
            self._chol = chol_psd(self.cov)
        return self._chol

    @classmethod
    def from_chol(cls, mean, chol) -> "Gaussian":
        chol = np.atleast_2d(np.asarray(chol, dtype=float))
        return cls(mean, chol @ chol.T, chol=chol)

    def logdet_cov(self) -> float:
        d = np.diag(self.chol)
        if np.any(d <= 0):
            raise Singular("covariance factor has non-positive diagonal")
        return 2.0 * float(np.sum(np.log(d)))

    def __repr__(self) -> str:
        return f"Gaussian(dim={self.dim})"


@dataclass(frozen=True)
class GaussianConditionalForm:
    """Reverse conditional p(y | x) in (gain, residual-mean, covariance) form.

    The conditional mean is ``offset + gain @ x``; ``cov`` is constant in x.
    """

    gain: np.ndarray
    offset: np.ndarray
    cov: np.ndarray
    _chol: np.ndarray | None = field(default=None, compare=False)

    def condition_on(self, x) -> Gaussian:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return Gaussian(self.offset + self.gain @ x, self.cov, chol=self._chol)


def mvn_sample(g: Gaussian, rng: RngStream) -> np.ndarray:
    """One draw mean + L z with z standard normal from ``rng``."""
    z = rng.normal(g.dim)
    return g.mean + g.chol @ z


def mvn_logpdf(x, g: Gaussian) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != g.mean.shape:
        raise DimensionMismatch(f"x shape {x.shape} vs mean shape {g.mean.shape}")
    L = g.chol
    y = solve_triangular(L, x - g.mean, lower=True)
    return float(-0.5 * (g.dim * LOG_2PI + g.logdet_cov() + y @ y))


def kl_gaussian(q: Gaussian, p: Gaussian) -> float:
    """KL(q || p) for multivariate Gaussians via triangular solves."""
    if q.dim != p.dim:
        raise DimensionMismatch(f"dimension mismatch {q.dim} vs {p.dim}")
    Lp = p.chol
    if np.any(np.diag(Lp) <= 0):
        raise NotPositiveDefinite("p covariance is singular")
    Lq = q.chol
    # trace(Sp^-1 Sq) = ||Lp^-1 Lq||_F^2,  quadratic term = ||Lp^-1 (mq-mp)||^2
    A = solve_triangular(Lp, Lq, lower=True)
    y = solve_triangular(Lp, q.mean - p.mean, lower=True)
    trace = float(np.sum(A * A))
    quad = float(y @ y)
    # logdet of a degenerate q is -inf; KL is +inf then
    dq = np.diag(Lq)
    if np.any(dq <= 0):
        return float("inf")
    logdet_ratio = p.logdet_cov() - 2.0 * float(np.sum(np.log(dq)))
    return 0.5 * (trace + quad - q.dim + logdet_ratio)


def affine_condition(prior_y: Gaussian, a, F, A):
    """Marginal and reverse conditional of an affine Gaussian relation.

    Given p(x | y) = N(a + F y, A) and p(y) = prior_y = N(b, B), returns
    the marginal p(x) = N(a + F b, A + F B F^T) and p(y | x) as a
    ``GaussianConditionalForm`` with gain B F^T (A + F B F^T)^-1.
    """
    a = np.atleast_1d(np.asarray(a, dtype=float))
    F = np.atleast_2d(np.asarray(F, dtype=float))
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if F.shape != (a.size, prior_y.dim):
        raise DimensionMismatch(
            f"F shape {F.shape} incompatible with a ({a.size}) and y ({prior_y.dim})"
        )
    if A.shape != (a.size, a.size):
        raise DimensionMismatch(f"A shape {A.shape} incompatible with a ({a.size})")
    b, B = prior_y.mean, prior_y.cov
    marg_mean = a + F @ b
    marg_cov = _sym(A + F @ B @ F.T)
    marg = Gaussian(marg_mean, marg_cov)
    # gain = B F^T (A + F B F^T)^-1 via the marginal factor
    Lm = marg.chol
    BFt = B @ F.T
    half = solve_triangular(Lm, BFt.T, lower=True)
    gain = solve_triangular(Lm.T, half, lower=False).T
    cond_cov = _sym(B - gain @ BFt.T)
    offset = b - gain @ marg_mean
    return marg, GaussianConditionalForm(gain=gain, offset=offset, cov=cond_cov)


def block_inverse(A, B, C, D) -> np.ndarray:
    """Inverse of [[A, B], [C, D]] via the Schur complement of A."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    D = np.atleast_2d(np.asarray(D, dtype=float))
    n, m = A.shape[0], D.shape[0]
    if A.shape != (n, n) or D.shape != (m, m) or B.shape != (n, m) or C.shape != (m, n):
        raise DimensionMismatch("inconsistent block shapes")
    try:
        Ainv_B = np.linalg.solve(A, B)
        Ainv = np.linalg.inv(A)
    except np.linalg.LinAlgError as e:
        raise Singular("A block is singular") from e
    schur = D - C @ Ainv_B
    try:
        schur_inv = np.linalg.inv(schur)
    except np.linalg.LinAlgError as e:
        raise Singular("Schur complement is singular") from e
    top_left = Ainv + Ainv_B @ schur_inv @ (C @ Ainv)
    top_right = -Ainv_B @ schur_inv
    bottom_left = -schur_inv @ (C @ Ainv)
    out = np.empty((n + m, n + m))
    out[:n, :n] = top_left
    out[:n, n:] = top_right
    out[n:, :n] = bottom_left
    out[n:, n:] = schur_inv
    return out
