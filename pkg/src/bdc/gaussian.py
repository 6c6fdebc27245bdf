"""Gaussian and categorical information measures.

Every quantity here is in nats.  Densities are stored as a mean vector and a
covariance matrix; log-determinants always go through a Cholesky factor.
"""

from dataclasses import dataclass

import numpy as np

LN_2PI_E = np.log(2.0 * np.pi * np.e)


class DegenerateDensityError(ValueError):
    """Covariance is singular even after the jitter rescue."""


@dataclass(frozen=True)
class GaussianDensity:
    """Multivariate normal density ``N(mean, covariance)``.

    Zero rows/columns in the covariance are allowed and mark parameters
    that are fixed at their mean.
    """

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float)).ravel()
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValueError(
                f"covariance shape {cov.shape} does not match mean length {mean.size}"
            )
        scale = max(np.max(np.abs(cov)), 1e-300) if cov.size else 1.0
        if not np.allclose(cov, cov.T, rtol=1e-10, atol=1e-10 * scale):
            raise ValueError("covariance is not symmetric")
        if cov.size:
            eig = np.linalg.eigvalsh(cov)
            if eig[0] < -1e-10 * max(eig[-1], 0.0) - 1e-300:
                raise ValueError("covariance is not positive semi-definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", 0.5 * (cov + cov.T))

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def variances(self) -> np.ndarray:
        return np.diag(self.covariance).copy()

    def free_mask(self) -> np.ndarray:
        """Boolean mask of dimensions with non-zero prior/posterior variance."""
        return np.diag(self.covariance) > 0

    def subset(self, idx) -> "GaussianDensity":
        idx = np.asarray(idx)
        return GaussianDensity(self.mean[idx], self.covariance[np.ix_(idx, idx)])

    @classmethod
    def diagonal(cls, mean, variances) -> "GaussianDensity":
        return cls(np.asarray(mean, float), np.diag(np.asarray(variances, float)))


@dataclass(frozen=True)
class CategoricalPosterior:
    """Posterior probabilities over ``k`` models."""

    probabilities: np.ndarray

    def __post_init__(self):
        p = np.atleast_1d(np.asarray(self.probabilities, dtype=float)).ravel()
        if p.size == 0:
            raise ValueError("categorical distribution needs at least one entry")
        if np.any(p < 0) or np.any(p > 1):
            raise ValueError("probabilities must lie in [0, 1]")
        if abs(p.sum() - 1.0) > 1e-12 * max(1, p.size):
            raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
        object.__setattr__(self, "probabilities", p)

    @property
    def k(self) -> int:
        return self.probabilities.size


def cholesky_logdet(cov: np.ndarray) -> tuple[np.ndarray, float]:
    """Cholesky factor and log-determinant of a positive-definite matrix.

    A single jitter of ``1e-10 * trace / d`` on the diagonal is tried before
    giving up with :class:`DegenerateDensityError`.
    """
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    d = cov.shape[0]
    if d == 0:
        return np.zeros((0, 0)), 0.0
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        jitter = 1e-10 * np.trace(cov) / d
        if not np.isfinite(jitter) or jitter <= 0:
            raise DegenerateDensityError("covariance has non-positive trace")
        try:
            chol = np.linalg.cholesky(cov + jitter * np.eye(d))
        except np.linalg.LinAlgError as exc:
            raise DegenerateDensityError("covariance is singular") from exc
    diag = np.diag(chol)
    if np.any(diag <= 0):
        raise DegenerateDensityError("covariance is singular")
    return chol, 2.0 * float(np.sum(np.log(diag)))


def logdet(cov: np.ndarray) -> float:
    return cholesky_logdet(cov)[1]


def neg_entropy(g: GaussianDensity) -> float:
    """Negative differential entropy, ``-0.5 ln|2 pi e Sigma|``."""
    _, ld = cholesky_logdet(g.covariance)
    return -0.5 * (g.dim * LN_2PI_E + ld)


def kl_gaussian(q: GaussianDensity, p: GaussianDensity) -> float:
    """KL divergence ``KL[q || p]`` between two multivariate normals.

    Dimensions where ``p`` has zero variance are dropped (``k = rank`` of the
    prior); ``q`` must be degenerate at the same mean there, otherwise the
    divergence is infinite and an error is raised.
    """
    if q.dim != p.dim:
        raise ValueError(f"dimension mismatch: {q.dim} vs {p.dim}")
    fixed = ~p.free_mask()
    if np.any(fixed):
        qd = np.diag(q.covariance)[fixed]
        if np.any(qd > 0) or np.any(np.abs(q.mean[fixed] - p.mean[fixed]) > 0):
            raise DegenerateDensityError(
                "q has support where the reference density is degenerate"
            )
        keep = np.flatnonzero(~fixed)
        q, p = q.subset(keep), p.subset(keep)
    k = p.dim
    if k == 0:
        return 0.0
    chol_p, ld_p = cholesky_logdet(p.covariance)
    _, ld_q = cholesky_logdet(q.covariance)
    # tr(P^-1 Q) and the Mahalanobis term via triangular solves
    a = np.linalg.solve(chol_p, q.covariance)
    trace = float(np.trace(np.linalg.solve(chol_p.T, a)))
    diff = np.linalg.solve(chol_p, p.mean - q.mean)
    maha = float(diff @ diff)
    return 0.5 * (trace + maha - k + ld_p - ld_q)


def kl_categorical(p) -> float:
    """Information gain from a uniform prior to the posterior ``p``.

    ``sum_i p_i ln p_i + ln k`` with ``0 ln 0 = 0``.
    """
    if not isinstance(p, CategoricalPosterior):
        p = CategoricalPosterior(p)
    probs = p.probabilities
    nz = probs > 0
    return float(np.sum(probs[nz] * np.log(probs[nz])) + np.log(p.k))


def log_bayes_factor(f1: float, f2: float) -> float:
    return float(f1) - float(f2)


def prob_from_nats(delta):
    """Posterior probability of the first of two models given a log Bayes factor."""
    delta = np.asarray(delta, dtype=float)
    # logistic, written to avoid overflow for large |delta|
    out = np.where(
        delta >= 0,
        1.0 / (1.0 + np.exp(-np.abs(delta))),
        np.exp(-np.abs(delta)) / (1.0 + np.exp(-np.abs(delta))),
    )
    return float(out) if out.ndim == 0 else out


def posterior_over_models(free_energies) -> CategoricalPosterior:
    """Softmax of log evidences under a flat prior over models."""
    f = np.atleast_1d(np.asarray(free_energies, dtype=float)).ravel()
    if f.size == 0:
        raise ValueError("no models given")
    if not np.all(np.isfinite(f)):
        raise ValueError("free energies must be finite")
    e = np.exp(f - f.max())
    p = e / e.sum()
    # renormalise once more so the sum is 1 to machine precision
    return CategoricalPosterior(p / p.sum())
