"""Variational Laplace inversion of nonlinear models with Gaussian noise.

The forward model maps a batch of parameter vectors ``(B, P)`` to predictions
``(B, T, R)``; each of the ``R`` output channels has its own noise
log-precision ``lambda_r``.  The posterior is ``q(theta) q(lambda)`` with both
factors Gaussian.  ``theta`` is updated by Levenberg-Marquardt regularised
Gauss-Newton steps; ``q(lambda)`` is maximised in closed form per channel
holding ``q(theta)`` fixed.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import dcm
from .gaussian import GaussianDensity, kl_gaussian

log = logging.getLogger(__name__)

LN_2PI = np.log(2.0 * np.pi)


class FitFailure(RuntimeError):
    """Model inversion could not proceed."""

    def __init__(self, message, free_energy=None, n_iterations=0):
        super().__init__(message)
        self.free_energy = free_energy
        self.n_iterations = n_iterations


@dataclass
class PriorSpec:
    theta_prior: GaussianDensity
    lambda_prior: GaussianDensity


@dataclass
class FitOptions:
    max_iter: int = 128
    tol: float = 1e-2
    patience: int = 4
    fd_step: float = 1e-3   # fraction of prior SD
    lm_init: float = 1.0 / 8.0
    lm_max: float = 1e8

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class SubjectPosterior:
    """Fitted Gaussian posterior of one subject plus its free energy."""

    theta_post: GaussianDensity
    lambda_post: GaussianDensity
    free_energy: float
    accuracy: float
    complexity: float
    n_iterations: int
    converged: bool
    theta_prior: GaussianDensity = None
    lambda_prior: GaussianDensity = None
    labels: list = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "labels": self.labels,
            "theta_post": _gauss_dict(self.theta_post),
            "lambda_post": _gauss_dict(self.lambda_post),
            "free_energy": self.free_energy,
            "accuracy": self.accuracy,
            "complexity": self.complexity,
            "n_iterations": self.n_iterations,
            "converged": self.converged,
            "meta": self.meta,
        }
        if self.theta_prior is not None:
            d["theta_prior"] = _gauss_dict(self.theta_prior)
        if self.lambda_prior is not None:
            d["lambda_prior"] = _gauss_dict(self.lambda_prior)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SubjectPosterior":
        g = _gauss_from_dict
        return cls(
            theta_post=g(d["theta_post"]),
            lambda_post=g(d["lambda_post"]),
            free_energy=float(d["free_energy"]),
            accuracy=float(d["accuracy"]),
            complexity=float(d["complexity"]),
            n_iterations=int(d["n_iterations"]),
            converged=bool(d["converged"]),
            theta_prior=g(d["theta_prior"]) if "theta_prior" in d else None,
            lambda_prior=g(d["lambda_prior"]) if "lambda_prior" in d else None,
            labels=d.get("labels"),
            meta=d.get("meta", {}),
        )


def _gauss_dict(g):
    return {"mean": g.mean.tolist(), "covariance": g.covariance.tolist()}


def _gauss_from_dict(d):
    return GaussianDensity(np.asarray(d["mean"], float), np.asarray(d["covariance"], float))


# ---------------------------------------------------------------------------
# free energy


def _accuracy(resid, jac, cov, lam_mean, lam_var):
    """Expected log-likelihood under q, with the forward map linearised.

    resid : (T, R), jac : (T, R, P) over free parameters, cov : (P, P).
    """
    n_t = resid.shape[0]
    sq = np.sum(resid ** 2, axis=0)
    if jac.shape[2]:
        # tr(J_r cov J_r^T) for every channel
        sq = sq + np.einsum("trp,pq,trq->r", jac, cov, jac)
    w = np.exp(lam_mean + 0.5 * lam_var)
    return float(np.sum(-0.5 * n_t * LN_2PI + 0.5 * n_t * lam_mean - 0.5 * w * sq)), sq


def free_energy(forward, data, q: GaussianDensity, lambda_q: GaussianDensity,
                priors: PriorSpec, fd_step: float = 1e-3):
    """Variational free energy and its accuracy/complexity split.

    Returns ``(F, accuracy, complexity)`` with complexity equal to
    ``KL[q || p(theta)] + KL[q(lambda) || p(lambda)]``.
    """
    data = _as_3d(data)[0]
    free = priors.theta_prior.free_mask()
    g0, jac = _jacobian(forward, q.mean, free, np.sqrt(np.diag(priors.theta_prior.covariance)), fd_step)
    if g0 is None:
        raise FitFailure("forward model diverged at the posterior mean")
    cov = q.covariance[np.ix_(free, free)]
    acc, _ = _accuracy(data - g0, jac, cov, lambda_q.mean, np.diag(lambda_q.covariance))
    comp = kl_gaussian(q, priors.theta_prior) + kl_gaussian(lambda_q, priors.lambda_prior)
    return acc - comp, acc, comp


# ---------------------------------------------------------------------------
# helpers


def _as_3d(y):
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if y.ndim == 2:
        y = y[None]
    return y


def _jacobian(forward, mu, free, sd, fd_step):
    """Prediction at ``mu`` and central-difference Jacobian over free params."""
    idx = np.flatnonzero(free)
    h = fd_step * sd[idx]
    thetas = np.repeat(mu[None, :], 1 + 2 * idx.size, axis=0)
    thetas[1 + np.arange(idx.size), idx] += h
    thetas[1 + idx.size + np.arange(idx.size), idx] -= h
    out = _as_3d(forward(thetas))
    if not np.all(np.isfinite(out)):
        return None, None
    g0 = out[0]
    jac = (out[1:1 + idx.size] - out[1 + idx.size:]) / (2.0 * h[:, None, None])
    return g0, np.moveaxis(jac, 0, -1)


class _Point:
    """Everything the ascent needs at one value of the parameter mean."""

    def __init__(self, mu, g0, jac, data, prior_prec, prior_mean_free, free):
        self.mu = mu
        self.resid = data - g0
        self.jac = jac
        self.free = free
        self.prior_prec = prior_prec
        self.dmu = mu[free] - prior_mean_free

    def precision(self, lam_mean, lam_var):
        w = np.exp(lam_mean + 0.5 * lam_var)
        jtj = np.einsum("trp,r,trq->pq", self.jac, w, self.jac)
        return jtj + self.prior_prec

    def gradient(self, lam_mean, lam_var):
        w = np.exp(lam_mean + 0.5 * lam_var)
        return np.einsum("trp,r,tr->p", self.jac, w, self.resid) - self.prior_prec @ self.dmu


def _sym_inv(a):
    c = np.linalg.cholesky(a)
    ci = np.linalg.inv(c)
    return ci.T @ ci


def _update_lambda(sq, n_t, eta, v, free):
    """Maximise F over q(lambda_r) = N(m_r, s_r) for each channel.

    F_r(m, s) = n/2 m - 1/2 exp(m + s/2) sq_r - KL[N(m, s) || N(eta, v)].
    Stationarity in s gives 1/s = 1/v + exp(m + s/2) sq / 2, and Newton steps
    on m use the same curvature.
    """
    m = eta.copy()
    s = np.where(free, v, 0.0)
    for r in np.flatnonzero(free):
        mr, sr = eta[r], v[r]
        for _ in range(100):
            e = np.exp(mr + 0.5 * sr) * sq[r]
            grad = 0.5 * n_t - 0.5 * e - (mr - eta[r]) / v[r]
            hess = -0.5 * e - 1.0 / v[r]
            step = -grad / hess
            # keep the exponent from overshooting
            step = np.clip(step, -4.0, 4.0)
            mr += step
            for _ in range(5):
                sr = 1.0 / (1.0 / v[r] + 0.5 * np.exp(mr + 0.5 * sr) * sq[r])
            if abs(step) < 1e-10:
                break
        m[r], s[r] = mr, sr
    return m, s


# ---------------------------------------------------------------------------
# inversion


def invert(forward, data, priors: PriorSpec, options: FitOptions = None, labels=None) -> SubjectPosterior:
    """Fit ``q(theta) q(lambda)`` to ``data`` under ``forward``.

    Parameters
    ----------
    forward : callable
        Maps parameter vectors ``(B, P)`` to predictions ``(B, T, R)``.
        Non-finite output marks a diverged evaluation.
    data : ndarray, shape (T, R)
    priors : PriorSpec
        Dimensions with zero prior variance stay fixed at the prior mean.

    Returns
    -------
    SubjectPosterior
    """
    options = options or FitOptions()
    data = _as_3d(data)[0]
    n_t, n_r = data.shape
    tp, lp = priors.theta_prior, priors.lambda_prior
    if lp.dim != n_r:
        raise ValueError(f"lambda prior has {lp.dim} channels, data has {n_r}")
    free = tp.free_mask()
    idx = np.flatnonzero(free)
    sd = np.sqrt(np.diag(tp.covariance))
    prior_cov_free = tp.covariance[np.ix_(idx, idx)]
    prior_prec = _sym_inv(prior_cov_free) if idx.size else np.zeros((0, 0))
    lam_free = lp.free_mask()
    lam_eta, lam_v = lp.mean, np.diag(lp.covariance)

    def evaluate(mu):
        g0, jac = _jacobian(forward, mu, free, sd, options.fd_step)
        if g0 is None:
            return None
        return _Point(mu, g0, jac, data, prior_prec, tp.mean[idx], idx)

    def score(pt, lam_m, lam_s):
        prec = pt.precision(lam_m, lam_s)
        cov = _sym_inv(prec) if idx.size else prec
        acc, sq = _accuracy(pt.resid, pt.jac, cov, lam_m, lam_s)
        full_cov = np.zeros_like(tp.covariance)
        full_cov[np.ix_(idx, idx)] = cov
        q = GaussianDensity(pt.mu, full_cov)
        ql = GaussianDensity(lam_m, np.diag(lam_s))
        comp = kl_gaussian(q, tp) + kl_gaussian(ql, lp)
        return acc - comp, acc, comp, q, ql, sq

    point = evaluate(tp.mean.copy())
    if point is None:
        raise FitFailure("forward model diverged at the prior mean", None, 0)
    lam_m, lam_s = lam_eta.copy(), np.where(lam_free, lam_v, 0.0)
    best = score(point, lam_m, lam_s)
    # settle q(lambda) before the first parameter step
    lam_m, lam_s = _update_lambda(best[5], n_t, lam_eta, lam_v, lam_free)
    best = score(point, lam_m, lam_s)

    trace = [best[0]]
    nu = options.lm_init
    quiet = 0
    converged = False
    it = 0
    while it < options.max_iter and idx.size:
        it += 1
        prec = point.precision(lam_m, lam_s)
        grad = point.gradient(lam_m, lam_s)
        damped = prec + nu * np.diag(np.diag(prec))
        step = np.linalg.solve(damped, grad)
        mu_new = point.mu.copy()
        mu_new[idx] += step
        trial = evaluate(mu_new)
        cand = score(trial, lam_m, lam_s) if trial is not None else None
        if cand is None or not np.isfinite(cand[0]) or cand[0] < best[0]:
            # a rejection that would barely have changed F counts as quiet
            if cand is not None and np.isfinite(cand[0]) and best[0] - cand[0] < options.tol \
                    and len(trace) > 1:
                quiet += 1
                if quiet >= options.patience:
                    converged = True
                    break
            else:
                quiet = 0
            nu *= 2.0
            if nu > options.lm_max:
                if cand is None:
                    raise FitFailure("no finite step at maximum regularisation", best[0], it)
                converged = True
                break
            continue
        # accepted: refresh the noise model, then re-score
        point = trial
        lam_m, lam_s = _update_lambda(cand[5], n_t, lam_eta, lam_v, lam_free)
        cand = score(point, lam_m, lam_s)
        delta = cand[0] - best[0]
        best = cand
        trace.append(best[0])
        nu = max(nu / 2.0, 1e-8)
        log.debug("VL iteration %d: F=%.4f dF=%.4g nu=%.3g", it, best[0], delta, nu)
        quiet = quiet + 1 if abs(delta) < options.tol else 0
        if quiet >= options.patience:
            converged = True
            break
    if not idx.size:
        converged = True

    f_val, acc, comp, q, ql, _ = best
    return SubjectPosterior(
        theta_post=q,
        lambda_post=ql,
        free_energy=f_val,
        accuracy=acc,
        complexity=comp,
        n_iterations=it,
        converged=converged,
        theta_prior=tp,
        lambda_prior=lp,
        labels=labels,
        meta={"f_trace": trace, "options": options.to_dict()},
    )


# ---------------------------------------------------------------------------
# DCM-specific entry points


def default_priors(spec: dcm.DcmSpec) -> PriorSpec:
    """Shrinkage priors for every enabled DCM parameter and noise precision."""
    variances = {
        "A": 1.0 / 16, "A_self": 1.0 / 64, "B": 1.0, "C": 1.0,
        "transit": 1.0 / 256, "decay": 1.0 / 256, "epsilon": 1.0 / 256,
    }
    classes = dcm.param_classes(spec)
    var = np.array([variances[c] for c in classes])
    # off-diagonal modulation uses the same variance as fixed coupling
    labels = dcm.param_labels(spec)
    for i, (c, lab) in enumerate(zip(classes, labels)):
        if c == "B" and "<-" in lab:
            var[i] = 1.0 / 16
    theta = GaussianDensity.diagonal(np.zeros(var.size), var)
    lam = GaussianDensity.diagonal(np.full(spec.n_regions, 4.0), np.full(spec.n_regions, 1.0 / 16))
    return PriorSpec(theta, lam)


def dcm_forward(spec: dcm.DcmSpec, inputs: dcm.InputSchedule):
    """Batch forward map with each region's prediction mean-centred."""
    def forward(thetas):
        y = dcm.integrate_vectors(spec, thetas, inputs)
        return y - y.mean(axis=1, keepdims=True)
    return forward


def fit(spec: dcm.DcmSpec, inputs: dcm.InputSchedule, data, priors: PriorSpec = None,
        options: FitOptions = None) -> SubjectPosterior:
    """Invert one subject's DCM.

    Each region's timeseries is mean-centred first (the offsets go in
    ``meta["data_offset"]``); predictions are centred the same way.
    """
    data = np.asarray(data, dtype=float)
    if data.shape != (spec.n_volumes, spec.n_regions):
        raise ValueError(f"data shape {data.shape} does not match spec "
                         f"({spec.n_volumes}, {spec.n_regions})")
    if not np.all(np.isfinite(data)):
        raise FitFailure("data contain non-finite values", None, 0)
    priors = priors or default_priors(spec)
    if priors.theta_prior.dim != dcm.n_params(spec):
        raise ValueError("prior dimension does not match the spec's enabled parameters")
    offset = data.mean(axis=0)
    post = invert(dcm_forward(spec, inputs), data - offset, priors, options,
                  labels=dcm.param_labels(spec))
    post.meta["data_offset"] = offset.tolist()
    return post
