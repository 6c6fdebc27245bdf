"""Hierarchical (parametric empirical Bayes) GLM over subject posteriors.

Each subject contributes a Gaussian likelihood over the chosen parameter
subset, recovered from its posterior and prior precisions::

    L_i = P_i - P0_i,   h_i = P_i mu_i - P0_i mu0_i

Second level: ``theta_i = X_i beta + e_i`` with ``e_i ~ N(0, Pi^-1)`` and
``Pi = Q0 + exp(-gamma) Q1``.  For fixed ``gamma`` the posterior over
``beta`` and the marginal likelihood are closed-form; ``gamma`` gets a
Laplace posterior around its MAP estimate.
"""

from dataclasses import dataclass, field

import numpy as np

from .gaussian import GaussianDensity, cholesky_logdet, kl_gaussian
from .vl import SubjectPosterior


class PebError(ValueError):
    pass


@dataclass
class PebOptions:
    q0_scale: float = 1e-4
    # within-subject precision relative to the first-level prior precision
    q1_scale: float = 16.0
    gamma_prior_mean: float = 0.0
    gamma_prior_var: float = 1.0 / 16.0
    max_iter: int = 64
    tol: float = 1e-3

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class PebModel:
    theta_stack: np.ndarray
    theta_cov: np.ndarray          # (N, M, M) per-subject posterior blocks
    design: np.ndarray
    q0: np.ndarray
    q1: np.ndarray
    beta_prior: GaussianDensity
    gamma_prior: GaussianDensity
    beta_post: GaussianDensity
    gamma_post: GaussianDensity
    free_energy: float
    accuracy: float
    complexity: float
    param_labels: list
    param_indices: np.ndarray = None
    switched_off: list = field(default_factory=list)
    subject_free_energy: np.ndarray = None

    @property
    def n_subjects(self) -> int:
        return self.theta_cov.shape[0]

    @property
    def n_params(self) -> int:
        return self.theta_cov.shape[1]

    def between_precision(self, gamma=None) -> np.ndarray:
        g = self.gamma_post.mean[0] if gamma is None else gamma
        return self.q0 + np.exp(-g) * self.q1

    def empirical_prior(self, subject: int = 0) -> GaussianDensity:
        """Predictive density of one subject's parameters under the group model."""
        m = self.n_params
        x = self.design[subject * m:(subject + 1) * m]
        cov = np.linalg.inv(self.between_precision()) + x @ self.beta_post.covariance @ x.T
        mean = x @ self.beta_post.mean
        off = [self.param_labels.index(lab) for lab in self.switched_off]
        if off:
            cov[off, :] = 0.0
            cov[:, off] = 0.0
            mean[off] = 0.0
        return GaussianDensity(mean, cov)

    def to_dict(self) -> dict:
        g = lambda d: {"mean": d.mean.tolist(), "covariance": d.covariance.tolist()}  # noqa: E731
        return {
            "param_labels": list(self.param_labels),
            "param_indices": None if self.param_indices is None else [int(i) for i in self.param_indices],
            "switched_off": list(self.switched_off),
            "n_subjects": self.n_subjects,
            "beta_prior": g(self.beta_prior),
            "beta_post": g(self.beta_post),
            "gamma_prior": g(self.gamma_prior),
            "gamma_post": g(self.gamma_post),
            "q0": self.q0.tolist(),
            "q1": self.q1.tolist(),
            "free_energy": self.free_energy,
            "accuracy": self.accuracy,
            "complexity": self.complexity,
        }


def build_design(n_subjects: int, n_params: int) -> np.ndarray:
    """Group-mean design ``1_N kron I_M``."""
    if n_subjects < 1 or n_params < 1:
        raise ValueError("need at least one subject and one parameter")
    return np.kron(np.ones((n_subjects, 1)), np.eye(n_params))


def precision_matrix(gamma, q0, q1, n_subjects: int) -> np.ndarray:
    """Between-subject precision ``I_N kron (Q0 + exp(-gamma) Q1)``."""
    q0, q1 = np.atleast_2d(q0), np.atleast_2d(q1)
    if q0.shape != q1.shape or q0.shape[0] != q0.shape[1]:
        raise ValueError(f"precision components must be square and equal: {q0.shape} vs {q1.shape}")
    return np.kron(np.eye(n_subjects), q0 + np.exp(-gamma) * q1)


# ---------------------------------------------------------------------------


def _inv_pd(a):
    c = np.linalg.cholesky(a)
    ci = np.linalg.inv(c)
    return ci.T @ ci


@dataclass
class _Likelihoods:
    lik_prec: np.ndarray      # (N, M, M)
    lik_info: np.ndarray      # (N, M)
    const: np.ndarray         # (N,)  log-likelihood offsets


def subject_likelihoods(posteriors, param_indices, prior=None) -> _Likelihoods:
    """Gaussian likelihoods over the subset, one per subject.

    ``const`` is set so that integrating each likelihood against the
    subject's own prior reproduces the subject's free energy.
    """
    idx = np.asarray(param_indices)
    n = len(posteriors)
    m = idx.size
    lik_prec = np.zeros((n, m, m))
    lik_info = np.zeros((n, m))
    const = np.zeros(n)
    for i, post in enumerate(posteriors):
        own_prior = post.theta_prior if post.theta_prior is not None else prior
        if own_prior is None:
            raise PebError(f"subject {i} has no recorded prior")
        sub_cov = post.theta_post.covariance[np.ix_(idx, idx)]
        if np.linalg.eigvalsh(sub_cov)[0] < -1e-10 * max(1.0, np.abs(sub_cov).max()):
            raise PebError(f"subject {i} posterior covariance is not PSD")
        q = post.theta_post.subset(idx)
        p = own_prior.subset(idx)
        try:
            qp = _inv_pd(q.covariance)
            pp = _inv_pd(p.covariance)
        except np.linalg.LinAlgError as exc:
            raise PebError(f"subject {i}: singular covariance over the chosen subset") from exc
        lik_prec[i] = 0.5 * ((qp - pp) + (qp - pp).T)
        lik_info[i] = qp @ q.mean - pp @ p.mean
        # G(mu0, P0) = 1/2 ln|P0| - 1/2 ln|P| + 1/2 mu'P mu - 1/2 mu0'P0 mu0
        g_full = (
            -0.5 * cholesky_logdet(p.covariance)[1]
            + 0.5 * cholesky_logdet(q.covariance)[1]
            + 0.5 * q.mean @ qp @ q.mean
            - 0.5 * p.mean @ pp @ p.mean
        )
        const[i] = post.free_energy - g_full
    return _Likelihoods(lik_prec, lik_info, const)


def conditional_beta(lik: _Likelihoods, design, between_prec, beta_prior: GaussianDensity):
    """Posterior over ``beta`` for a fixed between-subject precision.

    Returns ``(GaussianDensity, log_marginal)`` where ``log_marginal`` is
    ``ln p(Y | gamma)`` with ``beta`` integrated out exactly.
    """
    n, m, _ = lik.lik_prec.shape
    x = np.asarray(design).reshape(n, m, -1)
    prior_prec = _inv_pd(beta_prior.covariance)
    b = prior_prec @ beta_prior.mean
    post_prec = prior_prec.copy()
    _, ld_pi = cholesky_logdet(_inv_pd(between_prec))
    ld_pi = -ld_pi
    total = 0.0
    for i in range(n):
        a = lik.lik_prec[i] + between_prec
        a = 0.5 * (a + a.T)
        chol, ld_a = cholesky_logdet(a)
        a_inv_h = np.linalg.solve(a, lik.lik_info[i])
        a_inv_pi = np.linalg.solve(a, between_prec)
        k_mat = between_prec - between_prec @ a_inv_pi
        k_vec = between_prec @ a_inv_h
        post_prec += x[i].T @ (0.5 * (k_mat + k_mat.T)) @ x[i]
        b += x[i].T @ k_vec
        total += lik.const[i] + 0.5 * ld_pi - 0.5 * ld_a + 0.5 * lik.lik_info[i] @ a_inv_h
    post_prec = 0.5 * (post_prec + post_prec.T)
    cov = _inv_pd(post_prec)
    mean = cov @ b
    _, ld_prior_cov = cholesky_logdet(beta_prior.covariance)
    total += (
        0.5 * b @ mean
        - 0.5 * beta_prior.mean @ prior_prec @ beta_prior.mean
        - 0.5 * ld_prior_cov
        + 0.5 * cholesky_logdet(cov)[1]
    )
    return GaussianDensity(mean, cov), float(total)


def fit_peb(posteriors, param_indices, prior: GaussianDensity = None, labels=None,
            design=None, options: PebOptions = None) -> PebModel:
    """Fit the group GLM to a list of :class:`SubjectPosterior`.

    Parameters
    ----------
    posteriors : list of SubjectPosterior
        Each must carry its own ``theta_prior``; likelihoods are recovered
        relative to that prior.
    param_indices : sequence of int
        Parameters (into each subject's vector) modelled at the group level.
    prior : GaussianDensity, optional
        First-level prior over the full vector.  Sets the ``beta`` prior
        covariance and the ``Q1`` precision component.  Defaults to the
        first subject's recorded prior.
    """
    options = options or PebOptions()
    idx = np.asarray(param_indices, dtype=int)
    if idx.size == 0:
        raise PebError("empty parameter subset")
    if not posteriors:
        raise PebError("no subjects")
    dims = {p.theta_post.dim for p in posteriors}
    if len(dims) != 1:
        raise PebError(f"subjects have different parameter counts: {sorted(dims)}")
    ref_labels = posteriors[0].labels
    for p in posteriors[1:]:
        if ref_labels is not None and p.labels is not None and list(p.labels) != list(ref_labels):
            raise PebError("subjects do not share the same parameter labels")
    prior = prior if prior is not None else posteriors[0].theta_prior
    if labels is None:
        labels = [ref_labels[i] for i in idx] if ref_labels is not None else [f"p{i}" for i in idx]
    n, m = len(posteriors), idx.size
    design = build_design(n, m) if design is None else np.asarray(design, dtype=float)
    if design.shape[0] != n * m:
        raise PebError(f"design has {design.shape[0]} rows, expected {n * m}")

    lik = subject_likelihoods(posteriors, idx, prior)
    sub_prior = prior.subset(idx)
    q1 = options.q1_scale * np.diag(1.0 / np.diag(sub_prior.covariance))
    q0 = options.q0_scale * np.eye(m)
    p_dim = design.shape[1]
    if p_dim == m:
        beta_prior = GaussianDensity(sub_prior.mean.copy(), sub_prior.covariance.copy())
    else:
        beta_prior = GaussianDensity.diagonal(np.zeros(p_dim), np.ones(p_dim))
    g_mean, g_var = options.gamma_prior_mean, options.gamma_prior_var

    def objective(g):
        _, lm = conditional_beta(lik, design, q0 + np.exp(-g) * q1, beta_prior)
        return lm - 0.5 * (g - g_mean) ** 2 / g_var - 0.5 * np.log(2 * np.pi * g_var)

    def derivs(g, h=1e-3):
        f0, fp, fm = objective(g), objective(g + h), objective(g - h)
        return f0, (fp - fm) / (2 * h), (fp - 2 * f0 + fm) / h ** 2

    gamma = g_mean
    f_cur, grad, hess = derivs(gamma)
    for _ in range(options.max_iter):
        step = -grad / hess if hess < 0 else np.sign(grad) * 1.0
        step = float(np.clip(step, -2.0, 2.0))
        f_new = objective(gamma + step)
        while f_new < f_cur and abs(step) > 1e-8:
            step *= 0.5
            f_new = objective(gamma + step)
        if f_new < f_cur:
            break
        gamma += step
        delta = f_new - f_cur
        f_cur, grad, hess = derivs(gamma)
        if abs(delta) < options.tol:
            break
    gamma_var = -1.0 / hess if hess < 0 else g_var
    beta_post, _ = conditional_beta(lik, design, q0 + np.exp(-gamma) * q1, beta_prior)
    gamma_prior = GaussianDensity([g_mean], [[g_var]])
    gamma_post = GaussianDensity([gamma], [[gamma_var]])
    f_val = f_cur + 0.5 * np.log(2 * np.pi * gamma_var)
    complexity = kl_gaussian(beta_post, beta_prior) + kl_gaussian(gamma_post, gamma_prior)

    stack = np.concatenate([p.theta_post.mean[idx] for p in posteriors])
    blocks = np.stack([p.theta_post.covariance[np.ix_(idx, idx)] for p in posteriors])
    return PebModel(
        theta_stack=stack,
        theta_cov=blocks,
        design=design,
        q0=q0,
        q1=q1,
        beta_prior=beta_prior,
        gamma_prior=gamma_prior,
        beta_post=beta_post,
        gamma_post=gamma_post,
        free_energy=float(f_val),
        accuracy=float(f_val + complexity),
        complexity=float(complexity),
        param_labels=list(labels),
        param_indices=idx,
        subject_free_energy=np.array([p.free_energy for p in posteriors]),
    )


def subset_indices(labels, select) -> np.ndarray:
    """Indices of ``labels`` chosen by a class prefix (``"B"``) or explicit labels."""
    if isinstance(select, str):
        prefix = select + "["
        out = [i for i, lab in enumerate(labels) if lab.startswith(prefix)]
    else:
        wanted = list(select)
        missing = [w for w in wanted if w not in labels]
        if missing:
            raise PebError(f"unknown parameters: {missing}")
        out = [labels.index(w) for w in wanted]
    if not out:
        raise PebError(f"no parameters match {select!r}")
    return np.array(out, dtype=int)
