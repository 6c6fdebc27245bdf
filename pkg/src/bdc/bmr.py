"""Bayesian model reduction and the searches built on it.

A reduced model differs from the full one only in its prior.  Given the
full prior and posterior (both Gaussian) the reduced posterior and the
change in log evidence follow without refitting.  Parameters with zero
reduced-prior variance are handled as an exact limit: the likelihood is
conditioned on their fixed value and their rows/columns are removed.
"""

from dataclasses import dataclass, replace

import numpy as np

from .gaussian import GaussianDensity, cholesky_logdet, kl_gaussian
from .peb import PebModel
from .vl import SubjectPosterior


class ReductionInvalid(ValueError):
    """The reduced posterior precision is not positive definite."""


@dataclass
class ReducedModel:
    switched_off: frozenset
    reduced_prior: GaussianDensity
    delta_f: float
    reduced_posterior: GaussianDensity = None

    def to_dict(self) -> dict:
        return {"switched_off": sorted(self.switched_off), "delta_f": self.delta_f}


def _inv_pd(a):
    c = np.linalg.cholesky(a)
    ci = np.linalg.inv(c)
    return ci.T @ ci


def _gauss_term(prec_prior, mean_prior, lik_prec, lik_info):
    """``ln`` of the integral of ``exp(h't - t'Lt/2)`` against ``N(mean, prec^-1)``.

    Returns ``(value, post_prec, post_mean)``.
    """
    post_prec = lik_prec + prec_prior
    post_prec = 0.5 * (post_prec + post_prec.T)
    try:
        chol = np.linalg.cholesky(post_prec)
    except np.linalg.LinAlgError as exc:
        raise ReductionInvalid("reduced posterior precision is indefinite") from exc
    info = lik_info + prec_prior @ mean_prior
    w = np.linalg.solve(chol, info)
    post_mean = np.linalg.solve(chol.T, w)
    ld_post = 2.0 * np.sum(np.log(np.diag(chol)))
    _, ld_prior_cov = cholesky_logdet(_inv_pd(prec_prior)) if prec_prior.size else (None, 0.0)
    val = (-0.5 * ld_prior_cov - 0.5 * ld_post + 0.5 * w @ w
           - 0.5 * mean_prior @ prec_prior @ mean_prior)
    return val, post_prec, post_mean


def reduce(full_prior: GaussianDensity, full_posterior: GaussianDensity,
           reduced_prior: GaussianDensity):
    """Posterior and log-evidence change under a new prior.

    Parameters
    ----------
    full_prior, full_posterior : GaussianDensity
        Prior and (approximate) posterior of the fitted model.
    reduced_prior : GaussianDensity
        Prior of the reduced model.  Zero variance switches a parameter off
        at its mean.

    Returns
    -------
    reduced_posterior : GaussianDensity
    delta_f : float
        ``F_reduced - F_full`` in nats.

    Raises
    ------
    ReductionInvalid
        If the reduced posterior precision is not positive definite.
    """
    d = full_prior.dim
    if full_posterior.dim != d or reduced_prior.dim != d:
        raise ValueError(
            f"dimension mismatch: {full_prior.dim}, {full_posterior.dim}, {reduced_prior.dim}"
        )
    fixed = ~full_prior.free_mask()
    if np.any(reduced_prior.free_mask() & fixed):
        raise ValueError("reduced prior frees a parameter fixed in the full model")
    live = np.flatnonzero(~fixed)
    out_mean = full_posterior.mean.copy()
    out_mean[fixed] = reduced_prior.mean[fixed]
    out_cov = np.zeros((d, d))
    if live.size == 0:
        return GaussianDensity(out_mean, out_cov), 0.0

    p0 = _inv_pd(full_prior.covariance[np.ix_(live, live)])
    mu0 = full_prior.mean[live]
    post_cov = full_posterior.covariance[np.ix_(live, live)]
    try:
        p = _inv_pd(post_cov)
    except np.linalg.LinAlgError as exc:
        raise ReductionInvalid("full posterior covariance is singular") from exc
    mu = full_posterior.mean[live]
    lik_prec = p - p0
    lik_prec = 0.5 * (lik_prec + lik_prec.T)
    lik_info = p @ mu - p0 @ mu0

    # log-evidence of the full model relative to its likelihood normaliser
    _, ld_p = cholesky_logdet(post_cov)
    _, ld_p0 = cholesky_logdet(full_prior.covariance[np.ix_(live, live)])
    g_full = -0.5 * ld_p0 + 0.5 * ld_p + 0.5 * mu @ p @ mu - 0.5 * mu0 @ p0 @ mu0

    rvar = np.diag(reduced_prior.covariance)[live]
    off = rvar <= 0
    on = ~off
    nu = reduced_prior.mean[live]
    # condition the likelihood on switched-off values
    shift = 0.0
    h_on = lik_info[on]
    if np.any(off):
        nu_off = nu[off]
        shift = lik_info[off] @ nu_off - 0.5 * nu_off @ lik_prec[np.ix_(off, off)] @ nu_off
        h_on = h_on - lik_prec[np.ix_(on, off)] @ nu_off
    if not np.any(on):
        delta = shift - g_full
        out_mean[live] = nu
        return GaussianDensity(out_mean, out_cov), float(delta)

    on_idx = live[on]
    r_cov = reduced_prior.covariance[np.ix_(on_idx, on_idx)]
    try:
        r0 = _inv_pd(r_cov)
    except np.linalg.LinAlgError as exc:
        raise ReductionInvalid("reduced prior covariance is singular over its free set") from exc
    g_red, prec_r, mean_r = _gauss_term(r0, nu[on], lik_prec[np.ix_(on, on)], h_on)
    delta = shift + g_red - g_full

    out_mean[live[off]] = nu[off]
    out_mean[on_idx] = mean_r
    out_cov[np.ix_(on_idx, on_idx)] = _inv_pd(prec_r)
    return GaussianDensity(out_mean, out_cov), float(delta)


def switch_off(prior: GaussianDensity, idx) -> GaussianDensity:
    """Copy of ``prior`` with parameters ``idx`` fixed at zero."""
    idx = list(idx)
    mean = prior.mean.copy()
    cov = prior.covariance.copy()
    mean[idx] = 0.0
    cov[idx, :] = 0.0
    cov[:, idx] = 0.0
    return GaussianDensity(mean, cov)


# ---------------------------------------------------------------------------
# group-level searches


def reduce_peb(peb: PebModel, off_labels) -> ReducedModel:
    """Evidence of the group model with extra ``beta`` entries switched off."""
    off_labels = frozenset(off_labels)
    unknown = off_labels - set(peb.param_labels)
    if unknown:
        raise ValueError(f"unknown parameters: {sorted(unknown)}")
    idx = [peb.param_labels.index(lab) for lab in sorted(off_labels)]
    r_prior = switch_off(peb.beta_prior, idx)
    post, df = reduce(peb.beta_prior, peb.beta_post, r_prior)
    return ReducedModel(off_labels | frozenset(peb.switched_off), r_prior, df, post)


def _as_peb(peb: PebModel, red: ReducedModel) -> PebModel:
    comp = kl_gaussian(red.reduced_posterior, red.reduced_prior) + kl_gaussian(
        peb.gamma_post, peb.gamma_prior)
    f_val = peb.free_energy + red.delta_f
    # keep labels in the original order
    off = [lab for lab in peb.param_labels if lab in red.switched_off]
    return replace(
        peb,
        beta_prior=red.reduced_prior,
        beta_post=red.reduced_posterior,
        free_energy=float(f_val),
        complexity=float(comp),
        accuracy=float(f_val + comp),
        switched_off=off,
    )


def prune_greedy(peb: PebModel, tie_tol: float = 1e-6) -> PebModel:
    """Switch off parameters one at a time while the evidence improves.

    At each pass the removal with the largest positive ``delta_f`` is taken;
    removals within ``tie_tol`` of the best go to the lowest index.
    """
    current = peb
    while True:
        free = [i for i, lab in enumerate(current.param_labels)
                if lab not in current.switched_off and current.beta_prior.covariance[i, i] > 0]
        best_i, best_df, best_red = None, 0.0, None
        scores = []
        for i in free:
            try:
                red = reduce_peb(current, [current.param_labels[i]])
            except ReductionInvalid:
                continue
            scores.append((i, red))
        if scores:
            top = max(r.delta_f for _, r in scores)
            if top > 0:
                best_i, best_red = next((i, r) for i, r in scores if r.delta_f >= top - tie_tol)
                best_df = best_red.delta_f
        if best_i is None or best_df <= 0:
            return current
        current = _as_peb(current, best_red)


def empirical_bayes_update(subject: SubjectPosterior, group: PebModel,
                           empirical_prior: GaussianDensity = None) -> SubjectPosterior:
    """Re-express a subject's fit under the group-level prior.

    Parameters pruned at the group level are fixed at zero; the remaining
    group parameters take the group predictive density as their prior.
    Everything else keeps its original prior.

    Parameters
    ----------
    subject : SubjectPosterior
    group : PebModel
        Fitted (usually pruned) group model over a subset of the subject's
        parameters.
    empirical_prior : GaussianDensity, optional
        Override for the prior over the group subset.
    """
    if subject.theta_prior is None:
        raise ValueError("subject posterior carries no prior")
    idx = np.asarray(group.param_indices)
    labels = subject.labels
    if labels is not None and [labels[i] for i in idx] != list(group.param_labels):
        raise ValueError("subject and group do not share the parameter subset")
    emp = empirical_prior if empirical_prior is not None else group.empirical_prior()
    if emp.dim != idx.size:
        raise ValueError(f"empirical prior has {emp.dim} dims, group subset has {idx.size}")
    full = subject.theta_prior
    mean = full.mean.copy()
    cov = full.covariance.copy()
    cov[idx, :] = 0.0
    cov[:, idx] = 0.0
    mean[idx] = emp.mean
    cov[np.ix_(idx, idx)] = emp.covariance
    # parameters already fixed in the subject model stay fixed
    fixed = np.flatnonzero(~full.free_mask())
    cov[fixed, :] = 0.0
    cov[:, fixed] = 0.0
    mean[fixed] = full.mean[fixed]
    new_prior = GaussianDensity(mean, cov)
    post, df = reduce(full, subject.theta_post, new_prior)
    f_val = subject.free_energy + df
    comp = kl_gaussian(post, new_prior) + kl_gaussian(subject.lambda_post, subject.lambda_prior) \
        if subject.lambda_prior is not None else kl_gaussian(post, new_prior)
    meta = dict(subject.meta)
    meta["empirical_bayes"] = {"delta_f": df, "switched_off": list(group.switched_off)}
    return replace(
        subject,
        theta_post=post,
        theta_prior=new_prior,
        free_energy=float(f_val),
        complexity=float(comp),
        accuracy=float(f_val + comp),
        meta=meta,
    )


def build_model_space(peb: PebModel, threshold: float = 3.0, cap: int = 64) -> list:
    """Breadth-first family of reduced models around a (pruned) group model.

    Starting from ``peb``, each retained model spawns candidates with one more
    parameter switched off; candidates whose evidence relative to the start
    exceeds ``-threshold`` are retained.  Order is breadth-first with
    parameters visited in index order; at most ``cap`` models are returned.
    """
    start = ReducedModel(frozenset(peb.switched_off), peb.beta_prior, 0.0, peb.beta_post)
    models = [start]
    seen = {start.switched_off}
    queue = [start]
    free_labels = [lab for i, lab in enumerate(peb.param_labels)
                   if lab not in peb.switched_off and peb.beta_prior.covariance[i, i] > 0]
    while queue and len(models) < cap:
        cur = queue.pop(0)
        for lab in free_labels:
            if lab in cur.switched_off:
                continue
            cand_set = cur.switched_off | {lab}
            if cand_set in seen:
                continue
            seen.add(cand_set)
            try:
                cand = reduce_peb(peb, cand_set - frozenset(peb.switched_off))
            except ReductionInvalid:
                continue
            if cand.delta_f > -threshold:
                models.append(cand)
                queue.append(cand)
                if len(models) >= cap:
                    break
    return models


def score_model_space(peb: PebModel, models) -> np.ndarray:
    """Evidence of each model in ``models`` under another group fit ``peb``.

    Values are relative to ``peb`` itself; models that are invalid under
    ``peb`` score ``-inf``.
    """
    out = np.empty(len(models))
    base = frozenset(peb.switched_off)
    known = frozenset(peb.param_labels)
    for k, m in enumerate(models):
        # labels the group fit does not model (e.g. pruned earlier) are ignored
        extra = (frozenset(m.switched_off) & known) - base
        if not extra:
            out[k] = 0.0
            continue
        try:
            out[k] = reduce_peb(peb, extra).delta_f
        except ReductionInvalid:
            out[k] = -np.inf
    return out


def model_space_to_dict(models) -> list:
    return [m.to_dict() for m in models]
