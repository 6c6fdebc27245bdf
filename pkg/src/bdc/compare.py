"""Dataset comparison: four information measures and the pipeline behind them.

Pipeline
--------
1. Fit every subject of every dataset.
2. Pool all subject-dataset rows into one group model, then prune it.
3. Re-express each subject under the pruned group prior.
4. Fit one group model per dataset over the surviving parameters.
5. Score each dataset: certainty about group parameters and between-subject
   variability, and information gained about parameters and about models.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__, bmr, dcm, peb as peb_mod, vl
from .gaussian import (kl_categorical, kl_gaussian, neg_entropy, posterior_over_models,
                       prob_from_nats)

log = logging.getLogger(__name__)

MEASURES = ("s_theta", "s_eps", "d_params", "d_models")
MEASURE_TITLES = {
    "s_theta": "Parameter certainty",
    "s_eps": "Random-effects certainty",
    "d_params": "Information gain (parameters)",
    "d_models": "Information gain (models)",
}
TIE_NATS = 1e-6
SPACE_MODES = ("union", "pooled", "per_dataset")


# ---------------------------------------------------------------------------
# measures


def _free_subset(peb, subset=None):
    idx = np.arange(peb.beta_post.dim) if subset is None else np.asarray(subset, int)
    free = peb.beta_prior.free_mask()[idx]
    return idx[free]


def measure_parameter_certainty(peb, subset=None) -> float:
    """Negative entropy of the group-parameter posterior (nats)."""
    return neg_entropy(peb.beta_post.subset(_free_subset(peb, subset)))


def measure_rfx_certainty(peb) -> float:
    """Negative entropy of the between-subject precision posterior (nats)."""
    return neg_entropy(peb.gamma_post)


def info_gain_params(peb, subset=None) -> float:
    """KL divergence from group-parameter prior to posterior (nats)."""
    idx = _free_subset(peb, subset)
    return kl_gaussian(peb.beta_post.subset(idx), peb.beta_prior.subset(idx))


def info_gain_models(free_energies) -> float:
    """Information gained about which model in a space is best (nats).

    Parameters
    ----------
    free_energies : array_like
        Log evidence of each model, any common offset.  Models scored
        ``-inf`` are dropped.
    """
    f = np.asarray(free_energies, dtype=float)
    if f.size == 0:
        raise ValueError("empty model space")
    f = f[np.isfinite(f)]
    if f.size == 0:
        raise ValueError("no model in the space has finite evidence")
    return kl_categorical(posterior_over_models(f))


def relative_nats(values) -> list:
    v = np.asarray(values, dtype=float)
    return (v - v.min()).tolist()


def pairwise_probabilities(values) -> list:
    """``p[i][j]``: probability that dataset ``i`` beats dataset ``j``."""
    v = np.asarray(values, dtype=float)
    table = prob_from_nats(v[:, None] - v[None, :])
    return np.atleast_2d(table).tolist()


# ---------------------------------------------------------------------------
# configuration and results


@dataclass
class PipelineConfig:
    subset: object = "B"                    # class prefix or explicit labels
    model_space: str = "union"              # "union", "pooled" or "per_dataset"
    threshold: float = 3.0
    cap: int = 64
    jobs: int = None
    fit: vl.FitOptions = field(default_factory=vl.FitOptions)
    peb: peb_mod.PebOptions = field(default_factory=peb_mod.PebOptions)

    def __post_init__(self):
        if self.model_space not in SPACE_MODES:
            raise ValueError(f"model_space must be one of {SPACE_MODES}, not {self.model_space!r}")
        if isinstance(self.fit, dict):
            self.fit = vl.FitOptions(**self.fit)
        if isinstance(self.peb, dict):
            self.peb = peb_mod.PebOptions(**self.peb)

    def to_dict(self) -> dict:
        return {
            "subset": self.subset if isinstance(self.subset, str) else list(self.subset),
            "model_space": self.model_space,
            "threshold": self.threshold,
            "cap": self.cap,
            "fit": self.fit.to_dict(),
            "peb": self.peb.to_dict(),
        }


@dataclass
class FitResults:
    """Step-1 output: per dataset, one posterior (or ``None``) per subject."""

    labels: list
    posteriors: dict
    errors: dict

    def failed(self, label) -> bool:
        return any(p is None for p in self.posteriors[label])


@dataclass
class ComparisonReport:
    datasets: list
    excluded: list
    measures: dict
    verdict: dict
    group: dict
    model_space: list
    per_dataset: dict
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "provenance": self.provenance,
            "datasets": self.datasets,
            "excluded": self.excluded,
            "measures": self.measures,
            "verdict": self.verdict,
            "group": self.group,
            "model_space": self.model_space,
            "per_dataset": self.per_dataset,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ComparisonReport":
        return cls(
            datasets=d["datasets"], excluded=d["excluded"], measures=d["measures"],
            verdict=d["verdict"], group=d["group"], model_space=d["model_space"],
            per_dataset=d["per_dataset"], provenance=d.get("provenance", {}),
        )


# ---------------------------------------------------------------------------
# step 1


def _map(fn, items, jobs):
    jobs = jobs or os.cpu_count() or 1
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        # map preserves input order whatever the completion order
        return list(pool.map(fn, items))


def fit_bundles(bundles, options: vl.FitOptions = None, jobs=None) -> FitResults:
    """Invert every subject of every bundle; failures are recorded, not raised."""
    tasks = [(b, s) for b in bundles for s in range(b.n_subjects)]

    def one(task):
        b, s = task
        try:
            return vl.fit(b.spec, b.inputs, b.data[s], options=options), None
        except (vl.FitFailure, dcm.DivergenceError, np.linalg.LinAlgError) as exc:
            log.warning("%s subject %d failed: %s", b.label, s, exc)
            return None, f"{b.subject_ids[s]}: {exc}"

    out = _map(one, tasks, jobs)
    posteriors = {b.label: [] for b in bundles}
    errors = {b.label: [] for b in bundles}
    for (b, _), (post, err) in zip(tasks, out):
        posteriors[b.label].append(post)
        if err:
            errors[b.label].append(err)
    return FitResults([b.label for b in bundles], posteriors, errors)


# ---------------------------------------------------------------------------
# steps 2-5


def _verdict(labels, raw):
    wins = {lab: 0 for lab in labels}
    per_measure = {}
    for m in MEASURES:
        v = np.asarray(raw[m])
        if v.size < 2 or v.max() - v.min() < TIE_NATS:
            per_measure[m] = None
            continue
        w = labels[int(np.argmax(v))]
        per_measure[m] = w
        wins[w] += 1
    top = max(wins.values()) if wins else 0
    leaders = [lab for lab, n in wins.items() if n == top]
    best = leaders[0] if top > 0 and len(leaders) == 1 else None
    return {"best": best if best is not None else "indistinguishable",
            "wins": wins, "per_measure": per_measure}


def _union_space(spaces, cap):
    """Models plausible under any dataset, de-duplicated, first-seen order."""
    seen, out = set(), []
    for models in spaces:
        for m in models:
            key = frozenset(m.switched_off)
            if key not in seen:
                seen.add(key)
                out.append(m)
    out.sort(key=lambda m: len(m.switched_off))
    return out[:cap]


def _gauss(g):
    return {"mean": g.mean.tolist(), "covariance": g.covariance.tolist()}


def compare_fits(fits: FitResults, config: PipelineConfig = None) -> ComparisonReport:
    """Run pipeline steps 2-5 on step-1 results."""
    config = config or PipelineConfig()
    ok = [lab for lab in fits.labels if not fits.failed(lab)]
    excluded = [{"label": lab, "errors": list(fits.errors[lab])}
                for lab in fits.labels if fits.failed(lab)]
    if len(ok) < 1:
        raise ValueError("no dataset has a complete set of subject fits")
    first = fits.posteriors[ok[0]][0]
    labels = first.labels
    prior = first.theta_prior
    idx = peb_mod.subset_indices(labels, config.subset)

    # step 2: pooled group model, blind to dataset membership
    rows = [p for lab in ok for p in fits.posteriors[lab]]
    pooled = peb_mod.fit_peb(rows, idx, prior=prior, options=config.peb)
    pruned = bmr.prune_greedy(pooled)
    retained = [lab for lab in pruned.param_labels if lab not in pruned.switched_off]
    if not retained:
        log.warning("every group parameter was pruned; scoring the full subset")
        pruned = pooled
        retained = list(pooled.param_labels)
    keep = np.array([labels.index(lab) for lab in retained], dtype=int)

    # steps 3-4: empirical Bayes under the pruned pooled model, then one
    # group model per dataset over the surviving parameters
    updated, group_fits = {}, {}
    for lab in ok:
        updated[lab] = [bmr.empirical_bayes_update(p, pruned) for p in fits.posteriors[lab]]
        group_fits[lab] = peb_mod.fit_peb(updated[lab], keep, prior=prior, options=config.peb)

    # step 5
    shared_space = None
    dataset_spaces = {}
    if config.model_space == "pooled":
        shared_space = bmr.build_model_space(pruned, config.threshold, config.cap)
    else:
        for lab in ok:
            dataset_spaces[lab] = bmr.build_model_space(group_fits[lab], config.threshold,
                                                        config.cap)
        if config.model_space == "union":
            shared_space = _union_space([dataset_spaces[lab] for lab in ok], config.cap)

    raw = {m: [] for m in MEASURES}
    per_dataset = {}
    space_scores = {}
    for lab in ok:
        g = group_fits[lab]
        if shared_space is not None:
            scores = bmr.score_model_space(g, shared_space)
            n_models = len(shared_space)
        else:
            scores = np.array([m.delta_f for m in dataset_spaces[lab]])
            n_models = len(dataset_spaces[lab])
        space_scores[lab] = scores
        raw["s_theta"].append(measure_parameter_certainty(g))
        raw["s_eps"].append(measure_rfx_certainty(g))
        raw["d_params"].append(info_gain_params(g))
        raw["d_models"].append(info_gain_models(scores))
        per_dataset[lab] = {
            "free_energy": g.free_energy,
            "accuracy": g.accuracy,
            "complexity": g.complexity,
            "beta_post": _gauss(g.beta_post),
            "gamma_post": _gauss(g.gamma_post),
            "n_models": n_models,
            "model_probabilities": posterior_over_models(
                scores[np.isfinite(scores)]).probabilities.tolist(),
            "subject_free_energy": [p.free_energy for p in updated[lab]],
        }

    measures = {}
    for m in MEASURES:
        measures[m] = {
            "title": MEASURE_TITLES[m],
            "raw": raw[m],
            "relative": relative_nats(raw[m]),
            "pairwise": pairwise_probabilities(raw[m]),
        }
    if shared_space is not None:
        space_desc = [{"switched_off": sorted(m.switched_off),
                       "delta_f": {lab: float(space_scores[lab][k]) for lab in ok}}
                      for k, m in enumerate(shared_space)]
    else:
        space_desc = [{"dataset": lab, "models": bmr.model_space_to_dict(dataset_spaces[lab])}
                      for lab in ok]
    group = {
        "subset": [labels[i] for i in idx],
        "pruned": list(pruned.switched_off),
        "retained": retained,
        "pooled_free_energy": pooled.free_energy,
        "pruned_free_energy": pruned.free_energy,
        "model_space_mode": config.model_space,
    }
    return ComparisonReport(
        datasets=ok,
        excluded=excluded,
        measures=measures,
        verdict=_verdict(ok, raw),
        group=group,
        model_space=space_desc,
        per_dataset=per_dataset,
        provenance={"tool": "bdc", "version": __version__},
    )


def run_pipeline(bundles, config: PipelineConfig = None, fits: FitResults = None) -> ComparisonReport:
    """Full five-step comparison of ``bundles``.

    Parameters
    ----------
    bundles : list of DatasetBundle
        At least two datasets sharing subjects, regions and parameters.
    fits : FitResults, optional
        Precomputed step-1 output; skips subject fitting.
    """
    config = config or PipelineConfig()
    if len(bundles) < 2:
        raise ValueError("comparison needs at least two datasets")
    ref = bundles[0]
    for b in bundles[1:]:
        if b.n_subjects != ref.n_subjects or b.spec.n_regions != ref.spec.n_regions:
            raise ValueError(f"dataset {b.label} does not match {ref.label} in subjects or regions")
        if dcm.param_labels(b.spec) != dcm.param_labels(ref.spec):
            raise ValueError(f"dataset {b.label} has different model parameters")
    if len({b.label for b in bundles}) != len(bundles):
        raise ValueError("dataset labels must be unique")
    if fits is None:
        fits = fit_bundles(bundles, config.fit, config.jobs)
    return compare_fits(fits, config)


# ---------------------------------------------------------------------------
# figure


def _esc(s):
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def render_svg(report) -> str:
    """Four-panel bar chart of relative nats per measure (deterministic text)."""
    d = report.to_dict() if isinstance(report, ComparisonReport) else report
    labels = d["datasets"]
    pw, ph, pad = 260, 220, 40
    width, height = 2 * pw + pad, 2 * ph + pad
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>']
    prov = d.get("provenance") or {}
    if prov:
        meta = " ".join(f"{k}={prov[k]}" for k in sorted(prov))
        out.insert(1, f"<!-- {_esc(meta).replace('--', '- -')} -->")
    palette = ["#4878a8", "#e0893a", "#5a9e5a", "#c44e52", "#8172b2", "#937860"]
    for k, m in enumerate(MEASURES):
        x0 = (k % 2) * (pw + pad // 2) + pad // 2
        y0 = (k // 2) * (ph + pad // 2) + pad // 2
        rel = d["measures"][m]["relative"]
        top = max(max(rel), 1e-12)
        out.append(f'<text x="{x0 + pw / 2:.1f}" y="{y0 + 12}" text-anchor="middle" '
                   f'font-weight="bold">{_esc(d["measures"][m].get("title", m))}</text>')
        base = y0 + ph - 30
        avail = ph - 60
        out.append(f'<line x1="{x0 + 30}" y1="{base}" x2="{x0 + pw}" y2="{base}" stroke="black"/>')
        n = max(len(labels), 1)
        bw = (pw - 40) / n
        for i, (lab, v) in enumerate(zip(labels, rel)):
            h = avail * v / top
            bx = x0 + 35 + i * bw
            out.append(f'<rect x="{bx:.1f}" y="{base - h:.1f}" width="{bw * 0.7:.1f}" '
                       f'height="{h:.1f}" fill="{palette[i % len(palette)]}"/>')
            out.append(f'<text x="{bx + bw * 0.35:.1f}" y="{base + 14}" '
                       f'text-anchor="middle">{_esc(lab)}</text>')
            out.append(f'<text x="{bx + bw * 0.35:.1f}" y="{base - h - 3:.1f}" '
                       f'text-anchor="middle">{v:.2f}</text>')
        out.append(f'<text x="{x0 + 8}" y="{base - avail / 2:.1f}" '
                   f'transform="rotate(-90 {x0 + 8} {base - avail / 2:.1f})" '
                   f'text-anchor="middle">nats</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
