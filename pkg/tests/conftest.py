import math

import numpy as np
import pytest

from bdc import dcm
from bdc.gaussian import GaussianDensity
from bdc.vl import PriorSpec, SubjectPosterior


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def small_spec(n_volumes=40, tr=2.0):
    """Two regions, one driving input into R1, modulation of both self-connections."""
    return dcm.DcmSpec(
        n_regions=2,
        n_inputs=1,
        a_mask=np.ones((2, 2), bool),
        b_masks=np.eye(2, dtype=bool)[None],
        c_mask=np.array([[1], [0]], bool),
        tr=tr,
        n_volumes=n_volumes,
    )


def small_inputs(spec, dt=None):
    dt = dcm.default_dt(spec.tr) if dt is None else dt
    blocks = [(0, t, 10.0) for t in np.arange(0.0, spec.duration - 10.0, 20.0)]
    return dcm.build_inputs(blocks, dt, spec.duration, n_inputs=1)


@pytest.fixture
def spec2():
    return small_spec()


@pytest.fixture
def inputs2(spec2):
    return small_inputs(spec2)


# ---------------------------------------------------------------------------
# independent reference implementation of the generative model


def reference_integrate(spec, params, inputs, dt=None, log_space=False):
    """Plain-python RK4, sampled at volume midpoints.

    ``log_space`` integrates ln f, ln v, ln q instead of f, v, q.
    """
    c = spec.constants
    n = spec.n_regions
    dt = inputs.dt if dt is None else dt
    t_end = (spec.n_volumes - 0.5) * spec.tr
    n_steps = int(math.ceil(t_end / dt - 1e-9)) + 1
    k1 = 4.3 * c.nu0 * c.e0 * c.te

    def u_at(step):
        # schedule values are held over [i dt_u, (i+1) dt_u)
        i = int(math.floor(step * dt / inputs.dt + 1e-9))
        return inputs.u[:, min(i, inputs.n_steps - 1)]

    def deriv(x, u):
        z, s, f, v, q = x[:n], x[n:2 * n], x[2 * n:3 * n], x[3 * n:4 * n], x[4 * n:]
        a = np.array(params.a, float).copy()
        for i in range(n):
            expo = params.a_self[i] + sum(u[k] * params.b[k][i][i] for k in range(len(u)))
            for j in range(n):
                if j != i:
                    a[i][j] += sum(u[k] * params.b[k][i][j] for k in range(len(u)))
            a[i][i] = -0.5 * math.exp(expo)
        dz = a @ z + params.c @ u
        kappa = c.kappa0 * np.exp(params.decay)
        tau = c.tau0 * np.exp(params.transit)
        ds = z - kappa * s - c.gamma_h * (f - 1)
        df = s
        dv = (f - v ** (1 / c.alpha)) / tau
        dq = (f * (1 - (1 - c.e0) ** (1 / f)) / c.e0 - v ** (1 / c.alpha) * q / v) / tau
        return np.concatenate([dz, ds, df, dv, dq])

    def bold(x):
        v, q = x[3 * n:4 * n], x[4 * n:]
        eps = np.exp(params.epsilon)
        return c.v0 * (k1 * (1 - q) + eps * c.r0 * c.e0 * c.te * (1 - q / v) + (1 - eps) * (1 - v))

    if log_space:
        natural_deriv, natural_bold = deriv, bold

        def to_nat(x):
            return np.concatenate([x[:2 * n], np.exp(x[2 * n:])])

        def deriv(x, u):
            d = natural_deriv(to_nat(x), u)
            return np.concatenate([d[:2 * n], d[2 * n:] / np.exp(x[2 * n:])])

        def bold(x):
            return natural_bold(to_nat(x))

    x = np.concatenate([np.zeros(2 * n), np.zeros(3 * n) if log_space else np.ones(3 * n)])
    ys = [bold(x)]
    for step in range(n_steps):
        u = u_at(step)
        k_1 = deriv(x, u)
        k_2 = deriv(x + dt / 2 * k_1, u)
        k_3 = deriv(x + dt / 2 * k_2, u)
        k_4 = deriv(x + dt * k_3, u)
        x = x + dt / 6 * (k_1 + 2 * k_2 + 2 * k_3 + k_4)
        ys.append(bold(x))
    ys = np.array(ys)
    t = (np.arange(spec.n_volumes) + 0.5) * spec.tr / dt
    i0 = np.floor(t + 1e-9).astype(int)
    w = (t - i0)[:, None]
    return (1 - w) * ys[i0] + w * ys[i0 + 1]


# ---------------------------------------------------------------------------
# linear-Gaussian surrogates


def conjugate_posterior(x, y, noise_var, prior: GaussianDensity):
    p0 = np.linalg.inv(prior.covariance)
    prec = p0 + x.T @ x / noise_var
    cov = np.linalg.inv(prec)
    mean = cov @ (p0 @ prior.mean + x.T @ y / noise_var)
    return GaussianDensity(mean, cov)


def conjugate_log_evidence(x, y, noise_var, mean, cov):
    """``ln N(y; X m, X C X' + s I)`` evaluated directly."""
    s = x @ cov @ x.T + noise_var * np.eye(len(y))
    r = y - x @ mean
    sign, ld = np.linalg.slogdet(s)
    return float(-0.5 * (len(y) * np.log(2 * np.pi) + ld + r @ np.linalg.solve(s, r)))


def linear_subject(x, y, noise_var, prior: GaussianDensity, labels=None) -> SubjectPosterior:
    """Exact posterior of a linear-Gaussian model packaged as a subject fit."""
    post = conjugate_posterior(x, y, noise_var, prior)
    f = conjugate_log_evidence(x, y, noise_var, prior.mean, prior.covariance)
    lam = GaussianDensity([np.log(1 / noise_var)], [[0.0]])
    return SubjectPosterior(post, lam, f, float("nan"), float("nan"), 0, True,
                            theta_prior=prior, lambda_prior=lam, labels=labels)


def linear_priors(prior: GaussianDensity, noise_var) -> PriorSpec:
    # zero variance on lambda pins the noise at its true value
    return PriorSpec(prior, GaussianDensity([np.log(1 / noise_var)], [[0.0]]))


# ---------------------------------------------------------------------------
# acceptance summary: one line per criterion at the end of the run

_CRITERIA = {}
_NOTES = {}


def note(n, text):
    """Attach a detail line to criterion ``n`` in the summary."""
    _NOTES.setdefault(n, []).append(text)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    n, title = mark.args
    prev = _CRITERIA.get(n, ("PASS", title, 0.0))
    status = prev[0] if rep.passed else "FAIL"
    _CRITERIA[n] = (status, title, prev[2] + rep.duration)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, title, secs = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2}: {status}  {title}  ({secs:.1f} s)")
        for line in _NOTES.get(n, []):
            terminalreporter.write_line(f"    {line}")
