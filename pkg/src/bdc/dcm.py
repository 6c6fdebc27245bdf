"""Bilinear neural model, extended Balloon haemodynamics and BOLD observation.

Neural dynamics follow ``dz/dt = (A + sum_j u_j B_j) z + C u`` where the
self-connections are parameterised as ``-0.5 * exp(a_self_i + sum_j u_j B_j[i, i])``
so that they stay negative for any parameter value.  Haemodynamics use the
standard Balloon constants; three per-region log-scalings (transit time,
signal decay and the intra/extravascular ratio) are free parameters.
"""

import csv
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import _kernels


class DivergenceError(RuntimeError):
    """The integrated state became non-finite."""

    def __init__(self, message, time_index=None):
        super().__init__(message)
        self.time_index = time_index


@dataclass(frozen=True)
class BalloonConstants:
    kappa0: float = 0.64   # s^-1, signal decay
    gamma_h: float = 0.32  # s^-1, flow-dependent elimination
    tau0: float = 2.0      # s, transit time
    alpha: float = 0.32    # Grubb's exponent
    e0: float = 0.4        # resting oxygen extraction fraction
    v0: float = 4.0        # resting venous volume, percent
    te: float = 0.04       # s, echo time
    nu0: float = 40.3      # s^-1, frequency offset
    r0: float = 25.0       # s^-1, intravascular relaxation slope

    def as_array(self):
        return np.array([getattr(self, f.name) for f in fields(self)], dtype=float)


@dataclass
class DcmSpec:
    """Network structure and acquisition timing for one subject's model.

    ``a_mask[i, j]`` enables the connection from region ``j`` to region ``i``.
    ``b_masks[k]`` enables modulation by input ``k``; ``c_mask[i, k]`` enables
    input ``k`` driving region ``i``.
    """

    n_regions: int
    n_inputs: int
    a_mask: np.ndarray
    b_masks: np.ndarray
    c_mask: np.ndarray
    tr: float
    n_volumes: int
    region_names: list = None
    input_names: list = None
    constants: BalloonConstants = field(default_factory=BalloonConstants)

    def __post_init__(self):
        n, m = int(self.n_regions), int(self.n_inputs)
        self.n_regions, self.n_inputs = n, m
        a = np.array(self.a_mask, dtype=bool).reshape(n, n)
        np.fill_diagonal(a, True)
        b = np.array(self.b_masks, dtype=bool)
        if b.size == 0:
            b = np.zeros((m, n, n), dtype=bool)
        b = b.reshape(m, n, n)
        c = np.array(self.c_mask, dtype=bool).reshape(n, m)
        self.a_mask, self.b_masks, self.c_mask = a, b, c
        if self.tr <= 0 or self.n_volumes < 1:
            raise ValueError("tr must be positive and n_volumes at least 1")
        self.region_names = list(self.region_names or [f"R{i + 1}" for i in range(n)])
        self.input_names = list(self.input_names or [f"u{k + 1}" for k in range(m)])
        if len(self.region_names) != n or len(self.input_names) != m:
            raise ValueError("names do not match region/input counts")
        if isinstance(self.constants, dict):
            self.constants = BalloonConstants(**self.constants)

    @property
    def duration(self) -> float:
        return self.tr * self.n_volumes

    def to_dict(self) -> dict:
        return {
            "n_regions": self.n_regions,
            "n_inputs": self.n_inputs,
            "region_names": self.region_names,
            "input_names": self.input_names,
            "tr": float(self.tr),
            "n_volumes": int(self.n_volumes),
            "a_mask": self.a_mask.astype(int).tolist(),
            "b_masks": self.b_masks.astype(int).tolist(),
            "c_mask": self.c_mask.astype(int).tolist(),
            "constants": {f.name: getattr(self.constants, f.name) for f in fields(BalloonConstants)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DcmSpec":
        required = ("n_regions", "n_inputs", "a_mask", "c_mask", "tr", "n_volumes")
        missing = [k for k in required if k not in d]
        if missing:
            raise ValueError(f"spec is missing fields: {', '.join(missing)}")
        return cls(
            n_regions=d["n_regions"],
            n_inputs=d["n_inputs"],
            a_mask=d["a_mask"],
            b_masks=d.get("b_masks", []),
            c_mask=d["c_mask"],
            tr=float(d["tr"]),
            n_volumes=int(d["n_volumes"]),
            region_names=d.get("region_names"),
            input_names=d.get("input_names"),
            constants=BalloonConstants(**d.get("constants", {})),
        )


@dataclass
class DcmParams:
    """Neural and haemodynamic parameters of one subject.

    ``a`` holds off-diagonal couplings in Hz (its diagonal is ignored);
    ``a_self`` are log-scalings of the -0.5 Hz self-connections.
    """

    a: np.ndarray
    a_self: np.ndarray
    b: np.ndarray
    c: np.ndarray
    transit: np.ndarray
    decay: np.ndarray
    epsilon: np.ndarray
    log_precision: np.ndarray = None

    @classmethod
    def zeros(cls, spec: DcmSpec) -> "DcmParams":
        n, m = spec.n_regions, spec.n_inputs
        return cls(
            a=np.zeros((n, n)),
            a_self=np.zeros(n),
            b=np.zeros((m, n, n)),
            c=np.zeros((n, m)),
            transit=np.zeros(n),
            decay=np.zeros(n),
            epsilon=np.zeros(n),
            log_precision=np.zeros(n),
        )

    def masked(self, spec: DcmSpec) -> "DcmParams":
        """Copy with every entry outside the enabled masks set to zero."""
        a = np.where(spec.a_mask, self.a, 0.0)
        np.fill_diagonal(a, 0.0)
        return replace(
            self,
            a=a,
            b=np.where(spec.b_masks, self.b, 0.0),
            c=np.where(spec.c_mask, self.c, 0.0),
        )


@dataclass
class InputSchedule:
    """Piecewise-constant experimental inputs on a microtime grid.

    ``u[:, i]`` is held over ``[i * dt, (i + 1) * dt)``.
    """

    dt: float
    u: np.ndarray
    blocks: list = None

    def __post_init__(self):
        self.u = np.atleast_2d(np.asarray(self.u, dtype=float))
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    @property
    def n_inputs(self) -> int:
        return self.u.shape[0]

    @property
    def n_steps(self) -> int:
        return self.u.shape[1]

    def to_dict(self) -> dict:
        d = {"dt": float(self.dt), "n_inputs": self.n_inputs, "n_steps": self.n_steps}
        if self.blocks is not None:
            d["blocks"] = [[int(k), float(on), float(dur)] for k, on, dur in self.blocks]
        else:
            d["u"] = self.u.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "InputSchedule":
        if "blocks" in d:
            return build_inputs(
                [tuple(b) for b in d["blocks"]],
                d["dt"],
                d["n_steps"] * d["dt"],
                n_inputs=d["n_inputs"],
            )
        return cls(dt=d["dt"], u=np.asarray(d["u"], dtype=float))


@dataclass
class HaemodynamicState:
    """Per-region vasodilatory signal and normalised flow, volume and dHb."""

    s: np.ndarray
    f: np.ndarray
    v: np.ndarray
    q: np.ndarray

    @classmethod
    def rest(cls, n: int) -> "HaemodynamicState":
        return cls(np.zeros(n), np.ones(n), np.ones(n), np.ones(n))


# ---------------------------------------------------------------------------
# parameter vector layout


def _layout(spec: DcmSpec):
    n, m = spec.n_regions, spec.n_inputs
    off = spec.a_mask & ~np.eye(n, dtype=bool)
    a_idx = np.argwhere(off)
    b_idx = np.argwhere(spec.b_masks)
    c_idx = np.argwhere(spec.c_mask)
    return a_idx, b_idx, c_idx


def param_labels(spec: DcmSpec) -> list:
    """Human-readable labels of the free parameter vector, in packing order."""
    r, inp = spec.region_names, spec.input_names
    a_idx, b_idx, c_idx = _layout(spec)
    labels = [f"A[{r[i]}<-{r[j]}]" for i, j in a_idx]
    labels += [f"A[{r[i]}]" for i in range(spec.n_regions)]
    for k, i, j in b_idx:
        labels.append(f"B[{inp[k]}][{r[i]}]" if i == j else f"B[{inp[k]}][{r[i]}<-{r[j]}]")
    labels += [f"C[{r[i]},{inp[k]}]" for i, k in c_idx]
    for name in ("transit", "decay", "epsilon"):
        labels += [f"{name}[{x}]" for x in r]
    return labels


def param_classes(spec: DcmSpec) -> list:
    """Class of each packed parameter: A, A_self, B, C, transit, decay or epsilon."""
    a_idx, b_idx, c_idx = _layout(spec)
    n = spec.n_regions
    return (
        ["A"] * len(a_idx)
        + ["A_self"] * n
        + ["B"] * len(b_idx)
        + ["C"] * len(c_idx)
        + ["transit"] * n
        + ["decay"] * n
        + ["epsilon"] * n
    )


def n_params(spec: DcmSpec) -> int:
    a_idx, b_idx, c_idx = _layout(spec)
    return len(a_idx) + len(b_idx) + len(c_idx) + 4 * spec.n_regions


def pack(params: DcmParams, spec: DcmSpec) -> np.ndarray:
    a_idx, b_idx, c_idx = _layout(spec)
    return np.concatenate([
        params.a[a_idx[:, 0], a_idx[:, 1]] if len(a_idx) else [],
        params.a_self,
        params.b[b_idx[:, 0], b_idx[:, 1], b_idx[:, 2]] if len(b_idx) else [],
        params.c[c_idx[:, 0], c_idx[:, 1]] if len(c_idx) else [],
        params.transit,
        params.decay,
        params.epsilon,
    ]).astype(float)


def _unpack_batch(thetas: np.ndarray, spec: DcmSpec):
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    nb = thetas.shape[0]
    n, m = spec.n_regions, spec.n_inputs
    a_idx, b_idx, c_idx = _layout(spec)
    if thetas.shape[1] != n_params(spec):
        raise ValueError(f"expected {n_params(spec)} parameters, got {thetas.shape[1]}")
    pos = 0
    a = np.zeros((nb, n, n))
    a[:, a_idx[:, 0], a_idx[:, 1]] = thetas[:, pos:pos + len(a_idx)]
    pos += len(a_idx)
    a_self = thetas[:, pos:pos + n].copy()
    pos += n
    b = np.zeros((nb, m, n, n))
    b[:, b_idx[:, 0], b_idx[:, 1], b_idx[:, 2]] = thetas[:, pos:pos + len(b_idx)]
    pos += len(b_idx)
    c = np.zeros((nb, n, m))
    c[:, c_idx[:, 0], c_idx[:, 1]] = thetas[:, pos:pos + len(c_idx)]
    pos += len(c_idx)
    transit = thetas[:, pos:pos + n].copy()
    decay = thetas[:, pos + n:pos + 2 * n].copy()
    epsilon = thetas[:, pos + 2 * n:pos + 3 * n].copy()
    return a, a_self, b, c, transit, decay, epsilon


def unpack(theta: np.ndarray, spec: DcmSpec, log_precision=None) -> DcmParams:
    a, a_self, b, c, transit, decay, epsilon = (x[0] for x in _unpack_batch(theta, spec))
    if log_precision is None:
        log_precision = np.zeros(spec.n_regions)
    return DcmParams(a, a_self, b, c, transit, decay, epsilon, np.asarray(log_precision, float))


# ---------------------------------------------------------------------------
# model equations


def neural_derivative(z, u, params: DcmParams, spec: DcmSpec) -> np.ndarray:
    """Bilinear neural dynamics with exponentiated self-connections."""
    z = np.asarray(z, dtype=float)
    u = np.asarray(u, dtype=float)
    n, m = spec.n_regions, spec.n_inputs
    if z.shape != (n,) or u.shape != (m,):
        raise ValueError(f"expected z of shape ({n},) and u of shape ({m},)")
    p = params.masked(spec)
    eye = np.eye(n, dtype=bool)
    jac = p.a + np.einsum("k,kij->ij", u, np.where(eye, 0.0, p.b))
    diag_b = np.einsum("kii->ki", p.b)
    jac[eye] = -0.5 * np.exp(p.a_self + u @ diag_b)
    return jac @ z + p.c @ u


def haemo_derivative(state: HaemodynamicState, z, params: DcmParams,
                     constants: BalloonConstants = BalloonConstants()) -> HaemodynamicState:
    """Time derivative of the Balloon state driven by neural activity ``z``."""
    s, f, v, q = (np.asarray(x, dtype=float) for x in (state.s, state.f, state.v, state.q))
    if not all(np.all(np.isfinite(x)) for x in (s, f, v, q)):
        raise ValueError("non-finite haemodynamic state")
    k = constants
    kappa = k.kappa0 * np.exp(params.decay)
    tau = k.tau0 * np.exp(params.transit)
    vpow = v ** (1.0 / k.alpha)
    ds = np.asarray(z, dtype=float) - kappa * s - k.gamma_h * (f - 1.0)
    df = s
    dv = (f - vpow) / tau
    dq = (f * (1.0 - (1.0 - k.e0) ** (1.0 / f)) / k.e0 - vpow * q / v) / tau
    return HaemodynamicState(ds, df, dv, dq)


def bold_observation(state: HaemodynamicState, params: DcmParams,
                     constants: BalloonConstants = BalloonConstants()) -> np.ndarray:
    """Percent BOLD signal change for each region."""
    k = constants
    v, q = np.asarray(state.v, float), np.asarray(state.q, float)
    eps = np.exp(params.epsilon)
    k1 = 4.3 * k.nu0 * k.e0 * k.te
    k2 = eps * k.r0 * k.e0 * k.te
    k3 = 1.0 - eps
    return k.v0 * (k1 * (1.0 - q) + k2 * (1.0 - q / v) + k3 * (1.0 - v))


# ---------------------------------------------------------------------------
# inputs and integration


def default_dt(tr: float) -> float:
    """Microtime step: TR/16, capped at 0.1 s."""
    return min(tr / 16.0, 0.1)


def build_inputs(blocks, dt: float, total_duration: float, n_inputs: int = None) -> InputSchedule:
    """Boxcar inputs from ``(input_index, onset, duration)`` triples (seconds)."""
    blocks = [(int(k), float(on), float(dur)) for k, on, dur in blocks]
    if n_inputs is None:
        n_inputs = max((k for k, _, _ in blocks), default=-1) + 1
    n_steps = int(round(total_duration / dt))
    u = np.zeros((n_inputs, n_steps))
    for k, onset, duration in blocks:
        if duration < 0:
            raise ValueError(f"negative block duration {duration}")
        if onset < 0 or onset + duration > total_duration + 1e-9 * dt:
            raise ValueError(f"block [{onset}, {onset + duration}) outside [0, {total_duration}]")
        if not 0 <= k < n_inputs:
            raise ValueError(f"input index {k} out of range")
        start = math.ceil(onset / dt - 1e-9)
        stop = math.ceil((onset + duration) / dt - 1e-9)
        u[k, start:stop] = 1.0
    return InputSchedule(dt=dt, u=u, blocks=blocks)


def _check_inputs(spec: DcmSpec, inputs: InputSchedule):
    if inputs.n_inputs != spec.n_inputs:
        raise ValueError(f"schedule has {inputs.n_inputs} inputs, spec expects {spec.n_inputs}")
    need = (spec.n_volumes - 0.5) * spec.tr
    if inputs.n_steps * inputs.dt < need - 1e-9:
        raise ValueError("input schedule does not cover the acquisition window")
    return min(inputs.n_steps, int(math.ceil(need / inputs.dt - 1e-9)) + 1)


def _sample_midpoints(y_grid: np.ndarray, spec: DcmSpec, dt: float) -> np.ndarray:
    # linear interpolation onto volume midpoints (k + 0.5) * TR
    t = (np.arange(spec.n_volumes) + 0.5) * spec.tr / dt
    i0 = np.minimum(np.floor(t + 1e-9).astype(int), y_grid.shape[1] - 2)
    w = (t - i0)[None, :, None]
    return (1.0 - w) * y_grid[:, i0, :] + w * y_grid[:, i0 + 1, :]


def integrate_vectors(spec: DcmSpec, thetas: np.ndarray, inputs: InputSchedule) -> np.ndarray:
    """Noiseless BOLD for a batch of packed parameter vectors.

    Returns an array of shape ``(B, n_volumes, n_regions)``; trajectories that
    blew up are NaN from the divergence onward.
    """
    n_steps = _check_inputs(spec, inputs)
    a, a_self, b, c, transit, decay, epsilon = _unpack_batch(thetas, spec)
    y = _kernels.integrate_batch(
        a, a_self, b, c, transit, decay, epsilon,
        np.ascontiguousarray(inputs.u), float(inputs.dt), n_steps,
        spec.constants.as_array(),
    )
    return _sample_midpoints(y, spec, inputs.dt)


def integrate(spec: DcmSpec, params: DcmParams, inputs: InputSchedule) -> np.ndarray:
    """Noiseless BOLD timeseries, shape ``(n_volumes, n_regions)``."""
    theta = pack(params.masked(spec), spec)
    y = integrate_vectors(spec, theta[None, :], inputs)[0]
    bad = ~np.all(np.isfinite(y), axis=1)
    if np.any(bad):
        first = int(np.argmax(bad))
        raise DivergenceError(f"integration diverged at volume {first}", time_index=first)
    return y


def simulate(spec: DcmSpec, params: DcmParams, inputs: InputSchedule, noise_sd, seed) -> np.ndarray:
    """``integrate`` plus seeded I.I.D. Gaussian noise with per-region SD."""
    noise_sd = np.broadcast_to(np.asarray(noise_sd, dtype=float), (spec.n_regions,))
    if np.any(noise_sd < 0):
        raise ValueError("noise_sd must be non-negative")
    y = integrate(spec, params, inputs)
    rng = np.random.default_rng(seed)
    return y + rng.standard_normal(y.shape) * noise_sd


# ---------------------------------------------------------------------------
# file formats


def write_timeseries(path, y: np.ndarray, region_names, comment=None):
    """Write a header row of region names then one row per volume.

    ``comment`` (a dict) is written first as ``# key=value`` lines.
    """
    with open(path, "w", newline="") as fh:
        for k, v in (comment or {}).items():
            fh.write(f"# {k}={v}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(region_names)
        for row in np.asarray(y, dtype=float):
            w.writerow([format(float(x), ".17g") for x in row])


def read_timeseries(path):
    """Returns ``(y, region_names)``; leading ``#`` lines are skipped."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(line for line in fh if not line.startswith("#")))
    if not rows:
        raise ValueError(f"{path}: empty timeseries file")
    names = rows[0]
    y = np.array([[float(x) for x in r] for r in rows[1:] if r], dtype=float)
    if y.size and y.shape[1] != len(names):
        raise ValueError(f"{path}: column count does not match header")
    return y.reshape(-1, len(names)), names
