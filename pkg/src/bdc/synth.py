"""Seeded synthetic cohorts with known ground truth.

Every dataset in a cohort shares the same subjects (parameters and inputs);
datasets differ only in observation-noise SD.  Random streams come from
``numpy.random.SeedSequence`` keyed by a counter tuple:

* subject parameters: ``(master, 0, subject)``
* observation noise:  ``(master, 1, dataset_slot, subject)``
"""

from dataclasses import dataclass, field

import numpy as np

from . import dcm


@dataclass
class DatasetBundle:
    """One dataset: a label, the shared model spec and per-subject series."""

    label: str
    spec: dcm.DcmSpec
    inputs: dcm.InputSchedule
    data: list                      # one (n_volumes, n_regions) array per subject
    subject_ids: list = None

    def __post_init__(self):
        if self.subject_ids is None:
            self.subject_ids = [f"sub-{i + 1:02d}" for i in range(len(self.data))]
        for i, y in enumerate(self.data):
            if np.shape(y) != (self.spec.n_volumes, self.spec.n_regions):
                raise ValueError(
                    f"{self.label}: subject {i} data shape {np.shape(y)} does not match spec"
                )

    @property
    def n_subjects(self) -> int:
        return len(self.data)


@dataclass
class TruthConfig:
    """Group-mean parameters and between-subject SDs (packed order)."""

    group_mean: dcm.DcmParams
    between_sd: np.ndarray


@dataclass
class GroundTruth:
    group_mean: dcm.DcmParams
    between_sd: np.ndarray
    subject_params: list
    noise_sd: list
    seed: int
    labels: list = field(default_factory=list)

    def subject_vectors(self, spec) -> np.ndarray:
        return np.stack([dcm.pack(p, spec) for p in self.subject_params])

    def to_dict(self, spec) -> dict:
        return {
            "seed": int(self.seed),
            "labels": list(self.labels),
            "param_labels": dcm.param_labels(spec),
            "group_mean": dcm.pack(self.group_mean, spec).tolist(),
            "between_sd": np.asarray(self.between_sd, float).tolist(),
            "subjects": self.subject_vectors(spec).tolist(),
            "noise_sd": [np.asarray(s, float).tolist() for s in self.noise_sd],
        }


def block_design(n_volumes=160, tr=2.8, block=8.0, n_inputs=2):
    """Alternating condition-1 / rest / condition-2 / rest blocks.

    With a single input every task block drives input 0.
    """
    total = n_volumes * tr
    blocks = []
    t = 0.0
    cycle = 0
    while t + block <= total + 1e-9:
        if cycle % 2 == 0:
            blocks.append(((cycle // 2) % n_inputs, t, block))
        t += block
        cycle += 1
    return blocks


def default_scenario():
    """Three-region, two-input network with diagonal modulation.

    Returns
    -------
    spec : DcmSpec
    inputs : InputSchedule
    truth : TruthConfig
    """
    n, m = 3, 2
    spec = dcm.DcmSpec(
        n_regions=n,
        n_inputs=m,
        a_mask=np.ones((n, n), bool),
        b_masks=np.stack([np.eye(n, dtype=bool)] * m),
        c_mask=np.array([[1, 1], [0, 0], [0, 0]], bool),
        tr=2.8,
        n_volumes=160,
        region_names=["R1", "R2", "R3"],
        input_names=["scenes", "objects"],
    )
    inputs = dcm.build_inputs(block_design(spec.n_volumes, spec.tr), dcm.default_dt(spec.tr),
                              spec.duration, n_inputs=m)
    mean = dcm.DcmParams.zeros(spec)
    mean.a[1, 0], mean.a[2, 1], mean.a[2, 0], mean.a[0, 1] = 0.4, 0.3, 0.2, 0.1
    mean.c[0] = [0.3, 0.3]
    mean.b[0] = np.diag([-0.5, 0.4, 0.0])
    # one modest effect keeps the neighbourhood of the pruned model non-trivial
    mean.b[1] = np.diag([0.2, 0.0, -0.4])
    sd_by_class = {"A": 0.05, "A_self": 0.05, "B": 0.1, "C": 0.05,
                   "transit": 0.0, "decay": 0.0, "epsilon": 0.0}
    sd = np.array([sd_by_class[c] for c in dcm.param_classes(spec)])
    return spec, inputs, TruthConfig(mean, sd)


def _truncated_normal(rng, size, bound=3.0):
    z = rng.standard_normal(size)
    bad = np.abs(z) > bound
    while np.any(bad):
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > bound
    return z


def generate_cohort(spec: dcm.DcmSpec, truth: TruthConfig, n_subjects: int, noise_levels,
                    seed: int, inputs: dcm.InputSchedule = None, labels=None):
    """Simulate several datasets of the same subjects at different noise levels.

    Parameters
    ----------
    noise_levels : sequence
        One entry per dataset; a scalar SD or a per-region vector.
    seed : int
        Master seed.

    Returns
    -------
    bundles : list of DatasetBundle
    truth : GroundTruth
    """
    if n_subjects < 2:
        raise ValueError("need at least two subjects")
    noise = [np.broadcast_to(np.asarray(s, float), (spec.n_regions,)).copy() for s in noise_levels]
    if not noise:
        raise ValueError("need at least one noise level")
    if any(np.any(s < 0) for s in noise):
        raise ValueError("noise levels must be non-negative")
    labels = list(labels) if labels is not None else [f"D{k + 1}" for k in range(len(noise))]
    if len(labels) != len(noise):
        raise ValueError("one label per noise level is required")
    if inputs is None:
        inputs = dcm.build_inputs(block_design(spec.n_volumes, spec.tr, n_inputs=spec.n_inputs),
                                  dcm.default_dt(spec.tr), spec.duration, n_inputs=spec.n_inputs)
    mean_vec = dcm.pack(truth.group_mean.masked(spec), spec)
    sd = np.asarray(truth.between_sd, float)
    if sd.shape != mean_vec.shape:
        raise ValueError(f"between_sd has {sd.size} entries, spec has {mean_vec.size} parameters")

    subject_params, clean = [], []
    for s in range(n_subjects):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0, s]))
        theta = mean_vec + sd * _truncated_normal(rng, mean_vec.size)
        params = dcm.unpack(theta, spec)
        try:
            y = dcm.integrate(spec, params, inputs)
        except dcm.DivergenceError as exc:
            raise ValueError(
                f"ground truth for subject {s} diverges (volume {exc.time_index}); "
                "reduce coupling strengths or between-subject SD"
            ) from exc
        subject_params.append(params)
        clean.append(y)

    bundles = []
    for k, (lab, sdk) in enumerate(zip(labels, noise)):
        data = []
        for s in range(n_subjects):
            rng = np.random.default_rng(np.random.SeedSequence([seed, 1, k, s]))
            data.append(clean[s] + rng.standard_normal(clean[s].shape) * sdk)
        bundles.append(DatasetBundle(lab, spec, inputs, data))
    gt = GroundTruth(truth.group_mean, sd, subject_params, noise, seed, labels)
    return bundles, gt
