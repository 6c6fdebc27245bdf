import xml.etree.ElementTree as ET

import numpy as np
import pytest
from conftest import linear_subject, small_inputs, small_spec

from bdc import compare, dcm, synth
from bdc.gaussian import GaussianDensity
from bdc.peb import PebModel

LABELS = ["A[R1]", "B[u1][R1]", "B[u1][R2]", "B[u2][R1]", "B[u2][R2]"]
TRUTH = np.array([0.3, 0.6, -0.5, 0.0, 0.25])


def linear_fits(noise_sds, seed=0, n=8, labels=None):
    """Linear-Gaussian stand-in for step 1: same subjects, different noise."""
    rng = np.random.default_rng(seed)
    prior = GaussianDensity(np.zeros(5), np.diag([1 / 16, 1, 1, 1, 1]))
    thetas = TRUTH + rng.normal(size=(n, 5)) * 0.1
    xs = [rng.normal(size=(60, 5)) for _ in range(n)]
    eps = [rng.normal(size=60) for _ in range(n)]
    labels = labels or [f"D{k + 1}" for k in range(len(noise_sds))]
    posts = {}
    for lab, sd in zip(labels, noise_sds):
        posts[lab] = [linear_subject(x, x @ t + e * sd, sd ** 2, prior, labels=LABELS)
                      for x, t, e in zip(xs, thetas, eps)]
    return compare.FitResults(list(labels), posts, {lab: [] for lab in labels})


def stub_group(beta_prior, beta_post, gamma_post=None):
    g0 = GaussianDensity([0.0], [[1 / 16]])
    d = beta_prior.dim
    return PebModel(np.zeros(d), np.zeros((1, d, d)), np.eye(d), np.eye(d), np.eye(d), beta_prior,
                    g0, beta_post, gamma_post or g0, 0.0, 0.0, 0.0, [f"p{i}" for i in range(d)])


class TestMeasures:
    def test_parameter_certainty_unit(self):
        g = stub_group(GaussianDensity([0.0], [[4.0]]), GaussianDensity([0.3], [[1.0]]))
        assert compare.measure_parameter_certainty(g) == pytest.approx(-1.418939, abs=1e-6)

    def test_parameter_certainty_halving(self):
        cov = np.array([[0.5, 0.1, 0.0], [0.1, 0.4, 0.05], [0.0, 0.05, 0.3]])
        prior = GaussianDensity(np.zeros(3), np.eye(3))
        a = compare.measure_parameter_certainty(stub_group(prior, GaussianDensity(np.zeros(3), cov)))
        b = compare.measure_parameter_certainty(stub_group(prior, GaussianDensity(np.zeros(3), cov / 2)))
        assert b - a == pytest.approx(1.5 * np.log(2), abs=1e-12)

    def test_switched_off_dimensions_ignored(self):
        prior = GaussianDensity([0.0, 0.0], [[1.0, 0.0], [0.0, 0.0]])
        post = GaussianDensity([0.2, 0.0], [[1.0, 0.0], [0.0, 0.0]])
        g = stub_group(prior, post)
        assert compare.measure_parameter_certainty(g) == pytest.approx(-1.418939, abs=1e-6)
        assert compare.info_gain_params(g) == pytest.approx(0.02, abs=1e-12)

    def test_rfx_certainty_unit(self):
        g = stub_group(GaussianDensity([0.0], [[1.0]]), GaussianDensity([0.0], [[1.0]]),
                       gamma_post=GaussianDensity([0.4], [[1.0]]))
        assert compare.measure_rfx_certainty(g) == pytest.approx(-1.418939, abs=1e-6)

    def test_info_gain_params_zero_at_prior(self):
        prior = GaussianDensity([0.1, -0.2], [[1.0, 0.2], [0.2, 0.5]])
        assert abs(compare.info_gain_params(stub_group(prior, prior))) < 1e-12

    def test_info_gain_params_displacement(self):
        prior = GaussianDensity(np.zeros(3), np.diag([1.0, 4.0, 0.25]))
        post = GaussianDensity([1.0, 2.0, 0.0], prior.covariance)
        assert compare.info_gain_params(stub_group(prior, post)) == pytest.approx(1.0, abs=1e-12)

    def test_info_gain_models_examples(self):
        assert abs(compare.info_gain_models(np.zeros(10))) < 1e-12
        dominant = np.r_[100.0, np.zeros(9)]
        assert compare.info_gain_models(dominant) == pytest.approx(2.302585, abs=1e-6)
        two = np.r_[100.0, 100.0, np.zeros(8)]
        assert compare.info_gain_models(two) == pytest.approx(1.609438, abs=1e-6)

    def test_info_gain_models_range_and_invalid(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            f = rng.normal(size=int(rng.integers(1, 12))) * 5
            assert -1e-12 <= compare.info_gain_models(f) <= np.log(f.size) + 1e-12
        assert compare.info_gain_models([0.0, -np.inf, 0.0]) == pytest.approx(0.0, abs=1e-12)
        with pytest.raises(ValueError, match="empty"):
            compare.info_gain_models([])
        with pytest.raises(ValueError, match="finite"):
            compare.info_gain_models([-np.inf])


class TestReporting:
    def test_relative_nats(self):
        assert compare.relative_nats([5.0, 2.0, 3.5]) == [3.0, 0.0, 1.5]

    def test_relative_invariance(self):
        v = np.array([0.3, -1.2, 2.5])
        np.testing.assert_allclose(compare.relative_nats(v + 7.7), compare.relative_nats(v), atol=1e-12)
        np.testing.assert_allclose(compare.pairwise_probabilities(v + 7.7),
                                   compare.pairwise_probabilities(v), atol=1e-12)

    def test_pairwise_antisymmetric(self):
        p = np.array(compare.pairwise_probabilities([1.64, 0.0, 0.99]))
        np.testing.assert_allclose(p + p.T, 1.0, atol=1e-12)
        assert np.all((p > 0) & (p < 1))
        assert p[0, 1] == pytest.approx(0.8375, abs=5e-4)
        assert p[2, 1] == pytest.approx(0.729, abs=5e-4)
        np.testing.assert_allclose(np.diag(p), 0.5)

    def test_verdict(self):
        raw = {"s_theta": [1, 2, 0], "s_eps": [0, 0, 0], "d_params": [3, 5, 1], "d_models": [0, 0, 1]}
        v = compare._verdict(["a", "b", "c"], raw)
        assert v["best"] == "b" and v["per_measure"]["s_eps"] is None
        assert v["wins"] == {"a": 0, "b": 2, "c": 1}
        tie = {m: [0.0, 0.0] for m in compare.MEASURES}
        assert compare._verdict(["a", "b"], tie)["best"] == "indistinguishable"

    def test_config_rejects_unknown_space(self):
        with pytest.raises(ValueError, match="model_space"):
            compare.PipelineConfig(model_space="everything")


@pytest.fixture(scope="module")
def sweep():
    return linear_fits([0.5, 1.0, 2.0], seed=3)


class TestCompareFits:
    def test_identical_datasets(self):
        fits = linear_fits([1.0, 1.0], seed=1)
        r = compare.compare_fits(fits)
        for m in compare.MEASURES:
            a, b = r.measures[m]["raw"]
            assert abs(a - b) < 1e-6
            np.testing.assert_allclose(r.measures[m]["pairwise"], 0.5, atol=1e-6)
        assert r.verdict["best"] == "indistinguishable"

    def test_noise_ordering(self, sweep):
        r = compare.compare_fits(sweep)
        for m in ("s_theta", "d_params"):
            v = r.measures[m]["raw"]
            assert v[0] > v[1] > v[2]
            assert min(r.measures[m]["relative"]) == 0.0
        assert r.verdict["best"] == "D1"

    def test_prunes_zero_effect(self, sweep):
        r = compare.compare_fits(sweep)
        assert r.group["pruned"] == ["B[u2][R1]"]
        assert r.group["subset"] == LABELS[1:]
        assert r.group["pruned_free_energy"] >= r.group["pooled_free_energy"]

    def test_pooled_step_blind_to_labels(self, sweep):
        relabelled = compare.FitResults(["x", "y", "z"], dict(zip("xyz", sweep.posteriors.values())),
                                        dict(zip("xyz", sweep.errors.values())))
        a, b = compare.compare_fits(sweep), compare.compare_fits(relabelled)
        assert a.group == b.group
        for m in compare.MEASURES:
            assert a.measures[m]["raw"] == b.measures[m]["raw"]

    @pytest.mark.parametrize("mode", compare.SPACE_MODES)
    def test_space_modes(self, sweep, mode):
        r = compare.compare_fits(sweep, compare.PipelineConfig(model_space=mode))
        assert r.group["model_space_mode"] == mode
        for lab in r.datasets:
            p = r.per_dataset[lab]["model_probabilities"]
            assert sum(p) == pytest.approx(1.0) and len(p) <= r.per_dataset[lab]["n_models"]
        if mode != "per_dataset":
            assert {tuple(m["delta_f"]) for m in r.model_space} == {tuple(r.datasets)}

    def test_failed_dataset_excluded(self):
        fits = linear_fits([0.5, 1.0, 2.0], seed=4)
        fits.posteriors["D2"][3] = None
        fits.errors["D2"].append("sub-04: diverged")
        r = compare.compare_fits(fits)
        assert r.datasets == ["D1", "D3"]
        assert r.excluded == [{"label": "D2", "errors": ["sub-04: diverged"]}]
        assert len(r.measures["s_theta"]["raw"]) == 2

    def test_all_failed(self):
        fits = linear_fits([1.0, 1.0], seed=4)
        for lab in fits.labels:
            fits.posteriors[lab][0] = None
        with pytest.raises(ValueError, match="no dataset"):
            compare.compare_fits(fits)

    def test_report_round_trip(self, sweep):
        r = compare.compare_fits(sweep)
        back = compare.ComparisonReport.from_dict(r.to_dict())
        assert back.to_dict() == r.to_dict()

    def test_deterministic(self, sweep):
        assert compare.compare_fits(sweep).to_dict() == compare.compare_fits(sweep).to_dict()


class TestSvg:
    def test_well_formed_and_deterministic(self, sweep):
        r = compare.compare_fits(sweep)
        svg = compare.render_svg(r)
        assert svg == compare.render_svg(r.to_dict())
        root = ET.fromstring(svg)
        texts = [t.text for t in root.iter("{http://www.w3.org/2000/svg}text")]
        for m in compare.MEASURES:
            assert compare.MEASURE_TITLES[m] in texts
        assert texts.count("D1") == 4

    def test_escapes_labels(self):
        report = {"datasets": ["a<b"], "measures": {m: {"relative": [0.0]} for m in compare.MEASURES}}
        ET.fromstring(compare.render_svg(report))


class TestRunPipeline:
    def test_small_end_to_end(self):
        spec = small_spec(n_volumes=60)
        inputs = small_inputs(spec)
        mean = dcm.DcmParams.zeros(spec)
        mean.a[1, 0], mean.c[0, 0] = 0.3, 0.4
        mean.b[0] = np.diag([-0.3, 0.3])
        sd = np.where(np.array(dcm.param_classes(spec)) == "B", 0.05, 0.0)
        bundles, _ = synth.generate_cohort(spec, synth.TruthConfig(mean, sd), 3, [0.05, 0.05],
                                           seed=2, inputs=inputs)
        bundles[1] = synth.DatasetBundle("D2", spec, inputs, bundles[0].data)
        r = compare.run_pipeline(bundles, compare.PipelineConfig(jobs=1))
        assert r.datasets == ["D1", "D2"] and not r.excluded
        for m in compare.MEASURES:
            a, b = r.measures[m]["raw"]
            assert abs(a - b) < 1e-6

    def test_needs_two_datasets(self):
        spec = small_spec()
        b = synth.DatasetBundle("D1", spec, small_inputs(spec), [np.zeros((40, 2))] * 2)
        with pytest.raises(ValueError, match="at least two"):
            compare.run_pipeline([b])

    def test_duplicate_labels(self):
        spec = small_spec()
        b = synth.DatasetBundle("D1", spec, small_inputs(spec), [np.zeros((40, 2))] * 2)
        with pytest.raises(ValueError, match="unique"):
            compare.run_pipeline([b, b])

    def test_mismatched_subjects(self):
        spec = small_spec()
        a = synth.DatasetBundle("D1", spec, small_inputs(spec), [np.zeros((40, 2))] * 2)
        b = synth.DatasetBundle("D2", spec, small_inputs(spec), [np.zeros((40, 2))] * 3)
        with pytest.raises(ValueError, match="does not match"):
            compare.run_pipeline([a, b])

    def test_fit_failures_recorded(self):
        spec = small_spec()
        y = np.zeros((40, 2))
        bad = y.copy()
        bad[0, 0] = np.nan
        b = synth.DatasetBundle("D1", spec, small_inputs(spec), [y + 1.0, bad])
        fits = compare.fit_bundles([b], jobs=1)
        assert fits.failed("D1") and fits.posteriors["D1"][1] is None
        assert fits.errors["D1"][0].startswith("sub-02")
