"""Command-line entry point: ``bdc simulate | fit | compare | report``.

Settings come from an optional JSON config file; command-line flags win.
Every JSON output carries the tool version, a hash of the run config and the
master seed.  Exit status: 0 success, 2 bad usage or input, 3 partial failure.
"""

import argparse
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__, compare, dcm, synth, vl
from .peb import PebError, PebOptions
from .serialize import InputError, config_hash, file_sha256, read_json, write_json

log = logging.getLogger("bdc")

EXIT_OK, EXIT_USAGE, EXIT_PARTIAL = 0, 2, 3
# keys that locate files or tune execution but do not change results
_UNHASHED = ("output_dir", "cohort", "fits", "report", "jobs", "svg")


@dataclass
class RunConfig:
    seed: int = 0
    n_subjects: int = 10
    noise_levels: list = field(default_factory=lambda: [0.135, 0.27, 0.54])
    labels: list = None
    spec: object = None            # None = built-in scenario; else path or dict
    truth: dict = None             # required with a custom spec
    blocks: list = None
    n_volumes: int = None
    subset: object = "B"
    model_space: str = "union"
    threshold: float = 3.0
    cap: int = 64
    fit: dict = field(default_factory=dict)
    peb: dict = field(default_factory=dict)
    output_dir: str = "bdc-out"
    cohort: str = None
    fits: str = None
    report: str = None
    jobs: int = None
    svg: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise InputError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise InputError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def validate(self):
        if not isinstance(self.seed, int) or self.seed < 0:
            raise InputError("seed must be a non-negative integer")
        if self.n_subjects < 2:
            raise InputError("n_subjects must be at least 2")
        if any(np.any(np.asarray(s, float) < 0) for s in self.noise_levels):
            raise InputError("noise levels must be non-negative")
        if self.model_space not in compare.SPACE_MODES:
            raise InputError(f"model_space must be one of {', '.join(compare.SPACE_MODES)}")
        try:
            vl.FitOptions(**self.fit)
            PebOptions(**self.peb)
        except TypeError as exc:
            raise InputError(f"bad fit/peb options: {exc}") from None

    def hashed(self) -> dict:
        d = asdict(self)
        for k in _UNHASHED:
            d.pop(k)
        return d

    def provenance(self) -> dict:
        return {"tool": "bdc", "version": __version__,
                "config_hash": config_hash(self.hashed()), "seed": self.seed}

    def pipeline(self) -> compare.PipelineConfig:
        return compare.PipelineConfig(
            subset=self.subset, model_space=self.model_space, threshold=self.threshold,
            cap=self.cap, jobs=self.jobs, fit=vl.FitOptions(**self.fit),
            peb=PebOptions(**self.peb),
        )

    @property
    def out(self) -> Path:
        return Path(self.output_dir)


# ---------------------------------------------------------------------------
# scenario


def _scenario(cfg: RunConfig):
    if cfg.spec is None:
        spec, _, truth = synth.default_scenario()
        if cfg.n_volumes is not None:
            d = spec.to_dict()
            d["n_volumes"] = int(cfg.n_volumes)
            spec = dcm.DcmSpec.from_dict(d)
    else:
        d = read_json(cfg.spec) if isinstance(cfg.spec, str) else cfg.spec
        try:
            spec = dcm.DcmSpec.from_dict(d)
        except (ValueError, TypeError, KeyError) as exc:
            raise InputError(f"invalid model spec: {exc}") from None
        if cfg.truth is None:
            raise InputError("a custom spec needs a 'truth' entry (group_mean, between_sd)")
        truth = None
    if cfg.truth is not None:
        try:
            mean = dcm.unpack(np.asarray(cfg.truth["group_mean"], float), spec)
            sd = np.asarray(cfg.truth["between_sd"], float)
        except (KeyError, ValueError) as exc:
            raise InputError(f"invalid truth: {exc}") from None
        truth = synth.TruthConfig(mean, sd)
    blocks = cfg.blocks
    if blocks is None:
        blocks = synth.block_design(spec.n_volumes, spec.tr, n_inputs=spec.n_inputs)
    try:
        inputs = dcm.build_inputs(blocks, dcm.default_dt(spec.tr), spec.duration,
                                  n_inputs=spec.n_inputs)
    except ValueError as exc:
        raise InputError(f"invalid blocks: {exc}") from None
    return spec, inputs, truth


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: RunConfig) -> int:
    spec, inputs, truth = _scenario(cfg)
    try:
        bundles, gt = synth.generate_cohort(spec, truth, cfg.n_subjects, cfg.noise_levels,
                                            cfg.seed, inputs, cfg.labels)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    out = cfg.out
    prov = cfg.provenance()
    datasets = []
    for b, sd in zip(bundles, gt.noise_sd):
        ddir = out / "data" / b.label
        ddir.mkdir(parents=True, exist_ok=True)
        subjects = []
        for sid, y in zip(b.subject_ids, b.data):
            path = ddir / f"{sid}.csv"
            dcm.write_timeseries(path, y, spec.region_names, comment=prov)
            subjects.append({"id": sid, "file": str(path.relative_to(out)),
                             "sha256": file_sha256(path)})
        datasets.append({"label": b.label, "noise_sd": sd, "subjects": subjects})
    write_json(out / "cohort.json", {
        "provenance": prov, "spec": spec.to_dict(), "inputs": inputs.to_dict(),
        "datasets": datasets,
    })
    write_json(out / "ground_truth.json", {"provenance": prov, **gt.to_dict(spec)})
    write_json(out / "config.json", {"provenance": prov, "config": cfg.hashed()})
    print(f"wrote {len(bundles)} datasets x {cfg.n_subjects} subjects to {out}")
    return EXIT_OK


def _load_cohort(path):
    path = Path(path)
    doc = read_json(path)
    try:
        spec = dcm.DcmSpec.from_dict(doc["spec"])
        inputs = dcm.InputSchedule.from_dict(doc["inputs"])
        bundles = []
        for ds in doc["datasets"]:
            data, ids = [], []
            for s in ds["subjects"]:
                f = path.parent / s["file"]
                if not f.exists():
                    raise InputError(f"{f}: file not found")
                y, names = dcm.read_timeseries(f)
                if names != spec.region_names:
                    raise InputError(f"{f}: columns {names} do not match regions {spec.region_names}")
                data.append(y)
                ids.append(s["id"])
            bundles.append(synth.DatasetBundle(ds["label"], spec, inputs, data, ids))
    except InputError:
        raise
    except (KeyError, TypeError) as exc:
        raise InputError(f"{path}: malformed cohort file ({exc})") from None
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from None
    return bundles


def _cohort_path(cfg):
    return Path(cfg.cohort) if cfg.cohort else cfg.out / "cohort.json"


def _fits_path(cfg):
    return Path(cfg.fits) if cfg.fits else cfg.out / "fits" / "index.json"


def cmd_fit(cfg: RunConfig) -> int:
    bundles = _load_cohort(_cohort_path(cfg))
    results = compare.fit_bundles(bundles, vl.FitOptions(**cfg.fit), cfg.jobs)
    prov = cfg.provenance()
    out = cfg.out / "fits"
    index = []
    failed = 0
    rows = []
    for b in bundles:
        subjects = []
        (out / b.label).mkdir(parents=True, exist_ok=True)
        errs = {e.split(":", 1)[0]: e.split(":", 1)[1].strip() for e in results.errors[b.label]}
        for sid, post in zip(b.subject_ids, results.posteriors[b.label]):
            path = out / b.label / f"{sid}.json"
            if post is None:
                failed += 1
                entry = {"id": sid, "status": "failed", "error": errs.get(sid, "")}
                write_json(path, {"provenance": prov, "dataset": b.label, **entry})
                rows.append((b.label, sid, "nan", "-", "failed"))
            else:
                entry = {"id": sid, "status": "ok", "free_energy": post.free_energy,
                         "n_iterations": post.n_iterations, "converged": post.converged}
                write_json(path, {"provenance": prov, "dataset": b.label, "id": sid,
                                  "posterior": post.to_dict()})
                rows.append((b.label, sid, f"{post.free_energy:.3f}", str(post.n_iterations),
                             "yes" if post.converged else "no"))
            entry["file"] = str(path.relative_to(out))
            subjects.append(entry)
        index.append({"label": b.label, "subjects": subjects})
    write_json(out / "index.json", {"provenance": prov, "datasets": index})
    print(f"{'dataset':<10} {'subject':<10} {'F':>12} {'iter':>5} converged")
    for r in rows:
        print(f"{r[0]:<10} {r[1]:<10} {r[2]:>12} {r[3]:>5} {r[4]}")
    if failed:
        print(f"{failed} subject fit(s) failed", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def _load_fits(path) -> compare.FitResults:
    path = Path(path)
    doc = read_json(path)
    labels, posteriors, errors = [], {}, {}
    try:
        for ds in doc["datasets"]:
            lab = ds["label"]
            labels.append(lab)
            posteriors[lab], errors[lab] = [], []
            for s in ds["subjects"]:
                if s["status"] != "ok":
                    posteriors[lab].append(None)
                    errors[lab].append(f"{s['id']}: {s.get('error', '')}")
                    continue
                sub = read_json(path.parent / s["file"])
                posteriors[lab].append(vl.SubjectPosterior.from_dict(sub["posterior"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{path}: malformed fits index ({exc})") from None
    return compare.FitResults(labels, posteriors, errors)


def print_table(report: dict, stream=None):
    stream = stream or sys.stdout
    labels = report["datasets"]
    head = f"{'measure':<32}" + "".join(f"{lab:>12}" for lab in labels)
    print(head, file=stream)
    for m in compare.MEASURES:
        rel = report["measures"][m]["relative"]
        print(f"{report['measures'][m]['title']:<32}" + "".join(f"{v:>12.3f}" for v in rel),
              file=stream)
    print(f"(nats relative to the worst dataset)\nbest dataset: {report['verdict']['best']}",
          file=stream)
    for ex in report["excluded"]:
        print(f"excluded: {ex['label']} ({len(ex['errors'])} failed fit(s))", file=stream)


def cmd_compare(cfg: RunConfig) -> int:
    fits_path = _fits_path(cfg)
    if fits_path.exists():
        fits = _load_fits(fits_path)
    elif _cohort_path(cfg).exists():
        status = cmd_fit(cfg)
        if status not in (EXIT_OK, EXIT_PARTIAL):
            return status
        fits = _load_fits(_fits_path(cfg))
    else:
        raise InputError(f"neither {fits_path} nor {_cohort_path(cfg)} exists")
    if len(fits.labels) < 2:
        raise InputError(f"comparison needs at least two datasets, found {len(fits.labels)}")
    try:
        report = compare.compare_fits(fits, cfg.pipeline())
    except (PebError, ValueError) as exc:
        raise InputError(str(exc)) from None
    doc = report.to_dict()
    doc["provenance"] = cfg.provenance()
    doc["config"] = cfg.pipeline().to_dict()
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_json(cfg.out / "report.json", doc)
    if cfg.svg:
        (cfg.out / "report.svg").write_text(compare.render_svg(doc))
    print_table(doc)
    return EXIT_PARTIAL if doc["excluded"] else EXIT_OK


def cmd_report(cfg: RunConfig) -> int:
    path = Path(cfg.report) if cfg.report else cfg.out / "report.json"
    doc = read_json(path)
    try:
        svg = compare.render_svg(doc)
    except (KeyError, TypeError) as exc:
        raise InputError(f"{path}: malformed report ({exc})") from None
    cfg.out.mkdir(parents=True, exist_ok=True)
    (cfg.out / "report.svg").write_text(svg)
    print_table(doc)
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "compare": cmd_compare,
            "report": cmd_report}


# ---------------------------------------------------------------------------


def _floats(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bdc", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"bdc {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--out", dest="output_dir", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int, help="parallel subject fits")
    common.add_argument("-v", "--verbose", action="store_true")
    s = sub.add_parser("simulate", parents=[common], help="generate a synthetic cohort")
    s.add_argument("--n-subjects", type=int, dest="n_subjects")
    s.add_argument("--noise", type=_floats, dest="noise_levels", help="e.g. 0.1,0.2,0.4")
    s.add_argument("--labels", type=lambda t: t.split(","))
    s.add_argument("--n-volumes", type=int, dest="n_volumes")
    f = sub.add_parser("fit", parents=[common], help="fit every subject of a cohort")
    f.add_argument("--cohort", help="cohort.json (default: <out>/cohort.json)")
    c = sub.add_parser("compare", parents=[common], help="run the comparison pipeline")
    c.add_argument("--cohort")
    c.add_argument("--fits", help="fits index.json (default: <out>/fits/index.json)")
    c.add_argument("--model-space", dest="model_space", choices=compare.SPACE_MODES)
    c.add_argument("--threshold", type=float)
    c.add_argument("--cap", type=int)
    c.add_argument("--no-svg", dest="svg", action="store_false", default=None)
    r = sub.add_parser("report", parents=[common], help="re-render the SVG of a report")
    r.add_argument("--report", help="report.json (default: <out>/report.json)")
    return p


def load_config(args) -> RunConfig:
    base = read_json(args.config) if args.config else {}
    if not isinstance(base, dict):
        raise InputError(f"{args.config}: config must be a JSON object")
    skip = {"command", "config", "verbose"}
    for k, v in vars(args).items():
        if k not in skip and v is not None:
            base[k] = v
    try:
        return RunConfig.from_dict(base)
    except TypeError as exc:
        raise InputError(f"invalid config: {exc}") from None


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](cfg)
    except InputError as exc:
        print(f"bdc {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"bdc {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
