"""Command-line pipeline: design, simulate, emulate, estimate covariance, calibrate, validate, report.

Every command writes its outputs plus ``manifest.json`` (command, arguments,
seed, SHA-256 of the inputs and outputs, package versions) into its output
directory.  Exit codes: 0 success, 1 invalid input, 2 numerical failure,
64 unknown command.  Relative ``--out`` paths are resolved under
``$TDIUQ_OUTPUT_ROOT`` when that variable is set.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .core import NumericalError, ValidationError, parse_bounds, read_case, write_case

log = logging.getLogger("tdiuq")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL, EXIT_USAGE = 0, 1, 2, 64
ENV_OUTPUT_ROOT = "TDIUQ_OUTPUT_ROOT"

DEFAULT_BC_LAW = {
    "pressure": {"drift_sd": 0.015, "sd": 0.01, "rho": 0.9},
    "flow": {"sd": 0.01, "rho": 0.9},
    "power": {"sd": 0.01, "rho": 0.9},
    "inlet_temperature": {"drift_sd": 0.015, "sd": 0.01, "rho": 0.9},
}


# ----------------------------------------------------------------------------
# helpers


def _out_dir(path) -> Path:
    p = Path(path)
    root = os.environ.get(ENV_OUTPUT_ROOT)
    if root and not p.is_absolute():
        p = Path(root) / p
    p.mkdir(parents=True, exist_ok=True)
    return p


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _versions():
    import scipy
    import sklearn

    return {"tdiuq": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "scikit-learn": sklearn.__version__, "python": platform.python_version()}


def _rel(path, base) -> str:
    return Path(os.path.relpath(Path(path).resolve(), Path(base).resolve())).as_posix()


def write_manifest(out_dir, command, params: dict, inputs, outputs, seed=None):
    """``manifest.json`` with paths relative to ``out_dir`` so runs in different places compare equal."""
    out_dir = Path(out_dir)
    ins = {_rel(p, out_dir): _sha256(p) for p in sorted(set(map(str, inputs))) if Path(p).is_file()}
    outs = {_rel(p, out_dir): _sha256(p) for p in sorted(set(map(str, outputs))) if Path(p).is_file()}
    h = hashlib.sha256()
    for k in sorted(ins):
        h.update(k.encode() + b"\0" + ins[k].encode() + b"\n")
    manifest = {"command": command, "params": params, "seed": seed, "inputs": ins,
                "inputs_hash": h.hexdigest(), "outputs": outs, "versions": _versions()}
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def _dump_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
    return Path(path)


def _load_json_arg(text, what):
    """Inline JSON or a path to a JSON file."""
    if text is None:
        return None
    try:
        if Path(text).is_file():
            with open(text, encoding="utf-8") as fh:
                return json.load(fh)
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{what}: invalid JSON ({exc})") from None


def _ids(text):
    return [s for s in (text or "").split(",") if s]


def _suite_file(cases_dir):
    p = Path(cases_dir) / "suite.json"
    if not p.exists():
        return None
    with open(p, encoding="utf-8") as fh:
        return json.load(fh)


def _case_ids(cases_dir, ids, which="all"):
    if ids:
        return ids
    suite = _suite_file(cases_dir)
    if suite is not None:
        if which == "train":
            return list(suite["train_ids"])
        if which == "test":
            return list(suite["test_ids"])
        return list(suite["train_ids"]) + list(suite["test_ids"])
    found = sorted(p.stem for p in Path(cases_dir).glob("*.csv") if not p.name.endswith(".bc.csv"))
    if not found:
        raise ValidationError(f"no cases found in {cases_dir}")
    return found


def _case_spec(case):
    from .synthsim import CaseSpec

    spec = case.metadata.get("spec")
    if spec is None:
        raise ValidationError(f"case {case.id}: no simulator spec in its metadata")
    return CaseSpec.from_dict(spec)


def _model_simulator(theta, spec, bc=None):
    """The simulator as a calibration model: never includes injected discrepancy."""
    from .synthsim import simulate_flat

    return simulate_flat(theta, spec, bc, discrepancy=False)


def _case_files(cases_dir, cid):
    d = Path(cases_dir)
    return [p for p in (d / f"{cid}.csv", d / f"{cid}.json", d / f"{cid}.bc.csv") if p.exists()]


def _parse_split(text, cases_dir):
    if text:
        if ":" not in text:
            raise ValidationError("--split must look like 'id1,id2:id3,id4'")
        a, b = text.split(":", 1)
        return _ids(a), _ids(b)
    return _case_ids(cases_dir, None, "train"), _case_ids(cases_dir, None, "test")


# ----------------------------------------------------------------------------
# commands


def cmd_doe(args):
    from .doe import lhs_sample, uniform_sample

    bounds = parse_bounds(args.bounds)
    out = _out_dir(args.out)
    if args.method == "lhs":
        design = lhs_sample(args.n, bounds, args.seed)
    else:
        from .doe import DesignMatrix

        design = DesignMatrix(uniform_sample(args.n, bounds, args.seed), bounds, args.seed)
    names = _ids(args.names) or [f"theta{i}" for i in range(len(bounds))]
    if len(names) != len(bounds):
        raise ValidationError("--names needs one name per bound")
    path = out / "design.csv"
    design.to_csv(path, names)
    write_manifest(out, "doe", {"n": args.n, "bounds": bounds.tolist(), "method": args.method,
                                "names": names}, [], [path], args.seed)
    return EXIT_OK


def _parse_noise(text):
    parts = text.split(":")
    try:
        if parts[0] == "iid" and len(parts) == 2:
            return {"kind": "iid", "sigma": float(parts[1])}
        if parts[0] == "ar1" and len(parts) == 3:
            return {"kind": "ar1", "rho": float(parts[1]), "sigma": float(parts[2])}
    except ValueError:
        pass
    raise ValidationError(f"--noise must be iid:<sigma> or ar1:<rho>:<sigma>, got {text!r}")


def _parse_discrepancy(obj):
    from .synthsim import Discrepancy

    out = {}
    for cid, d in (obj or {}).items():
        if not isinstance(d, dict):
            raise ValidationError(f"discrepancy.{cid}: expected an object")
        try:
            out[cid] = Discrepancy(**d)
        except TypeError as exc:
            raise ValidationError(f"discrepancy.{cid}: {exc}") from None
    return out


def cmd_simulate(args):
    from .synthsim import make_benchmark_suite, save_spec, synthesize_observations

    out = _out_dir(args.out)
    noise = _parse_noise(args.noise)
    disc = _parse_discrepancy(_load_json_arg(args.discrepancy, "--discrepancy"))
    suite = make_benchmark_suite(args.seed, heterogeneous=args.heterogeneous, discrepancy=disc)
    unknown = set(disc) - {s.id for s in suite.specs}
    if unknown:
        raise ValidationError(f"discrepancy: unknown case ids {sorted(unknown)}")
    outputs = [_dump_json(suite.to_dict(), out / "suite.json")]
    for i, spec in enumerate(suite.specs):
        case = synthesize_observations(spec, suite.theta_true[spec.id], noise, seed=args.seed * 1000 + i)
        outputs += write_case(case, out)
        save_spec(spec, out / f"{spec.id}.spec.json")
        outputs.append(out / f"{spec.id}.spec.json")
    write_manifest(out, "simulate", {"heterogeneous": args.heterogeneous, "noise": noise,
                                     "discrepancy": {k: v.__dict__ for k, v in disc.items()}},
                   [], outputs, args.seed)
    return EXIT_OK


def cmd_train_surrogate(args):
    from .surrogate import Surrogate, build_training_set

    out = _out_dir(args.out)
    bounds = parse_bounds(args.bounds)
    options = _load_json_arg(args.options, "--options") or {}
    inputs, outputs = [], []
    for cid in _case_ids(args.cases, _ids(args.ids), args.which):
        case = read_case(args.cases, cid)
        spec = _case_spec(case)
        inputs += _case_files(args.cases, cid)
        train = build_training_set(_model_simulator, spec, args.n, bounds, args.seed)
        try:
            model = Surrogate(args.backend, random_state=args.seed, **options)
        except TypeError as exc:
            raise ValidationError(f"--options: {exc}") from None
        if args.backend == "mlp":
            val = build_training_set(_model_simulator, spec, max(50, args.n // 8), bounds, args.seed + 1,
                                     design="uniform")
            model.fit(train.inputs, train.outputs, val.inputs, val.outputs)
        else:
            model.fit(train.inputs, train.outputs)
        path = out / f"{cid}.json"
        model.save(path)
        outputs.append(path)
    write_manifest(out, "train-surrogate", {"backend": args.backend, "n": args.n,
                                            "bounds": bounds.tolist(), "options": options},
                   inputs, outputs, args.seed)
    return EXIT_OK


def cmd_validate_surrogate(args):
    from .report import write_csv
    from .surrogate import Surrogate, build_training_set, convergence_study

    out = _out_dir(args.out)
    bounds = parse_bounds(args.bounds)
    rows, inputs, outputs = [], [], []
    for cid in _case_ids(args.surrogates_cases or args.cases, _ids(args.ids), "all"):
        spath = Path(args.surrogates) / f"{cid}.json"
        if not spath.exists():
            continue
        case = read_case(args.cases, cid)
        spec = _case_spec(case)
        model = Surrogate.load(spath)
        inputs += [spath, *_case_files(args.cases, cid)]
        test = build_training_set(_model_simulator, spec, args.n_test, bounds, args.seed + 1, design="uniform")
        err = np.abs(model.predict(test.inputs) - test.outputs)
        rng_ = float(np.ptp(test.outputs)) or 1.0
        rows.append((cid, model.backend, float(err.mean()), float(err.mean() / rng_), float(err.max())))
    if not rows:
        raise ValidationError(f"no surrogates found in {args.surrogates}")
    path = out / "surrogate_validation.csv"
    write_csv(path, ["case", "backend", "mae", "mae_relative", "max_abs_error"], rows)
    outputs.append(path)
    if args.sizes:
        sizes = [int(s) for s in _ids(args.sizes)]
        spec = _case_spec(read_case(args.cases, rows[0][0]))
        conv = convergence_study(_model_simulator, spec, sizes, args.n_test, seed=args.seed, bounds=bounds)
        cpath = out / "convergence.csv"
        write_csv(cpath, ["n", "backend", "mae", "mae_relative", "status"],
                  [(r["n"], r["backend"], r["mae"], r["mae_relative"], r["status"]) for r in conv])
        outputs.append(cpath)
    write_manifest(out, "validate-surrogate", {"n_test": args.n_test, "sizes": args.sizes},
                   inputs, outputs, args.seed)
    return EXIT_OK


def cmd_estimate_cov(args):
    from .covest import estimate_cov, propagate_bc_uncertainty, regularize_cov, save_covariance

    out = _out_dir(args.out)
    law = _load_json_arg(args.bc, "--bc") or DEFAULT_BC_LAW
    inputs, outputs = [], []
    for cid in _case_ids(args.cases, _ids(args.ids), args.which):
        case = read_case(args.cases, cid)
        spec = _case_spec(case)
        inputs += _case_files(args.cases, cid)
        ens = propagate_bc_uncertainty(_model_simulator, spec, law, args.members, np.ones(4),
                                       seed=args.seed)
        cov = estimate_cov(ens)
        nugget = args.nugget if args.nugget is not None else float(np.mean(np.diag(cov))) * 1e-2
        model = regularize_cov(cov, nugget, args.mode, cid)
        path = out / f"{cid}.csv"
        save_covariance(model, path)
        outputs += [path, path.with_suffix(".json")]
    write_manifest(out, "estimate-cov", {"members": args.members, "bc": law, "nugget": args.nugget,
                                         "mode": args.mode}, inputs, outputs, args.seed)
    return EXIT_OK


def _load_calibration_inputs(args, ids):
    from .covest import load_covariance, regularize_cov
    from .surrogate import Surrogate

    cases, surrogates, covs, inputs = [], [], [], []
    for cid in ids:
        case = read_case(args.cases, cid)
        spath = Path(args.surrogates) / f"{cid}.json"
        if not spath.exists():
            raise ValidationError(f"no surrogate for case {cid} in {args.surrogates}")
        surrogates.append(Surrogate.load(spath))
        inputs += [spath, *_case_files(args.cases, cid)]
        cpath = Path(args.covariances) / f"{cid}.csv" if args.covariances else None
        if cpath is not None and cpath.exists():
            covs.append(load_covariance(cpath))
            inputs += [cpath, cpath.with_suffix(".json")]
        elif args.cov == "full":
            raise ValidationError(f"--cov full needs a covariance for case {cid}")
        else:
            if args.noise_sd is None:
                raise ValidationError(f"case {cid}: give --covariances or --noise-sd for --cov diag")
            covs.append(regularize_cov(np.zeros((case.k, case.k)), args.noise_sd**2, "diagonal", cid))
        cases.append(case)
    return cases, surrogates, covs, inputs


def cmd_calibrate(args):
    from .calib import (PriorSpec, build_hierarchical_target, build_single_level_target,
                        posterior_summary, summarize_hyper)
    from .sampler import sample, write_chains, write_diagnostics
    from .synthsim import PARAM_NAMES

    out = _out_dir(args.out)
    ids = _case_ids(args.cases, _ids(args.ids), "train")
    cases, surrogates, covs, inputs = _load_calibration_inputs(args, ids)
    mode = "full" if args.cov == "full" else "diagonal"
    prior_json = _load_json_arg(args.priors, "--priors")
    if args.mode == "single":
        priors = (PriorSpec.from_dict(prior_json) if prior_json
                  else PriorSpec.uniform(parse_bounds(args.bounds), PARAM_NAMES))
        target = build_single_level_target(surrogates, cases, mode, priors, covs)
    else:
        priors = (PriorSpec.from_dict(prior_json) if prior_json
                  else PriorSpec.default_hierarchical(4, PARAM_NAMES))
        target = build_hierarchical_target(surrogates, cases, mode, priors, covs)
    chains = sample(target, chains=args.chains, warmup=args.warmup, draws=args.draws, seed=args.seed)
    outputs = [out / "chains.csv", out / "diagnostics.json", out / "summary.json"]
    write_chains(chains, outputs[0])
    write_diagnostics(chains, outputs[1])
    summary = {"mode": args.mode, "cov": args.cov, "case_ids": ids, "posterior": posterior_summary(chains)}
    if args.mode == "hier":
        summary["hyper"] = summarize_hyper(chains, override=args.override_diagnostics)
    _dump_json(summary, outputs[2])
    write_manifest(out, "calibrate", {"mode": args.mode, "cov": args.cov, "ids": ids, "chains": args.chains,
                                      "warmup": args.warmup, "draws": args.draws,
                                      "priors": priors.to_dict()}, inputs, outputs, args.seed)
    return EXIT_OK


def cmd_diagnose(args):
    from .sampler import diagnostics, read_chains

    chains = read_chains(args.chains)
    out = _out_dir(args.out)
    diag = diagnostics(chains)
    bad = [n for n, r in zip(diag["names"], diag["rhat"]) if r is not None and r >= args.rhat_max]
    diag["rhat_max"] = args.rhat_max
    diag["converged"] = not bad
    path = _dump_json(diag, out / "diagnostics.json")
    write_manifest(out, "diagnose", {"rhat_max": args.rhat_max}, [args.chains], [path])
    if bad and args.strict:
        raise NumericalError(f"R-hat >= {args.rhat_max} for {', '.join(bad)}")
    return EXIT_OK


def cmd_validate_posterior(args):
    from .calib import summarize_hyper, theta_samples, validate_posterior
    from .report import write_csv
    from .sampler import pooled, read_chains

    out = _out_dir(args.out)
    (out / "predictions").mkdir(exist_ok=True)
    train_ids, test_ids = _parse_split(args.split, args.cases)
    chains = read_chains(args.chains)
    names = chains[0].names
    if any(n.startswith("mu_") for n in names):
        hyper = summarize_hyper(chains, override=args.override_diagnostics)
        params = list(hyper)
        source = {"kind": "normal", "mean": [hyper[p]["mu"] for p in params],
                  "sd": [hyper[p]["sigma"] for p in params]}
    else:
        source = {"kind": "chains", "draws": pooled(chains)}
    prior = {"kind": "point", "theta": [1.0] * len(source.get("mean", names))}
    train = [read_case(args.cases, c) for c in train_ids]
    test = [read_case(args.cases, c) for c in test_ids]
    specs = {c.id: _case_spec(c) for c in train + test}

    def simulator(theta, case):
        return _model_simulator(theta, specs[case.id])

    report = validate_posterior(source, train, test, simulator, prior, args.n_draws, args.seed)
    outputs = [_dump_json(report, out / "report.json")]
    # per-draw error samples and mean predictions, for figures
    rows = []
    for split, cases in (("train", train), ("test", test)):
        for case in cases:
            y = np.asarray(case.flattened)
            preds = {}
            for label, src in (("prior", prior), ("posterior", source)):
                thetas = theta_samples(src, args.n_draws, args.seed)
                sims = np.array([simulator(t, case) for t in thetas])
                preds[label] = sims.mean(axis=0)
                for e in (y - sims).ravel():
                    rows.append((split, case.id, label, float(e)))
            L, T = case.measurements.values.shape
            ppath = out / "predictions" / f"{case.id}.csv"
            write_csv(ppath, ["location", "time", "prior", "posterior"],
                      [(case.measurements.locations[i], float(case.measurements.times[j]),
                        float(preds["prior"][i * T + j]), float(preds["posterior"][i * T + j]))
                       for i in range(L) for j in range(T)])
            outputs.append(ppath)
    epath = out / "errors.csv"
    write_csv(epath, ["split", "case", "source", "error"], rows)
    outputs.append(epath)
    inputs = [args.chains] + [p for c in train_ids + test_ids for p in _case_files(args.cases, c)]
    write_manifest(out, "validate-posterior", {"split": [train_ids, test_ids], "n_draws": args.n_draws},
                   inputs, outputs, args.seed)
    return EXIT_OK


def cmd_report(args):
    from .report import build_report

    out = _out_dir(args.out)
    index = build_report(args.artifacts, out)
    artifacts = Path(args.artifacts)
    inputs = sorted(p for p in artifacts.rglob("*") if p.is_file() and p.suffix in (".csv", ".json")
                    and out.resolve() not in p.resolve().parents and p.name != "manifest.json")
    outputs = [out / w for w in index["written"]] + [out / "index.json"]
    write_manifest(out, "report", {"missing": index["missing"]}, inputs, outputs)
    return EXIT_OK


# ----------------------------------------------------------------------------
# pipeline


RUN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "suite": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "heterogeneous": {"type": "boolean"},
                "noise": {"type": "string"},
                "discrepancy": {"type": "object"},
            },
        },
        "surrogate": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "backend": {"enum": ["mlp", "gp_pca"]},
                "n_train": {"type": "integer", "minimum": 5},
                "bounds": {"type": "string"},
                "options": {"type": "object"},
            },
        },
        "covariance": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "members": {"type": "integer", "minimum": 2},
                "bc": {"type": "object"},
                "nugget": {"type": "number", "minimum": 0},
            },
        },
        "calibration": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "mode": {"enum": ["single", "hier"]},
                "cov": {"enum": ["full", "diag"]},
                "chains": {"type": "integer", "minimum": 1},
                "warmup": {"type": "integer", "minimum": 0},
                "draws": {"type": "integer", "minimum": 1},
                "priors": {"type": "object"},
                "override_diagnostics": {"type": "boolean"},
            },
        },
        "split": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "train": {"type": "array", "items": {"type": "string"}},
                "test": {"type": "array", "items": {"type": "string"}},
            },
        },
        "validation": {
            "type": "object", "additionalProperties": False,
            "properties": {"n_draws": {"type": "integer", "minimum": 1}},
        },
        "report": {"type": "boolean"},
    },
}


def load_run_config(path) -> dict:
    """Read and schema-check a pipeline config; errors name the offending field."""
    import jsonschema

    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"config {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {path}: invalid JSON ({exc})") from None
    errors = sorted(jsonschema.Draft7Validator(RUN_SCHEMA).iter_errors(cfg), key=lambda e: list(e.path))
    if errors:
        msgs = [f"{'.'.join(map(str, e.path)) or '<root>'}: {e.message}" for e in errors]
        raise ValidationError("invalid config: " + "; ".join(msgs))
    return cfg


def cmd_run(args):
    cfg = load_run_config(args.config)
    root = _out_dir(args.out)
    seed = str(cfg.get("seed", 0))
    suite = cfg.get("suite", {})
    sur = cfg.get("surrogate", {})
    cov = cfg.get("covariance", {})
    cal = cfg.get("calibration", {})
    split = cfg.get("split", {})
    val = cfg.get("validation", {})
    d = {k: str(root / k) for k in ("cases", "surrogates", "cov", "chains", "validation", "report", "diagnostics")}
    bounds = sur.get("bounds", "0:5,0:5,0:5,0:5")
    train_ids = ",".join(split.get("train", []))
    test_ids = ",".join(split.get("test", []))
    cov_mode = cal.get("cov", "full")
    steps = [
        ["simulate", "--seed", seed, "--noise", suite.get("noise", "iid:0.01"), "--out", d["cases"],
         *(["--heterogeneous"] if suite.get("heterogeneous", True) else []),
         *(["--discrepancy", json.dumps(suite["discrepancy"], sort_keys=True)] if suite.get("discrepancy") else [])],
        ["train-surrogate", "--cases", d["cases"], "--backend", sur.get("backend", "mlp"),
         "--n", str(sur.get("n_train", 400)), "--bounds", bounds, "--seed", seed, "--which", "train",
         "--ids", train_ids, "--out", d["surrogates"],
         *(["--options", json.dumps(sur["options"], sort_keys=True)] if sur.get("options") else [])],
        ["estimate-cov", "--cases", d["cases"], "--members", str(cov.get("members", 200)), "--seed", seed,
         "--which", "train", "--ids", train_ids, "--mode", "full", "--out", d["cov"],
         *(["--bc", json.dumps(cov["bc"], sort_keys=True)] if cov.get("bc") else []),
         *(["--nugget", repr(float(cov["nugget"]))] if "nugget" in cov else [])],
        ["calibrate", "--mode", cal.get("mode", "hier"), "--cases", d["cases"], "--surrogates", d["surrogates"],
         "--covariances", d["cov"], "--cov", cov_mode, "--ids", train_ids, "--bounds", bounds,
         "--chains", str(cal.get("chains", 4)), "--warmup", str(cal.get("warmup", 1000)),
         "--draws", str(cal.get("draws", 1000)), "--seed", seed, "--out", d["chains"],
         *(["--priors", json.dumps(cal["priors"], sort_keys=True)] if cal.get("priors") else []),
         *(["--override-diagnostics"] if cal.get("override_diagnostics") else [])],
        ["diagnose", "--chains", str(Path(d["chains"]) / "chains.csv"), "--out", d["diagnostics"]],
        ["validate-posterior", "--chains", str(Path(d["chains"]) / "chains.csv"), "--cases", d["cases"],
         *(["--split", f"{train_ids}:{test_ids}"] if train_ids or test_ids else []),
         "--n-draws", str(val.get("n_draws", 20)), "--seed", seed, "--out", d["validation"],
         *(["--override-diagnostics"] if cal.get("override_diagnostics") else [])],
    ]
    if cfg.get("report", True):
        steps.append(["report", "--artifacts", str(root), "--out", d["report"]])
    parser = build_parser()
    for argv in steps:
        log.info("run: %s", argv[0])
        sub = parser.parse_args(argv)
        sub.func(sub)
    outputs = sorted(p for p in root.rglob("manifest.json") if p.parent != root)
    write_manifest(root, "run", cfg, [args.config], outputs, cfg.get("seed", 0))
    return EXIT_OK


# ----------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    """Argument errors exit 64 at the command level and 1 inside a subcommand."""

    def __init__(self, *a, exit_code=EXIT_INVALID, **kw):
        super().__init__(*a, **kw)
        self._exit_code = exit_code

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(self._exit_code, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tdiuq", description="Inverse uncertainty quantification for transient series.",
                exit_code=EXIT_USAGE)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("doe", help="space-filling design")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--bounds", required=True, help="e.g. 0:5,0:5,0:5,0:5")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--method", choices=["lhs", "uniform"], default="lhs")
    s.add_argument("--names", help="comma-separated column names")
    s.add_argument("--out", default="doe")
    s.set_defaults(func=cmd_doe)

    s = sub.add_parser("simulate", help="synthetic benchmark suite with observations")
    s.add_argument("--suite", action="store_true", help="generate the nine-case suite (the only mode)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--heterogeneous", action="store_true", help="per-case truths drawn from N(mu, sigma)")
    s.add_argument("--noise", default="iid:0.01", help="iid:<sigma> or ar1:<rho>:<sigma>")
    s.add_argument("--discrepancy", help="JSON {case_id: {form, magnitude, center, width}} or file")
    s.add_argument("--out", default="cases")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train-surrogate", help="fit one surrogate per case")
    s.add_argument("--cases", required=True)
    s.add_argument("--ids", help="comma-separated case ids (default: see --which)")
    s.add_argument("--which", choices=["all", "train", "test"], default="all")
    s.add_argument("--backend", choices=["mlp", "gp_pca"], default="mlp")
    s.add_argument("--n", type=int, default=400)
    s.add_argument("--bounds", default="0:5,0:5,0:5,0:5")
    s.add_argument("--options", help="JSON of extra surrogate parameters")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="surrogates")
    s.set_defaults(func=cmd_train_surrogate)

    s = sub.add_parser("validate-surrogate", help="held-out surrogate error (and convergence study)")
    s.add_argument("--cases", required=True)
    s.add_argument("--surrogates", required=True)
    s.add_argument("--surrogates-cases", help=argparse.SUPPRESS)
    s.add_argument("--ids")
    s.add_argument("--n-test", type=int, default=50)
    s.add_argument("--sizes", help="comma-separated training sizes for a convergence study")
    s.add_argument("--bounds", default="0:5,0:5,0:5,0:5")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="surrogate-validation")
    s.set_defaults(func=cmd_validate_surrogate)

    s = sub.add_parser("estimate-cov", help="covariance from boundary-condition ensembles")
    s.add_argument("--cases", required=True)
    s.add_argument("--ids")
    s.add_argument("--which", choices=["all", "train", "test"], default="all")
    s.add_argument("--members", type=int, default=200)
    s.add_argument("--bc", help="JSON {channel: {sd, rho, drift_sd}} or file")
    s.add_argument("--nugget", type=float, help="independent-error variance (default 1%% of mean variance)")
    s.add_argument("--mode", choices=["full", "diagonal"], default="full")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="cov")
    s.set_defaults(func=cmd_estimate_cov)

    s = sub.add_parser("calibrate", help="sample a single-level or hierarchical posterior")
    s.add_argument("--mode", choices=["single", "hier"], default="single")
    s.add_argument("--cases", required=True)
    s.add_argument("--surrogates", required=True)
    s.add_argument("--covariances", help="directory of <id>.csv covariance files")
    s.add_argument("--cov", choices=["full", "diag"], default="full")
    s.add_argument("--noise-sd", type=float, help="iid sd when --cov diag has no covariance files")
    s.add_argument("--ids", help="comma-separated case ids (default: training split)")
    s.add_argument("--priors", help="prior spec JSON or file")
    s.add_argument("--bounds", default="0:5,0:5,0:5,0:5", help="uniform prior box (single mode)")
    s.add_argument("--chains", type=int, default=4)
    s.add_argument("--warmup", type=int, default=1000)
    s.add_argument("--draws", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--override-diagnostics", action="store_true")
    s.add_argument("--out", default="chains")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("diagnose", help="R-hat, ESS and divergences of a chain file")
    s.add_argument("--chains", required=True)
    s.add_argument("--rhat-max", type=float, default=1.05)
    s.add_argument("--strict", action="store_true", help="exit 2 when R-hat exceeds the limit")
    s.add_argument("--out", default="diagnostics")
    s.set_defaults(func=cmd_diagnose)

    s = sub.add_parser("validate-posterior", help="error distributions on train and test cases")
    s.add_argument("--chains", required=True)
    s.add_argument("--cases", required=True)
    s.add_argument("--split", help="train ids and test ids, 'a,b:c,d' (default: suite split)")
    s.add_argument("--n-draws", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--override-diagnostics", action="store_true")
    s.add_argument("--out", default="validation")
    s.set_defaults(func=cmd_validate_posterior)

    s = sub.add_parser("report", help="SVG figures and CSV tables from an artifact tree")
    s.add_argument("--artifacts", required=True)
    s.add_argument("--out", default="report")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("run", help="full pipeline from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", default="pipeline")
    s.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FileNotFoundError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
