"""Command-line interface: ``gcr fit | simulate | diagnose | cv``.

Exit codes: 0 success, 1 usage error, 2 data or validation error,
3 non-convergence (results are still written), 4 numerical failure.
Errors also print one JSON line on standard error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import warnings
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .data import load_csv, write_csv
from .diagnostics import SubgroupSpec, standardized_residuals, subgroup_empirical_corr
from .errors import GCRError, ValidationError
from .evalkit import CVConfig, repeated_cv
from .fitter import FitConfig, FitResult, _CorrPart, fit_designs
from .formula import build_designs
from .inference import param_covariances, wald_table
from .simgen import STUDIES, ScenarioSpec, make_scenario

SCHEMA_VERSION = "1.0"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NONCONVERGED, EXIT_NUMERICAL = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _finite(obj):
    """Replace non-finite floats by None so the JSON stays standard."""
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _finite(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _threads(value) -> int:
    if value is None:
        value = os.environ.get("GCR_THREADS")
    if value is None:
        return os.cpu_count() or 1
    try:
        n = int(value)
    except ValueError:
        raise ValidationError(f"thread count must be an integer, got {value!r}") from None
    if n < 1:
        raise ValidationError("thread count must be at least 1")
    return n


def _manifest(args, digest=None, started=None) -> dict:
    flags = {k: v for k, v in vars(args).items() if k not in ("func",)}
    return {
        "command": args.command,
        "flags": flags,
        "seed": getattr(args, "seed", None),
        "version": __version__,
        "input_sha256": digest,
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(),
    }


def _write_json(path, payload):
    text = json.dumps(_finite(payload), indent=2, sort_keys=False, allow_nan=False)
    if path is None or path == "-":
        sys.stdout.write(text + "\n")
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")


def _load(args):
    return load_csv(args.data, args.cluster, args.response, getattr(args, "order", None))


def _fit_config(args) -> FitConfig:
    return FitConfig(step_lambda=args.step, tol_outer=args.tol, tol_inner=args.tol,
                     outer_max=args.max_outer, inner_max=args.max_inner,
                     freeze_alpha=args.freeze_alpha)


def fit_payload(fit: FitResult, designs, covs=None) -> dict:
    out = {
        "family": fit.family,
        "mean_formula": designs.mean_formula,
        "corr_formula": designs.corr_formula,
        "n_clusters": designs.n_clusters,
        "n_obs": designs.n_obs,
        "beta": dict(zip(fit.mean_names, fit.beta.tolist())),
        "alpha": dict(zip(fit.corr_names, fit.alpha.tolist())),
        "phi": fit.phi,
        "converged": fit.converged,
        "outer_iterations": fit.outer_iters,
        "inner_iterations": fit.inner_iters,
        "pl_trace": fit.pl_trace.tolist(),
        "pl_segments": list(fit.pl_segments),
        "notes": list(fit.notes),
    }
    if covs is not None:
        out["wald"] = wald_table(fit, covs).to_dicts()
        out["cov_beta"] = covs.cov_beta.tolist()
        out["cov_alpha"] = covs.cov_alpha.tolist()
    return out


def cmd_fit(args) -> int:
    started = datetime.now(timezone.utc).isoformat()
    ds = _load(args)
    designs = build_designs(ds, args.mean, args.corr)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit = fit_designs(designs, args.family, _fit_config(args))
    covs = param_covariances(fit, designs)
    print(f"family: {fit.family}   clusters: {designs.n_clusters}   observations: {designs.n_obs}")
    print(wald_table(fit, covs).format())
    print(f"phi: {fit.phi:.6g}")
    state = "converged" if fit.converged else "NOT converged"
    print(f"{state} after {fit.outer_iters} outer / {fit.inner_iters} inner iterations")
    payload = {
        "schema_version": SCHEMA_VERSION,
        "kind": "fit",
        "manifest": _manifest(args, ds.digest, started),
        "data_spec": {"cluster": args.cluster, "response": args.response, "order": args.order},
        "result": fit_payload(fit, designs, covs),
    }
    if args.out:
        _write_json(args.out, payload)
    return EXIT_OK if fit.converged else EXIT_NONCONVERGED


def _fit_from_json(doc, designs) -> FitResult:
    res = doc["result"]
    if list(res["beta"]) != list(designs.mean_names) or list(res["alpha"]) != list(designs.corr_names):
        raise ValidationError("fit file does not match the designs built from the data")
    alpha = np.array(list(res["alpha"].values()), dtype=float)
    cp = _CorrPart(designs, alpha)
    return FitResult(
        beta=np.array(list(res["beta"].values()), dtype=float), alpha=alpha,
        phi=float(res["phi"]), converged=bool(res["converged"]),
        outer_iters=int(res["outer_iterations"]), pl_trace=np.array(res["pl_trace"]),
        pl_segments=list(res["pl_segments"]), per_cluster_R=cp.per_cluster_R(designs),
        family=res["family"], mean_names=list(res["beta"]), corr_names=list(res["alpha"]),
    )


def cmd_diagnose(args) -> int:
    started = datetime.now(timezone.utc).isoformat()
    try:
        with open(args.fit, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read fit file {args.fit}: {exc}") from None
    if doc.get("kind") != "fit":
        raise ValidationError(f"{args.fit} is not a fit result")
    spec = doc["data_spec"]
    ds = load_csv(args.data, spec["cluster"], spec["response"], spec.get("order"))
    if doc["manifest"].get("input_sha256") not in (None, ds.digest):
        print("warning: data file differs from the one used for the fit", file=sys.stderr)
    designs = build_designs(ds, doc["result"]["mean_formula"], doc["result"]["corr_formula"])
    fit = _fit_from_json(doc, designs)
    resid = standardized_residuals(fit, designs)
    rows = [subgroup_empirical_corr(resid, ds, SubgroupSpec.parse(s)) for s in args.subgroup]
    print(f"{'subgroup':<36}{'rho_hat':>11}{'pairs':>10}{'t':>9}{'p':>11}")
    for r in rows:
        t = "NA" if r.t_stat is None else f"{r.t_stat:.3f}"
        p = "NA" if r.p_value is None else f"{r.p_value:.3g}"
        print(f"{r.name:<36}{r.rho_hat:>11.5f}{r.n_pairs:>10d}{t:>9}{p:>11}")
    if args.out:
        _write_json(args.out, {"schema_version": SCHEMA_VERSION, "kind": "diagnose",
                               "manifest": _manifest(args, ds.digest, started),
                               "subgroups": [r.to_dict() for r in rows]})
    return EXIT_OK


def cmd_simulate(args) -> int:
    started = datetime.now(timezone.utc).isoformat()
    gen = make_scenario(ScenarioSpec(args.scenario, args.n, args.seed))
    write_csv(gen.dataset, args.out)
    with open(args.out, "rb") as fh:
        digest = hashlib.sha256(fh.read()).hexdigest()
    print(f"wrote {gen.dataset.n_clusters} clusters, {gen.dataset.n_obs} rows to {args.out}")
    if args.truth:
        clusters = []
        for cid, mu, sig in zip(gen.dataset.cluster_ids, gen.mu0, gen.sigma0):
            clusters.append({"id": cid, "mu0": mu.tolist(),
                             "sigma0_sha256": hashlib.sha256(
                                 np.ascontiguousarray(sig, dtype="<f8").tobytes()).hexdigest()})
        _write_json(args.truth, {"schema_version": SCHEMA_VERSION, "kind": "truth",
                                 "manifest": _manifest(args, digest, started),
                                 "params": gen.params, "clusters": clusters})
    return EXIT_OK


def cmd_cv(args) -> int:
    started = datetime.now(timezone.utc).isoformat()
    ds = _load(args)
    report = repeated_cv(ds, args.mean, args.corr, args.family,
                         CVConfig(args.folds, args.repeats, args.stratify, args.seed),
                         _fit_config(args), threads=_threads(args.threads))
    for m, v in report.overall.items():
        print(f"{m}: {v:.6g}")
    print(f"fold scores: {report.n_fold_scores}   failed folds: {len(report.failures)}")
    _write_json(args.out, {"schema_version": SCHEMA_VERSION, "kind": "cv",
                           "manifest": _manifest(args, ds.digest, started),
                           "report": report.to_dict()})
    return EXIT_OK


def _add_data_args(p, with_model=True):
    p.add_argument("--data", required=True, help="long-format CSV, one row per observation")
    p.add_argument("--cluster", required=True, help="cluster id column")
    p.add_argument("--response", required=True, help="response column")
    p.add_argument("--order", default=None, help="column giving the within-cluster order")
    if with_model:
        p.add_argument("--family", required=True,
                       choices=["gaussian", "poisson", "bernoulli", "gamma"])
        p.add_argument("--mean", default="", help='mean formula, e.g. "x1 + C(x2)"')
        p.add_argument("--corr", default="", help='correlation formula, e.g. "intercept + same(g)"')
        p.add_argument("--step", type=float, default=0.5, help="correlation step size")
        p.add_argument("--tol", type=float, default=1e-8, help="relative convergence tolerance")
        p.add_argument("--max-outer", type=int, default=100)
        p.add_argument("--max-inner", type=int, default=50)
        p.add_argument("--freeze-alpha", action="store_true",
                       help="keep the correlation at independence")
        p.add_argument("--threads", default=None,
                       help="worker threads (default: $GCR_THREADS or all cores)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gcr", description="Generalized correlation regression for clustered data")
    parser.add_argument("--version", action="version", version=f"gcr {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("fit", help="estimate mean, correlation and dispersion parameters")
    _add_data_args(p)
    p.add_argument("--out", default=None, help="write the JSON result here")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="generate a preset simulation dataset")
    p.add_argument("--scenario", required=True, choices=list(STUDIES))
    p.add_argument("--n", type=int, required=True, help="number of clusters")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--truth", default=None, help="JSON path for the true parameters")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("diagnose", help="subgroup residual correlations for a saved fit")
    p.add_argument("--fit", required=True, help="JSON written by 'gcr fit --out'")
    p.add_argument("--data", required=True)
    p.add_argument("--subgroup", action="append", required=True,
                   help='e.g. "within", "within:same(g)", "between:botheq(x,2)"')
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("cv", help="repeated k-fold cross-validation")
    _add_data_args(p)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--repeats", type=int, default=15)
    p.add_argument("--stratify", default=None, help="cluster-level column to stratify on")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="-", help="JSON report path (default stdout)")
    p.set_defaults(func=cmd_cv)
    return parser


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "exit_code": code, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "UsageError", str(exc))
    if args.command is None:
        parser.print_usage(sys.stderr)
        return _fail(EXIT_USAGE, "UsageError", "a subcommand is required")
    try:
        if hasattr(args, "threads"):
            args.threads = _threads(args.threads)
        return args.func(args)
    except GCRError as exc:
        return _fail(exc.exit_code, type(exc).__name__, str(exc))
    except OSError as exc:
        return _fail(EXIT_DATA, "IOError", str(exc))


if __name__ == "__main__":
    sys.exit(main())
