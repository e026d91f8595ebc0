"""Command-line entry point.

Subcommands cover the whole workflow: simulate scenario data, fit by EM,
turn fitted parameters into effect estimates, bootstrap intervals, the
sensitivity grid, model comparison, the replicated bias study, exact
identification checks on tabulated data, and verification of the shipped
unidentifiability counterexamples.

Configuration may come from a JSON file (``--config``); command-line flags
win over file values.  All randomness flows from the single ``--seed``.
Outputs are files (JSON/CSV) without timestamps, so reruns with the same
configuration overwrite with identical bytes.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import dgp, em, glm, harness, ident
from .core import (ColumnMapping, ConfigError, CovariateSpec, Dataset,
                   FittedParams, MnarMechanism, ModelConfig, SchemaError,
                   ValueKind, load_csv, save_csv)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _emit(obj, path=None):
    text = json.dumps(obj, indent=2, default=_jsonable)
    if path:
        Path(path).write_text(text + "\n")
    else:
        print(text)


def _jsonable(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Fraction):
        return str(obj)
    if isinstance(obj, FittedParams):
        return {k: v for k, v in asdict(obj).items() if v is not None}
    if hasattr(obj, "as_dict"):
        return obj.as_dict()
    if hasattr(obj, "__dict__"):
        return obj.__dict__
    raise TypeError(f"cannot serialize {type(obj).__name__}")


# ---------------------------------------------------------------------------
# Shared argument plumbing


def _add_common(p):
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--seed", type=int, default=0, help="base seed (default 0)")
    p.add_argument("--out", help="output file or directory (default: stdout)")
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                   help="worker processes (default: available parallelism)")


def _add_data_args(p):
    p.add_argument("--data", help="CSV dataset path")
    p.add_argument("--t-col", default="t")
    p.add_argument("--m-col", default="m")
    p.add_argument("--y-col", default="y")
    p.add_argument("--rm-col", default=None)
    p.add_argument("--ry-col", default=None)
    p.add_argument("--covariates", default="x",
                   help="comma-separated covariate columns (schema order)")
    p.add_argument("--categorical", default="",
                   help="comma-separated covariate:level1|level2 declarations")
    p.add_argument("--absent-token", default="",
                   help="cell content denoting a missing value")
    p.add_argument("--mediator-kind", default="binary",
                   choices=["binary", "continuous", "categorical"])
    p.add_argument("--mediator-levels", type=int, default=3)
    p.add_argument("--outcome-kind", default="binary",
                   choices=["binary", "continuous", "two_part_nonnegative"])


def _add_model_args(p):
    p.add_argument("--mechanism", default="A2",
                   choices=["A1", "A2", "A3", "A4"])
    p.add_argument("--monotone", action="store_true",
                   help="assume mediator missingness implies outcome missingness (A2)")
    p.add_argument("--mediator-model", default="logistic",
                   choices=["logistic", "multinomial", "linear_gaussian"])
    p.add_argument("--outcome-model", default="logistic",
                   choices=["logistic", "linear_gaussian", "two_part_gamma",
                            "two_part_lognormal"])
    p.add_argument("--no-interaction", action="store_true",
                   help="drop the mediator-by-treatment term from the outcome model")
    p.add_argument("--allow-rank-deficient", action="store_true",
                   help="fit identification-deficient combinations anyway "
                        "(estimates lean entirely on the parametric form)")


def _add_em_args(p):
    p.add_argument("--max-iterations", type=int, default=2000)
    p.add_argument("--loglik-tol", type=float, default=1e-8)
    p.add_argument("--param-tol", type=float, default=1e-6)
    p.add_argument("--s-draws", type=int, default=100)
    p.add_argument("--quad-nodes", type=int, default=31)
    p.add_argument("--proposal", default="gauss_hermite",
                   choices=["gauss_hermite", "monte_carlo"])
    p.add_argument("--two-stage", action="store_true",
                   help="freeze the outcome model at its complete-case fit")
    p.add_argument("--n-mc", type=int, default=2000,
                   help="draws for continuous-mediator effect integration")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mnar-mediation",
        description="Causal mediation analysis with a mediator and outcome "
                    "that may be missing not at random.")
    subparsers = parser.add_subparsers(dest="command", required=True)
    parser.subcommand_parsers = {}

    def sub_parser(name, **kw):
        p = subparsers.add_parser(name, **kw)
        parser.subcommand_parsers[name] = p
        return p

    p = sub_parser("simulate", help="generate scenario datasets")
    _add_common(p)
    p.add_argument("--scenario",
                   help='scenario name, e.g. "A.I", "C.III", "B.IV(0)"')
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--reps", type=int, default=1)
    p.add_argument("--oracle", action="store_true",
                   help="also write the unmasked latent copies")

    p = sub_parser("fit", help="fit by EM and write parameter estimates")
    _add_common(p)
    _add_data_args(p)
    _add_model_args(p)
    _add_em_args(p)

    p = sub_parser("effects", help="effects from a fitted-parameter JSON")
    _add_common(p)
    _add_data_args(p)
    _add_model_args(p)
    p.add_argument("--params", help="fitted-parameter JSON path")
    p.add_argument("--n-mc", type=int, default=2000)

    p = sub_parser("bootstrap", help="percentile bootstrap intervals")
    _add_common(p)
    _add_data_args(p)
    _add_model_args(p)
    _add_em_args(p)
    p.add_argument("--resamples", type=int, default=500)
    p.add_argument("--coefs", default="",
                   help='selected coefficients, e.g. "lam:1,gamma:1"')

    p = sub_parser("sensitivity", help="fixed-offset sensitivity grid")
    _add_common(p)
    _add_data_args(p)
    _add_model_args(p)
    _add_em_args(p)
    p.add_argument("--grid", default="-2,0,2",
                   help="comma-separated offset values for both axes")
    p.add_argument("--resamples", type=int, default=0,
                   help="bootstrap resamples per cell (0 = none)")

    p = sub_parser("compare", help="rank candidate models by likelihood")
    _add_common(p)
    _add_data_args(p)
    _add_em_args(p)
    p.add_argument("--candidates",
                   help='comma-separated mechanism:outcome_model pairs, e.g. '
                        '"A2:two_part_gamma,A3:two_part_lognormal"')
    p.add_argument("--mediator-model", default="logistic",
                   choices=["logistic", "multinomial", "linear_gaussian"])
    p.add_argument("--allow-rank-deficient", action="store_true")

    p = sub_parser("study", help="replicated scenario-by-estimator bias study")
    _add_common(p)
    _add_em_args(p)
    p.add_argument("--scenarios",
                   help='comma-separated scenario names, e.g. "A.I,B.II(0)"')
    p.add_argument("--estimators", default="em,cc,oracle",
                   help="comma-separated subset of em,cc,mi,oracle")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--truth-draws", type=int, default=400_000)

    p = sub_parser("identify-check",
                       help="tabulate strata and run the exact identification solver")
    _add_common(p)
    _add_data_args(p)
    p.add_argument("--mechanism", default="A1",
                   choices=["A1", "A2", "A3", "A4"])

    p = sub_parser("counterexample",
                       help="verify a shipped unidentifiability counterexample")
    _add_common(p)
    p.add_argument("--case", default="all",
                   help="case id (i, ii, iii, v, vi) or 'all'")
    return parser


def _config_file_defaults(argv: list[str], parser) -> None:
    """Load --config JSON values as subcommand defaults (explicit flags win)."""
    path = None
    command = None
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            path = argv[i + 1]
        elif tok.startswith("--config="):
            path = tok.split("=", 1)[1]
        elif command is None and not tok.startswith("-"):
            command = tok
    if path is None:
        return
    if command not in parser.subcommand_parsers:
        raise CliError("--config needs a recognized subcommand", EXIT_CONFIG)
    try:
        values = json.loads(Path(path).read_text())
    except OSError as exc:
        raise CliError(f"cannot read config file: {exc}", EXIT_CONFIG)
    except json.JSONDecodeError as exc:
        raise CliError(f"config file is not valid JSON: {exc}", EXIT_CONFIG)
    if not isinstance(values, dict):
        raise CliError("config file must hold a JSON object", EXIT_CONFIG)
    subparser = parser.subcommand_parsers[command]
    known = {action.dest for action in subparser._actions}
    defaults = {key.replace("-", "_"): value for key, value in values.items()}
    unknown = set(defaults) - known
    if unknown:
        raise CliError(
            f"unknown config keys for {command!r}: {sorted(unknown)}",
            EXIT_CONFIG)
    subparser.set_defaults(**defaults)


# ---------------------------------------------------------------------------
# Dataset / model assembly from args


def _schema_from_args(args):
    names = [c for c in args.covariates.split(",") if c]
    cat: dict[str, tuple] = {}
    if args.categorical:
        for decl in args.categorical.split(","):
            name, _, levels = decl.partition(":")
            cat[name] = tuple(levels.split("|"))
    return tuple(
        CovariateSpec(n, "categorical", cat[n]) if n in cat
        else CovariateSpec(n) for n in names)


def _kind_from_args(kind: str, levels: int) -> ValueKind:
    if kind == "categorical":
        return ValueKind("categorical", levels)
    return ValueKind(kind)


def _load_dataset(args) -> Dataset:
    if not getattr(args, "data", None):
        raise CliError("this subcommand needs --data", EXIT_CONFIG)
    mapping = ColumnMapping(
        t=args.t_col, m=args.m_col, y=args.y_col,
        covariates=tuple(c for c in args.covariates.split(",") if c),
        r_m=args.rm_col, r_y=args.ry_col, absent_token=args.absent_token)
    try:
        return load_csv(args.data, mapping, _schema_from_args(args),
                        mediator_kind=_kind_from_args(args.mediator_kind,
                                                      args.mediator_levels),
                        outcome_kind=_kind_from_args(args.outcome_kind, 0))
    except OSError as exc:
        raise CliError(f"cannot read data: {exc}", EXIT_DATA)
    except (SchemaError, ValueError) as exc:
        raise CliError(f"data does not conform to the schema: {exc}", EXIT_DATA)


def _model_from_args(args) -> tuple[MnarMechanism, ModelConfig]:
    mech = MnarMechanism(args.mechanism, monotone=getattr(args, "monotone", False))
    config = ModelConfig.for_mechanism(
        mech, args.mediator_model, args.outcome_model,
        interaction=not args.no_interaction)
    return mech, config


def _em_options(args) -> em.EmOptions:
    return em.EmOptions(
        max_iterations=args.max_iterations, loglik_tol=args.loglik_tol,
        param_tol=args.param_tol, s_draws=args.s_draws,
        quad_nodes=args.quad_nodes, proposal=args.proposal,
        seed=args.seed, two_stage=args.two_stage)


# ---------------------------------------------------------------------------
# Subcommand implementations


def _require(args, name: str):
    value = getattr(args, name, None)
    if not value:
        raise CliError(f"--{name} is required (flag or config file)", EXIT_CONFIG)
    return value


def _cmd_simulate(args) -> int:
    _require(args, "scenario")
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    cfg0 = dgp.ScenarioConfig.from_name(args.scenario, n=args.n)
    truth = dgp.true_effects(cfg0)
    manifest = {"scenario": cfg0.name, "n": args.n, "seed": args.seed,
                "replicates": args.reps, "true_effects": truth.as_dict(),
                "files": []}
    for rep in range(args.reps):
        rep_seed = int(dgp.replicate_seed(args.seed, rep).generate_state(
            1, dtype=np.uint64)[0])
        cfg = replace(cfg0, seed=rep_seed)
        masked, oracle = dgp.generate(cfg)
        name = f"{cfg0.name}_r{rep}.csv"
        save_csv(masked, out / name)
        entry = {"replicate": rep, "file": name, "seed": rep_seed}
        if args.oracle:
            oname = f"{cfg0.name}_r{rep}_oracle.csv"
            save_csv(oracle, out / oname)
            entry["oracle_file"] = oname
        manifest["files"].append(entry)
    _emit(manifest, out / f"{cfg0.name}_manifest.json")
    print(f"wrote {args.reps} replicate(s) under {out}")
    return EXIT_OK


def _cmd_fit(args) -> int:
    ds = _load_dataset(args)
    mech, config = _model_from_args(args)
    state = em.em_fit(ds, mech, config, _em_options(args),
                      allow_rank_deficient=args.allow_rank_deficient)
    result = {
        "mechanism": mech.tag, "converged": state.converged,
        "iterations": state.n_iterations,
        "loglik": state.loglik,
        "loglik_trace": state.loglik_trace.tolist(),
        "params": state.params,
    }
    _emit(result, args.out)
    return EXIT_OK


def _params_from_json(obj: dict) -> FittedParams:
    fields = {}
    for key in ("alpha", "beta", "lam", "gamma", "delta"):
        if obj.get(key) is not None:
            fields[key] = np.asarray(obj[key], dtype=float)
    for key in ("sigma_m", "sigma_y", "nu"):
        if obj.get(key) is not None:
            fields[key] = float(obj[key])
    return FittedParams(**fields)


def _cmd_effects(args) -> int:
    _require(args, "params")
    ds = _load_dataset(args)
    _, config = _model_from_args(args)
    try:
        obj = json.loads(Path(args.params).read_text())
    except OSError as exc:
        raise CliError(f"cannot read params: {exc}", EXIT_DATA)
    params = _params_from_json(obj.get("params", obj))
    from .effects import effects_from
    eff = effects_from(params, config, ds, n_mc=args.n_mc, seed=args.seed)
    _emit(eff.as_dict(), args.out)
    return EXIT_OK


def _parse_coefs(text: str) -> tuple:
    out = []
    for tok in text.split(","):
        if not tok:
            continue
        name, _, idx = tok.partition(":")
        if name not in ("alpha", "beta", "lam", "gamma", "delta"):
            raise CliError(f"unknown coefficient family {name!r}", EXIT_CONFIG)
        out.append((name, int(idx)))
    return tuple(out)


def _cmd_bootstrap(args) -> int:
    ds = _load_dataset(args)
    mech, config = _model_from_args(args)
    res = harness.bootstrap_ci(
        ds, mech, config, _em_options(args), B=args.resamples, seed=args.seed,
        n_mc=args.n_mc, coef_selectors=_parse_coefs(args.coefs),
        jobs=args.jobs, allow_rank_deficient=args.allow_rank_deficient)
    _emit({"B": res.B, "point": res.point, "intervals": res.intervals,
           "n_failed": res.n_failed, "estimates": res.estimates}, args.out)
    return EXIT_OK


def _cmd_sensitivity(args) -> int:
    ds = _load_dataset(args)
    mech, config = _model_from_args(args)
    grid = tuple(float(v) for v in args.grid.split(","))
    res = harness.sensitivity_analysis(
        ds, mech, config, grid=grid, opts=_em_options(args), seed=args.seed,
        B=args.resamples, n_mc=args.n_mc, jobs=args.jobs)
    cells = []
    for (gm, gh), cell in sorted(res.cells.items()):
        row = {"gamma_m": gm, "gamma_h": gh,
               "converged": cell["converged"],
               "effects": cell["effects"].as_dict(),
               "params": cell["params"]}
        if "ci" in cell:
            row["intervals"] = cell["ci"].intervals
        cells.append(row)
    _emit({"grid_m": res.grid_m, "grid_h": res.grid_h, "cells": cells},
          args.out)
    return EXIT_OK


def _cmd_compare(args) -> int:
    _require(args, "candidates")
    ds = _load_dataset(args)
    candidates = []
    for tok in args.candidates.split(","):
        mech_tag, _, outcome_model = tok.partition(":")
        mech = MnarMechanism(mech_tag)
        candidates.append((mech, ModelConfig.for_mechanism(
            mech, args.mediator_model, outcome_model)))
    res = harness.compare_models(ds, candidates, _em_options(args),
                                 allow_rank_deficient=args.allow_rank_deficient)
    ranking = [{k: v for k, v in e.items() if k != "params"}
               for e in res["ranking"]]
    _emit({"ranking": ranking, "note": res["note"]}, args.out)
    return EXIT_OK


def _cmd_study(args) -> int:
    scenarios = [s for s in _require(args, "scenarios").split(",") if s]
    estimators = [s for s in args.estimators.split(",") if s]
    report = harness.run_study(
        scenarios, estimators, n=args.n, n_replicates=args.reps,
        seed=args.seed, out_dir=args.out, em_options=_em_options(args),
        jobs=args.jobs, n_mc_truth=args.truth_draws,
        n_mc_effects=args.n_mc)
    if args.out is None:
        _emit({"summary": report.summary, "truths": report.truths})
    else:
        print(f"study written under {args.out}")
    return EXIT_OK


def _cmd_identify_check(args) -> int:
    ds = _load_dataset(args)
    mech = MnarMechanism(args.mechanism)
    strata = sorted({(r.t, tuple(r.x)) for r in ds.records})
    out = []
    for t, x in strata:
        stratum = (t, x) if ds.schema else (t,)
        table = ident.tabulate(ds, stratum)
        diag = ident.rank_diagnostic(table, mech)
        entry = {"stratum": {"t": t, "x": list(x)},
                 "rank": diag.rank, "required_rank": diag.required_rank,
                 "smallest_singular_value": diag.smallest_singular_value,
                 "completeness": "pass" if diag.passed else "fail",
                 "reason": diag.reason}
        if diag.passed:
            try:
                sol = ident.solve_identification(table, mech)
                rec = ident.recover_joint(table, sol, mech)
                entry["mediator_missingness_odds"] = [str(z) for z in sol.zeta]
                entry["joint"] = [[str(v) for v in row] for row in rec.joint]
                entry["proper"] = rec.proper
                entry["warnings"] = sol.warnings
            except ident.IdentificationError as exc:
                entry["solver_error"] = str(exc)
        out.append(entry)
    _emit({"mechanism": mech.tag, "strata": out}, args.out)
    return EXIT_OK


def _cmd_counterexample(args) -> int:
    cases = (ident.available_counterexamples() if args.case == "all"
             else [args.case])
    out = []
    for case in cases:
        try:
            spec = ident.load_counterexample(case)
        except FileNotFoundError:
            raise CliError(f"unknown counterexample case {args.case!r}",
                           EXIT_CONFIG)
        rep = ident.verify_counterexample(spec)
        out.append({
            "case": rep.case,
            "description": spec.description,
            "observables_match": list(rep.observables_match),
            "joints_differ": rep.joints_differ,
            "is_counterexample": rep.is_counterexample,
            "joint_one": [[str(v) for v in row] for row in rep.joints[0]],
            "joint_two": [[str(v) for v in row] for row in rep.joints[1]],
        })
    _emit({"cases": out}, args.out)
    if not all(c["is_counterexample"] for c in out):
        print("warning: some cases are not counterexamples", file=sys.stderr)
    return EXIT_OK


_COMMANDS = {
    "simulate": _cmd_simulate,
    "fit": _cmd_fit,
    "effects": _cmd_effects,
    "bootstrap": _cmd_bootstrap,
    "sensitivity": _cmd_sensitivity,
    "compare": _cmd_compare,
    "study": _cmd_study,
    "identify-check": _cmd_identify_check,
    "counterexample": _cmd_counterexample,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    try:
        _config_file_defaults(argv, parser)
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except CliError as exc:
        print(json.dumps({"error": str(exc), "code": exc.code}),
              file=sys.stderr)
        return exc.code
    except (ConfigError, SchemaError) as exc:
        print(json.dumps({"error": str(exc), "code": EXIT_CONFIG}),
              file=sys.stderr)
        return EXIT_CONFIG
    except (ident.IdentificationError,) as exc:
        print(json.dumps({"error": str(exc), "code": EXIT_DATA}),
              file=sys.stderr)
        return EXIT_DATA
    except (glm.FitError, em.EmError, harness.HarnessError) as exc:
        print(json.dumps({"error": str(exc), "code": EXIT_NUMERIC}),
              file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
