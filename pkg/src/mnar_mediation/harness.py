"""Uncertainty quantification and simulation-study orchestration.

Nonparametric bootstrap intervals (percentile, resampling units with
replacement), the fixed-offset sensitivity grid for outcome missingness,
likelihood-based model comparison, and the replicated bias study that crosses
scenarios with estimators.  All jobs derive their seeds deterministically
from a single base seed, so reruns (and resumed studies) reproduce results
bit-exactly; replicates and resamples are independent jobs over immutable
inputs and may run in a process pool.
"""

from __future__ import annotations

import csv
import json
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import dgp, em, glm
from .core import ConfigError, Dataset, FittedParams, MnarMechanism, ModelConfig
from .effects import EffectEstimates, effects_from


class HarnessError(RuntimeError):
    pass


def _derived_seed(base: int, *keys: int) -> int:
    ss = np.random.SeedSequence(base, spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _coef_value(params: FittedParams, selector: tuple[str, int]) -> float:
    name, idx = selector
    vec = getattr(params, name)
    if vec is None:
        raise HarnessError(f"no fitted {name} coefficients")
    return float(np.asarray(vec).ravel()[idx])


def _fit_and_effects(ds, mech, config, opts, start, n_mc, effects_seed,
                     allow_rank_deficient):
    state = em.em_fit(ds, mech, config, opts, start=start,
                      allow_rank_deficient=allow_rank_deficient)
    eff = effects_from(state.params, config, ds, n_mc=n_mc, seed=effects_seed)
    return state, eff


# ---------------------------------------------------------------------------
# Bootstrap


@dataclass
class BootstrapResult:
    """Percentile bootstrap summary.

    ``estimates`` holds one dict per successful resample (effects plus any
    selected coefficients); ``intervals`` maps each quantity to its
    2.5/97.5 percentile pair.  Percentile intervals need not bracket the
    point estimate; lower <= upper always holds.  Non-converged or failed
    resamples are dropped and counted in ``n_failed``.
    """

    B: int
    point: dict
    estimates: list[dict]
    intervals: dict[str, tuple[float, float]]
    n_failed: int


_WORKER_PAYLOAD: dict = {}


def _init_worker(payload):
    _WORKER_PAYLOAD.clear()
    _WORKER_PAYLOAD.update(payload)


def _bootstrap_job(b: int) -> tuple[int, dict | None]:
    p = _WORKER_PAYLOAD
    ds: Dataset = p["ds"]
    rng = np.random.default_rng(
        np.random.SeedSequence(p["seed"], spawn_key=(b,)))
    idx = rng.integers(0, ds.n, size=ds.n)
    res = replace(ds, records=tuple(ds.records[i] for i in idx))
    try:
        state, eff = _fit_and_effects(
            res, p["mech"], p["config"], p["opts"], p["start"], p["n_mc"],
            p["effects_seed"], p["allow_rank_deficient"])
    except (glm.FitError, em.EmError, ConfigError):
        return b, None
    if not state.converged:
        return b, None
    row = {"nie": eff.nie, "nde": eff.nde, "ate": eff.ate}
    for sel in p["coef_selectors"]:
        row[f"{sel[0]}[{sel[1]}]"] = _coef_value(state.params, sel)
    return b, row


def _run_jobs(job, items, payload, jobs: int):
    if jobs <= 1:
        _init_worker(payload)
        return [job(i) for i in items]
    with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker,
                             initargs=(payload,)) as pool:
        return list(pool.map(job, items, chunksize=max(1, len(items) // (4 * jobs))))


def bootstrap_ci(ds: Dataset, mech: MnarMechanism, config: ModelConfig,
                 opts: em.EmOptions = em.EmOptions(), B: int = 500,
                 seed: int = 0, n_mc: int = 2000,
                 coef_selectors: tuple = (), jobs: int = 1,
                 warm_start: bool = True,
                 allow_rank_deficient: bool = False,
                 max_failure_fraction: float = 0.2) -> BootstrapResult:
    """Percentile bootstrap over unit resamples, refit by EM.

    Resample fits warm-start from the full-data MLE by default.  More than
    ``max_failure_fraction`` failed resamples raises: the interval would not
    be trustworthy.
    """
    if B < 2:
        raise HarnessError("need at least two bootstrap resamples")
    full_state, full_eff = _fit_and_effects(
        ds, mech, config, opts, None, n_mc, seed, allow_rank_deficient)
    point = {"nie": full_eff.nie, "nde": full_eff.nde, "ate": full_eff.ate}
    for sel in coef_selectors:
        point[f"{sel[0]}[{sel[1]}]"] = _coef_value(full_state.params, sel)
    payload = {"ds": ds, "mech": mech, "config": config, "opts": opts,
               "start": full_state.params if warm_start else None,
               "n_mc": n_mc, "effects_seed": seed,
               "coef_selectors": tuple(coef_selectors),
               "allow_rank_deficient": allow_rank_deficient, "seed": seed}
    results = _run_jobs(_bootstrap_job, range(B), payload, jobs)
    estimates = [row for _, row in sorted(results) if row is not None]
    n_failed = B - len(estimates)
    if n_failed > max_failure_fraction * B:
        raise HarnessError(
            f"{n_failed}/{B} bootstrap resamples failed; interval unreliable")
    intervals = {}
    for key in estimates[0]:
        vals = np.array([e[key] for e in estimates])
        lo, hi = np.percentile(vals, [2.5, 97.5])
        intervals[key] = (float(lo), float(hi))
    return BootstrapResult(B=B, point=point, estimates=estimates,
                           intervals=intervals, n_failed=n_failed)


# ---------------------------------------------------------------------------
# Sensitivity analysis


@dataclass
class SensitivityGrid:
    """Effect estimates across fixed outcome-missingness offsets.

    Each cell pins the mediator and positivity coefficients of the outcome
    missingness model at the grid values (re-estimating everything else);
    the (0, 0) cell prunes the zero offsets and is therefore computationally
    identical to the base fit.
    """

    grid_m: tuple
    grid_h: tuple
    cells: dict[tuple[float, float], dict]

    def cell(self, gamma_m: float, gamma_h: float) -> dict:
        return self.cells[(gamma_m, gamma_h)]


def sensitivity_analysis(ds: Dataset, mech: MnarMechanism, config: ModelConfig,
                         grid=(-2.0, 0.0, 2.0), opts: em.EmOptions = em.EmOptions(),
                         seed: int = 0, B: int = 0, n_mc: int = 2000,
                         jobs: int = 1) -> SensitivityGrid:
    """Grid of re-fits with pinned sensitivity coefficients on the outcome
    missingness model (a mediator offset and a positivity offset)."""
    if mech.tag != "A2" or not config.two_part:
        raise ConfigError(
            "sensitivity analysis starts from the mediator-missingness-driven "
            "mechanism with a two-part outcome")
    cells = {}
    for gm in grid:
        for gh in grid:
            cell_config = replace(config,
                                  ry_fixed=(("m", float(gm)), ("h", float(gh))))
            state, eff = _fit_and_effects(ds, mech, cell_config, opts, None,
                                          n_mc, seed, False)
            cell = {"gamma_m": float(gm), "gamma_h": float(gh),
                    "params": state.params, "converged": state.converged,
                    "effects": eff}
            if B > 0:
                cell["ci"] = bootstrap_ci(ds, mech, cell_config, opts, B=B,
                                          seed=seed, n_mc=n_mc, jobs=jobs)
            cells[(float(gm), float(gh))] = cell
    return SensitivityGrid(grid_m=tuple(float(g) for g in grid),
                           grid_h=tuple(float(g) for g in grid), cells=cells)


# ---------------------------------------------------------------------------
# Model comparison


def compare_models(ds: Dataset, candidates, opts: em.EmOptions = em.EmOptions(),
                   allow_rank_deficient: bool = False) -> dict:
    """Fit each (mechanism, config) candidate and rank by observed loglik.

    Likelihood comparison is only meaningful across equal parameter counts;
    the result carries a note when counts differ.
    """
    entries = []
    for mech, config in candidates:
        state = em.em_fit(ds, mech, config, opts,
                          allow_rank_deficient=allow_rank_deficient)
        ll = em.observed_loglik(ds, state.params, mech, config)
        entries.append({
            "mechanism": mech.tag, "outcome_model": config.outcome_model,
            "loglik": ll, "converged": state.converged,
            "n_params": int(em.params_to_vector(state.params).size),
            "params": state.params})
    entries.sort(key=lambda e: e["loglik"], reverse=True)
    counts = {e["n_params"] for e in entries}
    note = ("all candidates have the same number of parameters"
            if len(counts) == 1 else
            f"parameter counts differ across candidates: {sorted(counts)}; "
            "likelihoods are not directly comparable")
    return {"ranking": entries, "note": note}


# ---------------------------------------------------------------------------
# Simulation study


@dataclass
class StudyReport:
    """Replicate-level estimates and bias percentages plus per-cell summaries.

    Bias% is (estimate - truth)/truth * 100; for the independent variants the
    indirect-effect truth is exactly zero, so its bias% is estimate over the
    direct-effect truth * 100.
    """

    rows: list[dict]
    summary: list[dict]
    truths: dict[str, dict]

    def rows_for(self, scenario: str, estimator: str) -> list[dict]:
        return [r for r in self.rows
                if r["scenario"] == scenario and r["estimator"] == estimator]

    def summary_for(self, scenario: str, estimator: str) -> dict:
        for s in self.summary:
            if s["scenario"] == scenario and s["estimator"] == estimator:
                return s
        raise KeyError((scenario, estimator))

    def write_csv(self, path):
        cols = ["scenario", "estimator", "replicate", "nie_hat", "nde_hat",
                "bias_pct_nie", "bias_pct_nde"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(cols)
            for r in self.rows:
                writer.writerow([r.get(c) for c in cols])


def _needs_rank_override(cfg: dgp.ScenarioConfig) -> bool:
    return (cfg.mechanism == "A3"
            and cfg.mediator_kind.base != cfg.outcome_kind.base)


def _study_job(item):
    scenario_name, rep = item
    p = _WORKER_PAYLOAD
    out_dir = p["out_dir"]
    if out_dir is not None:
        cache = Path(out_dir) / "replicates" / f"{scenario_name}_r{rep}.json"
        if cache.exists():
            return json.loads(cache.read_text())
    cfg = dgp.ScenarioConfig.from_name(
        scenario_name, n=p["n"],
        seed=_derived_seed(p["seed"], zlib.crc32(scenario_name.encode()), rep))
    masked, oracle = dgp.generate(cfg)
    mech = cfg.mnar_mechanism()
    config = cfg.model_config()
    truth = p["truths"][scenario_name]
    rows = []
    for estimator in p["estimators"]:
        row = {"scenario": scenario_name, "estimator": estimator,
               "replicate": rep, "converged": True, "error": None,
               "nie_hat": None, "nde_hat": None,
               "bias_pct_nie": None, "bias_pct_nde": None,
               "max_ll_decrease": None}
        try:
            if estimator == "em":
                state = em.em_fit(masked, mech, config, p["em_options"],
                                  allow_rank_deficient=_needs_rank_override(cfg))
                params, row["converged"] = state.params, bool(state.converged)
                drops = -np.diff(state.loglik_trace)
                row["max_ll_decrease"] = float(max(0.0, drops.max())) \
                    if drops.size else 0.0
            elif estimator == "cc":
                params = em.complete_case_fit(masked, config)
            elif estimator == "oracle":
                params = em.oracle_fit(oracle, config)
            elif estimator == "mi":
                params = em.mar_impute_fit(
                    masked, config, n_imputations=p["n_imputations"],
                    seed=_derived_seed(p["seed"], zlib.crc32(b"mi"), rep))
            else:
                raise HarnessError(f"unknown estimator {estimator!r}")
            eff = effects_from(params, config, masked, n_mc=p["n_mc_effects"],
                               seed=p["seed"])
            row["nie_hat"], row["nde_hat"] = eff.nie, eff.nde
            if truth["nie_is_zero"]:
                row["bias_pct_nie"] = eff.nie / truth["nde"] * 100.0
            else:
                row["bias_pct_nie"] = (eff.nie - truth["nie"]) / truth["nie"] * 100.0
            row["bias_pct_nde"] = (eff.nde - truth["nde"]) / truth["nde"] * 100.0
        except (glm.FitError, em.EmError, ConfigError, HarnessError) as exc:
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    if out_dir is not None:
        cache.parent.mkdir(parents=True, exist_ok=True)
        tmp = cache.with_suffix(".tmp")
        tmp.write_text(json.dumps(rows))
        os.replace(tmp, cache)
    return rows


def run_study(scenarios, estimators=("em", "cc", "oracle"), n: int = 1000,
              n_replicates: int = 100, seed: int = 0, out_dir=None,
              em_options: em.EmOptions = em.EmOptions(), jobs: int = 1,
              n_mc_truth: int = 400_000, n_mc_effects: int = 2000,
              n_imputations: int = 10) -> StudyReport:
    """Cross scenarios with estimators over independent replicates.

    Per-replicate results are persisted under ``out_dir/replicates`` and
    reloaded on rerun, so a study is resumable and deleting one replicate
    file reproduces it bit-exactly.  Failures of individual fits are
    recorded in their rows and never abort the study.
    """
    truths = {}
    for name in scenarios:
        cfg = dgp.ScenarioConfig.from_name(name, n=n)
        te = dgp.true_effects(cfg, n_mc=n_mc_truth)
        truths[name] = {"nie": te.nie, "nde": te.nde, "ate": te.ate,
                        "nie_is_zero": not cfg.dependent}
    payload = {"n": n, "seed": seed, "truths": truths,
               "estimators": tuple(estimators), "em_options": em_options,
               "n_mc_effects": n_mc_effects, "n_imputations": n_imputations,
               "out_dir": str(out_dir) if out_dir is not None else None}
    items = [(name, rep) for name in scenarios for rep in range(n_replicates)]
    results = _run_jobs(_study_job, items, payload, jobs)
    rows = [row for chunk in results for row in chunk]

    summary = []
    for name in scenarios:
        for estimator in estimators:
            cell = [r for r in rows
                    if r["scenario"] == name and r["estimator"] == estimator]
            ok = [r for r in cell if r["error"] is None]
            entry = {"scenario": name, "estimator": estimator,
                     "n_replicates": len(cell), "n_failed": len(cell) - len(ok)}
            for key in ("bias_pct_nie", "bias_pct_nde"):
                vals = np.array([r[key] for r in ok], dtype=float)
                if vals.size:
                    q25, q50, q75 = np.percentile(vals, [25, 50, 75])
                    entry[f"{key}_median"] = float(q50)
                    entry[f"{key}_iqr"] = float(q75 - q25)
                else:
                    entry[f"{key}_median"] = None
                    entry[f"{key}_iqr"] = None
            summary.append(entry)
    report = StudyReport(rows=rows, summary=summary, truths=truths)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report.write_csv(out / "study_rows.csv")
        (out / "study_summary.json").write_text(
            json.dumps({"summary": summary, "truths": truths}, indent=2))
    return report
