"""Bootstrap, sensitivity grid, model comparison, study runner."""

import json
from pathlib import Path

import numpy as np
import pytest

from mnar_mediation.core import ConfigError, MnarMechanism, ModelConfig
from mnar_mediation.dgp import (ScenarioConfig, TwoPartScenarioConfig,
                                generate, generate_two_part)
from mnar_mediation.em import EmOptions, em_fit
from mnar_mediation.harness import (HarnessError, bootstrap_ci, compare_models,
                                    run_study, sensitivity_analysis)

FAST = EmOptions(loglik_tol=1e-7, param_tol=1e-4, max_iterations=500)


@pytest.fixture(scope="module")
def small_ai():
    cfg = ScenarioConfig.from_name("A.I", n=400, seed=101)
    masked, _ = generate(cfg)
    return cfg, masked


def test_bootstrap_smoke_b2(small_ai):
    cfg, masked = small_ai
    res = bootstrap_ci(masked, cfg.mnar_mechanism(), cfg.model_config(),
                       opts=FAST, B=2, seed=4)
    assert res.B == 2
    assert len(res.estimates) + res.n_failed == 2
    vals = [e["nie"] for e in res.estimates]
    lo, hi = res.intervals["nie"]
    assert lo <= hi
    assert min(vals) <= lo + 1e-12 and hi <= max(vals) + 1e-12


def test_bootstrap_deterministic_across_jobs(small_ai):
    cfg, masked = small_ai
    kw = dict(opts=FAST, B=8, seed=9, coef_selectors=(("lam", 1),))
    r1 = bootstrap_ci(masked, cfg.mnar_mechanism(), cfg.model_config(),
                      jobs=1, **kw)
    r2 = bootstrap_ci(masked, cfg.mnar_mechanism(), cfg.model_config(),
                      jobs=2, **kw)
    assert r1.estimates == r2.estimates
    assert r1.intervals == r2.intervals
    assert "lam[1]" in r1.intervals


def test_bootstrap_requires_two_resamples(small_ai):
    cfg, masked = small_ai
    with pytest.raises(HarnessError):
        bootstrap_ci(masked, cfg.mnar_mechanism(), cfg.model_config(), B=1)


@pytest.fixture(scope="module")
def two_part_fit():
    cfg = TwoPartScenarioConfig(n=1200, mechanism="A2", seed=5)
    masked, _ = generate_two_part(cfg)
    return cfg, masked


def test_sensitivity_zero_cell_equals_base_fit(two_part_fit):
    cfg, masked = two_part_fit
    mech = MnarMechanism("A2")
    config = cfg.model_config()
    base = em_fit(masked, mech, config, FAST)
    grid = sensitivity_analysis(masked, mech, config, grid=(0.0, 1.0),
                                opts=FAST, seed=3)
    cell = grid.cell(0.0, 0.0)
    for name in ("alpha", "beta", "lam", "gamma", "delta"):
        a, b = getattr(base.params, name), getattr(cell["params"], name)
        assert np.array_equal(a, b), name
    assert base.params.nu == cell["params"].nu
    other = grid.cell(1.0, 1.0)
    assert not np.allclose(other["params"].gamma, base.params.gamma)


def test_sensitivity_requires_two_part_a2(small_ai):
    cfg, masked = small_ai
    with pytest.raises(ConfigError):
        sensitivity_analysis(masked, cfg.mnar_mechanism(), cfg.model_config())


def test_compare_identical_candidates_tie(two_part_fit):
    cfg, masked = two_part_fit
    mech = MnarMechanism("A2")
    config = cfg.model_config()
    res = compare_models(masked, [(mech, config), (mech, config)], FAST)
    lls = [e["loglik"] for e in res["ranking"]]
    assert lls[0] == lls[1]
    assert "same number of parameters" in res["note"]


def test_study_row_accounting_and_bias_switch(tmp_path):
    report = run_study(["A.I", "A.I(0)"], ["em", "cc"], n=250,
                       n_replicates=3, seed=5, out_dir=tmp_path,
                       em_options=FAST, n_mc_truth=50_000)
    assert len(report.rows) == 2 * 2 * 3
    truth = report.truths["A.I(0)"]
    assert truth["nie_is_zero"]
    for row in report.rows_for("A.I(0)", "em"):
        if row["error"] is None:
            expect = row["nie_hat"] / truth["nde"] * 100.0
            assert np.isclose(row["bias_pct_nie"], expect)
    truth_dep = report.truths["A.I"]
    for row in report.rows_for("A.I", "cc"):
        if row["error"] is None:
            expect = (row["nie_hat"] - truth_dep["nie"]) / truth_dep["nie"] * 100
            assert np.isclose(row["bias_pct_nie"], expect)
    csv_path = tmp_path / "study_rows.csv"
    assert csv_path.exists()
    lines = csv_path.read_text().strip().splitlines()
    assert len(lines) == 1 + len(report.rows)
    assert lines[0].startswith("scenario,estimator,replicate,nie_hat")


def test_study_resume_is_bit_exact(tmp_path):
    kw = dict(n=200, n_replicates=2, seed=8, em_options=FAST,
              n_mc_truth=20_000)
    run_study(["A.II"], ["em"], out_dir=tmp_path, **kw)
    target = tmp_path / "replicates" / "A.II_r1.json"
    original = target.read_bytes()
    target.unlink()
    run_study(["A.II"], ["em"], out_dir=tmp_path, **kw)
    assert target.read_bytes() == original


def test_study_deterministic_across_jobs(tmp_path):
    kw = dict(n=200, n_replicates=2, seed=8, em_options=FAST,
              n_mc_truth=20_000)
    r1 = run_study(["A.IV"], ["em", "oracle"], jobs=1,
                   out_dir=tmp_path / "a", **kw)
    r2 = run_study(["A.IV"], ["em", "oracle"], jobs=2,
                   out_dir=tmp_path / "b", **kw)
    assert r1.rows == r2.rows


def test_study_records_failures_without_aborting(tmp_path):
    # n too small for the multinomial setting fits: failures must be recorded
    report = run_study(["E.IV"], ["mi"], n=40, n_replicates=2, seed=1,
                       em_options=FAST, n_mc_truth=10_000)
    assert len(report.rows) == 2
    assert all(r["error"] is not None for r in report.rows)
    summary = report.summary_for("E.IV", "mi")
    assert summary["n_failed"] == 2
