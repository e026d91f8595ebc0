"""EM engine: likelihood oracles, ascent, weights, baselines, edge cases."""

import math

import numpy as np
import pytest
from scipy.special import expit

from mnar_mediation import glm
from mnar_mediation.core import (ABSENT, BINARY, ConfigError, CovariateSpec,
                                 Dataset, FittedParams, MnarMechanism,
                                 ModelConfig, UnitRecord)
from mnar_mediation.dgp import ScenarioConfig, generate
from mnar_mediation.em import (EmOptions, complete_case_fit, em_fit,
                               loglik_evaluator, mar_impute_fit,
                               NonFiniteLoglikError, observed_loglik,
                               oracle_fit, params_from_vector,
                               params_to_vector)

A1, A2, A3, A4 = (MnarMechanism(t) for t in ("A1", "A2", "A3", "A4"))


def _scenario(name, n, seed):
    cfg = ScenarioConfig.from_name(name, n=n, seed=seed)
    masked, oracle = generate(cfg)
    return cfg, masked, oracle, cfg.mnar_mechanism(), cfg.model_config()


def test_single_unit_hand_computation():
    # one unit, mediator missing, binary outcome, all coefficients zero:
    # every probability is 1/2 and the contribution is log(2 * (1/2)^3)
    ds = Dataset(records=(UnitRecord(t=0, x=(), m=ABSENT, y=1),))
    config = ModelConfig("logistic", "logistic")
    params = FittedParams(alpha=np.zeros(2), beta=np.zeros(4), lam=np.zeros(3))
    ll = observed_loglik(ds, params, A1, config)
    assert math.isclose(ll, math.log(0.25), rel_tol=1e-12)


def test_fully_observed_loglik_equals_component_sum():
    cfg, masked, oracle, mech, config = _scenario("A.II", 200, 4)
    params = oracle_fit(oracle, config, mech)
    full = Dataset(records=tuple(oracle.records), schema=oracle.schema,
                   latent_complete=True)
    arrs = [(r.t, r.x[0], r.m, r.y, r.r_m, r.r_y) for r in full.records]
    direct = 0.0
    for t, x, m, y, rm, ry in arrs:
        pm = expit(params.alpha @ np.array([1.0, t, x]))
        py = expit(params.beta @ np.array([1.0, m, t, m * t, x]))
        prm = expit(params.lam @ np.array([1.0, m, t, x]))
        pry = expit(params.gamma @ np.array([1.0, rm, t, x]))
        direct += math.log(pm if m else 1 - pm) + math.log(py if y else 1 - py)
        direct += math.log(prm if rm else 1 - prm)
        direct += math.log(pry if ry else 1 - pry)
    unmasked = Dataset(records=tuple(
        UnitRecord(t=r.t, x=r.x, m=r.m, y=r.y) for r in oracle.records),
        schema=oracle.schema)
    # response indicators all one in the unmasked copy: only the first three
    # component models contribute
    partial = observed_loglik(unmasked, params, A1, ModelConfig("logistic", "logistic"))
    direct_a1 = 0.0
    for t, x, m, y, rm, ry in arrs:
        pm = expit(params.alpha @ np.array([1.0, t, x]))
        py = expit(params.beta @ np.array([1.0, m, t, m * t, x]))
        prm = expit(params.lam @ np.array([1.0, m, t, x]))
        direct_a1 += math.log(pm if m else 1 - pm) + math.log(py if y else 1 - py)
        direct_a1 += math.log(prm)
    assert math.isclose(partial, direct_a1, rel_tol=1e-10)


def _brute_force_loglik(ds, params, mech, config):
    """Enumerate all binary latent completions per unit (test oracle)."""
    total = 0.0
    for rec in ds.records:
        t, x = rec.t, rec.x[0] if rec.x else 0.0
        contributions = []
        m_vals = [rec.m] if rec.r_m else [0, 1]
        for m in m_vals:
            need_y = mech.tag == "A3"
            y_vals = [rec.y] if rec.r_y else ([0, 1] if need_y else [None])
            for y in y_vals:
                pm = expit(params.alpha @ np.array([1.0, t, x]))
                p = pm if m else 1 - pm
                if y is not None:
                    py = expit(params.beta @ np.array([1.0, m, t, m * t, x]))
                    p *= py if y else 1 - py
                prm = expit(params.lam @ np.array([1.0, m, t, x]))
                p *= prm if rec.r_m else 1 - prm
                if mech.tag != "A1":
                    reg = {"A2": rec.r_m, "A3": y, "A4": m}[mech.tag]
                    pry = expit(params.gamma @ np.array([1.0, reg, t, x]))
                    p *= pry if rec.r_y else 1 - pry
                contributions.append(p)
        total += math.log(sum(contributions))
    return total


@pytest.mark.parametrize("name,mech", [("A.I", A1), ("A.II", A2),
                                       ("A.III", A3), ("A.IV", A4)])
def test_loglik_matches_enumeration_oracle(name, mech):
    cfg, masked, oracle, _, config = _scenario(name, 20, 8)
    rng = np.random.default_rng(3)
    params = FittedParams(alpha=rng.normal(0, 0.5, 3),
                          beta=rng.normal(0, 0.5, 5),
                          lam=rng.normal(0, 0.5, 4),
                          gamma=None if mech.tag == "A1" else rng.normal(0, 0.5, 4))
    ll = observed_loglik(masked, params, mech, config)
    assert math.isclose(ll, _brute_force_loglik(masked, params, mech, config),
                        rel_tol=1e-10)


def test_nonfinite_contribution_names_unit():
    ds = Dataset(records=(UnitRecord(t=0, x=(), m=0, y=1),
                          UnitRecord(t=1, x=(), m=1, y=0)))
    config = ModelConfig("logistic", "logistic")
    params = FittedParams(alpha=np.zeros(2), beta=np.array([np.nan, 0, 0, 0]),
                          lam=np.zeros(3))
    with pytest.raises(NonFiniteLoglikError) as exc:
        observed_loglik(ds, params, A1, config)
    assert exc.value.unit_index == 0


def test_no_missingness_converges_immediately_to_mle():
    cfg = ScenarioConfig.from_name("A.II", n=400, seed=5,
                                   lam=(50.0, 0, 0, 0), gamma=(50.0, 0, 0, 0))
    masked, oracle = generate(cfg)
    state = em_fit(masked, A2, cfg.model_config())
    assert state.converged
    cc = complete_case_fit(masked, cfg.model_config())
    orc = oracle_fit(oracle, cfg.model_config())
    assert np.allclose(state.params.alpha, cc.alpha, atol=1e-6)
    assert np.allclose(state.params.beta, cc.beta, atol=1e-6)
    assert np.allclose(cc.alpha, orc.alpha, atol=1e-12)


def test_ascent_and_final_weights():
    cfg, masked, oracle, mech, config = _scenario("A.II", 600, 21)
    state = em_fit(masked, mech, config)
    diffs = np.diff(state.loglik_trace)
    assert np.all(diffs > -1e-6)
    assert state.unit_weights
    for unit, w in state.unit_weights.items():
        assert np.all(w >= 0)
        assert abs(w.sum() - 1.0) < 1e-12
        rec = masked.records[unit]
        assert rec.r_m == 0 or (rec.r_y == 0 and mech.tag == "A3")


@pytest.mark.parametrize("name", ["A.I", "A.II", "A.III", "A.IV"])
def test_small_data_stationarity(name):
    # scan for a draw with an interior maximum; tiny samples often have
    # boundary likelihoods under these missingness models
    for seed in range(1, 60):
        cfg, masked, oracle, mech, config = _scenario(name, 30, seed)
        try:
            state = em_fit(masked, mech, config)
        except glm.FitError:
            continue
        vec = params_to_vector(state.params)
        if state.converged and np.max(np.abs(vec)) <= 15:
            break
    else:
        pytest.fail("no interior optimum found in the seed scan")
    evaluate = loglik_evaluator(masked, mech, config)
    h = 1e-5
    grad = np.zeros_like(vec)
    for i in range(vec.size):
        e = np.zeros_like(vec)
        e[i] = h
        grad[i] = (evaluate(params_from_vector(vec + e, state.params))
                   - evaluate(params_from_vector(vec - e, state.params))) / (2 * h)
    assert np.max(np.abs(grad)) < 1e-3


def test_vector_round_trip():
    params = FittedParams(alpha=np.arange(3.0), beta=np.arange(5.0),
                          lam=np.arange(4.0), gamma=None,
                          sigma_m=2.0, nu=1.5)
    vec = params_to_vector(params)
    back = params_from_vector(vec, params)
    assert np.allclose(back.alpha, params.alpha)
    assert np.isclose(back.sigma_m, 2.0)
    assert np.isclose(back.nu, 1.5)
    assert back.gamma is None


def test_monte_carlo_proposal_agrees_with_quadrature():
    cfg, masked, oracle, mech, config = _scenario("C.I", 800, 3)
    gh = em_fit(masked, mech, config)
    mc = em_fit(masked, mech, config,
                EmOptions(proposal="monte_carlo", s_draws=400, seed=11,
                          loglik_tol=1e-7, param_tol=1e-4))
    assert np.max(np.abs(gh.params.alpha - mc.params.alpha)) < 0.05
    assert np.max(np.abs(gh.params.beta - mc.params.beta)) < 0.05
    assert abs(gh.params.sigma_m - mc.params.sigma_m) < 0.05


def test_two_stage_freezes_outcome_model():
    cfg, masked, oracle, mech, config = _scenario("A.II", 800, 9)
    cc = complete_case_fit(masked, config)
    state = em_fit(masked, mech, config, EmOptions(two_stage=True))
    assert np.allclose(state.params.beta, cc.beta)
    full = em_fit(masked, mech, config)
    # the accelerator keeps consistency with the full fit on the shared models
    assert np.max(np.abs(state.params.alpha - full.params.alpha)) < 0.3


def test_monotone_branch_uses_complete_cases():
    cfg, masked, oracle, mech, config = _scenario("A.II", 2000, 14)
    forced = tuple(
        UnitRecord(t=r.t, x=r.x, m=r.m,
                   y=(ABSENT if r.r_m == 0 else r.y),
                   r_m=r.r_m, r_y=(0 if r.r_m == 0 else r.r_y))
        for r in masked.records)
    ds = Dataset(records=forced, schema=masked.schema)
    state = em_fit(ds, MnarMechanism("A2", monotone=True), config)
    assert state.converged
    cc = complete_case_fit(ds, config)
    assert np.allclose(state.params.alpha, cc.alpha)
    assert np.allclose(state.params.beta, cc.beta)
    assert state.params.lam[1] == 0.0  # ignorable mediator missingness
    with pytest.raises(ConfigError):
        em_fit(masked, MnarMechanism("A2", monotone=True), config)


def test_separation_error_names_model():
    rng = np.random.default_rng(0)
    n = 60
    x = rng.standard_normal(n)
    t = (rng.random(n) < 0.5).astype(int)
    m = (rng.random(n) < 0.5).astype(int)
    y = (rng.random(n) < expit(m - t)).astype(int)
    rm = t.copy()  # response perfectly predicted by treatment
    recs = tuple(UnitRecord(t=int(t[i]), x=(float(x[i]),),
                            m=int(m[i]) if rm[i] else ABSENT, y=int(y[i]))
                 for i in range(n))
    ds = Dataset(records=recs, schema=(CovariateSpec("x"),))
    with pytest.raises(glm.SeparationError, match="mediator-missingness"):
        em_fit(ds, A1, ModelConfig("logistic", "logistic"))


def test_em_rejects_ignorable_mechanisms():
    cfg, masked, *_ = _scenario("A.I", 50, 0)
    with pytest.raises(ConfigError):
        em_fit(masked, MnarMechanism("MCAR"), ModelConfig("logistic", "logistic"))


def test_complete_case_requires_complete_cases():
    recs = tuple(UnitRecord(t=1, x=(), m=ABSENT, y=0) for _ in range(4))
    from mnar_mediation.em import EmError
    with pytest.raises(EmError):
        complete_case_fit(Dataset(records=recs), ModelConfig("logistic", "logistic"))


def test_cc_consistent_under_mcar():
    cfg = ScenarioConfig.from_name("A.II", n=100_000, seed=77,
                                   lam=(1.2, 0, 0, 0), gamma=(1.2, 0, 0, 0))
    cfg = ScenarioConfig(setup="A", mechanism="MCAR", dependent=True,
                         n=100_000, lam=(1.2, 0, 0, 0), gamma=(1.2, 0, 0, 0),
                         seed=77)
    masked, _ = generate(cfg)
    cc = complete_case_fit(masked, ScenarioConfig.from_name("A.II").model_config())
    assert np.max(np.abs(cc.alpha - np.array([0, 1, 1]))) < 0.05
    assert np.max(np.abs(cc.beta - np.array([0, -1, 1, -1, 1]))) < 0.08


def test_mar_imputation_consistent_under_mar():
    cfg = ScenarioConfig(setup="A", mechanism="MAR", dependent=True,
                         n=100_000, seed=31)
    masked, _ = generate(cfg)
    config = ScenarioConfig.from_name("A.II").model_config()
    pooled = mar_impute_fit(masked, config, n_imputations=5, seed=3)
    assert np.max(np.abs(pooled.alpha - np.array([0, 1, 1]))) < 0.05
    assert np.max(np.abs(pooled.beta - np.array([0, -1, 1, -1, 1]))) < 0.08


def test_mar_imputation_no_missingness_equals_mle():
    cfg = ScenarioConfig.from_name("A.II", n=500, seed=5,
                                   lam=(50.0, 0, 0, 0), gamma=(50.0, 0, 0, 0))
    masked, _ = generate(cfg)
    config = cfg.model_config()
    pooled = mar_impute_fit(masked, config, n_imputations=3, seed=1)
    cc = complete_case_fit(masked, config)
    assert np.allclose(pooled.alpha, cc.alpha)
    assert np.allclose(pooled.beta, cc.beta)


def test_self_consistency_at_scale():
    # at n = 100k every generating coefficient is recovered closely
    cfg, masked, oracle, mech, config = _scenario("A.II", 100_000, 55)
    state = em_fit(masked, mech, config,
                   EmOptions(loglik_tol=1e-7, param_tol=1e-5))
    assert np.max(np.abs(state.params.alpha - np.array(cfg.alpha))) < 0.06
    assert np.max(np.abs(state.params.beta - np.array(cfg.beta))) < 0.08
    assert np.max(np.abs(state.params.lam - np.array(cfg.lam))) < 0.25
    assert np.max(np.abs(state.params.gamma - np.array(cfg.gamma))) < 0.10
