"""Generators: determinism, masking, marginals, missing rates, true effects."""

import numpy as np
import pytest

from mnar_mediation import glm
from mnar_mediation.core import ABSENT, ConfigError, missingness_pattern_counts
from mnar_mediation.dgp import (ScenarioConfig, TwoPartScenarioConfig,
                                generate, generate_two_part, replicate_seed,
                                true_effects)


def test_table_defaults_match_reference_rows():
    a = ScenarioConfig.from_name("A.I")
    assert a.alpha == (0.0, 1.0, 1.0)
    assert a.beta == (0.0, -1.0, 1.0, -1.0, 1.0)
    assert a.lam == (0.3, 2.0, 1.0, 1.0)
    a0 = ScenarioConfig.from_name("A.III(0)")
    assert a0.beta == (0.0, 0.0, 1.0, 0.0, 1.0)
    assert a0.gamma == (0.3, 2.0, 1.0, 1.0)
    a3 = ScenarioConfig.from_name("A.III")
    assert a3.gamma == (0.6, 2.0, 1.0, 1.0)
    b3 = ScenarioConfig.from_name("B.III")
    assert b3.gamma == (0.8, -1.0, 1.0, 1.0)
    c = ScenarioConfig.from_name("C.II")
    assert c.lam == (1.4, 1.0, 1.0, 1.0)
    assert c.beta == (0.0, 1.0, 1.0, 1.0, 1.0)
    e = ScenarioConfig.from_name("E.IV")
    assert e.beta == (0.0, 1.0, -1.0, 1.0, 1.0, -1.0, 1.0)
    assert e.lam == (0.0, 2.0, 2.0, 1.0, 1.0)


def test_setting_e_pairs_with_mediator_side_mechanisms_only():
    with pytest.raises(ConfigError):
        ScenarioConfig.from_name("E.II")
    with pytest.raises(ConfigError):
        ScenarioConfig.from_name("E.I(0)")


def test_generation_is_deterministic():
    cfg = ScenarioConfig.from_name("B.II", n=400, seed=13)
    m1, o1 = generate(cfg)
    m2, o2 = generate(cfg)
    assert m1.records == m2.records
    assert o1.records == o2.records


def test_masking_agrees_with_oracle_on_observed_fields():
    cfg = ScenarioConfig.from_name("A.II", n=500, seed=2)
    masked, oracle = generate(cfg)
    assert oracle.mask().records == masked.records
    for mr, orec in zip(masked.records, oracle.records):
        assert (mr.t, mr.x, mr.r_m, mr.r_y) == (orec.t, orec.x, orec.r_m, orec.r_y)
        if mr.r_m:
            assert mr.m == orec.m
        else:
            assert mr.m is ABSENT
        if mr.r_y:
            assert mr.y == orec.y


def test_marginals_at_scale():
    cfg = ScenarioConfig.from_name("A.I", n=1_000_000, seed=99)
    masked, _ = generate(cfg)
    t = np.array([r.t for r in masked.records])
    x = np.array([r.x[0] for r in masked.records])
    assert abs(t.mean() - 0.5) < 0.005
    assert abs(x.mean()) < 0.01


def test_missingness_switched_off_by_large_intercept():
    cfg = ScenarioConfig.from_name("A.II", n=300, seed=5,
                                   lam=(50.0, 0.0, 0.0, 0.0),
                                   gamma=(50.0, 0.0, 0.0, 0.0))
    masked, oracle = generate(cfg)
    assert masked.records == oracle.mask().records
    assert all(r.r_m == 1 and r.r_y == 1 for r in masked.records)
    assert masked.records == tuple(oracle.records)


@pytest.mark.parametrize("name", ["A.I", "A.II", "A.III", "A.IV"])
def test_missing_rates_in_target_band(name):
    cfg = ScenarioConfig.from_name(name, n=100_000, seed=31)
    masked, _ = generate(cfg)
    miss_m = np.mean([r.r_m == 0 for r in masked.records])
    assert 0.18 <= miss_m <= 0.27, miss_m
    if cfg.mechanism != "A1":
        miss_y = np.mean([r.r_y == 0 for r in masked.records])
        assert 0.18 <= miss_y <= 0.27, miss_y


def test_response_model_recovered_on_oracle_data():
    cfg = ScenarioConfig.from_name("A.I", n=1_000_000, seed=17)
    _, oracle = generate(cfg)
    m = np.array([r.m for r in oracle.records], dtype=float)
    t = np.array([r.t for r in oracle.records], dtype=float)
    x = np.array([r.x[0] for r in oracle.records])
    rm = np.array([r.r_m for r in oracle.records], dtype=float)
    X = np.column_stack([np.ones_like(m), m, t, x])
    lam_hat = glm.fit_logistic(X, rm)
    assert np.max(np.abs(lam_hat - np.array(cfg.lam))) < 0.02


def test_independent_variant_has_exactly_zero_nie():
    for name in ["A.I(0)", "C.II(0)"]:
        te = true_effects(ScenarioConfig.from_name(name), n_mc=20_000)
        assert te.nie == 0.0
        assert te.ate == te.nde


def test_linear_setup_closed_form():
    te = true_effects(ScenarioConfig.from_name("C.I"), n_mc=400_000)
    assert abs(te.nie - 2.0) <= 3 * te.se_nie
    assert abs(te.nde - 1.0) <= 3 * te.se_nde


@pytest.mark.parametrize("name", ["A.II", "B.III", "D.IV", "E.IV"])
def test_decomposition_of_true_effects(name):
    te = true_effects(ScenarioConfig.from_name(name), n_mc=50_000)
    assert te.ate == te.nie + te.nde


def test_replicate_seeds_are_stable_and_distinct():
    s0 = replicate_seed(42, 0).generate_state(2)
    s0b = replicate_seed(42, 0).generate_state(2)
    s1 = replicate_seed(42, 1).generate_state(2)
    assert np.array_equal(s0, s0b)
    assert not np.array_equal(s0, s1)


def test_two_part_patterns_near_reference_in_treated_arm():
    cfg = TwoPartScenarioConfig(n=5084, mechanism="A2", seed=1)
    masked, _ = generate_two_part(cfg)
    counts = missingness_pattern_counts(masked)[1]
    n1 = sum(counts.values())
    fracs = {k: v / n1 for k, v in counts.items()}
    assert abs(fracs[(0, 1)] - 0.1072) < 0.02
    assert abs(fracs[(1, 0)] - 0.1058) < 0.02
    assert abs(fracs[(0, 0)] - 0.0978) < 0.02
    assert abs(fracs[(1, 1)] - 0.6892) < 0.03


def test_two_part_outcome_has_zero_mass_and_skew():
    cfg = TwoPartScenarioConfig(n=4000, seed=9)
    masked, oracle = generate_two_part(cfg)
    y = np.array([r.y for r in oracle.records])
    assert np.all(y >= 0)
    zero_frac = np.mean(y == 0)
    assert 0.05 < zero_frac < 0.5
    pos = y[y > 0]
    assert np.mean(pos) > np.median(pos)  # right skew
    assert oracle.mask().records == masked.records
