"""Data model: records, schemas, design rows, pattern counts, CSV round trip."""

import io
import random

import numpy as np
import pytest

from mnar_mediation.core import (ABSENT, BINARY, CONTINUOUS, ColumnMapping,
                                 ConfigError, CovariateSpec, Dataset,
                                 LatentValueRequiredError, MnarMechanism,
                                 ModelConfig, SchemaError, UnitRecord,
                                 ValueKind, build_design_row,
                                 dataset_to_csv_text, load_csv,
                                 missingness_pattern_counts, save_csv)


def _config(mediator="logistic", outcome="logistic", ry=None, interaction=True):
    return ModelConfig(mediator, outcome, ry_regressor=ry, interaction=interaction)


def test_mediator_row_zero_regressors_keeps_intercept():
    rec = UnitRecord(t=0, x=(0.0,), m=0, y=1)
    row = build_design_row(rec, "mediator", _config(), (CovariateSpec("x"),))
    assert row == [1.0, 0.0, 0.0]


def test_outcome_row_with_interaction():
    rec = UnitRecord(t=1, x=(2.0,), m=1, y=0)
    row = build_design_row(rec, "outcome", _config(), (CovariateSpec("x"),))
    assert row == [1.0, 1.0, 1.0, 1.0, 2.0]


def test_categorical_missing_level_one_hot():
    spec = CovariateSpec("grp", "categorical", ("a", "b", "missing"))
    assert spec.encode("missing") == [0.0, 1.0]
    assert spec.encode("a") == [0.0, 0.0]
    assert spec.encode("b") == [1.0, 0.0]


def test_unknown_level_raises_schema_error():
    spec = CovariateSpec("grp", "categorical", ("a", "b"))
    with pytest.raises(SchemaError):
        spec.encode("z")


def test_numeric_covariate_may_not_be_missing():
    spec = CovariateSpec("x")
    with pytest.raises(SchemaError):
        spec.encode(ABSENT)


def test_design_row_requires_latent_values():
    rec = UnitRecord(t=1, x=(0.5,), m=ABSENT, y=1.0)
    with pytest.raises(LatentValueRequiredError):
        build_design_row(rec, "outcome", _config(outcome="linear_gaussian"),
                         (CovariateSpec("x"),))
    with pytest.raises(LatentValueRequiredError):
        build_design_row(rec, "rm", _config(), (CovariateSpec("x"),))


def test_design_rows_are_deterministic():
    rec = UnitRecord(t=1, x=(0.3, "b"), m=1, y=1)
    schema = (CovariateSpec("x"), CovariateSpec("g", "categorical", ("a", "b")))
    cfg = _config(ry="m")
    for which in ("mediator", "outcome", "rm", "ry"):
        assert build_design_row(rec, which, cfg, schema) == \
            build_design_row(rec, which, cfg, schema)


def test_ry_design_rows_by_regressor():
    rec = UnitRecord(t=1, x=(0.5,), m=1, y=3.0, r_m=1, r_y=1)
    schema = (CovariateSpec("x"),)
    assert build_design_row(rec, "ry", _config(ry="rm"), schema) == [1.0, 1.0, 1.0, 0.5]
    assert build_design_row(rec, "ry", _config(ry="m"), schema) == [1.0, 1.0, 1.0, 0.5]
    assert build_design_row(
        rec, "ry", _config(outcome="linear_gaussian", ry="y"), schema) == \
        [1.0, 3.0, 1.0, 0.5]
    hurdle = ModelConfig("logistic", "two_part_gamma", ry_regressor="h")
    assert build_design_row(rec, "ry", hurdle, schema) == [1.0, 1.0, 1.0, 0.5]


def test_record_indicator_consistency():
    with pytest.raises(SchemaError):
        Dataset(records=(UnitRecord(t=0, x=(), m=ABSENT, y=1, r_m=1),))
    with pytest.raises(SchemaError):
        UnitRecord(t=2, x=(), m=0, y=0)


def test_mechanism_tags():
    with pytest.raises(ConfigError):
        MnarMechanism("A9")
    with pytest.raises(ConfigError):
        MnarMechanism("A3", monotone=True)
    assert MnarMechanism("A2", monotone=True).monotone
    assert MnarMechanism("A1").ry_regressor is None
    assert MnarMechanism("A4").ry_regressor == "m"


def test_config_rejects_mechanism_mismatch():
    ds = Dataset(records=(UnitRecord(t=0, x=(), m=0, y=1),),
                 mediator_kind=BINARY, outcome_kind=BINARY)
    with pytest.raises(ConfigError):
        _config(ry="m").validate_for(MnarMechanism("A2"), ds)
    with pytest.raises(ConfigError):
        _config(ry="rm").validate_for(MnarMechanism("A1"), ds)


def test_a3_support_mismatch_rejected_unless_overridden():
    ds = Dataset(records=(UnitRecord(t=0, x=(), m=0, y=1.5),),
                 mediator_kind=BINARY, outcome_kind=CONTINUOUS)
    cfg = ModelConfig("logistic", "linear_gaussian", ry_regressor="y")
    with pytest.raises(ConfigError, match="matching dimension"):
        cfg.validate_for(MnarMechanism("A3"), ds)
    cfg.validate_for(MnarMechanism("A3"), ds, allow_rank_deficient=True)


def test_a1_requires_fully_observed_outcome():
    ds = Dataset(records=(UnitRecord(t=0, x=(), m=0, y=ABSENT),))
    with pytest.raises(ConfigError):
        _config().validate_for(MnarMechanism("A1"), ds)


def test_zero_sensitivity_offsets_are_pruned():
    cfg = ModelConfig("logistic", "two_part_gamma", ry_regressor="rm",
                      ry_fixed=(("m", 0.0), ("h", 2.0)))
    assert cfg.ry_fixed == (("h", 2.0),)


def test_pattern_counts_all_observed():
    recs = tuple(UnitRecord(t=1, x=(), m=0, y=1) for _ in range(5))
    counts = missingness_pattern_counts(Dataset(records=recs))
    assert counts == {1: {(1, 1): 5}}


def test_pattern_counts_direct():
    recs = tuple(UnitRecord(t=1, x=(), m=ABSENT, y=1) for _ in range(3)) + \
        tuple(UnitRecord(t=1, x=(), m=0, y=0) for _ in range(7))
    counts = missingness_pattern_counts(Dataset(records=recs))
    assert counts[1] == {(0, 1): 3, (1, 1): 7}


def test_pattern_counts_partition_arm_sizes():
    rng = random.Random(4)
    recs = []
    for _ in range(200):
        r_m, r_y = rng.randint(0, 1), rng.randint(0, 1)
        recs.append(UnitRecord(
            t=rng.randint(0, 1), x=(rng.random(),),
            m=rng.randint(0, 1) if r_m else ABSENT,
            y=rng.randint(0, 1) if r_y else ABSENT))
    ds = Dataset(records=tuple(recs), schema=(CovariateSpec("x"),))
    counts = missingness_pattern_counts(ds)
    for arm in (0, 1):
        arm_size = sum(1 for r in recs if r.t == arm)
        assert sum(counts[arm].values()) == arm_size


def _random_dataset(seed, n=60):
    rng = random.Random(seed)
    schema = (CovariateSpec("x"),
              CovariateSpec("grp", "categorical", ("a", "b", "missing")))
    recs = []
    for _ in range(n):
        r_m, r_y = rng.randint(0, 1), rng.randint(0, 1)
        recs.append(UnitRecord(
            t=rng.randint(0, 1),
            x=(rng.gauss(0, 1), rng.choice(["a", "b", "missing"])),
            m=rng.randint(0, 1) if r_m else ABSENT,
            y=rng.gauss(0, 3) if r_y else ABSENT))
    return Dataset(records=tuple(recs), schema=schema,
                   mediator_kind=BINARY, outcome_kind=CONTINUOUS)


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_csv_round_trip_is_bit_exact(seed):
    ds = _random_dataset(seed)
    text = dataset_to_csv_text(ds)
    mapping = ColumnMapping(covariates=("x", "grp"), r_m="r_m", r_y="r_y")
    back = load_csv(io.StringIO(text), mapping, ds.schema,
                    mediator_kind=ds.mediator_kind,
                    outcome_kind=ds.outcome_kind)
    assert back.records == ds.records
    assert dataset_to_csv_text(back) == text


def test_csv_indicators_derived_when_columns_omitted():
    ds = _random_dataset(7)
    text = dataset_to_csv_text(ds)
    mapping = ColumnMapping(covariates=("x", "grp"))  # no r_m / r_y columns
    back = load_csv(io.StringIO(text), mapping, ds.schema,
                    mediator_kind=ds.mediator_kind,
                    outcome_kind=ds.outcome_kind)
    assert [r.r_m for r in back.records] == [r.r_m for r in ds.records]
    assert [r.r_y for r in back.records] == [r.r_y for r in ds.records]


def test_csv_custom_absent_token():
    ds = _random_dataset(8, n=20)
    mapping = ColumnMapping(covariates=("x", "grp"), absent_token="NA")
    buf = io.StringIO()
    save_csv(ds, buf, mapping)
    text = buf.getvalue()
    assert "NA" in text
    back = load_csv(io.StringIO(text), mapping, ds.schema,
                    mediator_kind=ds.mediator_kind, outcome_kind=ds.outcome_kind)
    assert back.records == ds.records


def test_oracle_mask_round_trip():
    recs = (UnitRecord(t=1, x=(), m=1, y=0, r_m=0, r_y=1),
            UnitRecord(t=0, x=(), m=0, y=1, r_m=1, r_y=0))
    oracle = Dataset(records=recs, latent_complete=True)
    masked = oracle.mask()
    assert masked.records[0].m is ABSENT
    assert masked.records[0].y == 0
    assert masked.records[1].y is ABSENT
    for orig, new in zip(oracle.records, masked.records):
        assert (orig.r_m, orig.r_y) == (new.r_m, new.r_y)


def test_value_kind_levels():
    assert ValueKind("binary").n_levels == 2
    assert ValueKind("categorical", 3).n_levels == 3
    with pytest.raises(SchemaError):
        ValueKind("categorical")
    with pytest.raises(SchemaError):
        ValueKind("continuous").n_levels
