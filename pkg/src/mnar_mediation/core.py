"""Shared data model: units, datasets, missingness mechanisms, model families.

A unit carries a binary treatment, a covariate vector, a possibly missing
mediator and outcome, and the two response indicators.  Missing values are
represented by the ``ABSENT`` sentinel (``None``), never by a magic number.
Categorical covariates may carry an explicit ``"missing"`` level; numeric
covariates must be fully observed (callers recode before ingestion).

Design-matrix columns follow schema declaration order and are stable across
runs, so fitted coefficients are comparable between datasets with the same
schema.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

ABSENT = None

MECHANISMS = ("MCAR", "MAR", "A1", "A2", "A3", "A4")

MEDIATOR_MODELS = ("logistic", "multinomial", "linear_gaussian")
OUTCOME_MODELS = ("logistic", "linear_gaussian", "two_part_gamma",
                  "two_part_lognormal")

# Regressor feeding the outcome-missingness model, by mechanism tag.
RY_REGRESSORS = {"A2": "rm", "A3": "y", "A4": "m"}


class SchemaError(ValueError):
    """A value does not conform to the declared schema."""


class LatentValueRequiredError(ValueError):
    """A design row needs a mediator/outcome value that is ABSENT."""


class ConfigError(ValueError):
    """Incompatible model configuration."""


@dataclass(frozen=True)
class CovariateSpec:
    """Declaration of one covariate column: numeric, or categorical with levels."""

    name: str
    kind: str = "numeric"  # "numeric" | "categorical"
    levels: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in ("numeric", "categorical"):
            raise SchemaError(f"unknown covariate kind {self.kind!r}")
        if self.kind == "categorical" and len(self.levels) < 2:
            raise SchemaError(f"categorical covariate {self.name!r} needs >= 2 levels")

    @property
    def width(self) -> int:
        """Number of design columns this covariate expands to."""
        return 1 if self.kind == "numeric" else len(self.levels) - 1

    def encode(self, value) -> list[float]:
        if self.kind == "numeric":
            if value is ABSENT:
                raise SchemaError(
                    f"numeric covariate {self.name!r} is missing; recode to a "
                    "categorical level before ingestion")
            return [float(value)]
        if value not in self.levels:
            raise SchemaError(
                f"unknown level {value!r} for covariate {self.name!r}")
        idx = self.levels.index(value)
        row = [0.0] * (len(self.levels) - 1)
        if idx > 0:
            row[idx - 1] = 1.0
        return row


@dataclass(frozen=True)
class ValueKind:
    """Support declaration for the mediator or outcome."""

    base: str  # "binary" | "categorical" | "continuous" | "two_part_nonnegative"
    levels: int | None = None

    def __post_init__(self):
        if self.base == "categorical" and (self.levels is None or self.levels < 2):
            raise SchemaError("categorical kind needs a level count >= 2")

    @property
    def is_discrete(self) -> bool:
        return self.base in ("binary", "categorical")

    @property
    def n_levels(self) -> int:
        if self.base == "binary":
            return 2
        if self.base == "categorical":
            return self.levels
        raise SchemaError(f"{self.base} kind has no finite level count")


BINARY = ValueKind("binary")
CONTINUOUS = ValueKind("continuous")
TWO_PART = ValueKind("two_part_nonnegative")


@dataclass(frozen=True)
class UnitRecord:
    """One observation: treatment, covariates, mediator/outcome with indicators.

    ``r_m``/``r_y`` default to presence of ``m``/``y``.  In a masked dataset
    ``r_m == 1`` iff ``m is not ABSENT`` (same for the outcome); oracle copies
    produced by the simulator keep the latent values alongside ``r = 0``.
    """

    t: int
    x: tuple
    m: object = ABSENT
    y: object = ABSENT
    r_m: int | None = None
    r_y: int | None = None

    def __post_init__(self):
        if self.t not in (0, 1):
            raise SchemaError(f"treatment must be 0/1, got {self.t!r}")
        if self.r_m is None:
            object.__setattr__(self, "r_m", 0 if self.m is ABSENT else 1)
        if self.r_y is None:
            object.__setattr__(self, "r_y", 0 if self.y is ABSENT else 1)
        if self.r_m not in (0, 1) or self.r_y not in (0, 1):
            raise SchemaError("response indicators must be 0/1")


@dataclass(frozen=True)
class MnarMechanism:
    """Missingness mechanism in force.

    Tags: MCAR and MAR are ignorable baselines used for data generation;
    A1 = mediator-only missingness driven by the mediator value, outcome fully
    observed; A2 = outcome missingness driven by mediator missingness;
    A3 = outcome missingness driven by the outcome value itself;
    A4 = outcome missingness driven by the mediator value.

    ``monotone`` marks the A2 sub-case where a missing mediator implies a
    missing outcome; the joint is then only recoverable from complete cases
    under the additional ignorability of mediator missingness.
    """

    tag: str
    monotone: bool = False

    def __post_init__(self):
        if self.tag not in MECHANISMS:
            raise ConfigError(f"unknown mechanism {self.tag!r}")
        if self.monotone and self.tag != "A2":
            raise ConfigError("monotone flag applies to A2 only")

    @property
    def has_ry_model(self) -> bool:
        return self.tag in ("A2", "A3", "A4")

    @property
    def ry_regressor(self) -> str | None:
        return RY_REGRESSORS.get(self.tag)


@dataclass(frozen=True)
class Dataset:
    """Ordered unit records plus schema and support declarations.

    ``latent_complete`` marks an oracle copy from the simulator: mediator and
    outcome values are all present while the response indicators record what
    a masked analysis dataset would contain.
    """

    records: tuple[UnitRecord, ...]
    schema: tuple[CovariateSpec, ...] = ()
    mediator_kind: ValueKind = BINARY
    outcome_kind: ValueKind = BINARY
    latent_complete: bool = False

    def __post_init__(self):
        if len(self.records) < 1:
            raise SchemaError("dataset needs at least one record")
        for i, rec in enumerate(self.records):
            if len(rec.x) != len(self.schema):
                raise SchemaError(
                    f"record {i} has {len(rec.x)} covariates; schema declares "
                    f"{len(self.schema)}")
            for spec, value in zip(self.schema, rec.x):
                spec.encode(value)
            self._check_value(i, rec.m, rec.r_m, self.mediator_kind, "mediator")
            self._check_value(i, rec.y, rec.r_y, self.outcome_kind, "outcome")

    def _check_value(self, i, value, indicator, kind: ValueKind, what: str):
        present = value is not ABSENT
        if not self.latent_complete and present != (indicator == 1):
            raise SchemaError(
                f"record {i}: {what} presence does not match its indicator")
        if self.latent_complete and not present:
            raise SchemaError(f"record {i}: oracle copy is missing the {what}")
        if present and kind.is_discrete:
            if value not in range(kind.n_levels):
                raise SchemaError(
                    f"record {i}: {what} value {value!r} outside "
                    f"0..{kind.n_levels - 1}")
        if present and kind.base == "two_part_nonnegative" and value < 0:
            raise SchemaError(f"record {i}: {what} must be nonnegative")

    @property
    def n(self) -> int:
        return len(self.records)

    def mask(self) -> "Dataset":
        """Apply the response indicators, turning an oracle copy into analysis data."""
        recs = tuple(
            replace(r, m=(r.m if r.r_m else ABSENT), y=(r.y if r.r_y else ABSENT))
            for r in self.records)
        return replace(self, records=recs, latent_complete=False)


@dataclass(frozen=True)
class ModelConfig:
    """Component-model families and the missingness-model regressor choice.

    The mediator-missingness model is always logistic in (mediator, treatment,
    covariates).  The outcome-missingness regressor must match the mechanism:
    "rm" under A2, "y" (or "h", the positivity indicator of a two-part
    outcome) under A3, "m" under A4, absent under A1.  ``ry_fixed`` pins
    sensitivity offsets (coefficient values for extra regressors that are held
    fixed rather than estimated); regressors pinned at 0 are pruned so a zero
    grid cell is computationally identical to the base model.
    """

    mediator_model: str
    outcome_model: str
    ry_regressor: str | None = None
    interaction: bool = True
    ry_fixed: tuple[tuple[str, float], ...] = ()

    def __post_init__(self):
        if self.mediator_model not in MEDIATOR_MODELS:
            raise ConfigError(f"unknown mediator model {self.mediator_model!r}")
        if self.outcome_model not in OUTCOME_MODELS:
            raise ConfigError(f"unknown outcome model {self.outcome_model!r}")
        if self.ry_regressor not in (None, "rm", "y", "h", "m"):
            raise ConfigError(f"unknown ry regressor {self.ry_regressor!r}")
        if self.ry_regressor == "h" and not self.two_part:
            raise ConfigError("the 'h' regressor requires a two-part outcome")
        pruned = tuple((k, v) for k, v in self.ry_fixed if v != 0.0)
        object.__setattr__(self, "ry_fixed", pruned)
        for name, _ in self.ry_fixed:
            if name not in ("m", "h", "y"):
                raise ConfigError(f"unknown fixed ry term {name!r}")

    @property
    def two_part(self) -> bool:
        return self.outcome_model in ("two_part_gamma", "two_part_lognormal")

    def validate_for(self, mech: MnarMechanism, ds: Dataset,
                     allow_rank_deficient: bool = False) -> None:
        """Reject mechanism/model combinations that cannot identify the joint.

        Under A3 the two identification systems require the mediator and
        outcome to span supports of equal size; a binary mediator with a
        continuous outcome (or the reverse) leaves the outcome-missingness
        odds underdetermined.  Pass ``allow_rank_deficient=True`` to fit the
        parametric model anyway (estimates then lean entirely on the
        parametric form and may not recover the truth).
        """
        if mech.has_ry_model:
            expected = "h" if (mech.tag == "A3" and self.two_part) else mech.ry_regressor
            if self.ry_regressor != expected and not self.ry_fixed:
                raise ConfigError(
                    f"mechanism {mech.tag} requires ry regressor {expected!r}, "
                    f"got {self.ry_regressor!r}")
        elif self.ry_regressor is not None:
            raise ConfigError(f"mechanism {mech.tag} has no outcome-missingness model")
        if mech.tag == "A3" and not allow_rank_deficient:
            m_disc = ds.mediator_kind.is_discrete
            y_disc = ds.outcome_kind.is_discrete or self.two_part
            m_card = ds.mediator_kind.n_levels if m_disc else None
            y_card = (2 if self.two_part else
                      (ds.outcome_kind.n_levels if y_disc else None))
            if (m_disc != y_disc) or (m_disc and m_card != y_card):
                raise ConfigError(
                    "outcome-dependent outcome missingness needs the mediator "
                    "and outcome supports to have matching dimension (equal "
                    "level counts, or both continuous); this combination "
                    "cannot be identified without leaning on the parametric "
                    "form. Pass allow_rank_deficient=True to fit regardless, "
                    "or use the positivity indicator of a two-part outcome.")
        if self.two_part and ds.outcome_kind.base != "two_part_nonnegative":
            raise ConfigError("two-part outcome model needs a nonnegative outcome")
        if mech.tag == "A1":
            if not ds.latent_complete and any(r.r_y == 0 for r in ds.records):
                raise ConfigError("mechanism A1 assumes a fully observed outcome")

    @staticmethod
    def for_mechanism(mech: MnarMechanism, mediator_model: str,
                      outcome_model: str, interaction: bool = True,
                      ry_fixed: Sequence[tuple[str, float]] = ()) -> "ModelConfig":
        two_part = outcome_model in ("two_part_gamma", "two_part_lognormal")
        reg = mech.ry_regressor
        if reg == "y" and two_part:
            reg = "h"
        return ModelConfig(mediator_model, outcome_model, ry_regressor=reg,
                           interaction=interaction, ry_fixed=tuple(ry_fixed))


@dataclass
class FittedParams:
    """Coefficient vectors per component model, aligned with a ModelConfig.

    ``alpha``: mediator model (multinomial stores a (J-1, p) matrix);
    ``beta``: outcome model (two-part: the positive-part location model);
    ``delta``: two-part hurdle; ``lam``: mediator-missingness model;
    ``gamma``: outcome-missingness model (None under A1);
    ``sigma_m``/``sigma_y``: Gaussian scales (``sigma_y`` is the log-scale
    residual SD for a two-part log-normal outcome); ``nu``: Gamma shape.
    """

    alpha: object = None
    beta: object = None
    lam: object = None
    gamma: object = None
    delta: object = None
    sigma_m: float | None = None
    sigma_y: float | None = None
    nu: float | None = None

    def __post_init__(self):
        for name in ("sigma_m", "sigma_y", "nu"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ConfigError(f"{name} must be positive, got {v!r}")


# ---------------------------------------------------------------------------
# Design rows


def covariate_row(schema: Sequence[CovariateSpec], x: tuple) -> list[float]:
    out: list[float] = []
    for spec, value in zip(schema, x):
        out.extend(spec.encode(value))
    return out


def _mediator_block(m, kind: ValueKind) -> list[float]:
    if m is ABSENT:
        raise LatentValueRequiredError(
            "mediator value required for this design row; impute first")
    if kind.base == "categorical":
        row = [0.0] * (kind.n_levels - 1)
        if m > 0:
            row[m - 1] = 1.0
        return row
    return [float(m)]


def build_design_row(record: UnitRecord, which_model: str, config: ModelConfig,
                     schema: Sequence[CovariateSpec],
                     mediator_kind: ValueKind = BINARY) -> list[float]:
    """Covariate row (intercept, regressors, interactions) for one component model.

    Deterministic given schema order.  ``which_model`` is one of "mediator",
    "outcome", "hurdle", "rm", "ry".  Rows that need a latent mediator or
    outcome value raise ``LatentValueRequiredError``; the EM machinery builds
    its rows from imputed completions instead.
    """
    xrow = covariate_row(schema, record.x)
    t = float(record.t)
    if which_model == "mediator":
        return [1.0, t] + xrow
    if which_model in ("outcome", "hurdle"):
        mblock = _mediator_block(record.m, mediator_kind)
        row = [1.0] + mblock + [t]
        if config.interaction:
            row += [v * t for v in mblock]
        return row + xrow
    if which_model == "rm":
        return [1.0] + _mediator_block(record.m, mediator_kind) + [t] + xrow
    if which_model == "ry":
        reg = config.ry_regressor
        if reg is None:
            raise ConfigError("this configuration has no outcome-missingness model")
        if reg == "rm":
            block = [float(record.r_m)]
        elif reg == "m":
            block = _mediator_block(record.m, mediator_kind)
        elif reg == "y":
            if record.y is ABSENT:
                raise LatentValueRequiredError(
                    "outcome value required for this design row; impute first")
            block = [float(record.y)]
        else:  # "h"
            if record.y is ABSENT:
                raise LatentValueRequiredError(
                    "outcome value required for this design row; impute first")
            block = [1.0 if record.y > 0 else 0.0]
        return [1.0] + block + [t] + xrow
    raise ConfigError(f"unknown model selector {which_model!r}")


def design_width(which_model: str, config: ModelConfig,
                 schema: Sequence[CovariateSpec],
                 mediator_kind: ValueKind = BINARY) -> int:
    xw = sum(spec.width for spec in schema)
    mw = (mediator_kind.n_levels - 1) if mediator_kind.base == "categorical" else 1
    if which_model == "mediator":
        return 2 + xw
    if which_model in ("outcome", "hurdle"):
        return 2 + mw * (2 if config.interaction else 1) + xw
    if which_model == "rm":
        return 2 + mw + xw
    if which_model == "ry":
        rw = mw if config.ry_regressor == "m" else 1
        return 2 + rw + xw
    raise ConfigError(f"unknown model selector {which_model!r}")


# ---------------------------------------------------------------------------
# Missingness pattern counts


def missingness_pattern_counts(ds: Dataset) -> dict[int, dict[tuple[int, int], int]]:
    """Counts of the four (r_m, r_y) cells per treatment arm."""
    out: dict[int, dict[tuple[int, int], int]] = {}
    for rec in ds.records:
        arm = out.setdefault(rec.t, {})
        key = (rec.r_m, rec.r_y)
        arm[key] = arm.get(key, 0) + 1
    return out


# ---------------------------------------------------------------------------
# CSV ingestion / serialization


@dataclass(frozen=True)
class ColumnMapping:
    """Which CSV column plays which role; covariates listed in schema order."""

    t: str = "t"
    m: str = "m"
    y: str = "y"
    covariates: tuple[str, ...] = ()
    r_m: str | None = None
    r_y: str | None = None
    absent_token: str = ""


def _parse_value(text: str, kind: ValueKind, token: str):
    if text == token:
        return ABSENT
    if kind.is_discrete:
        return int(text)
    return float(text)


def _format_value(value, token: str) -> str:
    if value is ABSENT:
        return token
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


def load_csv(path_or_file, mapping: ColumnMapping,
             schema: Sequence[CovariateSpec],
             mediator_kind: ValueKind = BINARY,
             outcome_kind: ValueKind = BINARY) -> Dataset:
    """Read one unit per row.  Empty cells (or the configured sentinel token)
    denote ABSENT; response-indicator columns are optional and derived from
    ABSENT when omitted."""
    if hasattr(path_or_file, "read"):
        rows = list(csv.DictReader(path_or_file))
    else:
        with open(path_or_file, newline="") as fh:
            rows = list(csv.DictReader(fh))
    token = mapping.absent_token
    records = []
    for row in rows:
        x = []
        for spec, col in zip(schema, mapping.covariates):
            raw = row[col]
            if spec.kind == "numeric":
                x.append(float(raw))
            else:
                x.append(raw)
        m = _parse_value(row[mapping.m], mediator_kind, token)
        y = _parse_value(row[mapping.y], outcome_kind, token)
        r_m = int(row[mapping.r_m]) if mapping.r_m else None
        r_y = int(row[mapping.r_y]) if mapping.r_y else None
        records.append(UnitRecord(t=int(row[mapping.t]), x=tuple(x), m=m, y=y,
                                  r_m=r_m, r_y=r_y))
    return Dataset(records=tuple(records), schema=tuple(schema),
                   mediator_kind=mediator_kind, outcome_kind=outcome_kind)


def save_csv(ds: Dataset, path_or_file, mapping: ColumnMapping | None = None) -> None:
    if mapping is None:
        mapping = ColumnMapping(covariates=tuple(s.name for s in ds.schema))
    header = ([mapping.t] + list(mapping.covariates) + [mapping.m, mapping.y]
              + [mapping.r_m or "r_m", mapping.r_y or "r_y"])
    own = not hasattr(path_or_file, "write")
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        writer = csv.writer(fh)
        writer.writerow(header)
        token = mapping.absent_token
        for rec in ds.records:
            row = [str(rec.t)]
            row += [_format_value(v, token) for v in rec.x]
            row += [_format_value(rec.m, token), _format_value(rec.y, token),
                    str(rec.r_m), str(rec.r_y)]
            writer.writerow(row)
    finally:
        if own:
            fh.close()


def dataset_to_csv_text(ds: Dataset, mapping: ColumnMapping | None = None) -> str:
    buf = io.StringIO()
    save_csv(ds, buf, mapping)
    return buf.getvalue()
