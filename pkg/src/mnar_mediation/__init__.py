"""Causal mediation analysis with the mediator and outcome missing not at random.

Exact identification for discrete data, parametric EM with fractional
imputation, effect evaluation via the mediation formula, bootstrap inference,
sensitivity analysis, and a replicated simulation-study harness.
"""

from .core import (ABSENT, BINARY, CONTINUOUS, TWO_PART, ColumnMapping,
                   ConfigError, CovariateSpec, Dataset, FittedParams,
                   MnarMechanism, ModelConfig, SchemaError, UnitRecord,
                   ValueKind, build_design_row, load_csv,
                   missingness_pattern_counts, save_csv)
from .dgp import (ScenarioConfig, TrueEffects, TwoPartScenarioConfig,
                  generate, generate_two_part, true_effects)
from .effects import EffectEstimates, effects_from, mean_outcome, nested_mean
from .em import (EmOptions, EmState, complete_case_fit, em_fit,
                 mar_impute_fit, observed_loglik, oracle_fit)
from .harness import (BootstrapResult, SensitivityGrid, StudyReport,
                      bootstrap_ci, compare_models, run_study,
                      sensitivity_analysis)
from .ident import (CounterexampleSpec, ObservableTable, OddsSolution,
                    StructuralParams, forward_observables, load_counterexample,
                    rank_diagnostic, recover_joint, solve_identification,
                    tabulate, verify_counterexample)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
