"""Target-population treatment effects from trials with systematically missing covariates."""

from .data import Dataset, Record, complete_case, derive_patterns, validate
from .errors import CimetaError, ConfigError, DataError, NumericalError, PositivityError
from .estimators import (EstimateResult, estimate_dr, estimate_dr_sample_split, estimate_g_formula,
                         estimate_naive_pooled, estimate_weighting)
from .inference import BootstrapPlan, IntervalEstimate, bootstrap, resample
from .nuisance import NuisanceSpec, fit_nuisance
from .oracle import DiscretePopulation, exact_psi_outcome, exact_psi_weighting, sample_from
from .pipeline import EstimatorConfig, Statistic, estimate_contrast, run_estimator
from .simulation import SimScenario, run_study, simulate_dataset, true_psi
from .weights import WeightScheme, pattern_weights, solve_optimal_weights

__version__ = "0.1.0"
