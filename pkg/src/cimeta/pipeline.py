"""End-to-end estimation: derive patterns, fit nuisances, choose weights, estimate.

An :class:`EstimatorConfig` is a plain picklable value, so the same pipeline
runs unchanged inside bootstrap replicates and worker processes.
"""

from dataclasses import dataclass, replace

from .data import complete_case
from .errors import ConfigError
from .estimators import (DR, DR_NORMALIZED, DR_SAMPLE_SPLIT, G_FORMULA, KINDS, NAIVE_POOLED,
                         WEIGHTING, WEIGHTING_NORMALIZED, contrast_result, estimate_dr,
                         estimate_dr_sample_split, estimate_g_formula, estimate_naive_pooled,
                         estimate_weighting)
from .glm import GAUSSIAN
from .nuisance import ALL_PARTS, OUTCOME, PARTICIPATION, TREATMENT, NuisanceSpec, fit_nuisance
from .weights import WeightScheme, pattern_weights

PARTS_NEEDED = {
    G_FORMULA: (OUTCOME,),
    WEIGHTING: (PARTICIPATION, TREATMENT),
    WEIGHTING_NORMALIZED: (PARTICIPATION, TREATMENT),
}


@dataclass(frozen=True)
class EstimatorConfig:
    """What to estimate and how.

    ``spec`` defaults to degree-2 outcome and participation models and a
    degree-1 treatment model over all covariates, with ``outcome_family``.
    """

    kind: str = DR
    spec: NuisanceSpec = None
    weights: WeightScheme = WeightScheme()
    complete_case: bool = False
    survey_mode: bool = False
    restrict_to_arm: bool = True
    outcome_family: str = GAUSSIAN
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown estimator {self.kind!r}; expected one of {KINDS}",
                              module="pipeline")
        object.__setattr__(self, "weights", WeightScheme.parse(self.weights))
        if self.survey_mode and self.kind == NAIVE_POOLED:
            raise ConfigError("survey mode does not apply to the naive pooled estimator",
                              module="pipeline")

    def spec_for(self, dataset):
        spec = self.spec
        if spec is None:
            spec = NuisanceSpec.polynomial(range(len(dataset.covariate_names)),
                                           outcome_family=self.outcome_family)
        if self.survey_mode and not spec.participation_uses_survey_weights:
            spec = replace(spec, participation_uses_survey_weights=True)
        return spec


def prepare(dataset, config, a):
    """The analysis dataset for arm ``a``: complete-case and arm restriction applied."""
    data = complete_case(dataset) if config.complete_case else dataset
    if config.restrict_to_arm:
        keep = data.trials_with_arm(a)
        if len(keep) < len(data.trial_ids):
            data = data.restrict_sources(keep)
    return data


def run_estimator(dataset, config, a):
    """Estimate the target-population mean of ``Y^a``."""
    if config.kind == NAIVE_POOLED:
        return estimate_naive_pooled(dataset, a)
    data = prepare(dataset, config, a)
    spec = config.spec_for(data)
    scheme = config.weights
    if config.kind == DR_SAMPLE_SPLIT:
        fits = fit_nuisance(data, spec, [a]) if scheme.needs_pilot else None
        w = pattern_weights(scheme, data, fits, a)
        result = estimate_dr_sample_split(data, spec, a, w, config.seed,
                                          survey_mode=config.survey_mode)
    else:
        parts = ALL_PARTS if scheme.needs_pilot else PARTS_NEEDED.get(config.kind, ALL_PARTS)
        fits = fit_nuisance(data, spec, [a], parts)
        w = pattern_weights(scheme, data, fits, a)
        sm = config.survey_mode
        if config.kind == G_FORMULA:
            result = estimate_g_formula(data, fits, a, w, sm)
        elif config.kind in (WEIGHTING, WEIGHTING_NORMALIZED):
            result = estimate_weighting(data, fits, a, w, config.kind == WEIGHTING_NORMALIZED, sm)
        else:
            result = estimate_dr(data, fits, a, w, config.kind == DR_NORMALIZED, sm)
    return replace(result, complete_case=config.complete_case)


def estimate_contrast(dataset, config, a, a_prime):
    """``psi(a) - psi(a')``; each arm uses its own trials, fits and pattern weights."""
    return contrast_result(run_estimator(dataset, config, a), run_estimator(dataset, config, a_prime))


@dataclass(frozen=True)
class Statistic:
    """Picklable callable mapping a dataset to a scalar estimate."""

    config: EstimatorConfig
    a: object
    a_prime: object = None

    def result(self, dataset):
        if self.a_prime is None:
            return run_estimator(dataset, self.config, self.a)
        return estimate_contrast(dataset, self.config, self.a, self.a_prime)

    def __call__(self, dataset):
        return self.result(dataset).value
