"""Per-pattern nuisance models and transport weights.

For pattern ``k`` and treatment ``a`` three regressions are fit on the
pattern subsample (its trials plus the target sample), using only the
pattern's observed covariates:

* outcome ``g[a, k]``: outcome on covariates among pattern trial records with ``A == a``;
* participation ``p[k]``: ``I(S in pattern)`` on covariates over the subsample;
* treatment ``e[a, k]``: ``I(A == a)`` on covariates among pattern trial records.

Probabilities are clamped to ``[1e-6, 1 - 1e-6]`` where they are used, never
inside the stored fit.
"""

from dataclasses import dataclass, field, replace
from itertools import combinations

import numpy as np

from .errors import DataError, NumericalError, PositivityError
from .glm import BINOMIAL, GAUSSIAN, ModelSpec, SaturatedSpec, fit_glm

PROB_BOUNDS = (1e-6, 1 - 1e-6)
DIAGNOSTIC_GRID = 1000

OUTCOME, PARTICIPATION, TREATMENT = "outcome", "participation", "treatment"
ALL_PARTS = (OUTCOME, PARTICIPATION, TREATMENT)


@dataclass(frozen=True)
class ConstantModel:
    """A fixed prediction, used unclamped (reduction checks, single-arm patterns)."""

    value: float

    def predict_covariates(self, covariates, names=None):
        return np.full(len(covariates), float(self.value))


@dataclass(frozen=True)
class NuisanceSpec:
    """Model classes for the three nuisance regressions.

    Templates may reference any covariate; they are restricted per pattern to
    the observed covariates before fitting.
    """

    outcome_spec: object
    participation_spec: object
    treatment_spec: object
    participation_uses_survey_weights: bool = False

    def __post_init__(self):
        object.__setattr__(self, "participation_spec", self.participation_spec.with_family(BINOMIAL))
        object.__setattr__(self, "treatment_spec", self.treatment_spec.with_family(BINOMIAL))

    @classmethod
    def polynomial(cls, covariates, outcome_degree=2, participation_degree=2, treatment_degree=1,
                   outcome_family=GAUSSIAN, survey_weights=False, linear_only=()):
        covariates = list(covariates)
        return cls(
            ModelSpec.polynomial(covariates, outcome_degree, outcome_family, linear_only),
            ModelSpec.polynomial(covariates, participation_degree, BINOMIAL, linear_only),
            ModelSpec.polynomial(covariates, treatment_degree, BINOMIAL, linear_only),
            survey_weights,
        )

    @classmethod
    def saturated(cls, covariates, outcome_family=GAUSSIAN, survey_weights=False):
        covariates = tuple(covariates)
        return cls(SaturatedSpec(covariates, outcome_family), SaturatedSpec(covariates, BINOMIAL),
                   SaturatedSpec(covariates, BINOMIAL), survey_weights)

    def for_pattern(self, pattern):
        observed = pattern.observed_covariates
        return NuisanceSpec(
            self.outcome_spec.restrict(observed),
            self.participation_spec.restrict(observed),
            self.treatment_spec.restrict(observed),
            self.participation_uses_survey_weights,
        )


def _check_fit(fit, what):
    if not fit.converged:
        raise NumericalError(f"{what} did not converge (max |score| {fit.max_abs_score:.3g} "
                             f"after {fit.iterations} iterations)", module="nuisance",
                             hint="simplify the model or check for separation")
    return fit


def fit_outcome_model(dataset, k, a, spec):
    """Arm-stratified outcome regression on the pattern's trial records with treatment ``a``."""
    view = dataset.view(k)
    spec = spec.restrict(view.pattern.observed_covariates)
    rows = ~view.target & (view.treatment == dataset.code(a))
    if rows.sum() < 2:
        raise PositivityError(
            f"pattern {k}: {int(rows.sum())} trial records with treatment {a!r}; need >= 2 (positivity)",
            module="nuisance", hint="restrict the analysis to trials that include this treatment")
    fit = fit_glm(spec, view.covariates[rows], view.outcome[rows], names=dataset.covariate_names)
    return _check_fit(fit, f"outcome model (a={a!r}, k={k})")


def _participation_weights(view, use_survey_weights):
    return np.where(view.target, view.survey_weight, 1.0) if use_survey_weights else np.ones(len(view.rows))


def fit_participation_model(dataset, k, spec, use_survey_weights=False):
    """Logistic model for trial membership ``I(S in pattern k)`` over the pattern subsample."""
    view = dataset.view(k)
    spec = spec.restrict(view.pattern.observed_covariates).with_family(BINOMIAL)
    label = (~view.target).astype(float)
    if label.min() == label.max():
        raise DataError(f"pattern {k}: participation labels are all {int(label[0])}",
                        module="nuisance")
    weights = _participation_weights(view, use_survey_weights)
    fit = fit_glm(spec, view.covariates, label, weights, names=dataset.covariate_names)
    return _check_fit(fit, f"participation model (k={k})")


def fit_treatment_model(dataset, k, a, spec):
    """One-vs-rest logistic model for ``I(A == a)`` among the pattern's trial records."""
    view = dataset.view(k)
    spec = spec.restrict(view.pattern.observed_covariates).with_family(BINOMIAL)
    trial = ~view.target
    label = (view.treatment[trial] == dataset.code(a)).astype(float)
    if label.min() == label.max():
        raise PositivityError(
            f"pattern {k}: treatment {a!r} indicator is constant ({int(label[0])}) among trial records "
            "(positivity)", module="nuisance")
    fit = fit_glm(spec, view.covariates[trial], label, names=dataset.covariate_names)
    return _check_fit(fit, f"treatment model (a={a!r}, k={k})")


def _clamp(model, values):
    if isinstance(model, ConstantModel):
        return values
    return np.clip(values, *PROB_BOUNDS)


@dataclass(frozen=True)
class NuisanceFits:
    g_hat: dict = field(default_factory=dict)
    e_hat: dict = field(default_factory=dict)
    p_hat: dict = field(default_factory=dict)
    spec: NuisanceSpec = None

    def outcome(self, dataset, k, a):
        """Outcome-model predictions for every row of the pattern view."""
        view = dataset.view(k)
        return self._get(self.g_hat, (a, k), "outcome").predict_covariates(
            view.covariates, dataset.covariate_names)

    def participation(self, dataset, k):
        view = dataset.view(k)
        model = self._get(self.p_hat, k, "participation")
        return _clamp(model, model.predict_covariates(view.covariates, dataset.covariate_names))

    def treatment(self, dataset, k, a):
        view = dataset.view(k)
        model = self._get(self.e_hat, (a, k), "treatment")
        return _clamp(model, model.predict_covariates(view.covariates, dataset.covariate_names))

    @staticmethod
    def _get(table, key, what):
        try:
            return table[key]
        except KeyError:
            raise NumericalError(f"no {what} fit for {key}", module="nuisance") from None

    def with_constant(self, outcome=None, participation=None, treatment=None):
        """Copy with every fit of the named kind replaced by a constant."""
        fits = self
        if outcome is not None:
            fits = replace(fits, g_hat={key: ConstantModel(outcome) for key in self.g_hat})
        if participation is not None:
            fits = replace(fits, p_hat={key: ConstantModel(participation) for key in self.p_hat})
        if treatment is not None:
            fits = replace(fits, e_hat={key: ConstantModel(treatment) for key in self.e_hat})
        return fits


def fit_nuisance(dataset, spec, arms, parts=ALL_PARTS):
    """Fit the requested nuisance models for every pattern and treatment in ``arms``.

    A pattern whose trial records all received ``a`` gets the exact constant
    treatment model 1.
    """
    g_hat, e_hat, p_hat = {}, {}, {}
    for pattern in dataset.patterns:
        k = pattern.pattern_id
        local = spec.for_pattern(pattern)
        if PARTICIPATION in parts:
            p_hat[k] = fit_participation_model(dataset, k, local.participation_spec,
                                               spec.participation_uses_survey_weights)
        view = dataset.view(k)
        trial_codes = view.treatment[~view.target]
        for a in arms:
            if OUTCOME in parts:
                g_hat[(a, k)] = fit_outcome_model(dataset, k, a, local.outcome_spec)
            if TREATMENT in parts:
                share = np.mean(trial_codes == dataset.code(a))
                if share == 1.0:
                    e_hat[(a, k)] = ConstantModel(1.0)
                else:
                    e_hat[(a, k)] = fit_treatment_model(dataset, k, a, local.treatment_spec)
    return NuisanceFits(g_hat, e_hat, p_hat, spec)


@dataclass(frozen=True, eq=False)
class TransportWeights:
    k: int
    a: object
    rows: np.ndarray
    values: np.ndarray

    def full(self, n):
        out = np.zeros(n)
        out[self.rows] = self.values
        return out


def transport_weights_view(fits, dataset, k, a):
    view = dataset.view(k)
    indicator = ~view.target & (view.treatment == dataset.code(a))
    p = fits.participation(dataset, k)
    e = fits.treatment(dataset, k, a)
    out = np.zeros(len(view.rows))
    sel = indicator
    out[sel] = (1.0 - p[sel]) / (e[sel] * p[sel])
    return out


def compute_transport_weights(fits, dataset, k, a):
    """Inverse-odds-of-participation over treatment-probability weights for ``(a, k)``."""
    view = dataset.view(k)
    return TransportWeights(k, a, view.rows, transport_weights_view(fits, dataset, k, a))


# exchangeability diagnostic --------------------------------------------


@dataclass(frozen=True)
class ExchangeabilityReport:
    k: int
    a: object
    applicable: bool
    reason: str = ""
    coefficients: dict = field(default_factory=dict)
    discrepancies: dict = field(default_factory=dict)
    grid_size: int = 0

    @property
    def max_discrepancy(self):
        return max(self.discrepancies.values()) if self.discrepancies else float("nan")


def _grid_rows(n_target, size=DIAGNOSTIC_GRID):
    if n_target <= size:
        return np.arange(n_target)
    return np.unique(np.linspace(0, n_target - 1, size).round().astype(int))


def exchangeability_diagnostic(dataset, k, a, spec):
    """Compare per-trial outcome regressions within pattern ``k`` over target covariate points.

    Reports the fitted coefficients per trial and, for each trial pair, the
    maximum absolute prediction difference on the grid.  Diagnostic only.
    """
    pattern = dataset.patterns[k]
    if len(pattern.trial_ids) < 2:
        return ExchangeabilityReport(k, a, False, "pattern has a single trial; not applicable")
    spec = spec.restrict(pattern.observed_covariates)
    code = dataset.code(a)
    target_cov = dataset.covariates[dataset.is_target]
    grid = target_cov[_grid_rows(len(target_cov))]
    coefficients, predictions = {}, {}
    for s in pattern.trial_ids:
        rows = (dataset.source == s) & (dataset.treatment == code)
        if rows.sum() < 2:
            return ExchangeabilityReport(k, a, False, f"trial {s} has fewer than 2 records with treatment {a!r}")
        fit = _check_fit(fit_glm(spec, dataset.covariates[rows], dataset.outcome[rows],
                                 names=dataset.covariate_names), f"outcome model (trial {s})")
        coefficients[s] = dict(zip(fit.spec.column_names(dataset.covariate_names),
                                   (float(c) for c in fit.coefficients)))
        predictions[s] = fit.predict_covariates(grid, dataset.covariate_names)
    discrepancies = {
        (s, t): float(np.max(np.abs(predictions[s] - predictions[t])))
        for s, t in combinations(pattern.trial_ids, 2)
    }
    return ExchangeabilityReport(k, a, True, "", coefficients, discrepancies, len(grid))
