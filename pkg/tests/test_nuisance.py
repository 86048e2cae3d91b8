import numpy as np
import pytest

from cimeta.data import Dataset
from cimeta.errors import PositivityError
from cimeta.glm import GAUSSIAN, ModelSpec
from cimeta.nuisance import (ConstantModel, NuisanceFits, NuisanceSpec, compute_transport_weights,
                             exchangeability_diagnostic, fit_nuisance, fit_outcome_model,
                             fit_participation_model, fit_treatment_model)
from cimeta.oracle import exact_psi_outcome, random_population, sample_from

from conftest import make_dataset


def constant_fits(dataset, p, e, a=1):
    g = {(a, k): ConstantModel(0.0) for k in dataset.patterns.ids}
    return NuisanceFits(g, {(a, k): ConstantModel(e) for k in dataset.patterns.ids},
                        {k: ConstantModel(p) for k in dataset.patterns.ids})


def test_transport_weight_values(small):
    # p = 0.5, e = 0.5: weight (1 - 0.5) / (0.5 * 0.5) = 2 on arm-1 trial rows, 0 elsewhere
    tw = compute_transport_weights(constant_fits(small, 0.5, 0.5), small, 1, 1)
    arm = ~small.is_target & small.arm_mask(1)
    full = tw.full(small.n)
    assert np.all(full[arm] == 2.0) and np.all(full[~arm] == 0.0)
    tw = compute_transport_weights(constant_fits(small, 0.8, 0.5), small, 1, 1)
    assert np.allclose(tw.full(small.n)[arm], 0.5)


def test_transport_weights_clamped(small):
    spec = NuisanceSpec.polynomial([0, 1])
    fits = fit_nuisance(small, spec, [1])
    o = compute_transport_weights(fits, small, 1, 1).values
    assert np.all(np.isfinite(o)) and np.all(o >= 0)
    assert o.max() <= (1 - 1e-6) / (1e-6 * 1e-6)


def test_outcome_model_constant_response():
    d = make_dataset(trials=((1, 30, None),))
    d = d.replace(outcome=np.where(d.is_target, np.nan, 4.25))
    fit = fit_outcome_model(d, 1, 1, ModelSpec.polynomial([0, 1]))
    pred = fit.predict_covariates(d.covariates[d.is_target])
    assert np.allclose(pred, 4.25, atol=1e-10)


def test_outcome_model_needs_arm_records():
    d = make_dataset(trials=((1, 30, None),), levels=(0, 1, 2))
    d = d.replace(treatment=np.where(d.treatment == 2, 1, d.treatment))
    with pytest.raises(PositivityError):
        fit_outcome_model(d, 1, 2, ModelSpec.polynomial([0]))


def test_treatment_model_three_arms():
    rng = np.random.default_rng(0)
    n = 3000
    x = rng.normal(size=(n, 1))
    src = np.r_[np.zeros(500, int), np.ones(n - 500, int)]
    arms = [None] * 500 + list(rng.integers(0, 3, n - 500))
    y = np.where(src == 0, np.nan, rng.normal(size=n))
    d = Dataset.from_arrays(src, x, arms, y, treatment_levels=(0, 1, 2))
    fit = fit_treatment_model(d, 1, 2, ModelSpec.polynomial([0]))
    pred = fit.predict_covariates(x[src == 0])
    assert np.allclose(pred, 1 / 3, atol=0.04)


def test_treatment_model_constant_label_raises():
    d = make_dataset(trials=((1, 30, None),), levels=(1, 0))
    d = d.replace(treatment=np.where(d.is_target, -1, 0))
    with pytest.raises(PositivityError):
        fit_treatment_model(d, 1, 1, ModelSpec.polynomial([0]))


def test_single_arm_pattern_uses_constant_one(two_patterns):
    d = two_patterns.replace(treatment=np.where(two_patterns.source == 2, 1, two_patterns.treatment))
    fits = fit_nuisance(d, NuisanceSpec.polynomial([0, 1]), [1])
    assert fits.e_hat[(1, 2)] == ConstantModel(1.0)


def test_participation_survey_weight_equals_replication(two_patterns):
    # target counts alternate 1 and 3 (mean 2); after rescaling to mean 1 this is
    # the same as replicating target rows by count and every trial row twice
    spec = ModelSpec.polynomial([0, 1])
    target = np.flatnonzero(two_patterns.is_target)
    counts = np.where(np.arange(len(target)) % 2 == 0, 1, 3)
    eta = np.ones(two_patterns.n)
    eta[target] = counts
    weighted = fit_participation_model(two_patterns.replace(survey_weight=eta), 1, spec,
                                       use_survey_weights=True)
    trial = np.flatnonzero(~two_patterns.is_target)
    rows = np.r_[np.repeat(target, counts), trial, trial]
    replicated = fit_participation_model(two_patterns.take(rows), 1, spec)
    assert np.allclose(weighted.coefficients, replicated.coefficients, atol=1e-8)


def test_participation_constant_survey_weight_matches_plain(two_patterns):
    spec = ModelSpec.polynomial([0, 1])
    d = two_patterns.replace(survey_weight=np.where(two_patterns.is_target, 3.0, 1.0))
    weighted = fit_participation_model(d, 1, spec, use_survey_weights=True)
    plain = fit_participation_model(two_patterns, 1, spec)
    assert np.allclose(weighted.coefficients, plain.coefficients, atol=1e-10)


def test_saturated_outcome_predictions_equal_cell_means():
    pop = random_population(np.random.default_rng(3))
    data = sample_from(pop, 4000, seed=1, noise_sd=0.0)
    fits = fit_nuisance(data, NuisanceSpec.saturated(range(len(pop.covariate_names))), [1])
    # the transportable mean depends on the first covariate only
    mean_by_x0 = {c.x[0]: c.mean_y for c in pop.cells if c.a == 1}
    for k in data.patterns.ids:
        view = data.view(k)
        pred = fits.outcome(data, k, 1)[view.target]
        expected = [mean_by_x0[v] for v in view.covariates[view.target, 0]]
        assert np.allclose(pred, expected, atol=1e-10)


def two_trial_same_law(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3 * n, 2))
    src = np.repeat([0, 1, 2], n)
    arms = [None] * n + [1] * (2 * n)
    y = 1 + 0.2 * x[:, 0] + 0.2 * x[:, 1] + 0.1 * x[:, 0] ** 2 + 0.1 * x[:, 1] ** 2 + rng.normal(size=3 * n)
    y[:n] = np.nan
    return Dataset.from_arrays(src, x, arms, y, treatment_levels=(0, 1))


def test_exchangeability_diagnostic_same_law():
    spec = ModelSpec.polynomial([0, 1], degree=2)
    small = exchangeability_diagnostic(two_trial_same_law(1000, 8), 1, 1, spec)
    large = exchangeability_diagnostic(two_trial_same_law(10_000, 8), 1, 1, spec)
    assert small.applicable and large.grid_size == 1000
    assert set(large.coefficients) == {1, 2}
    assert large.max_discrepancy < 0.15
    assert large.max_discrepancy < small.max_discrepancy


def test_exchangeability_diagnostic_detects_shift():
    d = two_trial_same_law(5000, 9)
    d = d.replace(outcome=np.where(d.source == 2, d.outcome + 1.0, d.outcome))
    rep = exchangeability_diagnostic(d, 1, 1, ModelSpec.polynomial([0, 1], degree=2))
    assert rep.discrepancies[(1, 2)] > 0.8


def test_exchangeability_diagnostic_single_trial(two_patterns):
    rep = exchangeability_diagnostic(two_patterns, 2, 1, ModelSpec.polynomial([0]))
    assert not rep.applicable and "single trial" in rep.reason
