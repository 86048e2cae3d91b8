import numpy as np
import pytest
from scipy.special import expit

from cimeta.errors import ConfigError
from cimeta.rng import stream
from cimeta.simulation import (SIGMA, TABLE1_GRID, GridCell, SimScenario, allocation_probabilities,
                               draw_covariates, mean_control, run_replicates, run_study, simulate_dataset,
                               trial_probability)


def test_average_source_sizes_fixed_allocation():
    sizes = np.array([np.bincount(simulate_dataset(SimScenario("K2", 2000, 1), i).source, minlength=4)
                      for i in range(200)])
    mean = sizes.mean(axis=0)
    assert np.allclose(mean, [454, 540, 540, 466], atol=6)


def test_covariate_allocation_is_a_distribution():
    x = draw_covariates(stream(0, "simulate"), 1000)
    p1, p2, p3 = allocation_probabilities(x, "covariate")
    assert np.allclose(p1 + p2 + p3, 1.0)
    assert np.std(p1) > 0
    assert all(np.allclose(p, q) for p, q in zip(allocation_probabilities(x, "fixed"),
                                                 [540 / 1546, 540 / 1546, 466 / 1546]))


def test_covariate_correlation():
    x = draw_covariates(stream(0, "simulate", 9), 200_000)
    assert np.allclose(np.cov(x.T), SIGMA, atol=0.02)
    assert SIGMA[0, 2] == pytest.approx(0.36)


def test_participation_at_zero():
    assert 1 - trial_probability(np.zeros((1, 5)))[0] == pytest.approx(1 - expit(1.0))


def test_trial_two_outcome_drops_x4_term():
    x = np.array([[0.0, 0.0, 0.0, 1.0, 0.0]])
    assert mean_control(x, [False])[0] == pytest.approx(-0.2)
    assert mean_control(x, [True])[0] == 0.0


@pytest.mark.parametrize("scenario,hidden", [("K2", {3: [4]}), ("K3", {3: [4], 2: [3]})])
def test_missingness_masks(scenario, hidden):
    d = simulate_dataset(SimScenario(scenario, 2000, 3), 0)
    assert not np.isnan(d.covariates[d.is_target]).any()
    for s in (1, 2, 3):
        block = np.isnan(d.covariates[d.source == s])
        assert list(np.flatnonzero(block.all(axis=0))) == hidden.get(s, [])
        assert not (block.any(axis=0) & ~block.all(axis=0)).any()


def test_treated_share():
    d = simulate_dataset(SimScenario("K2", 20_000, 3), 0)
    assert np.mean(d.treatment[~d.is_target] == 1) == pytest.approx(0.5, abs=0.02)


def test_replicates_are_independent_and_reproducible():
    s = SimScenario("K2", 500, 3)
    a, b = simulate_dataset(s, 0), simulate_dataset(s, 0)
    assert np.array_equal(a.outcome, b.outcome, equal_nan=True)
    assert not np.array_equal(a.covariates, simulate_dataset(s, 1).covariates)


def test_scenario_validation():
    with pytest.raises(ConfigError):
        SimScenario("K4")
    with pytest.raises(ConfigError):
        SimScenario("K2", allocation="random")


def test_two_replicate_smoke():
    study = run_study(SimScenario("K2", 2000, 0), 2, truth=(0.0, 1.0))
    assert len(study.rows) == 2 * len(TABLE1_GRID)
    assert all(np.isfinite(r.sd_sqrt_n) and r.reps == 2 for r in study.rows)
    with pytest.raises(ConfigError):
        run_study(SimScenario("K2", 2000, 0), 1)


def test_study_output_deterministic_across_jobs():
    grid = (GridCell("naive"), GridCell("dr", True, True), GridCell("dr-split", True, True))
    s = SimScenario("K3", 800, 5)
    one = run_study(s, 6, grid, jobs=1, truth=(0.0, 1.0))
    two = run_study(s, 6, grid, jobs=2, truth=(0.0, 1.0))
    assert one.to_csv() == two.to_csv()
    assert np.array_equal(one.estimates, run_replicates(s, 6, grid), equal_nan=True)


def test_naive_cell_matches_pooled_mean():
    d = simulate_dataset(SimScenario("K2", 2000, 0), 0)
    est = run_replicates(SimScenario("K2", 2000, 0), 2, (GridCell("naive"),))[0, 0]
    for a in (0, 1):
        assert est[a] == d.outcome[~d.is_target & (d.treatment == a)].mean()
