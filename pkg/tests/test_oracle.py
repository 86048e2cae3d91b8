import json

import numpy as np
import pytest
import yaml

from cimeta.errors import ConfigError, DataError, PositivityError
from cimeta.nuisance import NuisanceSpec, fit_nuisance
from cimeta.estimators import estimate_g_formula
from cimeta.oracle import (Cell, DiscretePopulation, exact_psi, exact_psi_outcome, exact_psi_weighting,
                           random_population, sample_from)

from conftest import enumerated


def two_point(trial_means=(1.0, 3.0), target=(0.5, 0.5), trial=(0.25, 0.25)):
    cells = [Cell((0.0,), 0, target[0] * 0.5), Cell((1.0,), 0, target[1] * 0.5)]
    for x, m in zip((0.0, 1.0), trial_means):
        for a in (0, 1):
            cells.append(Cell((x,), 1, trial[int(x)] * 0.5, a, m))
    return DiscretePopulation(("x",), (0, 1), {1: [0]}, cells)


def test_two_point_arithmetic():
    assert exact_psi_outcome(two_point(), 1, 1) == pytest.approx(2.0, abs=1e-15)
    assert exact_psi_weighting(two_point(), 1, 1) == pytest.approx(2.0, abs=1e-15)


def test_covariate_shift_changes_value():
    pop = two_point(target=(0.8, 0.2))
    assert exact_psi_outcome(pop, 1, 0) == pytest.approx(0.8 * 1 + 0.2 * 3)


def test_no_shift_equals_trial_arm_mean():
    pop = two_point(target=(0.3, 0.7), trial=(0.15, 0.35))
    trial_mean = sum(c.mass * c.mean_y for c in pop.cells if c.s == 1 and c.a == 1) / \
        sum(c.mass for c in pop.cells if c.s == 1 and c.a == 1)
    assert exact_psi_outcome(pop, 1, 1) == pytest.approx(trial_mean, abs=1e-15)


def test_constant_mean_and_single_cell():
    pop = two_point(trial_means=(4.0, 4.0))
    assert exact_psi_weighting(pop, 1, 0) == pytest.approx(4.0, abs=1e-14)
    single = DiscretePopulation(("x",), (1,), {1: [0]}, [Cell((2.0,), 0, 0.5), Cell((2.0,), 1, 0.5, 1, 7.5)])
    assert exact_psi_outcome(single, 1, 1) == 7.5


def test_routes_agree_on_random_populations():
    rng = np.random.default_rng(20)
    for _ in range(20):
        pop = random_population(rng, max_cells=20 * 5, transportable=False)
        for k in range(1, pop.K + 1):
            assert abs(exact_psi_outcome(pop, k, 1) - exact_psi_weighting(pop, k, 1)) <= 1e-12


def test_transportable_population_is_weight_invariant():
    pop = random_population(np.random.default_rng(4))
    values = [exact_psi_outcome(pop, k, 0) for k in range(1, pop.K + 1)]
    assert np.ptp(values) <= 1e-12
    assert exact_psi(pop, 0, np.eye(pop.K)[0]) == pytest.approx(exact_psi(pop, 0), abs=1e-12)


def test_positivity_violation():
    cells = [Cell((0.0,), 0, 0.3), Cell((1.0,), 0, 0.2), Cell((0.0,), 1, 0.25, 0, 1.0),
             Cell((0.0,), 1, 0.25, 1, 2.0)]
    pop = DiscretePopulation(("x",), (0, 1), {1: [0]}, cells)
    with pytest.raises(PositivityError):
        exact_psi_outcome(pop, 1, 0)
    arm_gap = [Cell((0.0,), 0, 0.5), Cell((0.0,), 1, 0.5, 0, 1.0)]
    with pytest.raises(PositivityError):
        exact_psi_weighting(DiscretePopulation(("x",), (0, 1), {1: [0]}, arm_gap), 1, 1)


@pytest.mark.parametrize("cells", [
    [Cell((0.0,), 0, 0.5), Cell((0.0,), 1, 0.4, 0, 1.0)],
    [Cell((0.0,), 0, 0.5, 1), Cell((0.0,), 1, 0.5, 0, 1.0)],
    [Cell((0.0,), 0, 0.5), Cell((0.0,), 2, 0.5, 0, 1.0)],
    [Cell((0.0,), 0, 0.5), Cell((0.0,), 1, 0.5, 5, 1.0)],
])
def test_invalid_population(cells):
    with pytest.raises(DataError):
        DiscretePopulation(("x",), (0, 1), {1: [0]}, cells)


def test_sample_frequencies():
    pop = random_population(np.random.default_rng(6))
    n = 50_000
    d = sample_from(pop, n, seed=1)
    for s in (0,) + tuple(pop.trials):
        mass = sum(c.mass for c in pop.cells if c.s == s)
        assert abs(np.mean(d.source == s) - mass) <= 3 * np.sqrt(mass * (1 - mass) / n)
    assert d.patterns.K == pop.K


def test_sample_deterministic():
    pop = random_population(np.random.default_rng(6))
    a, b = sample_from(pop, 300, seed=2, noise_sd=1.0), sample_from(pop, 300, seed=2, noise_sd=1.0)
    assert np.array_equal(a.outcome, b.outcome, equal_nan=True)
    c = sample_from(pop, 300, seed=3, noise_sd=1.0)
    assert not np.array_equal(a.outcome, c.outcome, equal_nan=True)


def test_g_formula_on_noiseless_sample():
    pop = random_population(np.random.default_rng(8), transportable=False)
    errors = []
    for n in (2_000, 200_000):
        d = sample_from(pop, n, seed=5)
        fits = fit_nuisance(d, NuisanceSpec.saturated(range(len(pop.covariate_names))), [1])
        est = estimate_g_formula(d, fits, 1, np.eye(d.patterns.K)[0]).value
        errors.append(abs(est - exact_psi_outcome(pop, 1, 1)))
    assert errors[1] < 0.05
    exact_pop, data = enumerated(pop)
    fits = fit_nuisance(data, NuisanceSpec.saturated(range(len(pop.covariate_names))), [1])
    est = estimate_g_formula(data, fits, 1, np.eye(data.patterns.K)[0]).value
    assert abs(est - exact_psi_outcome(exact_pop, 1, 1)) <= 1e-12


def test_file_round_trip(tmp_path):
    pop = random_population(np.random.default_rng(1))
    (tmp_path / "p.json").write_text(json.dumps(pop.to_dict()))
    (tmp_path / "p.yaml").write_text(yaml.safe_dump(pop.to_dict()))
    for name in ("p.json", "p.yaml"):
        loaded = DiscretePopulation.load(tmp_path / name)
        assert loaded.cells == pop.cells and loaded.trials == pop.trials
    with pytest.raises(ConfigError):
        DiscretePopulation.from_dict({"covariates": ["x"]})
