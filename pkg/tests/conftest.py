import numpy as np
import pytest

from cimeta.data import Dataset
from cimeta.simulation import SimScenario, simulate_dataset


def make_dataset(n_target=30, trials=((1, 40, None), (2, 40, None)), p=2, seed=0, levels=(0, 1)):
    """Small composite dataset; each trial is (id, size, hidden covariate indices)."""
    rng = np.random.default_rng(seed)
    source, cov, treat, y = [], [], [], []
    for _ in range(n_target):
        source.append(0)
        cov.append(rng.normal(size=p))
        treat.append(None)
        y.append(np.nan)
    for s, size, hidden in trials:
        for i in range(size):
            x = rng.normal(size=p) + 0.3
            if hidden:
                x[list(hidden)] = np.nan
            a = levels[i % len(levels)]
            source.append(s)
            cov.append(x)
            treat.append(a)
            y.append(1.0 + float(np.nansum(x)) + (a == levels[-1]) + rng.normal())
    return Dataset.from_arrays(source, np.array(cov), treatment=treat, outcome=y,
                               treatment_levels=levels)


@pytest.fixture
def small():
    return make_dataset()


@pytest.fixture
def two_patterns():
    return make_dataset(trials=((1, 60, None), (2, 50, (1,))), seed=3)


@pytest.fixture(scope="session")
def sim_k2():
    return simulate_dataset(SimScenario("K2", 2000, 11), 0)


@pytest.fixture(scope="session")
def sim_k3():
    return simulate_dataset(SimScenario("K3", 2000, 11), 0)


def enumerated(pop, scale=40):
    """Population with integer cell counts and the dataset listing every unit once.

    The dataset's empirical distribution equals the population exactly, so
    saturated plug-in estimators reproduce the exact functionals.
    """
    from cimeta.oracle import Cell, DiscretePopulation
    counts = [max(1, int(round(c.mass * scale * len(pop.cells)))) for c in pop.cells]
    total = sum(counts)
    cells = [Cell(c.x, c.s, n / total, c.a, c.mean_y) for c, n in zip(pop.cells, counts)]
    exact = DiscretePopulation(pop.covariate_names, pop.treatment_levels, pop.trials, cells)
    source, cov, arms, y = [], [], [], []
    for c, n in zip(cells, counts):
        x = np.array(c.x, dtype=float)
        if c.s != 0:
            hidden = [j for j in range(len(x)) if j not in exact.trials[c.s]]
            x[hidden] = np.nan
        for _ in range(n):
            source.append(c.s)
            cov.append(x)
            arms.append(c.a)
            y.append(np.nan if c.mean_y is None else c.mean_y)
    data = Dataset.from_arrays(source, np.array(cov), arms, y, covariate_names=pop.covariate_names,
                               treatment_levels=pop.treatment_levels)
    return exact, data


def survey_dataset(seed=0, n_strata=2, psus_per_stratum=2, psu_size=20, trial_sizes=(300, 200),
                   eta_spread=True):
    """Stratified cluster target sample plus two trials; trial 2 never records x2.

    Covariates are discrete (x1 in {0, 1, 2}, x2 in {0, 1}) so saturated models
    apply.  Target inclusion depends on x1, and survey weights undo it.  The
    outcome mean depends on x1 and treatment only, so both patterns identify
    the same target mean.
    """
    rng = np.random.default_rng(seed)
    source, cov, arms, y, eta, stratum, psu = [], [], [], [], [], [], []
    for h in range(n_strata):
        for j in range(psus_per_stratum):
            for _ in range(psu_size):
                x1 = rng.choice(3, p=[0.5, 0.3, 0.2] if h == 0 else [0.3, 0.4, 0.3])
                x2 = rng.integers(0, 2)
                source.append(0)
                cov.append([x1, x2])
                arms.append(None)
                y.append(np.nan)
                eta.append((1.0 + x1) * rng.uniform(0.5, 1.5) if eta_spread else 1.0)
                stratum.append(f"h{h}")
                psu.append(f"h{h}-p{j}")
    for s, size in enumerate(trial_sizes, start=1):
        for _ in range(size):
            x1 = rng.choice(3, p=[0.2, 0.3, 0.5])
            x2 = float(rng.integers(0, 2)) if s == 1 else np.nan
            a = int(rng.integers(0, 2))
            source.append(s)
            cov.append([x1, x2])
            arms.append(a)
            y.append(1.0 + 0.5 * x1 + a * (1.0 + 0.3 * x1) + rng.normal())
            eta.append(1.0)
            stratum.append(None)
            psu.append(None)
    return Dataset.from_arrays(source, np.array(cov, dtype=float), arms, y,
                               covariate_names=("x1", "x2"), treatment_levels=(0, 1),
                               survey_weight=eta, stratum=stratum, psu=psu)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, with its recorded detail."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if "test_acceptance.py" not in getattr(rep, "nodeid", "") or rep.when != "call":
                continue
            props = dict(getattr(rep, "user_properties", []))
            if "criterion" in props:
                status = "PASS" if rep.passed else "FAIL"
                lines.append((props["criterion"], f"criterion {props['criterion']:>2}: {status}  "
                                                  f"{props.get('detail', '')}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, text in sorted(lines):
            terminalreporter.write_line(text)
