"""Exact identification functionals on finite-support populations.

A :class:`DiscretePopulation` lists probability cells ``(x, s, a, mass,
mean_y)`` over a finite covariate grid.  Target cells (``s == 0``) carry no
treatment or outcome.  Each trial observes a fixed subset of the covariates,
which induces the same missingness patterns as in the data layer.

Two routes compute the pattern-k target mean of ``Y^a``:

* :func:`exact_psi_outcome` averages the trial conditional mean over the
  target distribution of the pattern's observed covariates;
* :func:`exact_psi_weighting` sums cell contributions weighted by the
  participation odds over the treatment probability.

They agree exactly on any population satisfying positivity.
"""

from dataclasses import dataclass, field
from itertools import product
import json

import numpy as np
import yaml

from .data import Dataset
from .errors import ConfigError, DataError, PositivityError
from .rng import stream

MASS_TOL = 1e-9


@dataclass(frozen=True)
class Cell:
    x: tuple
    s: int
    mass: float
    a: object = None
    mean_y: float = None


@dataclass(frozen=True)
class OraclePattern:
    pattern_id: int
    trial_ids: tuple
    observed_covariates: tuple


@dataclass(frozen=True, eq=False)
class DiscretePopulation:
    covariate_names: tuple
    treatment_levels: tuple
    trials: dict
    cells: tuple
    patterns: tuple = field(init=False)

    def __post_init__(self):
        p = len(self.covariate_names)
        trials = {int(s): tuple(sorted(int(j) for j in obs)) for s, obs in self.trials.items()}
        object.__setattr__(self, "trials", trials)
        object.__setattr__(self, "cells", tuple(self.cells))
        object.__setattr__(self, "treatment_levels", tuple(self.treatment_levels))
        total = 0.0
        for c in self.cells:
            if len(c.x) != p:
                raise DataError(f"cell {c} has {len(c.x)} covariates, expected {p}", module="oracle")
            if not c.mass > 0:
                raise DataError(f"cell {c} has non-positive mass", module="oracle")
            if c.s == 0:
                if c.a is not None or c.mean_y is not None:
                    raise DataError(f"target cell {c} must not carry a treatment or outcome",
                                    module="oracle")
            else:
                if c.s not in trials:
                    raise DataError(f"cell {c} belongs to undeclared trial {c.s}", module="oracle")
                if c.a not in self.treatment_levels or c.mean_y is None:
                    raise DataError(f"trial cell {c} needs a known treatment and a mean outcome",
                                    module="oracle")
            total += c.mass
        if abs(total - 1.0) > MASS_TOL:
            raise DataError(f"cell masses sum to {total!r}, not 1", module="oracle")
        groups = {}
        for s, obs in sorted(trials.items()):
            groups.setdefault(obs, []).append(s)
        ordered = sorted((tuple(ids), obs) for obs, ids in groups.items())
        object.__setattr__(self, "patterns", tuple(
            OraclePattern(k, ids, obs) for k, (ids, obs) in enumerate(ordered, start=1)))

    @property
    def K(self):
        return len(self.patterns)

    def pattern(self, k):
        if not 1 <= k <= self.K:
            raise DataError(f"pattern {k} out of range 1..{self.K}", module="oracle")
        return self.patterns[k - 1]

    # file format --------------------------------------------------------

    @classmethod
    def from_dict(cls, spec):
        try:
            names = tuple(spec["covariates"])
            levels = tuple(spec["treatment_levels"])
            index = {n: j for j, n in enumerate(names)}
            trials = {int(s): [index[n] for n in obs] for s, obs in spec["trials"].items()}
            cells = [Cell(tuple(float(v) for v in c["x"]), int(c["s"]), float(c["mass"]),
                          c.get("a"), None if c.get("mean_y") is None else float(c["mean_y"]))
                     for c in spec["cells"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed population definition: {exc!r}", module="oracle") from None
        return cls(names, levels, trials, cells)

    def to_dict(self):
        return {
            "covariates": list(self.covariate_names),
            "treatment_levels": list(self.treatment_levels),
            "trials": {str(s): [self.covariate_names[j] for j in obs] for s, obs in self.trials.items()},
            "cells": [
                {k: v for k, v in (("x", list(c.x)), ("s", c.s), ("a", c.a), ("mass", c.mass),
                                   ("mean_y", c.mean_y)) if v is not None}
                for c in self.cells
            ],
        }

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
        if str(path).endswith((".yaml", ".yml")):
            spec = yaml.safe_load(text)
        else:
            spec = json.loads(text)
        return cls.from_dict(spec)


def _project(x, observed):
    return tuple(x[j] for j in observed)


def _pattern_tables(pop, k, a):
    """Target mass, trial mass and arm-``a`` trial mass/outcome mass by projected covariates."""
    pattern = pop.pattern(k)
    obs, members = pattern.observed_covariates, set(pattern.trial_ids)
    target, trial, arm, arm_y = {}, {}, {}, {}
    for c in pop.cells:
        key = _project(c.x, obs)
        if c.s == 0:
            target[key] = target.get(key, 0.0) + c.mass
        elif c.s in members:
            trial[key] = trial.get(key, 0.0) + c.mass
            if c.a == a:
                arm[key] = arm.get(key, 0.0) + c.mass
                arm_y[key] = arm_y.get(key, 0.0) + c.mass * c.mean_y
    return target, trial, arm, arm_y


def check_positivity(pop, k, a):
    """Every target-supported ``x^(k)`` needs pattern-trial mass, and mass at treatment ``a``."""
    target, trial, arm, _ = _pattern_tables(pop, k, a)
    for key in target:
        if trial.get(key, 0.0) <= 0:
            raise PositivityError(f"pattern {k}: target cell {key} has no trial support",
                                  module="oracle", hint="every target covariate value needs trial mass")
        if arm.get(key, 0.0) <= 0:
            raise PositivityError(f"pattern {k}: target cell {key} has no trial mass with treatment {a!r}",
                                  module="oracle", hint="every target covariate value needs mass in each arm")


def exact_psi_outcome(pop, k, a):
    """Target average of ``E[Y | x^(k), A=a, S in pattern k]``."""
    check_positivity(pop, k, a)
    target, _, arm, arm_y = _pattern_tables(pop, k, a)
    total = sum(target.values())
    return sum(m / total * (arm_y[key] / arm[key]) for key, m in target.items())


def exact_psi_weighting(pop, k, a):
    """Sum over arm-``a`` pattern-trial cells of mass x mean_y x odds / treatment probability.

    Per cell the weight is ``Pr_k[S=0 | x^(k)] / (Pr_k[S in pattern | x^(k)] Pr_k[A=a | x^(k), S in
    pattern])``, normalised by ``Pr_k[S=0]``; all probabilities come from direct enumeration.
    """
    check_positivity(pop, k, a)
    pattern = pop.pattern(k)
    obs, members = pattern.observed_covariates, set(pattern.trial_ids)
    subsample = [c for c in pop.cells if c.s == 0 or c.s in members]
    total = sum(c.mass for c in subsample)

    def prob(pred):
        return sum(c.mass for c in subsample if pred(c)) / total

    p_target = prob(lambda c: c.s == 0)
    out = 0.0
    for c in subsample:
        if c.s == 0 or c.a != a:
            continue
        key = _project(c.x, obs)
        same = [d for d in subsample if _project(d.x, obs) == key]
        p_x = sum(d.mass for d in same) / total
        p0 = sum(d.mass for d in same if d.s == 0) / total / p_x
        p_in = 1.0 - p0
        p_a = sum(d.mass for d in same if d.s != 0 and d.a == a) / sum(d.mass for d in same if d.s != 0)
        out += (c.mass / total) * p0 / (p_in * p_a) * c.mean_y
    return out / p_target


def exact_psi(pop, a, weights=None):
    """Weighted combination of the per-pattern functionals (equal weights by default)."""
    values = np.array([exact_psi_outcome(pop, k, a) for k in range(1, pop.K + 1)])
    w = np.full(pop.K, 1.0 / pop.K) if weights is None else np.asarray(weights, dtype=float)
    return float(w @ values)


# sampling and random populations --------------------------------------


def sample_from(pop, n, seed, noise_sd=0.0, stream_index=0):
    """``n`` i.i.d. records; trial outcomes are ``mean_y`` plus Normal(0, noise_sd) noise."""
    if n < 1:
        raise ConfigError("sample size must be at least 1", module="oracle")
    rng = stream(seed, "sample", stream_index)
    mass = np.array([c.mass for c in pop.cells])
    idx = rng.choice(len(pop.cells), size=n, p=mass / mass.sum())
    noise = rng.standard_normal(n) * noise_sd
    x = np.array([c.x for c in pop.cells], dtype=float)[idx]
    source = np.array([c.s for c in pop.cells])[idx]
    mean_y = np.array([np.nan if c.mean_y is None else c.mean_y for c in pop.cells])[idx]
    arms = np.array([c.a for c in pop.cells], dtype=object)[idx]
    for s, obs in pop.trials.items():
        hidden = [j for j in range(len(pop.covariate_names)) if j not in obs]
        if hidden:
            x[np.ix_(source == s, hidden)] = np.nan
    outcome = np.where(source == 0, np.nan, mean_y + noise)
    return Dataset.from_arrays(source, x, treatment=arms, outcome=outcome,
                               covariate_names=pop.covariate_names,
                               treatment_levels=pop.treatment_levels)


def random_population(rng, max_cells=50, transportable=True):
    """A random valid population: 2-4 trials, 2-3 binary/ternary covariates, full positivity, K >= 2.

    With ``transportable`` the mean outcome depends only on treatment and the
    first covariate (observed by every trial), so all patterns share one
    target mean; otherwise it varies with every covariate and the source.
    """
    while True:
        n_cov = int(rng.integers(2, 4))
        sizes = [int(rng.integers(2, 4)) for _ in range(n_cov)]
        n_trials = int(rng.integers(2, 5))
        grid = list(product(*[range(m) for m in sizes]))
        if len(grid) * (1 + 2 * n_trials) <= max_cells:
            break
    # trial 1 observes everything, trial 2 misses at least one covariate, so K >= 2
    trials = {1: list(range(n_cov))}
    for s in range(2, n_trials + 1):
        hidden = {j for j in range(1, n_cov) if rng.random() < 0.5}
        if s == 2 and not hidden:
            hidden = {int(rng.integers(1, n_cov))}
        trials[s] = [j for j in range(n_cov) if j not in hidden]
    levels = (0, 1)
    slope = rng.normal(size=(2, max(sizes)))
    cells = []
    for x in grid:
        cells.append(Cell(tuple(float(v) for v in x), 0, float(rng.uniform(0.2, 1.0))))
        for s in range(1, n_trials + 1):
            for a in levels:
                if transportable:
                    mean = float(slope[a, x[0]] + a)
                else:
                    mean = float(rng.normal() + 0.3 * s + sum(x) + a)
                cells.append(Cell(tuple(float(v) for v in x), s, float(rng.uniform(0.2, 1.0)), a, mean))
    total = sum(c.mass for c in cells)
    cells = [Cell(c.x, c.s, c.mass / total, c.a, c.mean_y) for c in cells]
    names = tuple(f"x{j + 1}" for j in range(n_cov))
    return DiscretePopulation(names, levels, trials, cells)
