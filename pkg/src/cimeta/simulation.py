"""Simulated three-trial composite data and the estimator comparison study.

Data generation (``n_total`` records, replicate ``i`` drawn from
``stream(seed, "simulate", i)``):

* ``X ~ N(0, Sigma)`` in five dimensions, ``Sigma_ij = 0.6^|i-j|``;
* ``Pr[S != 0 | X] = expit(1 + 0.2 (X1+X2+X3) + 0.1 (X1^2+X2^2+X3^2))``;
* trial membership among trial records is multinomial-logistic with
  ``theta = exp(log 1.3 (X1+X2+X3))`` and ``zeta = exp(log 0.8 (X1+X2+X3))``;
* ``A ~ Bernoulli(0.5)`` in trials;
* ``Y1 = 1 + 0.2 X1 + 0.2 X2 + 0.1 X1^2 + 0.1 X2^2 + e1`` and
  ``Y0 = -0.2 X1 - 0.2 X4 I(S != 2) - 0.1 X1^2 - 0.1 X2^2 + e0`` with standard
  normal errors; ``Y = Y^A``.

Scenario ``K2`` erases X5 in trial 3; ``K3`` also erases X4 in trial 2.

Trial allocation has two modes.  ``"fixed"`` (default) allocates every trial
record with the same probabilities, proportional to average trial sizes 540,
540 and 466; the published comparison table and trial sizes are reproduced by
this mode.  ``"covariate"`` uses the multinomial-logistic probabilities above
(expected trial sizes 568, 513, 461).
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
import csv
import io
import math
import os

import numpy as np
from scipy.special import expit

from .data import Dataset, complete_case
from .errors import CimetaError, ConfigError
from .estimators import (estimate_dr, estimate_dr_sample_split, estimate_g_formula,
                         estimate_naive_pooled, estimate_weighting)
from .glm import ModelSpec
from .nuisance import (ConstantModel, NuisanceFits, NuisanceSpec, fit_outcome_model,
                       fit_participation_model, fit_treatment_model)
from .rng import stream
from .weights import pattern_weights

N_COVARIATES = 5
COVARIATE_NAMES = tuple(f"X{j}" for j in range(1, N_COVARIATES + 1))
RHO = 0.6
SIGMA = RHO ** np.abs(np.subtract.outer(np.arange(N_COVARIATES), np.arange(N_COVARIATES)))
CHOLESKY = np.linalg.cholesky(SIGMA)
LOG_THETA = math.log(1.3)
LOG_ZETA = math.log(0.8)
TREATED_SHARE = 0.5

SCENARIOS = {"K2": {3: (4,)}, "K3": {3: (4,), 2: (3,)}}
ALLOCATIONS = ("covariate", "fixed")
FIXED_ALLOCATION = np.array([540.0, 540.0, 466.0]) / 1546.0

TRUTH_MC_N = 10_000_000
TRUTH_SEED = 20240101
CHUNK = 1_000_000


@dataclass(frozen=True)
class SimScenario:
    missingness: str = "K2"
    n_total: int = 2000
    seed: int = 0
    allocation: str = "fixed"

    def __post_init__(self):
        if self.allocation not in ALLOCATIONS:
            raise ConfigError(f"unknown allocation {self.allocation!r}; expected one of {ALLOCATIONS}",
                              module="simulation")
        if self.missingness not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.missingness!r}; expected K2 or K3",
                              module="simulation")
        if self.n_total < 10:
            raise ConfigError("n_total must be at least 10", module="simulation")


def trial_probability(x):
    s = x[:, 0] + x[:, 1] + x[:, 2]
    q = x[:, 0] ** 2 + x[:, 1] ** 2 + x[:, 2] ** 2
    return expit(1.0 + 0.2 * s + 0.1 * q)


def mean_treated(x):
    return 1.0 + 0.2 * x[:, 0] + 0.2 * x[:, 1] + 0.1 * x[:, 0] ** 2 + 0.1 * x[:, 1] ** 2


def mean_control(x, in_trial_2=False):
    out = -0.2 * x[:, 0] - 0.1 * x[:, 0] ** 2 - 0.1 * x[:, 1] ** 2
    return out - 0.2 * x[:, 3] * (~np.asarray(in_trial_2, dtype=bool))


def allocation_probabilities(x, allocation="fixed"):
    """Per-record probabilities of trials 1, 2 and 3 given trial participation."""
    if allocation == "fixed":
        return tuple(np.full(len(x), q) for q in FIXED_ALLOCATION)
    s = x[:, 0] + x[:, 1] + x[:, 2]
    theta, zeta = np.exp(LOG_THETA * s), np.exp(LOG_ZETA * s)
    denom = 1.0 + theta + zeta
    return theta / denom, zeta / denom, 1.0 / denom


def draw_covariates(rng, n):
    return rng.standard_normal((n, N_COVARIATES)) @ CHOLESKY.T


def simulate_dataset(scenario, replicate=0):
    """One composite dataset for ``scenario``; replicate ``i`` uses its own stream."""
    rng = stream(scenario.seed, "simulate", replicate)
    n = scenario.n_total
    x = draw_covariates(rng, n)
    u_trial, u_which, u_arm = rng.random(n), rng.random(n), rng.random(n)
    e1, e0 = rng.standard_normal(n), rng.standard_normal(n)

    in_trial = u_trial < trial_probability(x)
    p1, p2, _ = allocation_probabilities(x, scenario.allocation)
    which = np.where(u_which < p1, 1, np.where(u_which < p1 + p2, 2, 3))
    source = np.where(in_trial, which, 0)

    a = (u_arm < TREATED_SHARE).astype(int)
    y1 = mean_treated(x) + e1
    y0 = mean_control(x, source == 2) + e0
    y = np.where(a == 1, y1, y0)

    covariates = x.copy()
    for trial, columns in SCENARIOS[scenario.missingness].items():
        covariates[np.ix_(source == trial, columns)] = np.nan
    treatment = np.where(in_trial, a, None)
    outcome = np.where(in_trial, y, np.nan)
    return Dataset.from_arrays(source, covariates, treatment=treatment, outcome=outcome,
                               covariate_names=COVARIATE_NAMES, treatment_levels=(0, 1))


def true_psi(a, mc_n=TRUTH_MC_N, seed=TRUTH_SEED):
    """Target-population mean of ``Y^a`` by Monte Carlo.

    Uses ``E[m_a(X) Pr(S=0|X)] / E[Pr(S=0|X)]`` over draws of ``X`` so no
    membership or outcome noise enters.
    """
    if a not in (0, 1):
        raise ConfigError(f"treatment must be 0 or 1, got {a!r}", module="simulation")
    rng = stream(seed, "true-psi", a)
    num = den = 0.0
    left = int(mc_n)
    while left > 0:
        m = min(CHUNK, left)
        x = draw_covariates(rng, m)
        w = 1.0 - trial_probability(x)
        mean = mean_treated(x) if a == 1 else mean_control(x)
        num += float(np.sum(w * mean))
        den += float(np.sum(w))
        left -= m
    return num / den


@lru_cache(maxsize=None)
def default_truth(a):
    return true_psi(a)


# study -----------------------------------------------------------------

NAIVE, GF, W, DR, DR_SPLIT = "naive", "gf", "w", "dr", "dr-split"
ESTIMATOR_LABELS = {NAIVE: "Naive", GF: "GF", W: "W", DR: "DR", DR_SPLIT: "DR-split"}


@dataclass(frozen=True)
class GridCell:
    """One estimator configuration of the study grid.

    ``correct_outcome`` selects degree-2 (else degree-1) outcome models and
    ``quadratic_participation`` degree-2 (else degree-1) participation models.
    Flags that do not apply to the estimator are ignored for fitting.
    """

    estimator: str
    correct_outcome: bool = False
    quadratic_participation: bool = False
    complete_case: bool = False
    weights: str = "sample-size"
    normalized: bool = False

    @property
    def label(self):
        tag = ESTIMATOR_LABELS[self.estimator]
        if self.normalized:
            tag += "-normalized"
        if self.weights != "sample-size":
            tag += f"[{self.weights}]"
        return tag


TABLE1_GRID = (
    GridCell(NAIVE),
    GridCell(GF, correct_outcome=True),
    GridCell(GF, correct_outcome=False),
    GridCell(GF, correct_outcome=True, complete_case=True),
    GridCell(W, quadratic_participation=True),
    GridCell(W, quadratic_participation=False),
    GridCell(W, quadratic_participation=True, complete_case=True),
    GridCell(DR, correct_outcome=True, quadratic_participation=True),
    GridCell(DR, correct_outcome=False, quadratic_participation=True),
    GridCell(DR, correct_outcome=True, quadratic_participation=False),
    GridCell(DR, correct_outcome=False, quadratic_participation=False),
    GridCell(DR, correct_outcome=True, quadratic_participation=True, complete_case=True),
)


def _spec(cell):
    return NuisanceSpec.polynomial(range(N_COVARIATES), outcome_degree=2 if cell.correct_outcome else 1,
                                   participation_degree=2 if cell.quadratic_participation else 1,
                                   treatment_degree=1)


class _FitCache:
    """Shares nuisance fits across grid cells within one replicate."""

    def __init__(self, dataset):
        self.dataset = dataset
        self.store = {}

    def _get(self, key, make):
        if key not in self.store:
            self.store[key] = make()
        return self.store[key]

    def fits(self, cell, arms=(0, 1)):
        d = self.dataset
        od = 2 if cell.correct_outcome else 1
        pd = 2 if cell.quadratic_participation else 1
        g, e, p = {}, {}, {}
        for pattern in d.patterns:
            k = pattern.pattern_id
            p[k] = self._get(("p", pd, k), lambda: fit_participation_model(
                d, k, ModelSpec.polynomial(range(N_COVARIATES), pd)))
            for a in arms:
                g[(a, k)] = self._get(("g", od, a, k), lambda: fit_outcome_model(
                    d, k, a, ModelSpec.polynomial(range(N_COVARIATES), od)))
                e[(a, k)] = self._get(("e", a, k), lambda: _treatment_fit(d, k, a))
        return NuisanceFits(g, e, p, _spec(cell))


def _treatment_fit(dataset, k, a):
    view = dataset.view(k)
    if np.all(view.treatment[~view.target] == dataset.code(a)):
        return ConstantModel(1.0)
    return fit_treatment_model(dataset, k, a, ModelSpec.polynomial(range(N_COVARIATES), 1))


def _cell_estimate(cell, dataset, cache, a, seed, replicate):
    if cell.estimator == NAIVE:
        return estimate_naive_pooled(dataset, a).value
    fits = cache.fits(cell)
    w = pattern_weights(cell.weights, dataset, fits, a)
    if cell.estimator == GF:
        return estimate_g_formula(dataset, fits, a, w).value
    if cell.estimator == W:
        return estimate_weighting(dataset, fits, a, w, cell.normalized).value
    if cell.estimator == DR:
        return estimate_dr(dataset, fits, a, w, cell.normalized).value
    if cell.estimator == DR_SPLIT:
        return estimate_dr_sample_split(dataset, _spec(cell), a, w, seed, stream_index=replicate,
                                        normalized=cell.normalized).value
    raise ConfigError(f"unknown estimator {cell.estimator!r}", module="simulation")


def study_replicate(scenario, replicate, grid=TABLE1_GRID):
    """Estimates for every grid cell and treatment; failed cells are NaN. Shape (cells, 2)."""
    out = np.full((len(grid), 2), np.nan)
    data = simulate_dataset(scenario, replicate)
    variants = {}
    for c, cell in enumerate(grid):
        try:
            if cell.complete_case not in variants:
                d = complete_case(data) if cell.complete_case else data
                variants[cell.complete_case] = (d, _FitCache(d))
            d, cache = variants[cell.complete_case]
            for a in (0, 1):
                out[c, a] = _cell_estimate(cell, d, cache, a, scenario.seed, replicate)
        except CimetaError:
            pass
    return out


def _replicate_chunk(args):
    scenario, indices, grid = args
    return [study_replicate(scenario, i, grid) for i in indices]


def default_jobs():
    return os.cpu_count() or 1


def run_replicates(scenario, reps, grid=TABLE1_GRID, jobs=1):
    """Array of estimates with shape (reps, cells, 2), ordered by replicate index."""
    if reps < 2:
        raise ConfigError("a study needs at least 2 replicates", module="simulation")
    grid = tuple(grid)
    if jobs <= 1:
        return np.stack([study_replicate(scenario, i, grid) for i in range(reps)])
    chunks = [range(i, min(i + 25, reps)) for i in range(0, reps, 25)]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        parts = pool.map(_replicate_chunk, [(scenario, list(c), grid) for c in chunks])
        return np.stack([r for part in parts for r in part])


@dataclass(frozen=True)
class StudyRow:
    K: int
    estimator: str
    correct_outcome: bool
    quadratic_participation: bool
    complete_case: bool
    a: int
    bias_sqrt_n: float
    sd_sqrt_n: float
    reps: int

    def as_record(self):
        return {
            "K": self.K, "estimator": self.estimator, "correct_outcome": self.correct_outcome,
            "quadratic_participation": self.quadratic_participation,
            "complete_case": self.complete_case, "a": self.a,
            "bias_sqrt_n": self.bias_sqrt_n, "sd_sqrt_n": self.sd_sqrt_n, "reps": self.reps,
        }


@dataclass(frozen=True, eq=False)
class StudyResult:
    scenario: SimScenario
    grid: tuple
    estimates: np.ndarray
    truth: tuple
    rows: tuple

    def row(self, cell, a):
        return self.rows[2 * self.grid.index(cell) + a]

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        fields = list(StudyRow.__dataclass_fields__)
        writer.writerow(fields)
        for r in self.rows:
            rec = r.as_record()
            writer.writerow([_fmt(rec[f]) for f in fields])
        return buf.getvalue()

    def to_dict(self):
        return {
            "scenario": {"missingness": self.scenario.missingness,
                         "n_total": self.scenario.n_total, "seed": self.scenario.seed,
                         "allocation": self.scenario.allocation},
            "true_psi": {"0": self.truth[0], "1": self.truth[1]},
            "rows": [r.as_record() for r in self.rows],
        }


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def summarize(scenario, grid, estimates, truth):
    K = int(scenario.missingness[1])
    root_n = math.sqrt(scenario.n_total)
    rows = []
    for c, cell in enumerate(grid):
        for a in (0, 1):
            vals = estimates[:, c, a]
            vals = vals[np.isfinite(vals)]
            if len(vals) >= 2:
                bias = root_n * (float(np.mean(vals)) - truth[a])
                sd = root_n * float(np.std(vals, ddof=1))
            else:
                bias = sd = float("nan")
            rows.append(StudyRow(K, cell.label, cell.correct_outcome, cell.quadratic_participation,
                                 cell.complete_case, a, bias, sd, len(vals)))
    return tuple(rows)


def run_study(scenario, reps, grid=TABLE1_GRID, jobs=1, truth=None):
    """Bias and SD (both times sqrt(n_total)) for each grid cell and treatment."""
    grid = tuple(grid)
    estimates = run_replicates(scenario, reps, grid, jobs)
    truth = tuple(truth) if truth is not None else (default_truth(0), default_truth(1))
    return StudyResult(scenario, grid, estimates, truth, summarize(scenario, grid, estimates, truth))
