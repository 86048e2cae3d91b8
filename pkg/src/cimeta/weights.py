"""Pattern-combination weights: sample-size, inverse-variance, optimal, or fixed.

The optimal weights minimise the plug-in asymptotic variance
``T(w) = sum_k w_k^2 V_k + 2 sum_{k<j} w_k w_j C_kj`` subject to
``sum_k w_k = 1``, solved exactly through the Lagrange (KKT) linear system.

Plug-in measure convention: ``V_k`` averages the squared pattern-k influence
contributions over the pattern subsample; ``C_kj`` averages the product of
centred outcome predictions over the target sample and is scaled by ``n0/n``.
"""

from dataclasses import dataclass, field
import warnings

import numpy as np

from .errors import ConfigError, NumericalError
from .estimators import WEIGHT_SUM_TOL, estimate_dr, sample_size_weights
from .nuisance import transport_weights_view

SAMPLE_SIZE = "sample-size"
INVERSE_VARIANCE = "inverse-variance"
OPTIMAL = "optimal"
FIXED = "fixed"
SCHEMES = (SAMPLE_SIZE, INVERSE_VARIANCE, OPTIMAL, FIXED)

KKT_RESIDUAL_TOL = 1e-10
CONDITION_LIMIT = 1e14


@dataclass(frozen=True)
class WeightScheme:
    kind: str = SAMPLE_SIZE
    fixed: tuple = None
    project_simplex: bool = False

    def __post_init__(self):
        if self.kind not in SCHEMES:
            raise ConfigError(f"unknown weight scheme {self.kind!r}; expected one of {SCHEMES}",
                              module="weights")
        if self.kind == FIXED:
            if self.fixed is None:
                raise ConfigError("fixed weight scheme needs a weight vector", module="weights")
            w = np.asarray(self.fixed, dtype=float)
            if np.any(w < 0) or abs(w.sum() - 1.0) > WEIGHT_SUM_TOL:
                raise ConfigError(f"fixed weights must be nonnegative and sum to 1, got {list(w)}",
                                  module="weights")
            object.__setattr__(self, "fixed", tuple(float(v) for v in w))

    @classmethod
    def parse(cls, value, project_simplex=False):
        """Accept a scheme name or a sequence of fixed weights."""
        if isinstance(value, WeightScheme):
            return value
        if isinstance(value, str):
            return cls(value, project_simplex=project_simplex)
        return cls(FIXED, tuple(value), project_simplex)

    @property
    def needs_pilot(self):
        return self.kind in (INVERSE_VARIANCE, OPTIMAL)


@dataclass(frozen=True, eq=False)
class InfluenceTable:
    """Per-pattern influence contributions on each pattern view's rows."""

    a: object
    psi_hat: float
    rows: dict = field(default_factory=dict)
    values: dict = field(default_factory=dict)

    def full(self, k, n):
        out = np.zeros(n)
        out[self.rows[k]] = self.values[k]
        return out


def influence_contributions(dataset, fits, a, psi_hat):
    """``gamma_k [I(S=0)(g - psi) + o (Y - g)]`` on each pattern subsample, zero elsewhere."""
    rows, values = {}, {}
    code = dataset.code(a)
    for k in dataset.patterns.ids:
        view = dataset.view(k)
        g = fits.outcome(dataset, k, a)
        o = transport_weights_view(fits, dataset, k, a)
        arm = ~view.target & (view.treatment == code)
        residual = np.where(arm, view.outcome - g, 0.0)
        values[k] = view.gamma_hat * (np.where(view.target, g - psi_hat, 0.0) + o * residual)
        rows[k] = view.rows
    return InfluenceTable(a, float(psi_hat), rows, values)


@dataclass(frozen=True, eq=False)
class OptimalWeightProblem:
    V_hat: np.ndarray
    C_hat: np.ndarray
    w: np.ndarray = None
    lam: float = None
    residual: float = None
    fallback: bool = False

    @property
    def K(self):
        return len(self.V_hat)

    def kkt_system(self):
        K = self.K
        m = np.zeros((K + 1, K + 1))
        off = self.C_hat - np.diag(np.diag(self.C_hat))
        m[:K, :K] = 2.0 * (np.diag(self.V_hat) + off)
        m[:K, K] = -1.0
        m[K, :K] = 1.0
        rhs = np.zeros(K + 1)
        rhs[K] = 1.0
        return m, rhs


def estimate_V_C(table, dataset, a, fits, psi_hat):
    """Plug-in pattern variances and cross-pattern covariances."""
    ids = dataset.patterns.ids
    K = len(ids)
    V = np.array([np.mean(table.values[k] ** 2) for k in ids])
    C = np.zeros((K, K))
    if K > 1:
        centred = []
        for k in ids:
            view = dataset.view(k)
            centred.append(view.gamma_hat * (fits.outcome(dataset, k, a)[view.target] - psi_hat))
        scale = dataset.n_target / dataset.n
        for i in range(K):
            for j in range(i + 1, K):
                C[i, j] = C[j, i] = np.mean(centred[i] * centred[j]) * scale
    return OptimalWeightProblem(V, C)


def objective(problem, w):
    """Plug-in asymptotic variance ``T(w)``."""
    w = np.asarray(w, dtype=float)
    off = problem.C_hat - np.diag(np.diag(problem.C_hat))
    return float(np.sum(w * w * problem.V_hat) + w @ off @ w)


def inverse_variance(V):
    V = np.asarray(V, dtype=float)
    if np.any(V <= 0):
        raise NumericalError("inverse-variance weights need positive pattern variances",
                             module="weights")
    w = 1.0 / V
    return w / w.sum()


def project_simplex(w):
    """Clip negative weights at zero and renormalise."""
    w = np.clip(np.asarray(w, dtype=float), 0.0, None)
    if w.sum() <= 0:
        raise NumericalError("all weights are non-positive; cannot project", module="weights")
    return w / w.sum()


def solve_optimal_weights(problem, project=False):
    """Solve the KKT system; returns the problem with ``w``, ``lam`` and ``residual`` filled."""
    K = problem.K
    if K == 1:
        return OptimalWeightProblem(problem.V_hat, problem.C_hat, np.ones(1),
                                    float(2 * problem.V_hat[0]), 0.0)
    m, rhs = problem.kkt_system()
    singular = not np.all(np.isfinite(m)) or np.linalg.cond(m) > CONDITION_LIMIT
    if not singular:
        try:
            x = np.linalg.solve(m, rhs)
        except np.linalg.LinAlgError:
            singular = True
    if singular:
        warnings.warn("optimal-weight system is singular; using inverse-variance weights",
                      stacklevel=2)
        w = inverse_variance(problem.V_hat)
        return OptimalWeightProblem(problem.V_hat, problem.C_hat, w, float("nan"), float("nan"), True)
    # one step of iterative refinement keeps the residual at rounding level
    x = x + np.linalg.solve(m, rhs - m @ x)
    residual = float(np.max(np.abs(m @ x - rhs)))
    if residual > KKT_RESIDUAL_TOL:
        raise NumericalError(f"KKT residual {residual:.3g} exceeds {KKT_RESIDUAL_TOL}",
                             module="weights")
    w, lam = x[:K], float(x[K])
    if np.any(w < 0):
        if project:
            w = project_simplex(w)
        else:
            warnings.warn(f"optimal weights include negative values {list(np.round(w, 4))}",
                          stacklevel=2)
    return OptimalWeightProblem(problem.V_hat, problem.C_hat, w, lam, residual)


def weight_problem(dataset, fits, a):
    """Pilot sample-size-weighted DR estimate, then the plug-in problem at that estimate."""
    pilot = estimate_dr(dataset, fits, a, sample_size_weights(dataset)).value
    table = influence_contributions(dataset, fits, a, pilot)
    return estimate_V_C(table, dataset, a, fits, pilot)


def pattern_weights(scheme, dataset, fits=None, a=None):
    """Weights for ``scheme``; the pilot-based schemes need complete ``fits`` for arm ``a``."""
    scheme = WeightScheme.parse(scheme)
    if scheme.kind == SAMPLE_SIZE:
        return sample_size_weights(dataset)
    if scheme.kind == FIXED:
        w = np.array(scheme.fixed)
        if len(w) != dataset.patterns.K:
            raise ConfigError(f"{len(w)} fixed weights given for {dataset.patterns.K} patterns",
                              module="weights")
        return w
    if fits is None:
        raise ConfigError(f"{scheme.kind} weights require fitted nuisance models", module="weights")
    problem = weight_problem(dataset, fits, a)
    if scheme.kind == INVERSE_VARIANCE:
        return inverse_variance(problem.V_hat)
    return solve_optimal_weights(problem, scheme.project_simplex).w
