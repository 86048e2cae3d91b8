"""Weighted GLM fitting: Gaussian/identity by least squares, binomial/logit by IRLS.

Model terms are ``(covariate_index, degree)`` pairs with degree 1 (linear) or
2 (square of a single covariate; no interactions).  An intercept is always
included and comes first in the coefficient vector.
"""

from dataclasses import dataclass
import warnings

import numpy as np
from scipy import linalg as sla
from scipy.special import expit, log_expit

from .errors import DataError, NumericalError

GAUSSIAN = "gaussian-identity"
BINOMIAL = "binomial-logit"
FAMILIES = (GAUSSIAN, BINOMIAL)

TOLERANCE = 1e-8
MAX_ITER = 100
MAX_HALVINGS = 20
DAMPING = 1e-8
ESCALATED_RIDGE = 1e-4
PROB_CLAMP = 1e-12


def _check_family(family):
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}; expected one of {FAMILIES}")


@dataclass(frozen=True)
class ModelSpec:
    terms: tuple = ()
    family: str = GAUSSIAN
    include_intercept: bool = True

    def __post_init__(self):
        _check_family(self.family)
        terms = tuple((int(j), int(d)) for j, d in self.terms)
        if len(set(terms)) != len(terms):
            raise ValueError(f"duplicate terms in {terms}")
        linear = {j for j, d in terms if d == 1}
        for j, d in terms:
            if d not in (1, 2):
                raise ValueError(f"term degree must be 1 or 2, got {d}")
            if d == 2 and j not in linear:
                raise ValueError(f"squared term for covariate {j} requires its linear term")
        if not self.include_intercept:
            raise ValueError("models always include an intercept")
        object.__setattr__(self, "terms", terms)

    @classmethod
    def polynomial(cls, covariates, degree=1, family=GAUSSIAN, linear_only=()):
        """Linear terms for ``covariates`` followed by their squares if ``degree`` is 2.

        Covariates listed in ``linear_only`` (e.g. indicators) never get a square.
        """
        covariates = [int(j) for j in covariates]
        terms = [(j, 1) for j in covariates]
        if degree == 2:
            terms += [(j, 2) for j in covariates if j not in set(linear_only)]
        return cls(tuple(terms), family)

    def restrict(self, allowed):
        allowed = set(allowed)
        return ModelSpec(tuple(t for t in self.terms if t[0] in allowed), self.family)

    def with_family(self, family):
        return ModelSpec(self.terms, family)

    @property
    def covariates_used(self):
        return tuple(sorted({j for j, _ in self.terms}))

    @property
    def n_coefficients(self):
        return 1 + len(self.terms)

    def bind(self, covariates, names=None):
        return self

    def column_names(self, names=None):
        def nm(j):
            return names[j] if names is not None else f"x[{j}]"
        return ["(intercept)"] + [nm(j) if d == 1 else f"{nm(j)}^2" for j, d in self.terms]

    def design(self, covariates, names=None):
        return build_design(self, covariates, names)


def _check_present(covariates, used, names):
    if not used:
        return
    block = covariates[:, list(used)]
    missing = np.isnan(block).any(axis=0)
    if missing.any():
        j = used[int(np.flatnonzero(missing)[0])]
        label = names[j] if names is not None else f"covariate {j}"
        raise DataError(f"model references {label}, which is absent for some rows", module="glm",
                        hint="restrict the model terms to the pattern's observed covariates")


def build_design(spec, covariates, names=None):
    """Design matrix ``[1, x_i1, ..., x_ip, x_j1**2, ...]`` in term order."""
    covariates = np.atleast_2d(np.asarray(covariates, dtype=float))
    _check_present(covariates, spec.covariates_used, names)
    out = np.empty((covariates.shape[0], spec.n_coefficients))
    out[:, 0] = 1.0
    for c, (j, d) in enumerate(spec.terms, start=1):
        col = covariates[:, j]
        out[:, c] = col if d == 1 else col * col
    return out


@dataclass(frozen=True)
class SaturatedSpec:
    """One indicator per distinct value of ``columns`` (intercept + all but the first level).

    Levels are learned from the fitting rows by :meth:`bind`; predicting at an
    unseen level raises ``DataError``.
    """

    columns: tuple
    family: str = GAUSSIAN
    levels: tuple = None

    def __post_init__(self):
        _check_family(self.family)
        object.__setattr__(self, "columns", tuple(int(j) for j in self.columns))

    def restrict(self, allowed):
        allowed = set(allowed)
        return SaturatedSpec(tuple(j for j in self.columns if j in allowed), self.family)

    def with_family(self, family):
        return SaturatedSpec(self.columns, family, self.levels)

    @property
    def covariates_used(self):
        return tuple(sorted(self.columns))

    @property
    def n_coefficients(self):
        if self.levels is None:
            raise ValueError("saturated spec has no levels yet; call bind() first")
        return len(self.levels)

    def bind(self, covariates, names=None):
        covariates = np.atleast_2d(np.asarray(covariates, dtype=float))
        _check_present(covariates, self.covariates_used, names)
        cells = covariates[:, list(self.columns)]
        levels = tuple(tuple(float(v) for v in row) for row in np.unique(cells, axis=0))
        return SaturatedSpec(self.columns, self.family, levels)

    def column_names(self, names=None):
        return ["(intercept)"] + [f"cell{lv}" for lv in self.levels[1:]]

    def design(self, covariates, names=None):
        covariates = np.atleast_2d(np.asarray(covariates, dtype=float))
        _check_present(covariates, self.covariates_used, names)
        cells = covariates[:, list(self.columns)]
        levels = np.array(self.levels, dtype=float).reshape(len(self.levels), len(self.columns))
        m = len(levels)
        _, inverse = np.unique(np.vstack([levels, cells]), axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        to_level = np.full(inverse.max() + 1, -1)
        to_level[inverse[:m]] = np.arange(m)
        code = to_level[inverse[m:]]
        if (code < 0).any():
            key = tuple(cells[int(np.flatnonzero(code < 0)[0])])
            raise DataError(f"covariate cell {key} was not seen when fitting", module="glm",
                            hint="positivity: every target cell needs support in the fitting data")
        out = np.zeros((cells.shape[0], m))
        out[np.arange(cells.shape[0]), code] = 1.0
        out[:, 0] = 1.0
        return out


@dataclass(frozen=True)
class FittedGlm:
    spec: object
    coefficients: np.ndarray
    converged: bool
    iterations: int
    max_abs_score: float
    ridge: float = 0.0
    family: str = None

    def __post_init__(self):
        if self.family is None:
            object.__setattr__(self, "family", self.spec.family)

    def linear_predictor(self, features):
        features = np.atleast_2d(features)
        if features.shape[1] != len(self.coefficients):
            raise ValueError(
                f"feature length {features.shape[1]} does not match {len(self.coefficients)} coefficients")
        return features @ self.coefficients

    def predict(self, features):
        eta = self.linear_predictor(features)
        return expit(eta) if self.family == BINOMIAL else eta

    def predict_covariates(self, covariates, names=None):
        return self.predict(self.spec.design(covariates, names))


def predict(fit, features):
    """Mean response for design rows: identity for Gaussian, expit for binomial."""
    out = fit.predict(features)
    return out[0] if np.ndim(features) == 1 else out


def _dependent_columns(design, weights):
    a = design[weights > 0] * np.sqrt(weights[weights > 0])[:, None]
    if a.shape[0] == 0:
        return list(range(design.shape[1]))
    rank = np.linalg.matrix_rank(a)
    if rank == design.shape[1]:
        return []
    _, _, piv = sla.qr(a, mode="economic", pivoting=True)
    return sorted(int(j) for j in piv[rank:])


def _loglik(design, y, w, beta, penalty):
    eta = design @ beta
    ll = np.sum(w * (y * eta + log_expit(-eta)))
    return ll - 0.5 * penalty * np.sum(beta[1:] ** 2)


def _irls(design, y, w, penalty, tol, max_iter):
    p = design.shape[1]
    beta = np.zeros(p)
    ybar = np.sum(w * y) / np.sum(w)
    if 0 < ybar < 1:
        beta[0] = np.log(ybar / (1 - ybar))
    reg = np.full(p, DAMPING + penalty)
    reg[0] = DAMPING
    pen = np.full(p, penalty)
    pen[0] = 0.0
    ll = _loglik(design, y, w, beta, penalty)
    clamped = False
    it = 0
    while True:
        mu = expit(design @ beta)
        score = design.T @ (w * (y - mu)) - pen * beta
        max_score = float(np.max(np.abs(score)))
        if max_score <= tol or it >= max_iter:
            break
        if mu.min() < PROB_CLAMP or mu.max() > 1 - PROB_CLAMP:
            clamped = True
            if penalty < ESCALATED_RIDGE:
                break
        info = (design * (w * mu * (1 - mu))[:, None]).T @ design
        info[np.diag_indices(p)] += reg
        try:
            step = sla.solve(info, score, assume_a="pos")
        except (np.linalg.LinAlgError, sla.LinAlgError):
            step = np.linalg.lstsq(info, score, rcond=None)[0]
        t = 1.0
        for _ in range(MAX_HALVINGS + 1):
            cand = beta + t * step
            ll_new = _loglik(design, y, w, cand, penalty)
            # near the optimum the log-likelihood change is below rounding
            if ll_new >= ll - 1e-12 * (1.0 + abs(ll)) or not np.isfinite(ll):
                break
            t *= 0.5
        else:
            cand, ll_new = beta, ll
        beta, ll = cand, ll_new
        it += 1
    return beta, max_score <= tol, it, max_score, clamped


def fit_design(design, response, weights=None, family=GAUSSIAN, spec=None, *,
               tol=TOLERANCE, max_iter=MAX_ITER, names=None):
    """Weighted maximum likelihood on a prebuilt design matrix."""
    _check_family(family)
    design = np.asarray(design, dtype=float)
    y = np.asarray(response, dtype=float)
    w = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=float)
    if not (w > 0).any():
        raise DataError("no rows with positive weight", module="glm")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise DataError("observation weights must be finite and non-negative", module="glm")
    if not np.all(np.isfinite(y[w > 0])):
        raise DataError("non-finite response among weighted rows", module="glm")
    dependent = _dependent_columns(design, w)
    if dependent:
        labels = spec.column_names(names) if spec is not None else [f"column {j}" for j in range(design.shape[1])]
        raise NumericalError(
            "rank-deficient design; collinear columns: " + ", ".join(labels[j] for j in dependent),
            module="glm", hint="drop redundant terms or check positivity of the fitting subsample")
    if family == GAUSSIAN:
        sw = np.sqrt(w)
        beta = np.linalg.lstsq(design * sw[:, None], y * sw, rcond=None)[0]
        score = design.T @ (w * (y - design @ beta))
        return FittedGlm(spec, beta, True, 1, float(np.max(np.abs(score))), 0.0, family)
    if np.any((y[w > 0] != 0) & (y[w > 0] != 1)):
        raise DataError("binomial responses must be 0 or 1", module="glm")
    beta, ok, it, score, clamped = _irls(design, y, w, 0.0, tol, max_iter)
    ridge = 0.0
    if clamped:
        warnings.warn("fitted probabilities hit the clamp (quasi-separation); refitting with "
                      f"ridge penalty {ESCALATED_RIDGE}", stacklevel=3)
        ridge = ESCALATED_RIDGE
        beta, ok, it2, score, _ = _irls(design, y, w, ridge, tol, max_iter)
        it += it2
    return FittedGlm(spec, beta, ok, it, score, ridge, family)


def fit_glm(spec, covariates, response, weights=None, *, names=None, tol=TOLERANCE,
            max_iter=MAX_ITER):
    """Fit ``spec`` on the rows of a (full-width) covariate matrix."""
    spec = spec.bind(covariates, names)
    design = spec.design(covariates, names)
    return fit_design(design, response, weights, spec.family, spec, tol=tol, max_iter=max_iter,
                      names=names)
