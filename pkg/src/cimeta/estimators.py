"""Target-population potential outcome mean estimators.

Each estimator computes a per-pattern value from that pattern's subsample and
combines the values with pattern weights that sum to one.  In survey mode the
target-sample terms carry the survey weights and the target normalizer is the
sum of target survey weights instead of the target count.  Survey weights are
used on their target-relative scale (mean 1 over the target), matching the
participation model, so a constant rescaling of the weights has no effect.
"""

from dataclasses import dataclass, field

import numpy as np

from .data import complete_case
from .errors import DataError
from .nuisance import fit_nuisance, transport_weights_view
from .rng import stream

G_FORMULA = "g-formula"
WEIGHTING = "weighting"
WEIGHTING_NORMALIZED = "weighting-normalized"
DR = "dr"
DR_NORMALIZED = "dr-normalized"
DR_SAMPLE_SPLIT = "dr-sample-split"
NAIVE_POOLED = "naive-pooled"
KINDS = (G_FORMULA, WEIGHTING, WEIGHTING_NORMALIZED, DR, DR_NORMALIZED, DR_SAMPLE_SPLIT, NAIVE_POOLED)

WEIGHT_SUM_TOL = 1e-12

__all__ = [
    "KINDS", "PatternEstimate", "EstimateResult", "estimate_g_formula", "estimate_weighting",
    "estimate_dr", "estimate_dr_sample_split", "estimate_naive_pooled", "complete_case_mode",
    "sample_size_weights", "split_folds", "contrast_result",
]


@dataclass(frozen=True, eq=False)
class PatternEstimate:
    pattern_id: int
    psi_k_hat: float
    gamma_hat: float
    n_k_star: int
    term_values: np.ndarray = field(repr=False, default=None)


@dataclass(frozen=True, eq=False)
class EstimateResult:
    estimand: tuple
    estimator_kind: str
    value: float
    per_pattern: tuple = ()
    pattern_weights: np.ndarray = None
    complete_case: bool = False
    survey_mode: bool = False
    components: tuple = ()

    def to_dict(self):
        out = {
            "estimand": list(self.estimand),
            "estimator": self.estimator_kind,
            "psi_hat": self.value,
            "complete_case": self.complete_case,
            "survey_mode": self.survey_mode,
        }
        if self.per_pattern:
            out["patterns"] = [
                {"k": p.pattern_id, "psi_k_hat": p.psi_k_hat, "gamma_hat": p.gamma_hat,
                 "n_k_star": p.n_k_star}
                for p in self.per_pattern
            ]
        if self.pattern_weights is not None:
            out["w"] = [float(v) for v in self.pattern_weights]
        if self.components:
            out["components"] = [c.to_dict() for c in self.components]
        return out


def sample_size_weights(dataset):
    sizes = dataset.patterns.sizes()
    return sizes / sizes.sum()


def _check_weights(dataset, pattern_weights):
    if pattern_weights is None:
        return sample_size_weights(dataset)
    w = np.asarray(pattern_weights, dtype=float)
    if w.shape != (dataset.patterns.K,):
        raise DataError(f"expected {dataset.patterns.K} pattern weights, got {w.shape}",
                        module="estimators")
    if abs(w.sum() - 1.0) > WEIGHT_SUM_TOL:
        raise DataError(f"pattern weights sum to {w.sum()!r}, not 1", module="estimators")
    return w


def _combine(dataset, a, kind, weights, per_pattern, survey_mode):
    value = float(np.dot(weights, [p.psi_k_hat for p in per_pattern]))
    return EstimateResult(("mean", a), kind, value, tuple(per_pattern), weights,
                          survey_mode=survey_mode)


def _target_normalizer(view, survey_mode):
    return float(view.survey_weight[view.target].sum()) if survey_mode else float(view.n_target)


def _target_terms(view, g, survey_mode):
    eta = view.survey_weight if survey_mode else 1.0
    return np.where(view.target, eta * g, 0.0)


def _pattern_estimate(view, psi, terms):
    p = view.pattern
    return PatternEstimate(p.pattern_id, float(psi), view.gamma_hat, p.n_k_star, terms)


def estimate_g_formula(dataset, fits, a, pattern_weights=None, survey_mode=False):
    """Average of the fitted outcome regression over the target sample, per pattern."""
    w = _check_weights(dataset, pattern_weights)
    per = []
    for k in dataset.patterns.ids:
        view = dataset.view(k)
        terms = _target_terms(view, fits.outcome(dataset, k, a), survey_mode)
        per.append(_pattern_estimate(view, terms.sum() / _target_normalizer(view, survey_mode), terms))
    return _combine(dataset, a, G_FORMULA, w, per, survey_mode)


def _arm_outcome(view, dataset, a):
    return np.where(~view.target & (view.treatment == dataset.code(a)), view.outcome, 0.0)


def estimate_weighting(dataset, fits, a, pattern_weights=None, normalized=False, survey_mode=False):
    """Transport-weighted average of trial outcomes, per pattern."""
    w = _check_weights(dataset, pattern_weights)
    per = []
    for k in dataset.patterns.ids:
        view = dataset.view(k)
        o = transport_weights_view(fits, dataset, k, a)
        terms = o * _arm_outcome(view, dataset, a)
        if normalized:
            total = o.sum()
            if not total > 0:
                raise DataError(f"pattern {k}: transport weights sum to zero", module="estimators")
            psi = terms.sum() / total
        else:
            psi = terms.sum() / _target_normalizer(view, survey_mode)
        per.append(_pattern_estimate(view, psi, terms))
    return _combine(dataset, a, WEIGHTING_NORMALIZED if normalized else WEIGHTING, w, per, survey_mode)


def estimate_dr(dataset, fits, a, pattern_weights=None, normalized=False, survey_mode=False):
    """Augmented weighting: weighted outcome residuals plus the g-formula term, per pattern.

    The normalized variant divides only the residual term by the sum of the
    transport weights.
    """
    w = _check_weights(dataset, pattern_weights)
    per = []
    for k in dataset.patterns.ids:
        view = dataset.view(k)
        g = fits.outcome(dataset, k, a)
        o = transport_weights_view(fits, dataset, k, a)
        augmentation = o * (_arm_outcome(view, dataset, a) - np.where(o != 0, g, 0.0))
        plug_in = _target_terms(view, g, survey_mode)
        denom = _target_normalizer(view, survey_mode)
        if normalized:
            total = o.sum()
            if not total > 0:
                raise DataError(f"pattern {k}: transport weights sum to zero", module="estimators")
            psi = augmentation.sum() / total + plug_in.sum() / denom
        else:
            psi = (augmentation.sum() + plug_in.sum()) / denom
        per.append(_pattern_estimate(view, psi, augmentation + plug_in))
    return _combine(dataset, a, DR_NORMALIZED if normalized else DR, w, per, survey_mode)


def estimate_naive_pooled(dataset, a):
    """Mean outcome among all trial records assigned ``a``."""
    sel = ~dataset.is_target & dataset.arm_mask(a)
    if not sel.any():
        raise DataError(f"no trial records with treatment {a!r}", module="estimators")
    return EstimateResult(("mean", a), NAIVE_POOLED, float(dataset.outcome[sel].mean()))


def complete_case_mode(dataset):
    """Restrict to the target sample plus the trials that observe every covariate."""
    return complete_case(dataset)


# sample splitting ------------------------------------------------------


def split_folds(dataset, rng):
    """Two folds stratified by (source, treatment); the target sample is its own stratum."""
    fold = np.zeros(dataset.n, dtype=np.int64)
    keys = dataset.source * (len(dataset.treatment_levels) + 1) + (dataset.treatment + 1)
    keys = np.where(dataset.is_target, -1, keys)
    toggle = 0
    for key in np.unique(keys):
        rows = np.flatnonzero(keys == key)
        rows = rows[rng.permutation(len(rows))]
        order = np.arange(len(rows))
        fold[rows] = (order + toggle) % 2
        toggle = (toggle + len(rows)) % 2
    return fold


def _check_fold(dataset, rows, label):
    part = dataset.take(rows)
    if part.n_target < 2:
        raise DataError(f"fold {label} has fewer than 2 target records", module="estimators",
                        hint="sample splitting needs a larger sample")
    for s in dataset.trial_ids:
        for code in np.unique(dataset.treatment[dataset.source == s]):
            count = np.sum((part.source == s) & (part.treatment == code))
            if count < 2:
                raise DataError(
                    f"fold {label}: trial {s}, treatment {dataset.treatment_levels[code]!r} has "
                    f"{count} records; need >= 2", module="estimators",
                    hint="sample splitting needs a larger sample")
    return part


def estimate_dr_sample_split(dataset, spec, a, pattern_weights=None, seed=0, *, stream_index=0,
                             folds=None, normalized=False, survey_mode=False):
    """Cross-fit DR: fit nuisances on one fold, evaluate on the other, swap, average.

    ``folds`` may supply an explicit 0/1 fold label per record; otherwise a
    stratified split is drawn from ``stream(seed, "split", stream_index)``.
    """
    w = _check_weights(dataset, pattern_weights)
    if folds is None:
        folds = split_folds(dataset, stream(seed, "split", stream_index))
    folds = np.asarray(folds)
    parts = [_check_fold(dataset, np.flatnonzero(folds == f), f + 1) for f in (0, 1)]
    halves = []
    for evaluate, train in ((parts[0], parts[1]), (parts[1], parts[0])):
        if evaluate.patterns.K != dataset.patterns.K:
            raise DataError("folds do not share the pattern structure", module="estimators")
        fits = fit_nuisance(train, spec, [a])
        halves.append(estimate_dr(evaluate, fits, a, w, normalized, survey_mode))
    per = []
    for p1, p2 in zip(halves[0].per_pattern, halves[1].per_pattern):
        full = dataset.view(p1.pattern_id)
        per.append(PatternEstimate(p1.pattern_id, 0.5 * (p1.psi_k_hat + p2.psi_k_hat),
                                   full.gamma_hat, full.pattern.n_k_star))
    value = 0.5 * (halves[0].value + halves[1].value)
    return EstimateResult(("mean", a), DR_SAMPLE_SPLIT, value, tuple(per), w,
                          survey_mode=survey_mode)


def contrast_result(first, second):
    """Difference of two potential-outcome-mean results."""
    return EstimateResult(
        ("contrast", first.estimand[1], second.estimand[1]), first.estimator_kind,
        first.value - second.value, complete_case=first.complete_case,
        survey_mode=first.survey_mode, components=(first, second),
    )
