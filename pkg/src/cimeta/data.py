"""Composite trial + target dataset and its missingness-pattern structure.

Records are stored column-wise.  ``source`` is 0 for target-sample records and
the trial index (>= 1) otherwise.  Treatments are stored as integer codes into
``treatment_levels`` with -1 meaning "absent" (target records).  Covariates are
a float matrix where NaN marks a missing value.
"""

from dataclasses import dataclass, field
from functools import cached_property
import warnings

import numpy as np

from .errors import DataError

__all__ = [
    "Record",
    "Dataset",
    "Violation",
    "ValidationReport",
    "MissingnessPattern",
    "PatternIndex",
    "PatternView",
    "validate",
    "derive_patterns",
    "pattern_subsample",
    "complete_case",
]

SMALL_PATTERN_FRACTION = 0.02


@dataclass(frozen=True)
class Record:
    source_id: int
    treatment: object = None
    outcome: float = None
    covariates: tuple = ()
    survey_weight: float = 1.0
    stratum_id: object = None
    psu_id: object = None


def _readonly(arr):
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Dataset:
    source: np.ndarray
    treatment: np.ndarray
    outcome: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple
    treatment_levels: tuple
    survey_weight: np.ndarray = None
    stratum: np.ndarray = None
    psu: np.ndarray = None
    _views: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        n = len(self.source)
        cov = np.asarray(self.covariates, dtype=float)
        if cov.ndim == 1:
            cov = cov.reshape(n, -1)
        if cov.shape != (n, len(self.covariate_names)):
            raise DataError(
                f"covariate matrix has shape {cov.shape}, expected ({n}, {len(self.covariate_names)})",
                module="data",
            )
        sw = np.ones(n) if self.survey_weight is None else np.asarray(self.survey_weight, dtype=float)
        set_ = object.__setattr__
        set_(self, "source", _readonly(np.asarray(self.source, dtype=np.int64)))
        set_(self, "treatment", _readonly(np.asarray(self.treatment, dtype=np.int64)))
        set_(self, "outcome", _readonly(np.asarray(self.outcome, dtype=float)))
        set_(self, "covariates", _readonly(cov))
        set_(self, "covariate_names", tuple(self.covariate_names))
        set_(self, "treatment_levels", tuple(self.treatment_levels))
        set_(self, "survey_weight", _readonly(sw))
        for name in ("stratum", "psu"):
            value = getattr(self, name)
            if value is not None:
                set_(self, name, _readonly(np.asarray(value, dtype=object)))
        for name in ("treatment", "outcome", "survey_weight"):
            if len(getattr(self, name)) != n:
                raise DataError(f"column '{name}' has the wrong length", module="data")

    # construction -----------------------------------------------------

    @classmethod
    def from_arrays(cls, source, covariates, treatment=None, outcome=None, *,
                    covariate_names=None, treatment_levels=None, survey_weight=None,
                    stratum=None, psu=None):
        """Build a dataset from per-record arrays.

        ``treatment`` holds labels (``None`` for target records) and ``outcome``
        holds floats (NaN/None for target records).
        """
        source = np.asarray(source, dtype=np.int64)
        n = len(source)
        covariates = np.asarray(covariates, dtype=float).reshape(n, -1)
        if covariate_names is None:
            covariate_names = tuple(f"x{j + 1}" for j in range(covariates.shape[1]))
        labels = [None] * n if treatment is None else list(treatment)
        if treatment_levels is None:
            treatment_levels = sorted({t for t in labels if t is not None and t == t})
        treatment_levels = tuple(treatment_levels)
        lookup = {t: i for i, t in enumerate(treatment_levels)}
        codes = np.full(n, -1, dtype=np.int64)
        for i, t in enumerate(labels):
            if t is None or (isinstance(t, float) and np.isnan(t)):
                continue
            if t not in lookup:
                raise DataError(f"record {i}: unknown treatment label {t!r}", module="data")
            codes[i] = lookup[t]
        if outcome is None:
            outcome = np.full(n, np.nan)
        outcome = np.array([np.nan if v is None else v for v in outcome], dtype=float)
        return cls(source, codes, outcome, covariates, tuple(covariate_names), treatment_levels,
                   survey_weight, stratum, psu)

    @classmethod
    def from_records(cls, records, covariate_names, treatment_levels=None):
        records = list(records)
        p = len(covariate_names)
        cov = np.full((len(records), p), np.nan)
        for i, r in enumerate(records):
            for j, v in enumerate(r.covariates):
                if v is not None:
                    cov[i, j] = v
        has_design = any(r.stratum_id is not None or r.psu_id is not None for r in records)
        return cls.from_arrays(
            [r.source_id for r in records],
            cov,
            [r.treatment for r in records],
            [r.outcome for r in records],
            covariate_names=covariate_names,
            treatment_levels=treatment_levels,
            survey_weight=[r.survey_weight for r in records],
            stratum=[r.stratum_id for r in records] if has_design else None,
            psu=[r.psu_id for r in records] if has_design else None,
        )

    def record(self, i):
        code = self.treatment[i]
        cov = tuple(None if np.isnan(v) else float(v) for v in self.covariates[i])
        return Record(
            int(self.source[i]),
            None if code < 0 else self.treatment_levels[code],
            None if np.isnan(self.outcome[i]) else float(self.outcome[i]),
            cov,
            float(self.survey_weight[i]),
            None if self.stratum is None else self.stratum[i],
            None if self.psu is None else self.psu[i],
        )

    def take(self, rows):
        """Subset (or resample, when ``rows`` repeats) records."""
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(
            self.source[rows], self.treatment[rows], self.outcome[rows], self.covariates[rows],
            self.covariate_names, self.treatment_levels, self.survey_weight[rows],
            None if self.stratum is None else self.stratum[rows],
            None if self.psu is None else self.psu[rows],
        )

    def replace(self, **columns):
        values = dict(
            source=self.source, treatment=self.treatment, outcome=self.outcome,
            covariates=self.covariates, covariate_names=self.covariate_names,
            treatment_levels=self.treatment_levels, survey_weight=self.survey_weight,
            stratum=self.stratum, psu=self.psu,
        )
        values.update(columns)
        return Dataset(**values)

    def restrict_sources(self, source_ids):
        keep = np.isin(self.source, list(source_ids)) | (self.source == 0)
        return self.take(np.flatnonzero(keep))

    # accessors --------------------------------------------------------

    def __len__(self):
        return len(self.source)

    @property
    def n(self):
        return len(self.source)

    @cached_property
    def is_target(self):
        mask = self.source == 0
        mask.setflags(write=False)
        return mask

    @property
    def n_target(self):
        return int(self.is_target.sum())

    @cached_property
    def trial_ids(self):
        return tuple(int(s) for s in np.unique(self.source[self.source != 0]))

    def code(self, a):
        try:
            return self.treatment_levels.index(a)
        except ValueError:
            raise DataError(f"unknown treatment level {a!r}", module="data") from None

    def arm_mask(self, a):
        return self.treatment == self.code(a)

    def trials_with_arm(self, a):
        code = self.code(a)
        return tuple(int(s) for s in np.unique(self.source[(self.treatment == code) & ~self.is_target]))

    @cached_property
    def relative_survey_weight(self):
        """Survey weights rescaled to mean 1 over the target; trial records keep 1.

        Estimators and the participation model use this scale, so results do
        not change when every survey weight is multiplied by a constant.
        """
        target = self.is_target
        out = np.ones(self.n)
        if target.any():
            eta = self.survey_weight[target]
            out[target] = eta / eta.mean()
        out.setflags(write=False)
        return out

    @property
    def has_design(self):
        return self.stratum is not None and self.psu is not None

    @cached_property
    def patterns(self):
        return derive_patterns(self)

    def view(self, k):
        """Cached :class:`PatternView` for pattern ``k``."""
        if k not in self._views:
            self._views[k] = PatternView.build(self, self.patterns[k])
        return self._views[k]


# validation -----------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    kind: str
    message: str
    indices: tuple = ()


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple = ()

    def __bool__(self):
        return not self.violations

    @property
    def ok(self):
        return not self.violations

    def kinds(self):
        return {v.kind for v in self.violations}

    def __str__(self):
        if self.ok:
            return "dataset is well-formed"
        lines = []
        for v in self.violations:
            shown = ", ".join(str(i) for i in v.indices[:10])
            more = "" if len(v.indices) <= 10 else f" (+{len(v.indices) - 10} more)"
            lines.append(f"{v.kind}: {v.message}" + (f" [records {shown}{more}]" if v.indices else ""))
        return "\n".join(lines)


def _rows(mask):
    return tuple(int(i) for i in np.flatnonzero(mask))


def validate(dataset):
    """Check every record- and dataset-level invariant; never raises."""
    out = []
    target = dataset.source == 0
    trial = dataset.source > 0
    present = ~np.isnan(dataset.covariates)
    has_a = dataset.treatment >= 0
    has_y = ~np.isnan(dataset.outcome)

    def add(kind, message, mask=None):
        idx = () if mask is None else _rows(mask)
        if mask is None or idx:
            out.append(Violation(kind, message, idx))

    add("negative-source", "source ids must be >= 0", dataset.source < 0)
    if not target.any():
        add("no-target", "the target sample must contain at least one record")
    if not trial.any():
        add("no-trial", "at least one trial is required")
    add("target-has-treatment", "target records have no treatment", target & has_a)
    add("target-has-outcome", "target records have no outcome", target & has_y)
    add("trial-missing-treatment", "trial records need a treatment", trial & ~has_a)
    add("trial-missing-outcome", "trial records need a finite outcome",
        trial & ~np.isfinite(dataset.outcome))
    add("unknown-treatment", "treatment code outside treatment_levels",
        dataset.treatment >= len(dataset.treatment_levels))
    add("target-missing-covariate", "target must observe all covariates",
        target & ~present.all(axis=1))
    add("survey-weight-nonpositive", "survey weights must be positive and finite",
        ~(np.isfinite(dataset.survey_weight) & (dataset.survey_weight > 0)))
    add("trial-survey-weight", "trial records must have survey weight 1",
        trial & (dataset.survey_weight != 1.0))
    for s in np.unique(dataset.source[trial]):
        rows = dataset.source == s
        block = present[rows]
        partial = block.any(axis=0) & ~block.all(axis=0)
        if partial.any():
            names = [dataset.covariate_names[j] for j in np.flatnonzero(partial)]
            bad = rows & ~present[:, partial].all(axis=1)
            add("non-systematic-missingness",
                f"trial {int(s)} has within-trial missingness in {', '.join(names)}", bad)
    return ValidationReport(tuple(out))


# patterns -------------------------------------------------------------


@dataclass(frozen=True)
class MissingnessPattern:
    pattern_id: int
    trial_ids: tuple
    observed_covariates: tuple
    n_k_star: int


@dataclass(frozen=True)
class PatternIndex:
    patterns: tuple
    by_source: dict

    @property
    def K(self):
        return len(self.patterns)

    def __len__(self):
        return len(self.patterns)

    def __iter__(self):
        return iter(self.patterns)

    def __getitem__(self, k):
        if not isinstance(k, (int, np.integer)) or not 1 <= k <= len(self.patterns):
            raise DataError(f"unknown pattern id {k!r}; valid ids are 1..{len(self.patterns)}",
                            module="data")
        return self.patterns[k - 1]

    @property
    def ids(self):
        return tuple(range(1, len(self.patterns) + 1))

    def sizes(self):
        return np.array([p.n_k_star for p in self.patterns], dtype=float)


def derive_patterns(dataset):
    """Group trials by identical present-covariate sets."""
    report = validate(dataset)
    if not report.ok:
        raise DataError(f"dataset failed validation:\n{report}", module="data",
                        hint="run validate() and fix the listed records")
    present = ~np.isnan(dataset.covariates)
    groups = {}
    counts = {}
    for s in dataset.trial_ids:
        rows = dataset.source == s
        key = tuple(int(j) for j in np.flatnonzero(present[rows][0]))
        groups.setdefault(key, []).append(s)
        counts[s] = int(rows.sum())
    ordered = sorted((tuple(sorted(ids)), key) for key, ids in groups.items())
    patterns = []
    by_source = {}
    for k, (ids, key) in enumerate(ordered, start=1):
        patterns.append(MissingnessPattern(k, ids, key, sum(counts[s] for s in ids)))
        for s in ids:
            by_source[s] = k
    total = sum(counts.values())
    for p in patterns:
        if p.n_k_star < SMALL_PATTERN_FRACTION * total:
            warnings.warn(
                f"pattern {p.pattern_id} holds {p.n_k_star} of {total} trial records "
                f"(< {SMALL_PATTERN_FRACTION:.0%})",
                stacklevel=2,
            )
    return PatternIndex(tuple(patterns), by_source)


def pattern_subsample(dataset, k):
    """Row indices of records with source in the pattern's trials or the target."""
    pattern = dataset.patterns[k]
    mask = np.isin(dataset.source, pattern.trial_ids) | (dataset.source == 0)
    return np.flatnonzero(mask)


@dataclass(frozen=True, eq=False)
class PatternView:
    """Columns of one pattern's subsample (covariates keep full width; unobserved ones are NaN).

    ``survey_weight`` holds the target-relative survey weights.
    """

    pattern: MissingnessPattern
    rows: np.ndarray
    target: np.ndarray
    covariates: np.ndarray
    source: np.ndarray
    treatment: np.ndarray
    outcome: np.ndarray
    survey_weight: np.ndarray

    @classmethod
    def build(cls, dataset, pattern):
        rows = pattern_subsample(dataset, pattern.pattern_id)
        cov = dataset.covariates[rows]
        return cls(
            pattern, rows, dataset.source[rows] == 0, cov, dataset.source[rows],
            dataset.treatment[rows], dataset.outcome[rows], dataset.relative_survey_weight[rows],
        )

    @property
    def n_target(self):
        return int(self.target.sum())

    @property
    def gamma_hat(self):
        return len(self.rows) / self.n_target

    def trial(self):
        return ~self.target


def complete_case(dataset):
    """Keep the target plus only the trials that observe every covariate."""
    p = len(dataset.covariate_names)
    full = [s for pat in dataset.patterns for s in pat.trial_ids if len(pat.observed_covariates) == p]
    if not full:
        raise DataError("no trial observes all covariates; complete-case analysis is impossible",
                        module="estimators")
    return dataset.restrict_sources(full)
