"""Bootstrap inference for any dataset-level statistic.

Two resampling schemes:

* ``stratified-by-source``: within each source (every trial and the target)
  draw as many records as it has, with replacement;
* ``survey-design``: trial records as above; target PSUs drawn with
  replacement within each stratum, every record of a drawn PSU entering (again
  if drawn twice) with its survey weight unchanged.

Replicate ``b`` draws from ``stream(seed, "bootstrap", b)`` and re-runs the
whole statistic on its resample, so results do not depend on execution order
or on the number of worker processes.
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
import os

import numpy as np
from scipy.stats import norm

from .errors import CimetaError, ConfigError, DataError, NumericalError
from .rng import stream

STRATIFIED = "stratified-by-source"
SURVEY = "survey-design"
MODES = (STRATIFIED, SURVEY)
PERCENTILE, NORMAL = "percentile", "normal-SE"
INTERVALS = (PERCENTILE, NORMAL)
DEFAULT_B = 1000
MAX_FAILURE_SHARE = 0.05


@dataclass(frozen=True)
class BootstrapPlan:
    replicates: int = DEFAULT_B
    seed: int = 0
    mode: str = STRATIFIED
    interval: str = PERCENTILE
    level: float = 0.95

    def __post_init__(self):
        if self.replicates < 2:
            raise ConfigError("bootstrap needs at least 2 replicates", module="inference")
        if self.mode not in MODES:
            raise ConfigError(f"unknown bootstrap mode {self.mode!r}; expected one of {MODES}",
                              module="inference")
        if self.interval not in INTERVALS:
            raise ConfigError(f"unknown interval {self.interval!r}; expected one of {INTERVALS}",
                              module="inference")
        if not 0 < self.level < 1:
            raise ConfigError("interval level must be in (0, 1)", module="inference")

    def check(self, dataset):
        """Preconditions that must hold before any replicate is computed."""
        if self.mode != SURVEY:
            return
        if not dataset.has_design:
            raise ConfigError("survey-design bootstrap needs 'stratum' and 'psu' columns",
                              module="inference", hint="add the columns or use stratified-by-source")
        target = dataset.is_target
        for name in ("stratum", "psu"):
            column = getattr(dataset, name)[target]
            if any(v is None or v == "" or (isinstance(v, float) and np.isnan(v)) for v in column):
                raise ConfigError(f"survey-design bootstrap: some target records have no {name}",
                                  module="inference")
        for stratum, psus in _target_design(dataset).items():
            if len(psus) < 2:
                raise DataError(f"stratum {stratum!r} has a single PSU; resampling variance is undefined",
                                module="inference", hint="collapse it with a neighbouring stratum")


@dataclass(frozen=True)
class IntervalEstimate:
    point: float
    se: float
    lower: float
    upper: float
    B_effective: int
    B: int
    level: float = 0.95
    interval: str = PERCENTILE
    replicates: np.ndarray = None

    def to_dict(self):
        return {"point": self.point, "se": self.se, "lower": self.lower, "upper": self.upper,
                "level": self.level, "interval": self.interval, "B": self.B,
                "B_effective": self.B_effective}


def _target_design(dataset):
    """``{stratum: {psu: row indices}}`` over target records, in order of first appearance."""
    design = {}
    for i in np.flatnonzero(dataset.is_target):
        design.setdefault(dataset.stratum[i], {}).setdefault(dataset.psu[i], []).append(i)
    return design


def resample(dataset, mode, rng):
    """One bootstrap resample of ``dataset``."""
    pieces = []
    design = _target_design(dataset) if mode == SURVEY else None
    for s in np.unique(dataset.source):
        if s == 0 and mode == SURVEY:
            for psus in design.values():
                blocks = list(psus.values())
                for j in rng.integers(0, len(blocks), len(blocks)):
                    pieces.append(np.asarray(blocks[j], dtype=np.int64))
            continue
        rows = np.flatnonzero(dataset.source == s)
        pieces.append(rows[rng.integers(0, len(rows), len(rows))])
    return dataset.take(np.concatenate(pieces))


def _replicate(statistic, dataset, mode, seed, b):
    try:
        value = float(statistic(resample(dataset, mode, stream(seed, "bootstrap", b))))
    except CimetaError:
        return float("nan")
    return value if np.isfinite(value) else float("nan")


def _chunk(args):
    statistic, dataset, mode, seed, indices = args
    return [_replicate(statistic, dataset, mode, seed, b) for b in indices]


def default_jobs():
    return os.cpu_count() or 1


def replicate_values(dataset, statistic, plan, jobs=1):
    """Replicate estimates ordered by replicate index (NaN where a replicate failed)."""
    B = plan.replicates
    if jobs <= 1:
        return np.array([_replicate(statistic, dataset, plan.mode, plan.seed, b) for b in range(B)])
    size = max(1, -(-B // (4 * jobs)))
    chunks = [list(range(i, min(i + size, B))) for i in range(0, B, size)]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        parts = pool.map(_chunk, [(statistic, dataset, plan.mode, plan.seed, c) for c in chunks])
        return np.array([v for part in parts for v in part])


def bootstrap(dataset, statistic, plan, jobs=1, point=None):
    """Bootstrap SE and interval for ``statistic`` (a picklable ``dataset -> float``)."""
    plan.check(dataset)
    if point is None:
        point = float(statistic(dataset))
    values = replicate_values(dataset, statistic, plan, jobs)
    ok = values[np.isfinite(values)]
    failed = len(values) - len(ok)
    if failed > MAX_FAILURE_SHARE * len(values) or len(ok) < 2:
        raise NumericalError(f"{failed} of {len(values)} bootstrap replicates failed",
                             module="inference", hint="check positivity and model specification")
    se = float(np.std(ok, ddof=1))
    alpha = 1.0 - plan.level
    if plan.interval == PERCENTILE:
        lower, upper = (float(q) for q in np.quantile(ok, [alpha / 2, 1 - alpha / 2],
                                                        method="inverted_cdf"))
    else:
        z = float(norm.ppf(1 - alpha / 2))
        lower, upper = point - z * se, point + z * se
    return IntervalEstimate(point, se, lower, upper, len(ok), len(values), plan.level,
                            plan.interval, values)
