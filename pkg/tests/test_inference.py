from collections import Counter

import numpy as np
import pytest
from scipy.stats import norm

from cimeta.data import Dataset
from cimeta.errors import ConfigError, DataError, NumericalError
from cimeta.inference import BootstrapPlan, bootstrap, replicate_values, resample
from cimeta.nuisance import NuisanceSpec
from cimeta.pipeline import EstimatorConfig, Statistic
from cimeta.rng import stream

from conftest import make_dataset, survey_dataset


def with_ids(d):
    """Replace the first covariate of every record with a unique id for tracing resamples."""
    cov = np.array(d.covariates)
    cov[:, 0] = np.arange(d.n)
    return d.replace(covariates=cov)


def test_singleton_source_is_redrawn_once():
    d = with_ids(make_dataset(n_target=5, trials=((1, 1, None), (2, 10, None))))
    only = int(np.flatnonzero(d.source == 1)[0])
    for b in range(20):
        r = resample(d, "stratified-by-source", stream(0, "bootstrap", b))
        assert list(r.covariates[r.source == 1, 0]) == [only]
        assert [int((r.source == s).sum()) for s in (0, 1, 2)] == [5, 1, 10]


def test_expected_multiplicity_is_one():
    d = with_ids(make_dataset(n_target=10, trials=((1, 12, None),)))
    counts = np.zeros(d.n)
    B = 10_000
    for b in range(B):
        r = resample(d, "stratified-by-source", stream(3, "bootstrap", b))
        counts += np.bincount(r.covariates[:, 0].astype(int), minlength=d.n)
    assert np.all(np.abs(counts / B - 1.0) <= 0.05)


def test_survey_resampler_keeps_psu_blocks():
    d = with_ids(survey_dataset(psu_size=5))
    members = {}
    for i in np.flatnonzero(d.is_target):
        members.setdefault(d.psu[i], []).append(int(d.covariates[i, 0]))
    for b in range(50):
        r = resample(d, "survey-design", stream(1, "bootstrap", b))
        ids = Counter(int(v) for v in r.covariates[r.is_target, 0])
        for h in ("h0", "h1"):
            drawn = [ids[m[0]] for p, m in members.items() if p.startswith(h)]
            assert sum(drawn) == 2
        for m in members.values():
            assert len({ids[i] for i in m}) == 1
        assert np.array_equal(np.sort(r.survey_weight[r.is_target]),
                              np.sort(d.survey_weight[[i for i, c in ids.items() for _ in range(c)]]))
        assert (r.source > 0).sum() == (d.source > 0).sum()


def test_single_psu_stratum_rejected():
    d = survey_dataset(psus_per_stratum=1)
    stat = Statistic(EstimatorConfig(kind="g-formula"), 1)
    with pytest.raises(DataError, match="single PSU"):
        bootstrap(d, stat, BootstrapPlan(10, mode="survey-design"))


def test_survey_mode_needs_design_columns(small):
    with pytest.raises(ConfigError, match="psu"):
        BootstrapPlan(10, mode="survey-design").check(small)


@pytest.mark.parametrize("kwargs", [dict(replicates=1), dict(mode="jackknife"), dict(interval="bca"),
                                    dict(level=1.5)])
def test_plan_validation(kwargs):
    with pytest.raises(ConfigError):
        BootstrapPlan(**kwargs)


def gf_statistic():
    return Statistic(EstimatorConfig(kind="g-formula", spec=NuisanceSpec.polynomial([0, 1], 1)), 1)


def test_percentile_interval_endpoints_are_replicates(small):
    res = bootstrap(small, gf_statistic(), BootstrapPlan(99, seed=2))
    assert res.lower in res.replicates and res.upper in res.replicates
    assert res.lower <= res.point <= res.upper
    assert res.se == pytest.approx(np.std(res.replicates, ddof=1))
    assert res.B_effective == 99


def test_normal_interval(small):
    res = bootstrap(small, gf_statistic(), BootstrapPlan(50, seed=2, interval="normal-SE", level=0.9))
    z = norm.ppf(0.95)
    assert res.lower == pytest.approx(res.point - z * res.se)
    assert res.upper == pytest.approx(res.point + z * res.se)


def test_degenerate_outcome_gives_point_interval():
    d = survey_dataset()
    d = d.replace(outcome=np.where(d.is_target, np.nan, 3.0))
    stat = Statistic(EstimatorConfig(kind="g-formula", spec=NuisanceSpec.saturated([0, 1])), 1)
    res = bootstrap(d, stat, BootstrapPlan(30))
    assert res.se <= 1e-12
    assert res.lower == pytest.approx(3.0, abs=1e-12) and res.upper == pytest.approx(3.0, abs=1e-12)


def test_deterministic_across_jobs(small):
    plan = BootstrapPlan(16, seed=9)
    one = replicate_values(small, gf_statistic(), plan, jobs=1)
    two = replicate_values(small, gf_statistic(), plan, jobs=2)
    assert np.array_equal(one, two)
    assert np.array_equal(one, replicate_values(small, gf_statistic(), plan, jobs=1))


class Flaky:
    """Fails on a fixed share of resamples (picked by record content)."""

    def __init__(self, share):
        self.share = share

    def __call__(self, dataset):
        if (dataset.outcome[~dataset.is_target].sum() * 1000) % 1 < self.share:
            raise DataError("synthetic failure")
        return 0.0


def test_failed_replicates_are_tolerated_up_to_limit(small):
    res = bootstrap(small, Flaky(0.02), BootstrapPlan(200), point=0.0)
    assert res.B_effective < 200 and np.isnan(res.replicates).sum() == 200 - res.B_effective
    with pytest.raises(NumericalError):
        bootstrap(small, Flaky(0.3), BootstrapPlan(200), point=0.0)
