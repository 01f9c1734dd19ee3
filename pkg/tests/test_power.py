import math

import pytest
from scipy.special import logit

from srtkit.design import builtin_percs, two_arm_design
from srtkit.errors import ConfigurationError, PreconditionError
from srtkit.estimators import ComparisonSpec, allocate, power_monte_carlo, two_proportion_n
from srtkit.simulator import null_model, percs_like_model

ONE_PERIOD = two_arm_design(n_periods=1)


def two_arm_model(p0, p1):
    m = null_model(ONE_PERIOD, countries=("US",), baseline=float(logit(p0)))
    return m.with_arm_effect(1, "B", float(logit(p1) - logit(p0)))


ATE = ComparisonSpec("ate", period=1, group="B", control="E0")


def test_null_power_is_alpha():
    res = power_monte_carlo(ONE_PERIOD, two_arm_model(0.3, 0.3), ATE, 400, alpha=0.05,
                            replications=2000, seed=3)
    assert abs(res.power - 0.05) <= 3 * math.sqrt(0.05 * 0.95 / 2000)
    assert res.failures == 0


def test_large_effect_near_one():
    m = percs_like_model().with_arm_effect(2, "P0", 1.0, country="US")
    spec = ComparisonSpec("ate", period=2, group="P0", control="E0")
    res = power_monte_carlo(builtin_percs(), m, spec, 20_000, replications=100, seed=1)
    assert res.power > 0.99


def test_closed_form_sample_size():
    n_per = two_proportion_n(0.3, 0.4)
    assert n_per == 354 or abs(n_per - 354) <= 3
    res = power_monte_carlo(ONE_PERIOD, two_arm_model(0.3, 0.4), ATE, 2 * n_per,
                            replications=1000, seed=9)
    assert 0.75 <= res.power <= 0.85
    assert abs(res.mean_estimate - (logit(0.4) - logit(0.3))) < 0.03


def test_jobs_invariance():
    m = two_arm_model(0.3, 0.38)
    a = power_monte_carlo(ONE_PERIOD, m, ATE, 300, replications=120, seed=4, jobs=1)
    b = power_monte_carlo(ONE_PERIOD, m, ATE, 300, replications=120, seed=4, jobs=3)
    assert a == b


def test_seed_changes_result():
    m = two_arm_model(0.3, 0.38)
    a = power_monte_carlo(ONE_PERIOD, m, ATE, 300, replications=120, seed=4)
    b = power_monte_carlo(ONE_PERIOD, m, ATE, 300, replications=120, seed=5)
    assert a.rejections != b.rejections or a.mean_estimate != b.mean_estimate


def test_too_few_replications():
    with pytest.raises(PreconditionError, match="replications"):
        power_monte_carlo(ONE_PERIOD, two_arm_model(0.3, 0.3), ATE, 100, replications=99)


def test_undefined_group():
    spec = ComparisonSpec("ate", period=2, group="Q9", control="E0")
    with pytest.raises(ConfigurationError, match="Q9"):
        power_monte_carlo(builtin_percs(), percs_like_model(), spec, 1000, replications=100)


def test_spec_round_trip_and_unknown_key():
    spec = ComparisonSpec("moderator", period=1, group="P0", moderator="prior-activity",
                          stratum="active")
    assert ComparisonSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ConfigurationError):
        ComparisonSpec.from_dict({"kind": "ate", "grp": "P0"})


def test_moderator_power_rejects_post_randomization():
    spec = ComparisonSpec("moderator", period=1, group="P0", moderator="activity-week:3",
                          stratum="active")
    with pytest.raises(Exception, match="post-randomization"):
        power_monte_carlo(builtin_percs(), percs_like_model(), spec, 1000, replications=100)


def test_allocate():
    assert allocate(10, {"IN": 1, "US": 1, "other": 1}) == {"IN": 4, "US": 3, "other": 3}
    counts = allocate(8681, {"IN": 3455, "US": 5226})
    assert counts == {"IN": 3455, "US": 5226}
    assert sum(allocate(997, {"a": 0.2, "b": 0.3, "c": 0.5}).values()) == 997


def test_two_proportion_reference():
    # textbook value for 0.5 vs 0.6 at alpha 0.05, power 0.8 is 388 per group
    assert two_proportion_n(0.5, 0.6) == 388
    # n is the smallest size whose approximate power reaches the target
    from scipy.stats import norm

    def approx_power(n, p0, p1):
        pbar = (p0 + p1) / 2
        se0 = math.sqrt(2 * pbar * (1 - pbar) / n)
        se1 = math.sqrt((p0 * (1 - p0) + p1 * (1 - p1)) / n)
        return norm.cdf((abs(p1 - p0) - norm.ppf(0.975) * se0) / se1)

    for p0, p1, target in [(0.3, 0.4, 0.9), (0.2, 0.25, 0.8), (0.6, 0.5, 0.8)]:
        n = two_proportion_n(p0, p1, power=target)
        assert approx_power(n, p0, p1) >= target > approx_power(n - 1, p0, p1)
