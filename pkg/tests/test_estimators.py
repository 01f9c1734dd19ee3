import math

import numpy as np
import pytest
import statsmodels.api as sm
from hypothesis import given, settings
from hypothesis import strategies as st

from srtkit.design import builtin_percs
from srtkit.errors import (CollinearityError, ConfigurationError, InsufficientDataError,
                           PostRandomizationModeratorError, PreconditionError, SeparationError)
from srtkit.estimators import (FLAG_MODERATE, FLAG_SEPARATION, ModeratorSpec, Ref,
                               activity_in_week, average_treatment_effect, compare_sequences,
                               delayed_effect, fit_logistic, log_odds_ratio_2x2,
                               moderator_effect, prior_activity, responder,
                               sequence_return_proportion, wald_proportion)
from srtkit.records import Cohort
from srtkit.sequences import design_groups
from srtkit.simulator import make_profiles, null_model, percs_like_model, simulate_cohort

PERCS = builtin_percs()


def closed_form(a, b, c, d):
    return math.log(a * d / (b * c)), math.sqrt(1 / a + 1 / b + 1 / c + 1 / d)


def expand(a, b, c, d):
    treat = np.repeat([1, 1, 0, 0], [a, b, c, d])
    y = np.repeat([1, 0, 1, 0], [a, b, c, d])
    return np.column_stack([np.ones_like(treat), treat]), y


def sim(n, model=None, seed=0, countries=("US",)):
    model = model or null_model(PERCS, countries=countries)
    counts = {c: n // len(countries) for c in countries}
    return simulate_cohort(PERCS, make_profiles(counts), model, seed).cohort


class TestFitLogistic:
    def test_documented_two_by_two(self):
        X, y = expand(30, 70, 50, 50)
        fit = fit_logistic(X, y)
        assert fit.converged
        assert fit.coefficients[1] == pytest.approx(-0.8473, abs=5e-5)
        assert fit.std_errors[1] == pytest.approx(0.2960, abs=5e-5)
        lor, se = closed_form(30, 70, 50, 50)
        assert abs(fit.coefficients[1] - lor) < 1e-6 and abs(fit.std_errors[1] - se) < 1e-6

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 300), st.integers(1, 300), st.integers(1, 300), st.integers(1, 300))
    def test_two_by_two_equivalence(self, a, b, c, d):
        est = log_odds_ratio_2x2(a, b, c, d)
        lor, se = closed_form(a, b, c, d)
        if max(abs(lor), abs(math.log(c / d))) < 10:
            assert abs(est.log_odds_ratio - lor) < 1e-6
            assert abs(est.std_error - se) < 1e-6

    def test_weights_equal_expanded_rows(self):
        X, y = expand(12, 40, 33, 21)
        full = fit_logistic(X, y)
        agg = log_odds_ratio_2x2(12, 40, 33, 21)
        assert full.coefficients[1] == pytest.approx(agg.log_odds_ratio, abs=1e-10)
        assert full.std_errors[1] == pytest.approx(agg.std_error, abs=1e-10)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_statsmodels(self, seed):
        rng = np.random.default_rng(seed)
        n = 400
        X = np.column_stack([np.ones(n), rng.normal(size=n), rng.integers(0, 2, n),
                             rng.normal(size=n)])
        y = (rng.random(n) < 1 / (1 + np.exp(-(X @ [0.2, 0.8, -0.5, 0.1])))).astype(float)
        ours = fit_logistic(X, y)
        ref = sm.Logit(y, X).fit(disp=0, tol=1e-12, maxiter=100)
        assert np.allclose(ours.coefficients, ref.params, atol=1e-6)
        assert np.allclose(ours.covariance, ref.cov_params(), atol=1e-6)
        assert ours.log_likelihood == pytest.approx(ref.llf, abs=1e-6)

    def test_null_slope_within_three_se(self):
        rng = np.random.default_rng(11)
        inside = 0
        for _ in range(1000):
            x = rng.normal(size=200)
            y = (rng.random(200) < 0.4).astype(float)
            fit = fit_logistic(np.column_stack([np.ones(200), x]), y)
            inside += abs(fit.coefficients[1]) <= 3 * fit.std_errors[1]
        assert inside >= 990

    def test_all_ones(self):
        with pytest.raises(SeparationError):
            fit_logistic(np.ones((10, 1)), np.ones(10))

    def test_complete_separation_flagged(self):
        x = np.arange(20.0) - 9.5
        y = (x > 0).astype(float)
        fit = fit_logistic(np.column_stack([np.ones(20), x]), y)
        assert fit.separation and not fit.converged

    def test_quasi_separation_in_two_by_two(self):
        est = log_odds_ratio_2x2(0, 40, 10, 30)
        assert FLAG_SEPARATION in est.flags

    def test_collinear(self):
        x = np.arange(10.0)
        with pytest.raises(CollinearityError, match="collinear"):
            fit_logistic(np.column_stack([np.ones(10), x, 2 * x]), (x > 4).astype(float))

    def test_n_less_than_p(self):
        with pytest.raises(PreconditionError):
            fit_logistic(np.eye(3)[:2], [0, 1])

    def test_non_binary(self):
        with pytest.raises(PreconditionError):
            fit_logistic(np.ones((3, 1)), [0, 2, 1])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_monotone_and_score(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(30, 300))
        X = np.column_stack([np.ones(n), rng.normal(size=(n, 2)) * rng.uniform(0.1, 3)])
        beta = rng.normal(size=3)
        y = (rng.random(n) < 1 / (1 + np.exp(-(X @ beta)))).astype(float)
        if y.min() == y.max():
            return
        fit = fit_logistic(X, y)
        path = np.array(fit.ll_path)
        assert np.all(np.diff(path) >= -1e-9 * np.abs(path[:-1]))
        if fit.converged:
            assert np.max(np.abs(fit.score)) < 1e-8
            cov = fit.covariance
            assert np.allclose(cov, cov.T)
            assert np.all(np.linalg.eigvalsh(cov) >= -1e-12)


class TestProportions:
    def test_wald_half(self):
        p, lo, hi = wald_proportion(50, 100)
        assert p == 0.5
        assert lo == pytest.approx(0.402, abs=5e-4) and hi == pytest.approx(0.598, abs=5e-4)
        z = 1.959963984540054
        assert lo == pytest.approx(0.5 - z * 0.05, abs=1e-12)

    def test_clipped(self):
        p, lo, hi = wald_proportion(40, 40)
        assert (p, hi) == (1.0, 1.0) and lo == 1.0

    def test_sequence_proportion_matches_manual(self):
        cohort = sim(3000, seed=2)
        est = sequence_return_proportion(cohort, "(E1,E0,E1)", 4, design=PERCS)
        g = design_groups(PERCS)
        ids = PERCS.arm_ids
        mask = np.array([ids[a] in g["E1"].members and ids[b] in g["E0"].members
                         and ids[c] in g["E1"].members for a, b, c in cohort.arms])
        assert est.n == mask.sum()
        assert est.proportion == cohort.activity[mask, 3].mean()
        assert est.ci_low <= est.proportion <= est.ci_high

    def test_errors(self):
        cohort = small_cohort(n=50)
        cohort.arms[:, 0] = 1
        with pytest.raises(InsufficientDataError, match="no learners match"):
            sequence_return_proportion(cohort, "(T1,*,*)", 4, design=PERCS)
        with pytest.raises(PreconditionError):
            sequence_return_proportion(cohort, "(*,*,*)", 5, design=PERCS)

    def test_ci_wider_with_no_email_slots(self):
        cohort = simulate_cohort(PERCS, make_profiles({"IN": 3455, "US": 5226}),
                                 percs_like_model(), 21).cohort
        widths = {}
        for slots in [(a, b, c) for a in "01" for b in "01" for c in "01"]:
            text = "(" + ",".join("E" + s for s in slots) + ")"
            e = sequence_return_proportion(cohort, text, 4, design=PERCS)
            widths[text] = e.ci_high - e.ci_low
        for text, w in widths.items():
            if "E0" in text:
                assert w > widths["(E1,E1,E1)"]


def small_cohort(n=400, seed=0):
    rng = np.random.default_rng(seed)
    arms = rng.integers(0, 7, (n, 3))
    act = rng.integers(0, 2, (n, 4)).astype(np.int8)
    return Cohort([f"s{i}" for i in range(n)], np.array(["US"] * n, dtype=object),
                  PERCS.arm_ids, arms, act)


class TestATE:
    def test_consistency_with_sequence_proportions(self):
        for seed in range(5):
            cohort = small_cohort(seed=seed)
            for period in (1, 2, 3):
                for g in ("P0", "P1", "P2", "E1", "G1"):
                    est = average_treatment_effect(cohort, period, [g], "E0", design=PERCS)[0]
                    slots_g = ["*"] * 3
                    slots_c = ["*"] * 3
                    slots_g[period - 1], slots_c[period - 1] = g, "E0"
                    pg = sequence_return_proportion(cohort, "(" + ",".join(slots_g) + ")",
                                                    period + 1, design=PERCS)
                    pc = sequence_return_proportion(cohort, "(" + ",".join(slots_c) + ")",
                                                    period + 1, design=PERCS)
                    a = round(pg.proportion * pg.n)
                    c = round(pc.proportion * pc.n)
                    lor, se = closed_form(a, pg.n - a, c, pc.n - c)
                    assert abs(est.log_odds_ratio - lor) < 1e-6
                    assert abs(est.std_error - se) < 1e-6
                    assert (est.n_treated, est.n_control) == (pg.n, pc.n)

    def test_nonfocal_arms_do_not_matter(self):
        cohort = small_cohort(n=500, seed=3)
        base = average_treatment_effect(cohort, 2, ["P0", "P2"], "E0", design=PERCS)
        rng = np.random.default_rng(0)
        shuffled = Cohort(cohort.learner_ids, cohort.countries, cohort.arm_ids,
                          cohort.arms.copy(), cohort.activity)
        shuffled.arms[:, 0] = rng.integers(0, 7, 500)
        shuffled.arms[:, 2] = rng.integers(0, 7, 500)
        again = average_treatment_effect(shuffled, 2, ["P0", "P2"], "E0", design=PERCS)
        assert [e.to_dict() for e in base] == [e.to_dict() for e in again]

    def test_marginalization_under_simulation(self):
        # week-2 P2 effect is the same whether week-1/3 arms are drawn or fixed to control
        m = null_model(PERCS, groups=["E0", "P0", "P1", "P2"]).with_arm_effect(2, "P2", 0.5)
        m = m.with_arm_effect(1, "P0", 0.4).with_arm_effect(3, "P1", -0.3)
        ests = [average_treatment_effect(sim(20_000, m, seed=s), 2, ["P2"], "E0",
                                         design=PERCS)[0].log_odds_ratio for s in range(10)]
        assert abs(np.mean(ests) - 0.5) < 0.05

    def test_flag_rule(self):
        for a, b, c, d in [(30, 70, 50, 50), (45, 55, 50, 50), (60, 40, 50, 50), (52, 48, 50, 50)]:
            e = log_odds_ratio_2x2(a, b, c, d)
            assert (FLAG_MODERATE in e.flags) == (e.p_value < 0.2)
            assert e.ci_low <= e.log_odds_ratio <= e.ci_high

    def test_p_015_flagged(self):
        # counts tuned so the Wald p-value is close to 0.15
        e = log_odds_ratio_2x2(86, 114, 72, 128)
        assert 0.1 < e.p_value < 0.2 and FLAG_MODERATE in e.flags

    def test_null_calibration(self):
        est, cover = [], 0
        for s in range(300):
            e = average_treatment_effect(sim(10_000, seed=100 + s), 2, ["E1"], "E0",
                                         design=PERCS)[0]
            est.append(e.log_odds_ratio)
            cover += e.ci_low <= 0 <= e.ci_high
        assert abs(np.mean(est)) < 0.02
        assert 0.92 <= cover / 300 <= 0.98

    def test_ci_width_scaling(self):
        m = percs_like_model()
        small = simulate_cohort(PERCS, make_profiles({"IN": 2500, "US": 2500}), m, 1).cohort
        big = simulate_cohort(PERCS, make_profiles({"IN": 10_000, "US": 10_000}), m, 2).cohort
        for a, b in zip(average_treatment_effect(small, 2, ["P0", "P1", "P2"], design=PERCS),
                        average_treatment_effect(big, 2, ["P0", "P1", "P2"], design=PERCS)):
            ratio = (b.ci_high - b.ci_low) / (a.ci_high - a.ci_low)
            assert 0.45 <= ratio <= 0.55

    def test_overlap_with_control(self):
        with pytest.raises(PreconditionError):
            average_treatment_effect(small_cohort(), 1, ["E1"], "E1", design=PERCS)

    def test_empty_group(self):
        cohort = small_cohort()
        cohort.arms[:, 0] = 0
        with pytest.raises(InsufficientDataError, match="insufficient data"):
            average_treatment_effect(cohort, 1, ["P0"], "E0", design=PERCS)

    def test_unknown_group(self):
        with pytest.raises(ConfigurationError):
            average_treatment_effect(small_cohort(), 1, ["P7"], "E0", design=PERCS)

    def test_records_input(self):
        cohort = small_cohort(n=200)
        a = average_treatment_effect(cohort, 1, ["E1"], design=PERCS)
        b = average_treatment_effect(cohort.to_records(), 1, ["E1"], design=PERCS)
        assert a == b


class TestDelayed:
    def test_adjacent_outcome_rejected(self):
        with pytest.raises(PreconditionError, match="use average_treatment_effect"):
            delayed_effect(small_cohort(), 2, 3, ["P2"], design=PERCS)

    def test_null_and_injected(self):
        m = null_model(PERCS, groups=["E0", "P0", "P1", "P2"]).with_delayed_effect(2, 4, "P2", 0.4)
        est = [delayed_effect(sim(20_000, m, seed=s), 2, 4, ["P2", "P0"], design=PERCS)
               for s in range(10)]
        assert abs(np.mean([e[0].log_odds_ratio for e in est]) - 0.4) < 0.06
        assert abs(np.mean([e[1].log_odds_ratio for e in est])) < 0.06
        # the direct week-2 -> week-3 effect stays null
        direct = [average_treatment_effect(sim(20_000, m, seed=s), 2, ["P2"], design=PERCS)[0]
                  for s in range(5)]
        assert abs(np.mean([e.log_odds_ratio for e in direct])) < 0.06

    def test_comparison_ids(self):
        e = delayed_effect(small_cohort(), 1, 4, ["P2"], design=PERCS)[0]
        assert e.comparison_id == "delayed:p1:w4:P2-vs-E0"
        assert e.outcome_period == 4


class TestModerators:
    def test_post_randomization_rejected(self):
        with pytest.raises(PostRandomizationModeratorError, match="post-randomization"):
            moderator_effect(small_cohort(), 2, activity_in_week(3), ["P0"], design=PERCS)

    def test_same_period_arm_rejected(self):
        spec = ModeratorSpec("arm-now", (Ref("arm", 2),), lambda c: c[Ref("arm", 2)])
        with pytest.raises(PostRandomizationModeratorError):
            moderator_effect(small_cohort(), 2, spec, ["P0"], design=PERCS)

    def test_prior_activity_strata(self):
        cohort = small_cohort(n=2000)
        ests = moderator_effect(cohort, 2, "prior-activity", ["P0", "P1", "P2"], design=PERCS)
        assert [(e.group, e.stratum) for e in ests] == [
            ("P0", "active"), ("P1", "active"), ("P2", "active"),
            ("P0", "inactive"), ("P1", "inactive"), ("P2", "inactive")]
        active = cohort.week(2) == 1
        sub = cohort.subset(active)
        direct = average_treatment_effect(sub, 2, ["P0"], design=PERCS)[0]
        assert ests[0].log_odds_ratio == direct.log_odds_ratio
        assert ests[0].n_treated + ests[3].n_treated == \
            average_treatment_effect(cohort, 2, ["P0"], design=PERCS)[0].n_treated

    def test_week_one_moderation_sign(self):
        cohort = simulate_cohort(PERCS, make_profiles({"IN": 10_000, "US": 10_000}),
                                 percs_like_model(), 5).cohort
        ests = moderator_effect(cohort, 1, prior_activity(1), ["P0", "P1", "P2"], design=PERCS)
        by = {(e.group, e.stratum): e.log_odds_ratio for e in ests}
        for g in ("P0", "P1", "P2"):
            assert by[g, "active"] > by[g, "inactive"]

    def test_responder_moderator_accepted(self):
        cohort = small_cohort(n=3000)
        e1 = design_groups(PERCS)["E1"]
        ests = moderator_effect(cohort, 2, responder(e1, 1), ["E1"], design=PERCS)
        assert {e.stratum for e in ests} == {"responder", "non-responder"}
        in_e1 = cohort.group_mask(1, e1.members)
        assert sum(e.n_treated + e.n_control for e in ests) == in_e1.sum()
        by_name = moderator_effect(cohort, 2, "responder:E1", ["E1"], design=PERCS)
        assert by_name == ests

    def test_country_moderator(self):
        cohort = simulate_cohort(PERCS, make_profiles({"IN": 500, "US": 500}),
                                 percs_like_model(), 5).cohort
        ests = moderator_effect(cohort, 3, "country", ["E1"], design=PERCS)
        assert [e.stratum for e in ests] == ["IN", "US"]

    def test_unobserved_week_one(self):
        cohort = small_cohort()
        cohort.activity[:, 0] = -1
        with pytest.raises(PreconditionError, match="not observed"):
            moderator_effect(cohort, 1, "prior-activity", ["E1"], design=PERCS)


def test_compare_sequences_disjoint():
    cohort = small_cohort(n=3000)
    e = compare_sequences(cohort, "(E1,E0,E1)", "(E1,E1,E1)", 4, design=PERCS)
    assert e.n_treated > 0 and e.n_control > e.n_treated
    with pytest.raises(PreconditionError, match="overlap"):
        compare_sequences(cohort, "(E1,*,*)", "(E1,E1,E1)", 4, design=PERCS)
