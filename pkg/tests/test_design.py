import math
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from srtkit.design import (DecisionPoint, Eligibility, EligibilityPredicate, Mindset, Mode,
                           ProblemType, RandomizationScheme, TreatmentArm, TrialDesign,
                           builtin_percs, builtin_percs_ab, enumerate_sequences, two_arm_design,
                           validate_design)
from srtkit.errors import DesignError


def _design(probs_by_period, mode=Mode.SEQUENTIAL, n_periods=None, eligibility=None):
    arm_ids = sorted({a for probs in probs_by_period for a in probs})
    arms = tuple(TreatmentArm(a) for a in arm_ids)
    pred = eligibility or EligibilityPredicate()
    dps = tuple(DecisionPoint(i + 1, RandomizationScheme(p), pred)
                for i, p in enumerate(probs_by_period))
    return TrialDesign(arms, dps, n_periods or len(dps), mode)


class TestValidate:
    def test_percs_ok(self, percs):
        assert validate_design(percs).ok

    def test_percs_ab_ok(self, percs_ab):
        assert validate_design(percs_ab).ok

    def test_sum_not_one(self):
        d = _design([{"A": 0.5, "B": 0.5}, {"A": 0.5, "B": 0.4}])
        report = validate_design(d)
        assert not report.ok
        assert any("scheme sum ≠ 1" in v.rule and "decision_points[1]" in v.field
                   for v in report.violations)

    def test_one_arm_point_mass(self):
        assert validate_design(_design([{"A": 1.0}])).ok

    def test_negative_and_all_zero(self):
        assert not validate_design(_design([{"A": -0.5, "B": 1.5}])).ok
        report = validate_design(_design([{"A": 0.0, "B": 0.0}]))
        assert any("at least one probability" in v.rule for v in report.violations)

    def test_no_email_arm_with_factors(self):
        arms = (TreatmentArm("A", email_present=False, mindset=Mindset.GROWTH), TreatmentArm("B"))
        d = TrialDesign(arms, (DecisionPoint(1, RandomizationScheme({"A": .5, "B": .5})),), 1)
        assert any("none-applicable" in v.rule for v in validate_design(d).violations)

    def test_duplicate_arms(self):
        arms = (TreatmentArm("A"), TreatmentArm("A"))
        d = TrialDesign(arms, (DecisionPoint(1, RandomizationScheme({"A": 1.0})),), 1)
        assert any("duplicate" in v.rule for v in validate_design(d).violations)

    def test_indices_must_increase(self):
        s = RandomizationScheme({"A": 1.0})
        d = TrialDesign((TreatmentArm("A"),), (DecisionPoint(2, s), DecisionPoint(1, s)), 2)
        assert any("strictly increasing" in v.rule for v in validate_design(d).violations)

    def test_single_mode_needs_one_scheme(self):
        d = _design([{"A": 1.0}, {"A": 1.0}], mode=Mode.SINGLE, n_periods=2)
        assert any("exactly one scheme" in v.rule for v in validate_design(d).violations)

    def test_unknown_arm_in_scheme(self):
        d = TrialDesign((TreatmentArm("A"),),
                        (DecisionPoint(1, RandomizationScheme({"A": 0.5, "Z": 0.5})),), 1)
        assert any("unknown arms ['Z']" in v.rule for v in validate_design(d).violations)

    def test_idempotent(self):
        d = _design([{"A": 0.5, "B": 0.4}])
        assert validate_design(d) == validate_design(d)


class TestBuiltins:
    def test_shape(self, percs):
        assert percs.n_periods == 3
        assert len(percs.arms) == 7
        assert percs.mode is Mode.SEQUENTIAL

    def test_uniform_seventh(self, percs):
        for dp in percs.decision_points:
            assert all(p == pytest.approx(1 / 7, abs=1e-15) for p in dp.scheme.probabilities.values())
            # displayed as 0.14 in the trial's probability table
            assert all(round(p, 2) == 0.14 for p in dp.scheme.probabilities.values())

    def test_factor_groups(self, percs):
        g = percs.arm_groups()
        assert g["E0"] == {"T1"}
        assert g["G0"] == {"T2", "T3", "T4"}
        assert g["G1"] == {"T5", "T6", "T7"}
        assert g["P0"] == {"T2", "T5"}
        assert g["P1"] == {"T3", "T6"}
        assert g["P2"] == {"T4", "T7"}

    def test_group_algebra(self, percs):
        g = percs.arm_groups()
        assert g["E1"] == g["G0"] | g["G1"] == g["P0"] | g["P1"] | g["P2"]
        assert not g["G0"] & g["G1"]
        assert not (g["P0"] & g["P1"] or g["P0"] & g["P2"] or g["P1"] & g["P2"])
        assert g["E0"] | g["E1"] == set(percs.arm_ids)

    def test_percs_ab_single(self, percs_ab):
        assert percs_ab.mode is Mode.SINGLE and percs_ab.n_periods == 3
        assert len(percs_ab.decision_points) == 1

    def test_t2_is_no_problem_no_growth(self, percs):
        t2 = percs.arm("T2")
        assert t2.mindset is Mindset.NO_GROWTH and t2.problem_type is ProblemType.NO_PROBLEM


class TestEnumerate:
    def test_percs_343(self, percs):
        t = time.perf_counter()
        seqs = enumerate_sequences(percs)
        assert time.perf_counter() - t < 1.0
        assert len(seqs) == 343
        assert all(p == pytest.approx((1 / 7) ** 3, rel=1e-12) for _, p in seqs)
        assert abs(math.fsum(p for _, p in seqs) - 1) < 1e-9
        assert len({s.arms for s, _ in seqs}) == 343

    def test_percs_ab_seven(self, percs_ab):
        seqs = enumerate_sequences(percs_ab)
        assert [s.arms for s, _ in seqs] == [(f"T{i}",) * 3 for i in range(1, 8)]
        assert all(p == pytest.approx(1 / 7) for _, p in seqs)

    def test_two_by_two(self):
        seqs = enumerate_sequences(two_arm_design())
        assert len(seqs) == 4
        assert all(p == 0.25 for _, p in seqs)

    def test_nontrivial_eligibility_rejected(self):
        d = _design([{"A": .5, "B": .5}] * 2,
                    eligibility=EligibilityPredicate(Eligibility.INACTIVE_PRIOR))
        with pytest.raises(DesignError, match="not design-constant"):
            enumerate_sequences(d)

    def test_invalid_design_rejected(self):
        with pytest.raises(DesignError):
            enumerate_sequences(_design([{"A": 0.5, "B": 0.4}]))


@st.composite
def valid_designs(draw):
    k = draw(st.integers(1, 5))
    P = draw(st.integers(1, 3))
    probs = []
    for _ in range(P):
        w = draw(st.lists(st.floats(0.01, 10), min_size=k, max_size=k))
        total = math.fsum(w)
        probs.append({f"A{i}": x / total for i, x in enumerate(w)})
    return _design(probs)


@settings(max_examples=60, deadline=None)
@given(valid_designs())
def test_enumeration_sums_to_one(design):
    assert validate_design(design).ok
    seqs = enumerate_sequences(design)
    assert len(seqs) == len(design.arms) ** design.n_periods
    assert abs(math.fsum(p for _, p in seqs) - 1.0) < 1e-9
