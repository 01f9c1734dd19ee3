"""Sequential randomized trial designs: arms, decision points, schemes.

Designs are plain frozen values. Construction never fails on a broken
design; ``validate_design`` reports what is wrong so configs can be
inspected before use.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from enum import Enum
from types import MappingProxyType
from typing import Mapping

from .errors import DesignError

PROB_TOL = 1e-9


class Mindset(str, Enum):
    NONE = "none-applicable"
    NO_GROWTH = "no-growth"
    GROWTH = "growth"


class ProblemType(str, Enum):
    NONE = "none-applicable"
    NO_PROBLEM = "no-problem"
    GLOBAL = "global"
    CULTURAL = "cultural"


class Eligibility(str, Enum):
    ALL = "all"
    INACTIVE_PRIOR = "inactive-prior-period"
    ACTIVE_PRIOR = "active-prior-period"
    CUSTOM_FLAG = "custom-flag"


class Fallback(str, Enum):
    CARRY_PREVIOUS = "carry-previous-arm"
    ASSIGN_CONTROL = "assign-control"


class Trigger(str, Enum):
    PERIOD_BOUNDARY = "period-boundary"
    # declared only; nothing executes event triggers yet
    EVENT = "event-trigger"


class Mode(str, Enum):
    SEQUENTIAL = "sequential"
    SINGLE = "single-randomized"


@dataclass(frozen=True)
class TreatmentArm:
    id: str
    email_present: bool = True
    mindset: Mindset = Mindset.NONE
    problem_type: ProblemType = ProblemType.NONE


@dataclass(frozen=True)
class RandomizationScheme:
    probabilities: Mapping[str, float]

    def __post_init__(self):
        object.__setattr__(self, "probabilities",
                           MappingProxyType(dict(self.probabilities)))

    def prob(self, arm_id):
        return self.probabilities.get(arm_id, 0.0)


@dataclass(frozen=True)
class EligibilityPredicate:
    kind: Eligibility = Eligibility.ALL
    fallback: Fallback = Fallback.CARRY_PREVIOUS

    @property
    def needs_activity(self):
        return self.kind in (Eligibility.INACTIVE_PRIOR, Eligibility.ACTIVE_PRIOR)

    def is_trivial(self):
        return self.kind is Eligibility.ALL


@dataclass(frozen=True)
class DecisionPoint:
    index: int
    scheme: RandomizationScheme
    eligibility: EligibilityPredicate = EligibilityPredicate()
    trigger: Trigger = Trigger.PERIOD_BOUNDARY


@dataclass(frozen=True)
class Violation:
    field: str
    rule: str

    def __str__(self):
        return f"{self.field}: {self.rule}"


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple = ()

    @property
    def ok(self):
        return not self.violations

    def __bool__(self):
        return self.ok

    def to_dict(self):
        return {"ok": self.ok,
                "violations": [{"field": v.field, "rule": v.rule} for v in self.violations]}


@dataclass(frozen=True)
class TrialDesign:
    """An SRT design.

    ``n_periods`` counts decision points in time. In single-randomized mode
    the design carries one decision point whose draw is replicated to every
    period. ``groups`` holds custom arm groups on top of the factor groups
    derived from arm attributes. ``control_arm`` is the arm handed to
    ineligible learners under the assign-control fallback.
    """

    arms: tuple
    decision_points: tuple
    n_periods: int
    mode: Mode = Mode.SEQUENTIAL
    groups: Mapping[str, frozenset] = field(default_factory=dict)
    control_arm: str | None = None
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "arms", tuple(self.arms))
        object.__setattr__(self, "decision_points", tuple(self.decision_points))
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "groups", MappingProxyType(
            {k: frozenset(v) for k, v in dict(self.groups).items()}))

    @property
    def arm_ids(self):
        return tuple(a.id for a in self.arms)

    def arm(self, arm_id):
        for a in self.arms:
            if a.id == arm_id:
                return a
        raise KeyError(arm_id)

    @property
    def control(self):
        """Arm id used by the assign-control fallback."""
        if self.control_arm is not None:
            return self.control_arm
        for a in self.arms:
            if not a.email_present:
                return a.id
        return self.arms[0].id

    def point(self, period):
        """Decision point governing ``period`` (1-based)."""
        if self.mode is Mode.SINGLE:
            return self.decision_points[0]
        for dp in self.decision_points:
            if dp.index == period:
                return dp
        raise DesignError(f"no decision point for period {period}")

    def arm_groups(self):
        """All named groups: factor groups derived from arms, then custom ones."""
        out = {}
        factor = {
            "E0": [a.id for a in self.arms if not a.email_present],
            "E1": [a.id for a in self.arms if a.email_present],
            "G0": [a.id for a in self.arms if a.mindset is Mindset.NO_GROWTH],
            "G1": [a.id for a in self.arms if a.mindset is Mindset.GROWTH],
            "P0": [a.id for a in self.arms if a.problem_type is ProblemType.NO_PROBLEM],
            "P1": [a.id for a in self.arms if a.problem_type is ProblemType.GLOBAL],
            "P2": [a.id for a in self.arms if a.problem_type is ProblemType.CULTURAL],
        }
        for name, members in factor.items():
            if members:
                out[name] = frozenset(members)
        out.update(self.groups)
        return out

    def emails_present(self):
        return {a.id: a.email_present for a in self.arms}


def validate_design(design):
    """Check every design invariant; returns a ValidationReport."""
    v = []
    ids = [a.id for a in design.arms]
    if not ids:
        v.append(Violation("arms", "design must declare at least one arm"))
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    if dupes:
        v.append(Violation("arms", f"duplicate arm ids {dupes}"))
    for a in design.arms:
        if not a.email_present and (a.mindset is not Mindset.NONE
                                    or a.problem_type is not ProblemType.NONE):
            v.append(Violation(f"arms[{a.id}]",
                               "arm without email must have none-applicable mindset and problem_type"))
    if design.n_periods < 1:
        v.append(Violation("n_periods", "must be at least 1"))
    if design.control_arm is not None and design.control_arm not in ids:
        v.append(Violation("control_arm", f"unknown arm {design.control_arm}"))

    dps = design.decision_points
    if not dps:
        v.append(Violation("decision_points", "design must declare at least one decision point"))
    if design.mode is Mode.SINGLE:
        if len(dps) != 1:
            v.append(Violation("decision_points",
                               "single-randomized mode requires exactly one scheme"))
        elif dps[0].index != 1:
            v.append(Violation("decision_points[0].index",
                               "single-randomized scheme must sit at period 1"))
    else:
        idx = [dp.index for dp in dps]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            v.append(Violation("decision_points", "indices must be strictly increasing"))
        if idx and idx != list(range(1, design.n_periods + 1)):
            v.append(Violation("decision_points",
                               f"sequential mode needs one decision point per period 1..{design.n_periods}"))

    for k, dp in enumerate(dps):
        where = f"decision_points[{k}]"
        probs = dict(dp.scheme.probabilities)
        unknown = sorted(set(probs) - set(ids))
        if unknown:
            v.append(Violation(f"{where}.probabilities", f"unknown arms {unknown}"))
        vals = list(probs.values())
        if any(not math.isfinite(p) or p < 0 or p > 1 for p in vals):
            v.append(Violation(f"{where}.probabilities", "each probability must lie in [0, 1]"))
        elif not any(p > 0 for p in vals):
            v.append(Violation(f"{where}.probabilities", "at least one probability must be > 0"))
        total = math.fsum(vals)
        if abs(total - 1.0) > PROB_TOL:
            v.append(Violation(f"{where}.probabilities", f"scheme sum ≠ 1 (got {total:.12g})"))
        if design.mode is Mode.SINGLE and not dp.eligibility.is_trivial():
            v.append(Violation(f"{where}.eligibility",
                               "single-randomized mode randomizes everyone once"))

    for name, members in design.groups.items():
        if not members:
            v.append(Violation(f"groups[{name}]", "group must be non-empty"))
        bad = sorted(set(members) - set(ids))
        if bad:
            v.append(Violation(f"groups[{name}]", f"unknown arms {bad}"))
    return ValidationReport(tuple(v))


def require_valid(design):
    report = validate_design(design)
    if not report.ok:
        raise DesignError("invalid design: " + "; ".join(map(str, report.violations)))
    return design


@dataclass(frozen=True)
class TreatmentSequence:
    arms: tuple

    def __post_init__(self):
        object.__setattr__(self, "arms", tuple(self.arms))

    def __len__(self):
        return len(self.arms)

    def __iter__(self):
        return iter(self.arms)

    def __getitem__(self, i):
        return self.arms[i]


def enumerate_sequences(design):
    """Every reachable-by-construction sequence with its joint probability.

    Returns a list of ``(TreatmentSequence, probability)``.
    """
    require_valid(design)
    if any(not dp.eligibility.is_trivial() for dp in design.decision_points):
        raise DesignError("sequence probabilities not design-constant "
                          "(non-trivial eligibility predicate)")
    ids = design.arm_ids
    if design.mode is Mode.SINGLE:
        scheme = design.decision_points[0].scheme
        return [(TreatmentSequence((a,) * design.n_periods), scheme.prob(a)) for a in ids]
    schemes = [design.point(p).scheme for p in range(1, design.n_periods + 1)]
    out = []
    for combo in itertools.product(ids, repeat=design.n_periods):
        prob = 1.0
        for arm, scheme in zip(combo, schemes):
            prob *= scheme.prob(arm)
        out.append((TreatmentSequence(combo), prob))
    return out


def _percs_arms():
    arms = [TreatmentArm("T1", email_present=False)]
    n = 2
    for mindset in (Mindset.NO_GROWTH, Mindset.GROWTH):
        for problem in (ProblemType.NO_PROBLEM, ProblemType.GLOBAL, ProblemType.CULTURAL):
            arms.append(TreatmentArm(f"T{n}", True, mindset, problem))
            n += 1
    return tuple(arms)


def uniform_scheme(arm_ids):
    return RandomizationScheme({a: 1.0 / len(arm_ids) for a in arm_ids})


def builtin_percs():
    """Seven email arms, uniform 1/7, re-randomized independently at weeks 1-3."""
    arms = _percs_arms()
    scheme = uniform_scheme([a.id for a in arms])
    return TrialDesign(
        arms=arms,
        decision_points=tuple(DecisionPoint(i, scheme) for i in (1, 2, 3)),
        n_periods=3,
        mode=Mode.SEQUENTIAL,
        control_arm="T1",
        name="PERCS",
    )


def builtin_percs_ab():
    """Same arms and probabilities, randomized once and held for all three weeks."""
    arms = _percs_arms()
    scheme = uniform_scheme([a.id for a in arms])
    return TrialDesign(
        arms=arms,
        decision_points=(DecisionPoint(1, scheme),),
        n_periods=3,
        mode=Mode.SINGLE,
        control_arm="T1",
        name="PERCS-AB",
    )


def two_arm_design(n_periods=2, p_treat=0.5):
    """Two-arm design (``A`` control, ``B`` treatment) re-randomized each period."""
    arms = (TreatmentArm("A", email_present=False), TreatmentArm("B"))
    scheme = RandomizationScheme({"A": 1.0 - p_treat, "B": p_treat})
    return TrialDesign(
        arms=arms,
        decision_points=tuple(DecisionPoint(i, scheme) for i in range(1, n_periods + 1)),
        n_periods=n_periods,
        control_arm="A",
        name="two-arm",
    )
