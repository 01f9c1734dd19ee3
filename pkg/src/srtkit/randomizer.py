"""Seeded, order-independent arm assignment at each decision point.

Every draw comes from the substream keyed by (master seed, learner id,
period), so a learner's arms never depend on who else is in the cohort,
the order learners are processed in, or how work is split across threads.

Timeline: the decision at period ``p`` happens at the end of week ``p``.
Eligibility rules that look at "prior activity" read week ``p`` activity,
which is observed before that randomization.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import stats

from . import kernels
from .design import Eligibility, Fallback, Mode, require_valid
from .errors import DuplicateLearnerError, IncompleteHistoryError, PreconditionError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SeedSpec:
    master_seed: int

    def __post_init__(self):
        s = int(self.master_seed)
        if not 0 <= s < 2**64:
            raise ValueError("master_seed must fit in 64 unsigned bits")
        object.__setattr__(self, "master_seed", s)


def as_seed(seed):
    return seed if isinstance(seed, SeedSpec) else SeedSpec(int(seed))


@dataclass(frozen=True, order=True)
class AssignmentRecord:
    learner_id: str
    period: int
    arm_id: str
    eligible: bool


@dataclass(frozen=True)
class LearnerState:
    """What is known about a learner just before a decision.

    ``prior_arms[k]`` is the arm at period ``k + 1``; ``prior_activity[k]`` is
    activity in week ``k + 1``. ``flags`` maps period to the caller-supplied
    custom eligibility flag.
    """

    learner_id: str
    prior_arms: tuple = ()
    prior_activity: tuple = ()
    flags: Mapping[int, bool] = field(default_factory=dict)


def _cum_probs(design, period):
    scheme = design.point(period).scheme
    probs = np.array([scheme.prob(a) for a in design.arm_ids], dtype=np.float64)
    return np.cumsum(probs)


def draw_period(design, period, id_hashes, seed):
    """Raw inverse-CDF draw (arm indices) for every learner at ``period``."""
    u = kernels.uniforms(id_hashes, as_seed(seed).master_seed, period, kernels.STREAM_ASSIGN)
    return kernels.draw_arms(u, _cum_probs(design, period))


def eligibility_mask(kind, activity_now=None, flags=None, n=None):
    """Boolean eligibility per learner for one decision point."""
    if kind is Eligibility.ALL:
        return np.ones(n, dtype=bool)
    if kind is Eligibility.INACTIVE_PRIOR:
        return np.asarray(activity_now) == 0
    if kind is Eligibility.ACTIVE_PRIOR:
        return np.asarray(activity_now) == 1
    return np.asarray(flags, dtype=bool)


def apply_fallback(design, period, drawn, eligible, prev):
    """Replace draws of ineligible learners with their fallback arm index."""
    pred = design.point(period).eligibility
    if eligible.all():
        return drawn
    control = design.arm_ids.index(design.control)
    if pred.fallback is Fallback.CARRY_PREVIOUS and period > 1:
        fallback = prev
    else:
        if pred.fallback is Fallback.CARRY_PREVIOUS:
            log.warning("period 1 has no previous arm; %d ineligible learners get control",
                        int((~eligible).sum()))
        fallback = np.full_like(drawn, control)
    return np.where(eligible, drawn, fallback)


def assign_point(design, state, period, seed):
    """Assign one learner at one decision point."""
    require_valid(design)
    if not 1 <= period <= design.n_periods:
        raise PreconditionError(f"period {period} outside 1..{design.n_periods}")
    if len(state.prior_arms) < period - 1:
        raise IncompleteHistoryError("incomplete learner history: "
                                     f"need arms for periods 1..{period - 1}")
    ids = design.arm_ids
    if design.mode is Mode.SINGLE and period > 1:
        return AssignmentRecord(state.learner_id, period, state.prior_arms[0], False)

    pred = design.point(period).eligibility
    activity_now = flag = None
    if pred.needs_activity:
        if len(state.prior_activity) < period:
            raise IncompleteHistoryError(
                f"incomplete learner history: need activity for weeks 1..{period}")
        activity_now = [int(state.prior_activity[period - 1])]
    elif pred.kind is Eligibility.CUSTOM_FLAG:
        if period not in state.flags:
            raise IncompleteHistoryError(f"missing custom eligibility flag for period {period}")
        flag = [bool(state.flags[period])]
    h = kernels.hash_ids([state.learner_id])
    drawn = draw_period(design, period, h, seed)
    eligible = eligibility_mask(pred.kind, activity_now, flag, n=1)
    prev = np.array([ids.index(state.prior_arms[period - 2])]) if period > 1 else drawn
    arm = apply_fallback(design, period, drawn, eligible, prev)
    return AssignmentRecord(state.learner_id, period, ids[int(arm[0])], bool(eligible[0]))


ActivityFn = Callable[[str, int, tuple], int]
FlagFn = Callable[[str, int], bool]


def assign_arm_matrix(design, learner_ids, seed, activity=None, flags=None):
    """Vectorized assignment. Returns (arm index matrix n x P, eligible matrix n x P).

    ``activity(learner_id, week, prior_arms)`` returns 0/1 activity for that
    week and is only consulted when a predicate needs it. ``flags(learner_id,
    period)`` feeds custom-flag predicates.
    """
    require_valid(design)
    ids = design.arm_ids
    n, P = len(learner_ids), design.n_periods
    h = kernels.hash_ids(learner_ids)
    arms = np.zeros((n, P), dtype=np.int64)
    elig = np.zeros((n, P), dtype=bool)
    for p in range(1, P + 1):
        if design.mode is Mode.SINGLE and p > 1:
            arms[:, p - 1] = arms[:, 0]
            continue
        pred = design.point(p).eligibility
        drawn = draw_period(design, p, h, seed)
        act = fl = None
        if pred.needs_activity:
            if activity is None:
                raise IncompleteHistoryError(
                    f"period {p} eligibility needs learner activity; no activity callback")
            act = np.array([int(activity(lid, p, tuple(ids[j] for j in arms[i, :p - 1])))
                            for i, lid in enumerate(learner_ids)], dtype=np.int8)
        elif pred.kind is Eligibility.CUSTOM_FLAG:
            if flags is None:
                raise IncompleteHistoryError(f"period {p} needs custom eligibility flags")
            fl = [bool(flags(lid, p)) for lid in learner_ids]
        e = eligibility_mask(pred.kind, act, fl, n=n)
        prev = arms[:, p - 2] if p > 1 else drawn
        arms[:, p - 1] = apply_fallback(design, p, drawn, e, prev)
        elig[:, p - 1] = e
    return arms, elig


def assign_trial(design, learner_ids: Sequence[str], seed, activity: ActivityFn | None = None,
                 flags: FlagFn | None = None):
    """One AssignmentRecord per learner per period, sorted by (learner_id, period)."""
    learner_ids = [str(x) for x in learner_ids]
    if len(set(learner_ids)) != len(learner_ids):
        raise DuplicateLearnerError("duplicate learner ids in cohort")
    arms, elig = assign_arm_matrix(design, learner_ids, seed, activity, flags)
    ids = design.arm_ids
    order = sorted(range(len(learner_ids)), key=learner_ids.__getitem__)
    out = []
    for i in order:
        for p in range(design.n_periods):
            out.append(AssignmentRecord(learner_ids[i], p + 1, ids[arms[i, p]], bool(elig[i, p])))
    return out


def records_to_matrix(records):
    """Pivot assignment records to (learner ids, periods, arm-id matrix)."""
    learners = sorted({r.learner_id for r in records})
    periods = sorted({r.period for r in records})
    li = {lid: i for i, lid in enumerate(learners)}
    pi = {p: j for j, p in enumerate(periods)}
    mat = np.empty((len(learners), len(periods)), dtype=object)
    for r in records:
        mat[li[r.learner_id], pi[r.period]] = r.arm_id
    return learners, periods, mat


@dataclass(frozen=True)
class ChiSquareResult:
    statistic: float
    dof: int
    p_value: float
    warning: str | None = None


@dataclass(frozen=True)
class PairIndependence(ChiSquareResult):
    period_i: int = 0
    period_j: int = 0


def _contingency(a, b):
    ra, ia = np.unique(a, return_inverse=True)
    rb, ib = np.unique(b, return_inverse=True)
    table = np.zeros((len(ra), len(rb)), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)
    return table


def chi_square_independence(table):
    table = np.asarray(table, dtype=float)
    table = table[table.sum(axis=1) > 0][:, table.sum(axis=0) > 0]
    if min(table.shape) < 2:
        return ChiSquareResult(0.0, 0, 1.0, "degenerate table: a period has a single arm")
    res = stats.chi2_contingency(table, correction=False)
    warn = None
    if (res.expected_freq < 5).any():
        warn = "some expected cell counts < 5"
    return ChiSquareResult(float(res.statistic), int(res.dof), float(res.pvalue), warn)


def pairwise_independence(arm_matrix, periods=None):
    """Chi-square independence tests for every pair of columns of an arm matrix."""
    arm_matrix = np.asarray(arm_matrix)
    periods = list(periods) if periods is not None else list(range(1, arm_matrix.shape[1] + 1))
    if len(periods) < 2:
        raise PreconditionError("≥2 periods required")
    out = []
    for i in range(len(periods)):
        for j in range(i + 1, len(periods)):
            r = chi_square_independence(_contingency(arm_matrix[:, i], arm_matrix[:, j]))
            out.append(PairIndependence(r.statistic, r.dof, r.p_value, r.warning,
                                        periods[i], periods[j]))
    return out


def empirical_independence(records):
    """Chi-square test of arm(period i) x arm(period j) for every i < j."""
    _, periods, mat = records_to_matrix(records)
    return pairwise_independence(mat, periods)


def goodness_of_fit(column, scheme, arm_ids=None):
    """Chi-square goodness of fit of one period's arms to its scheme.

    ``column`` holds arm ids, or arm indices when ``arm_ids`` is given. Arms
    with zero scheme probability are left out; observing one yields p = 0.
    """
    column = np.asarray(column)
    if arm_ids is not None:
        column = np.asarray(arm_ids, dtype=object)[column]
    arms = [a for a, p in scheme.probabilities.items() if p > 0]
    obs = np.array([(column == a).sum() for a in arms], dtype=float)
    if obs.sum() != len(column):
        return ChiSquareResult(float("inf"), len(arms) - 1, 0.0, "zero-probability arm observed")
    if len(arms) < 2:
        return ChiSquareResult(0.0, 0, 1.0, "point-mass scheme")
    exp = np.array([scheme.prob(a) for a in arms]) * len(column)
    res = stats.chisquare(obs, exp * obs.sum() / exp.sum())
    warn = "some expected cell counts < 5" if (exp < 5).any() else None
    return ChiSquareResult(float(res.statistic), len(arms) - 1, float(res.pvalue), warn)


def marginal_fit(records, design):
    """Per-period goodness of fit of observed arms to the design's schemes."""
    _, periods, mat = records_to_matrix(records)
    return {p: goodness_of_fit(mat[:, j], design.point(p).scheme)
            for j, p in enumerate(periods)}
