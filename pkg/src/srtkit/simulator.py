"""Generative model of weekly learner activity under an SRT design.

Week-1 activity is drawn before any treatment. At each decision period
``p`` arms are assigned (eligibility may read week ``p`` activity), then
week ``p + 1`` activity is drawn as Bernoulli(logistic(eta)) with

    eta = baseline[p+1, country]
        + carryover[p, country] * active_p
        + arm_effect[p, g, country]            for groups g holding the arm
        + moderation[p, g, country] * active_p
        + delayed[s, p+1, g, country]          for earlier periods s < p

Effects attach to model groups; an arm in several groups gets the sum.
All tables are stored 0-based: period ``p`` lives at row ``p - 1`` and
week ``w`` at row ``w - 1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from . import kernels
from .design import Mode, require_valid
from .errors import ConfigurationError, DuplicateLearnerError
from .randomizer import (AssignmentRecord, apply_fallback, as_seed, draw_period,
                         eligibility_mask)
from .records import Cohort, LearnerProfile

DEFAULT_COUNTRIES = ("IN", "US", "other")


@dataclass(frozen=True)
class BehaviorModel:
    countries: tuple
    groups: tuple  # model group names; resolved against the design
    baseline_logit: np.ndarray  # (P + 1, C)
    arm_effect: np.ndarray  # (P, G, C)
    moderation: np.ndarray  # (P, G, C), added when active in the prior week
    delayed_effect: np.ndarray  # (P, P + 1, G, C): source period, target week
    activity_carryover: np.ndarray = None  # (P, C)
    control: str = "E0"
    description: str = ""

    def __post_init__(self):
        P = self.arm_effect.shape[0]
        if self.activity_carryover is None:
            object.__setattr__(self, "activity_carryover",
                               np.zeros((P, len(self.countries))))
        for name in ("baseline_logit", "arm_effect", "moderation", "delayed_effect",
                     "activity_carryover"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "countries", tuple(self.countries))
        object.__setattr__(self, "groups", tuple(self.groups))

    @property
    def n_periods(self):
        return self.arm_effect.shape[0]

    def gi(self, group):
        try:
            return self.groups.index(group)
        except ValueError:
            raise ConfigurationError(f"model has no group {group}") from None

    def ci(self, country):
        return list(self.countries).index(country) if country is not None else slice(None)

    def _with(self, table, index, value):
        arr = np.array(getattr(self, table))
        arr[index] = value
        return replace(self, **{table: arr})

    def with_arm_effect(self, period, group, value, country=None):
        return self._with("arm_effect", (period - 1, self.gi(group), self.ci(country)), value)

    def with_moderation(self, period, group, value, country=None):
        return self._with("moderation", (period - 1, self.gi(group), self.ci(country)), value)

    def with_delayed_effect(self, source, target_week, group, value, country=None):
        if target_week <= source + 1:
            raise ConfigurationError("delayed effects need target week > source period + 1")
        return self._with("delayed_effect",
                          (source - 1, target_week - 1, self.gi(group), self.ci(country)), value)

    def with_baseline(self, week, value, country=None):
        return self._with("baseline_logit", (week - 1, self.ci(country)), value)


def null_model(design, groups=None, countries=DEFAULT_COUNTRIES, baseline=0.0, control="E0"):
    """All-zero effects with a constant baseline logit.

    Default groups: the control group ``E0`` plus one singleton group per
    other arm, named by arm id.
    """
    if groups is None:
        ctrl = "E0" if "E0" in design.arm_groups() else design.control
        members = design.arm_groups().get(ctrl, frozenset([ctrl]))
        groups = [ctrl] + [a for a in design.arm_ids if a not in members]
    else:
        ctrl = control
    P, C, G = design.n_periods, len(countries), len(groups)
    return BehaviorModel(
        countries=tuple(countries),
        groups=tuple(groups),
        baseline_logit=np.full((P + 1, C), float(baseline)),
        arm_effect=np.zeros((P, G, C)),
        moderation=np.zeros((P, G, C)),
        delayed_effect=np.zeros((P, P + 1, G, C)),
        control=ctrl,
    )


def percs_like_model():
    """Synthetic PERCS-shaped behavior model for a 3-period design.

    Signs follow the qualitative pattern of the trial's findings: emails help
    Indian learners in weeks 2 and 3, US effects sit near zero or below, and
    prior-week activity moderates week-1 effects upward but week-3 effects
    downward. Every magnitude here is a toolkit choice, not an estimate from
    trial data.
    """
    countries = ("IN", "US")
    groups = ("E0", "P0", "P1", "P2", "G1")
    P = 3
    baseline = np.array([[0.4, 0.6], [-0.2, 0.0], [-0.5, -0.3], [-0.8, -0.6]])
    carry = np.array([[1.0, 1.2], [1.0, 1.2], [1.0, 1.2]])
    arm = np.zeros((P, len(groups), 2))
    # rows: period; columns: P0, P1, P2 for (IN, US)
    arm[0, 1:4] = [[0.10, 0.05], [0.05, 0.00], [0.05, -0.05]]
    arm[1, 1:4] = [[0.35, 0.00], [0.25, -0.05], [0.25, -0.05]]
    arm[2, 1:4] = [[0.30, -0.05], [0.20, -0.05], [0.20, 0.15]]
    arm[:, 4] = [0.05, 0.0]  # small growth-mindset bump for IN
    mod = np.zeros((P, len(groups), 2))
    mod[0, 1:4] = [0.5, 0.4]
    mod[2, 1:4] = [-0.7, -0.5]
    delayed = np.zeros((P, P + 1, len(groups), 2))
    delayed[1, 3, 1] = [0.10, 0.0]  # week-2 P0 email nudges week-4 activity (IN)
    return BehaviorModel(
        countries=countries, groups=groups, baseline_logit=baseline,
        arm_effect=arm, moderation=mod, delayed_effect=delayed,
        activity_carryover=carry, control="E0",
        description="synthetic PERCS-like model; magnitudes are illustrative only",
    )


def _resolve_groups(design, model):
    named = design.arm_groups()
    out = []
    for g in model.groups:
        if g in named:
            out.append(named[g])
        elif g in design.arm_ids:
            out.append(frozenset([g]))
        else:
            raise ConfigurationError(f"model group {g} is not defined by the design")
    return out


def check_model(design, model):
    """Raise ConfigurationError if ``model`` cannot drive ``design``."""
    P = design.n_periods
    C, G = len(model.countries), len(model.groups)
    shapes = {
        "baseline_logit": (P + 1, C),
        "arm_effect": (P, G, C),
        "moderation": (P, G, C),
        "delayed_effect": (P, P + 1, G, C),
        "activity_carryover": (P, C),
    }
    for name, shape in shapes.items():
        got = getattr(model, name).shape
        if got != shape:
            raise ConfigurationError(f"{name} has shape {got}; design needs {shape} "
                                     "(uncovered period/group pair)")
    members = _resolve_groups(design, model)
    covered = frozenset().union(*members) if members else frozenset()
    missing = [a for a in design.arm_ids if a not in covered]
    if missing:
        raise ConfigurationError(f"arms {missing} are not covered by any model group")
    if model.control not in model.groups:
        raise ConfigurationError(f"control group {model.control} missing from model groups")
    c = model.gi(model.control)
    for name in ("arm_effect", "moderation"):
        if np.any(getattr(model, name)[:, c] != 0):
            raise ConfigurationError(f"{name} for control group {model.control} must be 0")
    if np.any(model.delayed_effect[:, :, c] != 0):
        raise ConfigurationError("delayed_effect for the control group must be 0")
    for name in ("arm_effect", "moderation", "delayed_effect", "activity_carryover"):
        if not np.all(np.isfinite(getattr(model, name))):
            raise ConfigurationError(f"{name} must be finite")
    if np.any(np.isnan(model.baseline_logit)) or np.any(model.baseline_logit == np.inf):
        raise ConfigurationError("baseline_logit must be finite or -inf")
    for s in range(P):
        if np.any(model.delayed_effect[s, : s + 2] != 0):
            raise ConfigurationError(
                f"delayed_effect from period {s + 1} must target week > {s + 2}")
    return members


def arm_tables(design, model):
    """Collapse group-level effect tables to per-arm tables (arm axis = design order)."""
    members = check_model(design, model)
    M = np.array([[a in m for m in members] for a in design.arm_ids], dtype=np.float64)
    arm = np.einsum("ag,pgc->pac", M, model.arm_effect)
    mod = np.einsum("ag,pgc->pac", M, model.moderation)
    delayed = np.einsum("ag,swgc->swac", M, model.delayed_effect)
    return (np.ascontiguousarray(arm), np.ascontiguousarray(mod),
            np.ascontiguousarray(delayed))


def make_profiles(counts, prefix="L"):
    """Deterministic profiles, e.g. ``make_profiles({"IN": 3455, "US": 5226})``."""
    out = []
    k = 0
    total = sum(counts.values())
    width = max(6, len(str(total)))
    for country, n in counts.items():
        for _ in range(n):
            k += 1
            out.append(LearnerProfile(f"{prefix}{k:0{width}d}", country))
    return out


@dataclass(frozen=True)
class SimOutcome:
    activity: np.ndarray  # (n, P + 1) int8, weeks 1..P+1
    emails_sent: int


@dataclass
class SimulationResult:
    design: object
    profiles: list
    arms: np.ndarray
    eligible: np.ndarray
    outcome: SimOutcome
    _cohort: Cohort = field(default=None, repr=False)

    @property
    def cohort(self):
        if self._cohort is None:
            ids = [p.learner_id for p in self.profiles]
            names = sorted({k for p in self.profiles for k in p.covariates})
            cov = {k: np.array([p.covariates.get(k, np.nan) for p in self.profiles])
                   for k in names}
            self._cohort = Cohort(ids, np.array([p.country for p in self.profiles], dtype=object),
                                  self.design.arm_ids, self.arms, self.outcome.activity, cov)
        return self._cohort

    @property
    def assignments(self):
        ids = self.design.arm_ids
        out = []
        order = sorted(range(len(self.profiles)), key=lambda i: self.profiles[i].learner_id)
        for i in order:
            lid = self.profiles[i].learner_id
            for p in range(self.arms.shape[1]):
                out.append(AssignmentRecord(lid, p + 1, ids[self.arms[i, p]],
                                            bool(self.eligible[i, p])))
        return out

    def records(self):
        return self.cohort.to_records()


def _country_index(profiles, model):
    lookup = {c: i for i, c in enumerate(model.countries)}
    out = np.empty(len(profiles), dtype=np.int64)
    for i, p in enumerate(profiles):
        if p.country in lookup:
            out[i] = lookup[p.country]
        elif "other" in lookup:
            out[i] = lookup["other"]
        else:
            raise ConfigurationError(f"model has no baseline for country {p.country}")
    return out


def simulate_cohort(design, profiles, model, seed, id_hashes=None):
    """Assign arms and draw weekly activity for every learner.

    Deterministic in (design, profiles, model, seed); each learner's draws
    depend only on their own id.
    """
    require_valid(design)
    arm_eff, mod_eff, delayed = arm_tables(design, model)
    seed = as_seed(seed).master_seed
    ids = [p.learner_id for p in profiles]
    if len(set(ids)) != len(ids):
        raise DuplicateLearnerError("duplicate learner ids in cohort")
    h = kernels.hash_ids(ids) if id_hashes is None else id_hashes
    country = _country_index(profiles, model)
    n, P = len(profiles), design.n_periods
    arms = np.zeros((n, P), dtype=np.int64)
    elig = np.zeros((n, P), dtype=bool)
    act = np.zeros((n, P + 1), dtype=np.int8)
    baseline = np.ascontiguousarray(model.baseline_logit)
    carry = np.ascontiguousarray(model.activity_carryover)

    u = kernels.uniforms(h, seed, 0, kernels.STREAM_ACTIVITY)
    act[:, 0] = kernels.bernoulli(u, expit(baseline[0, country]))
    for p in range(1, P + 1):
        if design.mode is Mode.SINGLE and p > 1:
            arms[:, p - 1] = arms[:, 0]
        else:
            pred = design.point(p).eligibility
            drawn = draw_period(design, p, h, seed)
            flags = np.ones(n, dtype=bool)  # custom flags: simulated learners are all flagged
            e = eligibility_mask(pred.kind, act[:, p - 1], flags, n=n)
            prev = arms[:, p - 2] if p > 1 else drawn
            arms[:, p - 1] = apply_fallback(design, p, drawn, e, prev)
            elig[:, p - 1] = e
        logit = kernels.assemble_logits(p, country, arms, act[:, p - 1], baseline, carry,
                                        arm_eff, mod_eff, delayed)
        u = kernels.uniforms(h, seed, p, kernels.STREAM_ACTIVITY)
        act[:, p] = kernels.bernoulli(u, expit(logit))
    email = np.array([a.email_present for a in design.arms])
    emails_sent = int(email[arms].sum())
    return SimulationResult(design, list(profiles), arms, elig, SimOutcome(act, emails_sent))


def expected_emails(design, n):
    """Expected emails sent to ``n`` all-eligible learners."""
    total = 0.0
    for p in range(1, design.n_periods + 1):
        scheme = design.point(p).scheme
        total += math.fsum(scheme.prob(a.id) for a in design.arms if a.email_present)
    return n * total
