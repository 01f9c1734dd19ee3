"""Sequence comparisons, per-period treatment effects, moderators, power.

All effect estimates are unadjusted log odds ratios from a logistic
regression of a binary activity outcome on a single treatment indicator,
with Wald intervals and two-sided normal p-values. No multiple-comparison
correction is applied; reports carry the number of comparisons instead.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats
from scipy.special import expit

from . import kernels
from .errors import (CollinearityError, ConfigurationError, InsufficientDataError,
                     PostRandomizationModeratorError, PreconditionError, SeparationError)
from .records import UNOBSERVED, Cohort, as_cohort
from .sequences import ArmGroup, SequencePattern, design_groups, format_pattern, parse_pattern

SEPARATION_BOUND = 15.0
MODERATE_ALPHA = 0.2
FLAG_MODERATE = "moderate-at-0.2"
FLAG_SEPARATION = "separation-detected"


# -- logistic regression ------------------------------------------------------

@dataclass(frozen=True)
class FitResult:
    coefficients: np.ndarray
    covariance: np.ndarray
    log_likelihood: float
    iterations: int
    converged: bool
    separation: bool = False
    score: np.ndarray = None
    ll_path: tuple = ()

    @property
    def std_errors(self):
        return np.sqrt(np.diag(self.covariance))


def _loglik(eta, y, w):
    return float(np.sum(w * (y * eta - np.logaddexp(0.0, eta))))


def fit_logistic(features, outcomes, weights=None, max_iter=100, score_tol=1e-8,
                 rel_tol=1e-10):
    """Maximum-likelihood logistic regression by IRLS (Newton) with step halving.

    ``weights`` are frequency weights, so aggregated counts fit exactly like
    the expanded rows. Convergence: max |score| < ``score_tol``, or a full
    Newton step changing the log-likelihood by less than ``rel_tol``
    relative. A coefficient beyond +/-15 at exit is treated as separation:
    the result is returned with ``converged=False, separation=True``.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(outcomes, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n, p = X.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if y.shape != (n,) or w.shape != (n,):
        raise PreconditionError("features, outcomes and weights disagree in length")
    if not np.all((y == 0) | (y == 1)):
        raise PreconditionError("outcomes must be binary 0/1")
    keep = w > 0
    X, y, w = X[keep], y[keep], w[keep]
    if w.sum() < p or X.shape[0] == 0:
        raise PreconditionError(f"need n >= p (n={w.sum():g}, p={p})")
    if np.linalg.matrix_rank(X) < p:
        raise CollinearityError("collinear features")
    if np.all(y == y[0]):
        raise SeparationError("separation: all outcomes are "
                              f"{int(y[0])}; the MLE lies on the boundary")

    beta = np.zeros(p)
    eta = X @ beta
    ll = _loglik(eta, y, w)
    path = [ll]
    converged = False
    it = 0
    score = X.T @ (w * (y - expit(eta)))
    for it in range(1, max_iter + 1):
        mu = expit(eta)
        score = X.T @ (w * (y - mu))
        if np.max(np.abs(score)) < score_tol:
            converged = True
            it -= 1
            break
        info = (X * (w * mu * (1.0 - mu))[:, None]).T @ X
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(info, score, rcond=None)[0]
        t = 1.0
        accepted = False
        for _ in range(40):
            cand = beta + t * step
            cand_eta = X @ cand
            cand_ll = _loglik(cand_eta, y, w)
            if cand_ll >= ll - 1e-12 * abs(ll):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        full_step = t == 1.0
        change = abs(cand_ll - ll) / max(abs(ll), 1e-300)
        beta, eta, ll = cand, cand_eta, cand_ll
        path.append(ll)
        if full_step and change < rel_tol:
            converged = True
            score = X.T @ (w * (y - expit(eta)))
            break
    mu = expit(eta)
    info = (X * (w * mu * (1.0 - mu))[:, None]).T @ X
    separation = bool(np.max(np.abs(beta)) > SEPARATION_BOUND)
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(info)
    cov = 0.5 * (cov + cov.T)
    if separation:
        converged = False
    return FitResult(beta, cov, ll, it, converged, separation,
                     X.T @ (w * (y - mu)), tuple(path))


# -- estimate types -----------------------------------------------------------

def z_value(confidence):
    return float(stats.norm.ppf(0.5 + confidence / 2.0))


@dataclass(frozen=True)
class ProportionEstimate:
    proportion: float
    n: int
    ci_low: float
    ci_high: float
    confidence: float = 0.95
    comparison_id: str = ""
    pattern: str = ""
    outcome_period: int = 0

    @property
    def std_error(self):
        return math.sqrt(self.proportion * (1.0 - self.proportion) / self.n)

    def to_dict(self):
        return {
            "comparison_id": self.comparison_id,
            "period": self.outcome_period,
            "group": self.pattern,
            "stratum": None,
            "estimate": self.proportion,
            "se": self.std_error,
            "ci": [self.ci_low, self.ci_high],
            "p": None,
            "n_treated": self.n,
            "n_control": None,
            "flags": [],
        }


@dataclass(frozen=True)
class EffectEstimate:
    log_odds_ratio: float
    std_error: float
    ci_low: float
    ci_high: float
    p_value: float
    n_treated: int
    n_control: int
    flags: frozenset = frozenset()
    comparison_id: str = ""
    period: int = 0
    outcome_period: int = 0
    group: str = ""
    control: str = ""
    stratum: str | None = None

    @property
    def odds_ratio(self):
        return math.exp(self.log_odds_ratio)

    def rejects(self, alpha):
        return self.p_value < alpha

    def to_dict(self):
        return {
            "comparison_id": self.comparison_id,
            "period": self.period,
            "group": self.group,
            "stratum": self.stratum,
            "estimate": self.log_odds_ratio,
            "se": self.std_error,
            "ci": [self.ci_low, self.ci_high],
            "p": self.p_value,
            "n_treated": self.n_treated,
            "n_control": self.n_control,
            "flags": sorted(self.flags),
        }


def wald_proportion(successes, n, confidence=0.95):
    """(p_hat, lo, hi) with the Wald interval clipped to [0, 1]."""
    p = successes / n
    half = z_value(confidence) * math.sqrt(p * (1.0 - p) / n)
    return p, max(0.0, p - half), min(1.0, p + half)


def log_odds_ratio_2x2(a, b, c, d, confidence=0.95, **meta):
    """Log OR of treated (a active, b inactive) vs control (c active, d inactive).

    Fitted by logistic regression on an intercept plus treatment indicator
    with the four cells as frequency weights.
    """
    if a + b == 0 or c + d == 0:
        raise InsufficientDataError("insufficient data: empty "
                                    + ("treated" if a + b == 0 else "control") + " cell")
    X = np.array([[1.0, 1.0], [1.0, 1.0], [1.0, 0.0], [1.0, 0.0]])
    y = np.array([1.0, 0.0, 1.0, 0.0])
    fit = fit_logistic(X, y, weights=np.array([a, b, c, d], dtype=np.float64))
    est = float(fit.coefficients[1])
    se = float(math.sqrt(fit.covariance[1, 1]))
    z = z_value(confidence)
    pval = float(2.0 * stats.norm.sf(abs(est) / se)) if se > 0 else 1.0
    flags = set()
    if pval < MODERATE_ALPHA:
        flags.add(FLAG_MODERATE)
    if fit.separation:
        flags.add(FLAG_SEPARATION)
    return EffectEstimate(est, se, est - z * se, est + z * se, pval,
                          int(a + b), int(c + d), frozenset(flags), **meta)


# -- selections ---------------------------------------------------------------

def _cohort(records, design=None):
    if isinstance(records, Cohort):
        return records
    return as_cohort(records, design.arm_ids if design is not None else None)


def _resolve(g, design):
    if isinstance(g, ArmGroup):
        return g
    if design is None:
        raise ConfigurationError(f"group {g!r} given by name but no design to resolve it")
    groups = design_groups(design)
    if g in groups:
        return groups[g]
    if g in design.arm_ids:
        return ArmGroup(g, frozenset([g]))
    raise ConfigurationError(f"group {g} is not defined by the design")


def _pattern(p, design):
    if isinstance(p, SequencePattern):
        return p
    if design is None:
        raise ConfigurationError("pattern given as text but no design to parse it")
    return parse_pattern(p, design)


def _outcome(cohort, week, mask):
    y = cohort.week(week)[mask]
    if np.any(y == UNOBSERVED):
        raise PreconditionError(f"week {week} activity unobserved for some selected learners")
    return y


def sequence_return_proportion(records, pattern, outcome_period, confidence=0.95,
                               design=None):
    """Share of learners matching ``pattern`` who are active in ``outcome_period``.

    All randomized learners count (intent to treat); nobody is dropped for
    earlier inactivity.
    """
    from .sequences import pattern_mask

    cohort = _cohort(records, design)
    pattern = _pattern(pattern, design)
    P = cohort.n_periods
    if len(pattern) != P:
        raise PreconditionError(f"pattern has {len(pattern)} slots; records have {P} periods")
    if not 1 <= outcome_period <= P + 1:
        raise PreconditionError(f"outcome period must lie in 1..{P + 1}")
    mask = pattern_mask(pattern, cohort.arms, cohort.arm_ids)
    n = int(mask.sum())
    if n == 0:
        raise InsufficientDataError(f"no learners match pattern {format_pattern(pattern)}")
    y = _outcome(cohort, outcome_period, mask)
    p, lo, hi = wald_proportion(int(y.sum()), n, confidence)
    text = format_pattern(pattern)
    return ProportionEstimate(p, n, lo, hi, confidence, f"sequence:{text}:w{outcome_period}",
                              text, outcome_period)


def compare_sequences(records, pattern_a, pattern_b, outcome_period, confidence=0.95,
                      design=None):
    """Log OR of activity at ``outcome_period`` for pattern A vs pattern B."""
    from .sequences import pattern_mask

    cohort = _cohort(records, design)
    pa, pb = _pattern(pattern_a, design), _pattern(pattern_b, design)
    ma = pattern_mask(pa, cohort.arms, cohort.arm_ids)
    mb = pattern_mask(pb, cohort.arms, cohort.arm_ids)
    if np.any(ma & mb):
        raise PreconditionError("patterns overlap; sequence comparisons need disjoint sets")
    ya, yb = _outcome(cohort, outcome_period, ma), _outcome(cohort, outcome_period, mb)
    a, c = int(ya.sum()), int(yb.sum())
    ta, tb = format_pattern(pa), format_pattern(pb)
    return log_odds_ratio_2x2(a, len(ya) - a, c, len(yb) - c, confidence,
                              comparison_id=f"sequence:{ta}-vs-{tb}:w{outcome_period}",
                              period=outcome_period, outcome_period=outcome_period,
                              group=ta, control=tb)


def _effects(cohort, period, outcome_week, groups, control, confidence, kind, base_mask=None,
             stratum=None):
    if not 1 <= period <= cohort.n_periods:
        raise PreconditionError(f"period must lie in 1..{cohort.n_periods}")
    if not 1 <= outcome_week <= cohort.n_periods + 1:
        raise PreconditionError(f"outcome period must lie in 1..{cohort.n_periods + 1}")
    in_ctrl = cohort.group_mask(period, control.members)
    if base_mask is not None:
        in_ctrl = in_ctrl & base_mask
    y_all = cohort.week(outcome_week)
    out = []
    for g in groups:
        if g.members & control.members:
            raise PreconditionError(f"group {g.name} overlaps control {control.name}")
        in_g = cohort.group_mask(period, g.members)
        if base_mask is not None:
            in_g = in_g & base_mask
        sel = in_g | in_ctrl
        if np.any(y_all[sel] == UNOBSERVED):
            raise PreconditionError(f"week {outcome_week} activity unobserved for some learners")
        # codes: 0 control, 1 treated
        codes = in_g[sel].astype(np.int64)
        counts = kernels.cell_counts(codes, y_all[sel].astype(np.int64), 2)
        c_inact, c_act = counts[0]
        t_inact, t_act = counts[1]
        if t_act + t_inact == 0 or c_act + c_inact == 0:
            raise InsufficientDataError(
                f"insufficient data: empty {'treated' if t_act + t_inact == 0 else 'control'} "
                f"cell for {g.name} at period {period}" + (f" stratum {stratum}" if stratum else ""))
        cid = f"{kind}:p{period}:w{outcome_week}:{g.name}-vs-{control.name}"
        if stratum is not None:
            cid += f":{stratum}"
        out.append(log_odds_ratio_2x2(
            int(t_act), int(t_inact), int(c_act), int(c_inact), confidence,
            comparison_id=cid, period=period, outcome_period=outcome_week,
            group=g.name, control=control.name, stratum=stratum))
    return out


def average_treatment_effect(records, period, groups, control="E0", confidence=0.95,
                             design=None):
    """Per-period effect of each group vs control on next-week activity.

    Learners are selected only on their arm at ``period``; arms at every
    other period are left free, which averages over them.
    """
    cohort = _cohort(records, design)
    groups = [_resolve(g, design) for g in groups]
    control = _resolve(control, design)
    return _effects(cohort, period, period + 1, groups, control, confidence, "ate")


def delayed_effect(records, treat_period, outcome_period, groups, control="E0",
                   confidence=0.95, design=None):
    """Effect of ``treat_period`` arms on activity more than one week later."""
    if outcome_period <= treat_period + 1:
        raise PreconditionError("outcome_period must exceed treat_period + 1; "
                                "use average_treatment_effect")
    cohort = _cohort(records, design)
    groups = [_resolve(g, design) for g in groups]
    control = _resolve(control, design)
    return _effects(cohort, treat_period, outcome_period, groups, control, confidence,
                    "delayed")


# -- moderators ---------------------------------------------------------------

@dataclass(frozen=True)
class Ref:
    """One piece of data a moderator reads.

    kind ``activity``: activity in week ``index``; ``arm``: arm at period
    ``index``; ``baseline``: a pre-trial covariate named ``index`` (or
    ``"country"``).
    """

    kind: str
    index: object


@dataclass(frozen=True)
class ModeratorSpec:
    name: str
    refs: tuple
    stratify: Callable = field(compare=False, repr=False)
    levels: tuple = ()

    def validate_for(self, period):
        """Reject references measured at or after the randomization at ``period``."""
        for r in self.refs:
            if r.kind == "activity" and int(r.index) > period:
                raise PostRandomizationModeratorError(
                    f"post-randomization moderator rejected: {self.name} reads week "
                    f"{r.index} activity, observed after the period-{period} randomization")
            if r.kind == "arm" and int(r.index) >= period:
                raise PostRandomizationModeratorError(
                    f"post-randomization moderator rejected: {self.name} reads the period-"
                    f"{r.index} arm, assigned at or after the period-{period} randomization")
            if r.kind not in ("activity", "arm", "baseline"):
                raise ConfigurationError(f"unknown moderator reference kind {r.kind}")


def _columns(cohort, refs):
    cols = {}
    for r in refs:
        if r.kind == "activity":
            col = cohort.week(int(r.index))
            if np.any(col == UNOBSERVED):
                raise PreconditionError(f"week {r.index} activity is not observed in these records")
            cols[r] = col
        elif r.kind == "arm":
            cols[r] = np.array(cohort.arm_ids, dtype=object)[cohort.arms[:, int(r.index) - 1]]
        elif r.index == "country":
            cols[r] = cohort.countries
        else:
            if r.index not in cohort.covariates:
                raise ConfigurationError(f"no baseline covariate {r.index}")
            cols[r] = cohort.covariates[r.index]
    return cols


def activity_in_week(week):
    ref = Ref("activity", int(week))
    return ModeratorSpec(f"activity-week-{week}", (ref,),
                         lambda c: np.where(c[ref] == 1, "active", "inactive"),
                         ("active", "inactive"))


def prior_activity(period):
    """Active = any course activity in the week before the period's randomization."""
    spec = activity_in_week(period)
    return ModeratorSpec("prior-activity", spec.refs, spec.stratify, spec.levels)


def responder(group, source_period):
    """Among learners whose ``source_period`` arm is in ``group``: active afterwards or not.

    Learners outside ``group`` at ``source_period`` are left out of both strata.
    """
    arm_ref = Ref("arm", int(source_period))
    act_ref = Ref("activity", int(source_period) + 1)

    def stratify(c):
        inside = np.array([a in group.members for a in c[arm_ref]])
        lab = np.where(c[act_ref] == 1, "responder", "non-responder").astype(object)
        lab[~inside] = None
        return lab

    return ModeratorSpec(f"responder:{group.name}@{source_period}", (arm_ref, act_ref),
                         stratify, ("responder", "non-responder"))


def country():
    ref = Ref("baseline", "country")
    return ModeratorSpec("country", (ref,), lambda c: c[ref])


def covariate_split(name, threshold):
    ref = Ref("baseline", name)
    return ModeratorSpec(f"{name}>={threshold}", (ref,),
                         lambda c: np.where(c[ref] >= threshold, "high", "low"),
                         ("high", "low"))


def builtin_moderator(text, period, design=None):
    """Moderator from its CLI name: ``prior-activity``, ``country``,
    ``responder:<group>`` (responders to the previous period's arm) or
    ``activity-week:<w>``."""
    if text == "prior-activity":
        return prior_activity(period)
    if text == "country":
        return country()
    if text.startswith("responder:"):
        return responder(_resolve(text.split(":", 1)[1], design), period - 1)
    if text.startswith("activity-week:"):
        return activity_in_week(int(text.split(":", 1)[1]))
    raise ConfigurationError(f"unknown moderator {text}")


def moderator_effect(records, period, moderator, groups, control="E0", confidence=0.95,
                     design=None):
    """Per-stratum ``average_treatment_effect`` at ``period``.

    The moderator must only read data observed before the period's
    randomization; anything later is rejected before touching the data.
    """
    if isinstance(moderator, str):
        moderator = builtin_moderator(moderator, period, design)
    moderator.validate_for(period)
    cohort = _cohort(records, design)
    groups = [_resolve(g, design) for g in groups]
    control = _resolve(control, design)
    labels = np.asarray(moderator.stratify(_columns(cohort, moderator.refs)), dtype=object)
    present = {x for x in labels if x is not None}
    levels = [lv for lv in moderator.levels if lv in present]
    levels += sorted(str(x) for x in present if x not in levels)
    out = []
    for level in levels:
        mask = labels == level
        out.extend(_effects(cohort, period, period + 1, groups, control, confidence,
                            f"moderator[{moderator.name}]", base_mask=mask,
                            stratum=str(level)))
    return out


# -- power --------------------------------------------------------------------

@dataclass(frozen=True)
class ComparisonSpec:
    """What a power replication estimates and tests.

    kind: ``ate`` | ``delayed`` | ``moderator`` | ``sequence``.
    """

    kind: str
    period: int = 1
    group: str = ""
    control: str = "E0"
    outcome_period: int | None = None
    moderator: str | None = None
    stratum: str | None = None
    patterns: tuple = ()

    @classmethod
    def from_dict(cls, d):
        known = {"kind", "period", "group", "control", "outcome_period", "moderator",
                 "stratum", "patterns"}
        extra = set(d) - known
        if extra:
            raise ConfigurationError(f"unknown comparison keys {sorted(extra)}")
        d = dict(d)
        d["patterns"] = tuple(d.get("patterns", ()))
        return cls(**d)

    def to_dict(self):
        return {"kind": self.kind, "period": self.period, "group": self.group,
                "control": self.control, "outcome_period": self.outcome_period,
                "moderator": self.moderator, "stratum": self.stratum,
                "patterns": list(self.patterns)}

    def check(self, design):
        if self.kind not in ("ate", "delayed", "moderator", "sequence"):
            raise ConfigurationError(f"unknown comparison kind {self.kind}")
        if self.kind == "sequence":
            if len(self.patterns) != 2:
                raise ConfigurationError("sequence comparison needs two patterns")
            for p in self.patterns:
                _pattern(p, design)
            if self.outcome_period is None:
                raise ConfigurationError("sequence comparison needs outcome_period")
            return
        _resolve(self.group, design)
        _resolve(self.control, design)
        if self.kind == "delayed" and self.outcome_period is None:
            raise ConfigurationError("delayed comparison needs outcome_period")
        if self.kind == "moderator":
            if not self.moderator or self.stratum is None:
                raise ConfigurationError("moderator comparison needs moderator and stratum")
            builtin_moderator(self.moderator, self.period, design).validate_for(self.period)

    def estimate(self, records, design):
        if self.kind == "ate":
            return average_treatment_effect(records, self.period, [self.group], self.control,
                                            design=design)[0]
        if self.kind == "delayed":
            return delayed_effect(records, self.period, self.outcome_period, [self.group],
                                  self.control, design=design)[0]
        if self.kind == "moderator":
            ests = moderator_effect(records, self.period, self.moderator, [self.group],
                                    self.control, design=design)
            for e in ests:
                if e.stratum == self.stratum:
                    return e
            raise InsufficientDataError(f"stratum {self.stratum} empty")
        return compare_sequences(records, self.patterns[0], self.patterns[1],
                                 self.outcome_period, design=design)


@dataclass(frozen=True)
class PowerResult:
    power: float
    mc_se: float
    replications: int
    rejections: int
    failures: int
    alpha: float
    mean_estimate: float

    def to_dict(self):
        return {"power": self.power, "mc_se": self.mc_se, "replications": self.replications,
                "rejections": self.rejections, "failures": self.failures,
                "alpha": self.alpha, "mean_estimate": self.mean_estimate}


def replication_seed(master_seed, rep):
    return kernels.mix64(int(master_seed) ^ kernels.mix64(0xA5A5 + rep))


def allocate(n, shares):
    """Split ``n`` by ``shares`` using largest remainders (deterministic)."""
    total = float(sum(shares.values()))
    raw = {k: n * v / total for k, v in shares.items()}
    counts = {k: int(math.floor(x)) for k, x in raw.items()}
    left = n - sum(counts.values())
    for k in sorted(raw, key=lambda k: (counts[k] - raw[k], list(raw).index(k)))[:left]:
        counts[k] += 1
    return counts


def power_monte_carlo(design, model, comparison, n, alpha=0.05, replications=1000, seed=0,
                      country_shares=None, jobs=1):
    """Share of simulated trials in which ``comparison`` rejects at ``alpha``.

    Replication ``r`` simulates with a seed derived from (seed, r), so the
    answer does not depend on ``jobs``. Replications where the estimator
    fails (empty cell, separation) count as non-rejections and are tallied
    in ``failures``.
    """
    from .simulator import make_profiles, simulate_cohort

    if replications < 100:
        raise PreconditionError("replications must be >= 100")
    if isinstance(comparison, dict):
        comparison = ComparisonSpec.from_dict(comparison)
    comparison.check(design)
    shares = country_shares or {c: 1.0 for c in model.countries}
    profiles = make_profiles(allocate(n, shares))
    hashes = kernels.hash_ids([p.learner_id for p in profiles])

    def one(rep):
        sim = simulate_cohort(design, profiles, model, replication_seed(seed, rep),
                              id_hashes=hashes)
        try:
            est = comparison.estimate(sim.cohort, design)
        except (InsufficientDataError, SeparationError):
            return None
        if FLAG_SEPARATION in est.flags:
            return None
        return est

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, range(replications)))
    else:
        results = [one(r) for r in range(replications)]
    ok = [e for e in results if e is not None]
    rejections = sum(e.rejects(alpha) for e in ok)
    power = rejections / replications
    mean_est = float(np.mean([e.log_odds_ratio for e in ok])) if ok else float("nan")
    return PowerResult(power, math.sqrt(power * (1.0 - power) / replications), replications,
                       rejections, replications - len(ok), alpha, mean_est)


def two_proportion_n(p0, p1, alpha=0.05, power=0.8):
    """Closed-form per-group sample size for a two-sided two-proportion z-test."""
    za = stats.norm.ppf(1.0 - alpha / 2.0)
    zb = stats.norm.ppf(power)
    pbar = 0.5 * (p0 + p1)
    num = za * math.sqrt(2.0 * pbar * (1.0 - pbar)) + zb * math.sqrt(p0 * (1 - p0) + p1 * (1 - p1))
    return int(math.ceil(num**2 / (p1 - p0) ** 2))
