"""Learner-level data shared by the simulator, estimators and log I/O.

``Cohort`` is the columnar form the estimators work on; ``LearnerRecord``
is the row form for callers. Activity is indexed by week: column ``w - 1``
holds week ``w`` activity for ``w = 1..n_periods + 1``, ``-1`` marks a week
that was not observed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .design import TreatmentSequence
from .errors import UnknownArmError

UNOBSERVED = -1


@dataclass(frozen=True)
class LearnerProfile:
    learner_id: str
    country: str = "other"
    covariates: Mapping[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class LearnerRecord:
    profile: LearnerProfile
    sequence: TreatmentSequence
    activity: tuple

    @property
    def learner_id(self):
        return self.profile.learner_id

    def active(self, week):
        return self.activity[week - 1]


@dataclass
class Cohort:
    learner_ids: list
    countries: np.ndarray  # object array of country codes
    arm_ids: tuple  # vocabulary for ``arms``
    arms: np.ndarray  # (n, P) int64 indices into arm_ids
    activity: np.ndarray  # (n, P + 1) int8, UNOBSERVED where unknown
    covariates: dict = field(default_factory=dict)

    @property
    def n(self):
        return len(self.learner_ids)

    @property
    def n_periods(self):
        return self.arms.shape[1]

    def week(self, w):
        return self.activity[:, w - 1]

    def group_mask(self, period, members):
        ok = np.array([a in members for a in self.arm_ids])
        return ok[self.arms[:, period - 1]]

    def subset(self, mask):
        idx = np.flatnonzero(mask)
        return Cohort(
            [self.learner_ids[i] for i in idx],
            self.countries[idx],
            self.arm_ids,
            self.arms[idx],
            self.activity[idx],
            {k: v[idx] for k, v in self.covariates.items()},
        )

    @classmethod
    def from_records(cls, records, arm_ids):
        arm_ids = tuple(arm_ids)
        index = {a: i for i, a in enumerate(arm_ids)}
        records = list(records)
        n = len(records)
        P = len(records[0].sequence) if records else 0
        arms = np.zeros((n, P), dtype=np.int64)
        act = np.full((n, P + 1), UNOBSERVED, dtype=np.int8)
        names = sorted({k for r in records for k in r.profile.covariates})
        cov = {k: np.full(n, np.nan) for k in names}
        for i, r in enumerate(records):
            try:
                arms[i] = [index[a] for a in r.sequence]
            except KeyError as exc:
                raise UnknownArmError(f"unknown arm {exc.args[0]}") from None
            act[i] = [UNOBSERVED if x is None else int(x) for x in r.activity]
            for k, v in r.profile.covariates.items():
                cov[k][i] = v
        countries = np.array([r.profile.country for r in records], dtype=object)
        return cls([r.learner_id for r in records], countries, arm_ids, arms, act, cov)

    def to_records(self):
        out = []
        for i, lid in enumerate(self.learner_ids):
            cov = {k: float(v[i]) for k, v in self.covariates.items() if not np.isnan(v[i])}
            out.append(LearnerRecord(
                LearnerProfile(lid, str(self.countries[i]), cov),
                TreatmentSequence(tuple(self.arm_ids[j] for j in self.arms[i])),
                tuple(int(x) for x in self.activity[i]),
            ))
        return out


def as_cohort(records, arm_ids=None):
    if isinstance(records, Cohort):
        return records
    records = list(records)
    if arm_ids is None:
        arm_ids = sorted({a for r in records for a in r.sequence})
    return Cohort.from_records(records, arm_ids)
