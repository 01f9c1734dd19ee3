"""Arm groups and positional sequence patterns.

A pattern is one predicate per period: a specific arm, a named group of
arms, or ``ANY``. The literal syntax is ``(E0,P2,*)``: ``*`` (or ``any``)
accepts every arm, a group name tests membership, an arm id tests equality.
Arm ids win over group names when a token is both.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .design import TreatmentSequence
from .errors import ParseError, PreconditionError, UnknownArmError

FACTOR_GROUPS = ("E0", "E1", "G0", "G1", "P0", "P1", "P2")


@dataclass(frozen=True)
class ArmGroup:
    name: str
    members: frozenset

    def __post_init__(self):
        object.__setattr__(self, "members", frozenset(self.members))

    def __contains__(self, arm_id):
        return arm_id in self.members


@dataclass(frozen=True)
class Arm:
    id: str

    def accepts(self, arm_id):
        return arm_id == self.id

    def __str__(self):
        return self.id


@dataclass(frozen=True)
class Group:
    group: ArmGroup

    def accepts(self, arm_id):
        return arm_id in self.group.members

    def __str__(self):
        return self.group.name


class _Any:
    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def accepts(self, arm_id):
        return True

    def __str__(self):
        return "*"

    def __repr__(self):
        return "ANY"


ANY = _Any()


@dataclass(frozen=True)
class SequencePattern:
    slots: tuple

    def __post_init__(self):
        object.__setattr__(self, "slots", tuple(self.slots))

    def __len__(self):
        return len(self.slots)

    def __str__(self):
        return format_pattern(self)


def design_groups(design):
    return {name: ArmGroup(name, members) for name, members in design.arm_groups().items()}


def group(design, name):
    groups = design_groups(design)
    if name not in groups:
        raise UnknownArmError(f"unknown group {name}")
    return groups[name]


def parse_pattern(text, design):
    """Parse ``(E0,P2,*)`` against a design's arms and groups."""
    s = text.strip()
    if not (s.startswith("(") and s.endswith(")")):
        raise ParseError(f"pattern must be parenthesized: {text!r}")
    tokens = [t.strip() for t in s[1:-1].split(",")]
    if any(not t for t in tokens):
        raise ParseError(f"empty slot in pattern {text!r}")
    arm_ids = set(design.arm_ids)
    groups = design_groups(design)
    slots = []
    for t in tokens:
        if t in ("*", "any", "Any", "ANY"):
            slots.append(ANY)
        elif t in arm_ids:
            slots.append(Arm(t))
        elif t in groups:
            slots.append(Group(groups[t]))
        else:
            raise UnknownArmError(f"unknown arm or group {t} in pattern {text!r}")
    if len(slots) != design.n_periods:
        raise ParseError(f"pattern {text!r} has {len(slots)} slots; design has "
                         f"{design.n_periods} periods")
    return SequencePattern(slots)


def format_pattern(pattern):
    return "(" + ",".join(str(s) for s in pattern.slots) + ")"


def match(pattern, sequence):
    seq = tuple(sequence.arms if isinstance(sequence, TreatmentSequence) else sequence)
    if len(seq) != len(pattern.slots):
        raise PreconditionError(f"pattern has {len(pattern.slots)} slots, "
                                f"sequence has {len(seq)} arms")
    return all(slot.accepts(a) for slot, a in zip(pattern.slots, seq))


def select(pattern, records):
    """Records whose realized sequence matches, in input order."""
    return [r for r in records if match(pattern, r.sequence)]


def pattern_mask(pattern, arm_matrix, arm_ids):
    """Vectorized match over an (n x P) arm-index matrix."""
    if arm_matrix.shape[1] != len(pattern.slots):
        raise PreconditionError("pattern length does not match period count")
    mask = np.ones(arm_matrix.shape[0], dtype=bool)
    for j, slot in enumerate(pattern.slots):
        if slot is ANY:
            continue
        ok = np.array([slot.accepts(a) for a in arm_ids])
        mask &= ok[arm_matrix[:, j]]
    return mask


@dataclass(frozen=True)
class PartitionReport:
    overlaps: tuple = ()
    uncovered: frozenset = frozenset()
    extraneous: frozenset = frozenset()

    @property
    def ok(self):
        return not (self.overlaps or self.uncovered or self.extraneous)

    def __str__(self):
        if self.ok:
            return "ok"
        parts = []
        for a, b, common in self.overlaps:
            parts.append(f"{a} and {b} overlap on {{{','.join(sorted(common))}}}")
        if self.uncovered:
            parts.append("uncovered arms {" + ",".join(sorted(self.uncovered)) + "}")
        if self.extraneous:
            parts.append("arms outside universe {" + ",".join(sorted(self.extraneous)) + "}")
        return "; ".join(parts)


def partition_check(groups, universe):
    """Do ``groups`` split ``universe`` into disjoint, covering pieces?"""
    universe = frozenset(universe)
    overlaps = []
    for i, a in enumerate(groups):
        for b in groups[i + 1:]:
            common = a.members & b.members
            if common:
                overlaps.append((a.name, b.name, frozenset(common)))
    covered = frozenset().union(*(g.members for g in groups)) if groups else frozenset()
    return PartitionReport(tuple(overlaps), universe - covered, covered - universe)
