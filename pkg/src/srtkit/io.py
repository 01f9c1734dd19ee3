"""File formats: design/model JSON, event-log and assignment CSV, reports, manifests.

See docs/FORMATS.md for the schemas. Writers emit UTF-8 with LF endings and
no timestamps, so identical inputs give byte-identical files.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .design import (DecisionPoint, Eligibility, EligibilityPredicate, Fallback, Mindset, Mode,
                     ProblemType, RandomizationScheme, TreatmentArm, TreatmentSequence, Trigger,
                     TrialDesign, builtin_percs, builtin_percs_ab)
from .errors import (DuplicateLearnerError, IncompleteHistoryError, ParseError, SchemaError,
                     UnknownArmError)
from .records import UNOBSERVED, LearnerProfile, LearnerRecord
from .simulator import BehaviorModel, null_model, percs_like_model

log = logging.getLogger(__name__)

LOG_HEADER = ("learner_id", "country", "period", "arm_id", "active_next")
LOG_HEADER_PRIOR = LOG_HEADER + ("active_prior",)
ASSIGNMENT_HEADER = ("learner_id", "period", "arm_id", "eligible")
PLOT_HEADER = ("comparison_id", "period", "group", "stratum", "estimate", "se", "ci_lo",
               "ci_hi", "p", "n_treated", "n_control", "flags")


# -- generic helpers ----------------------------------------------------------

def sha256_bytes(data):
    return hashlib.sha256(data).hexdigest()


def sha256_file(path):
    return sha256_bytes(Path(path).read_bytes())


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def atomic_write(path, data):
    """Write bytes via a temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _load_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc.strerror}") from None


def _check_keys(obj, allowed, where, required=()):
    if not isinstance(obj, dict):
        raise SchemaError(f"{where}: expected an object")
    extra = sorted(set(obj) - set(allowed))
    if extra:
        raise SchemaError(f"{where}: unknown keys {extra}")
    missing = [k for k in required if k not in obj]
    if missing:
        raise SchemaError(f"{where}: missing keys {missing}")


def _enum(cls, value, where):
    try:
        return cls(value)
    except ValueError:
        allowed = [e.value for e in cls]
        raise SchemaError(f"{where}: {value!r} not one of {allowed}") from None


# -- designs ------------------------------------------------------------------

BUILTIN_DESIGNS = {"percs": builtin_percs, "percs-ab": builtin_percs_ab}


def design_from_dict(d):
    _check_keys(d, {"name", "mode", "n_periods", "control_arm", "arms", "groups",
                    "decision_points"}, "design", required=("arms", "decision_points"))
    arms = []
    for k, a in enumerate(d["arms"]):
        where = f"arms[{k}]"
        _check_keys(a, {"id", "email_present", "mindset", "problem_type"}, where, ("id",))
        arms.append(TreatmentArm(
            str(a["id"]), bool(a.get("email_present", True)),
            _enum(Mindset, a.get("mindset", "none-applicable"), where + ".mindset"),
            _enum(ProblemType, a.get("problem_type", "none-applicable"),
                  where + ".problem_type")))
    points = []
    for k, p in enumerate(d["decision_points"]):
        where = f"decision_points[{k}]"
        _check_keys(p, {"index", "probabilities", "eligibility", "fallback", "trigger"}, where,
                    ("index", "probabilities"))
        if not isinstance(p["probabilities"], dict):
            raise SchemaError(f"{where}.probabilities: expected an object")
        try:
            probs = {str(k2): float(v) for k2, v in p["probabilities"].items()}
        except (TypeError, ValueError):
            raise SchemaError(f"{where}.probabilities: values must be numbers") from None
        pred = EligibilityPredicate(
            _enum(Eligibility, p.get("eligibility", "all"), where + ".eligibility"),
            _enum(Fallback, p.get("fallback", "carry-previous-arm"), where + ".fallback"))
        points.append(DecisionPoint(int(p["index"]), RandomizationScheme(probs), pred,
                                    _enum(Trigger, p.get("trigger", "period-boundary"),
                                          where + ".trigger")))
    mode = _enum(Mode, d.get("mode", "sequential"), "mode")
    n_periods = d.get("n_periods")
    if n_periods is None:
        if mode is Mode.SINGLE:
            raise SchemaError("n_periods: required in single-randomized mode")
        n_periods = len(points)
    groups = d.get("groups", {})
    if not isinstance(groups, dict):
        raise SchemaError("groups: expected an object of name -> [arm ids]")
    return TrialDesign(arms=tuple(arms), decision_points=tuple(points),
                       n_periods=int(n_periods), mode=mode,
                       groups={k: frozenset(v) for k, v in groups.items()},
                       control_arm=d.get("control_arm"), name=d.get("name", ""))


def design_to_dict(design):
    out = {
        "name": design.name,
        "mode": design.mode.value,
        "n_periods": design.n_periods,
        "arms": [{"id": a.id, "email_present": a.email_present, "mindset": a.mindset.value,
                  "problem_type": a.problem_type.value} for a in design.arms],
        "decision_points": [{
            "index": dp.index,
            "probabilities": dict(dp.scheme.probabilities),
            "eligibility": dp.eligibility.kind.value,
            "fallback": dp.eligibility.fallback.value,
            "trigger": dp.trigger.value,
        } for dp in design.decision_points],
    }
    if design.control_arm is not None:
        out["control_arm"] = design.control_arm
    if design.groups:
        out["groups"] = {k: sorted(v) for k, v in design.groups.items()}
    return out


def load_design(ref):
    """A design from a JSON path or a builtin name (``percs``, ``percs-ab``)."""
    if str(ref) in BUILTIN_DESIGNS:
        return BUILTIN_DESIGNS[str(ref)]()
    return design_from_dict(_load_json(ref))


# -- behavior models ----------------------------------------------------------

def _num(v, where):
    if isinstance(v, str) and v.strip().lower() in ("-inf", "-infinity"):
        return -math.inf
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise SchemaError(f"{where}: expected a number")
    return float(v)


def _per_country(v, countries, where):
    if isinstance(v, dict):
        extra = sorted(set(v) - set(countries))
        if extra:
            raise SchemaError(f"{where}: unknown countries {extra}")
        return [_num(v.get(c, 0.0), f"{where}.{c}") for c in countries]
    return [_num(v, where)] * len(countries)


def _rows(v, n, countries, where):
    if not isinstance(v, list) or len(v) != n:
        raise SchemaError(f"{where}: expected a list of {n} rows")
    return np.array([_per_country(x, countries, f"{where}[{i}]") for i, x in enumerate(v)])


def model_from_dict(d):
    _check_keys(d, {"countries", "groups", "control", "baseline_logit", "activity_carryover",
                    "arm_effect", "moderation", "delayed_effect", "description"}, "model",
                required=("countries", "groups", "baseline_logit", "arm_effect"))
    countries = tuple(str(c) for c in d["countries"])
    groups = tuple(str(g) for g in d["groups"])
    control = d.get("control", "E0")
    if control not in groups:
        raise SchemaError(f"control group {control} missing from groups")
    base = d["baseline_logit"]
    if not isinstance(base, list) or len(base) < 2:
        raise SchemaError("baseline_logit: expected one row per week (n_periods + 1 rows)")
    P = len(base) - 1
    baseline = _rows(base, P + 1, countries, "baseline_logit")
    C, G = len(countries), len(groups)
    arm = np.zeros((P, G, C))
    mod = np.zeros((P, G, C))
    delayed = np.zeros((P, P + 1, G, C))
    effects = d["arm_effect"]
    _check_keys(effects, groups, "arm_effect")
    for g in groups:
        if g == control:
            if g in effects:
                arm[:, groups.index(g)] = _rows(effects[g], P, countries, f"arm_effect.{g}")
            continue
        if g not in effects:
            raise SchemaError(f"arm_effect: group {g} not covered for periods 1..{P}")
        arm[:, groups.index(g)] = _rows(effects[g], P, countries, f"arm_effect.{g}")
    moderation = d.get("moderation", {})
    _check_keys(moderation, groups, "moderation")
    for g, rows in moderation.items():
        mod[:, groups.index(g)] = _rows(rows, P, countries, f"moderation.{g}")
    for k, e in enumerate(d.get("delayed_effect", [])):
        where = f"delayed_effect[{k}]"
        _check_keys(e, {"source", "target", "group", "value"}, where,
                    ("source", "target", "group", "value"))
        s, t, g = int(e["source"]), int(e["target"]), e["group"]
        if g not in groups:
            raise SchemaError(f"{where}: unknown group {g}")
        if not (1 <= s <= P and s + 1 < t <= P + 1):
            raise SchemaError(f"{where}: need 1 <= source <= {P} and source + 1 < target <= {P + 1}")
        delayed[s - 1, t - 1, groups.index(g)] = _per_country(e["value"], countries, where)
    carry = None
    if "activity_carryover" in d:
        carry = _rows(d["activity_carryover"], P, countries, "activity_carryover")
    return BehaviorModel(countries, groups, baseline, arm, mod, delayed, carry, control,
                         d.get("description", ""))


def _country_row(row, countries):
    vals = [(-math.inf if v == -math.inf else float(v)) for v in row]
    if len(set(vals)) == 1:
        v = vals[0]
        return "-inf" if v == -math.inf else v
    return {c: ("-inf" if v == -math.inf else v) for c, v in zip(countries, vals)}


def model_to_dict(model):
    cs = model.countries
    P = model.n_periods
    out = {
        "description": model.description,
        "countries": list(cs),
        "groups": list(model.groups),
        "control": model.control,
        "baseline_logit": [_country_row(r, cs) for r in model.baseline_logit],
        "activity_carryover": [_country_row(r, cs) for r in model.activity_carryover],
        "arm_effect": {g: [_country_row(model.arm_effect[p, k], cs) for p in range(P)]
                       for k, g in enumerate(model.groups) if g != model.control},
        "moderation": {g: [_country_row(model.moderation[p, k], cs) for p in range(P)]
                       for k, g in enumerate(model.groups)
                       if np.any(model.moderation[:, k] != 0)},
        "delayed_effect": [
            {"source": s + 1, "target": t + 1, "group": model.groups[k],
             "value": _country_row(model.delayed_effect[s, t, k], cs)}
            for s in range(P) for t in range(P + 1) for k in range(len(model.groups))
            if np.any(model.delayed_effect[s, t, k] != 0)],
    }
    return out


def load_model(ref, design=None):
    """A behavior model from a JSON path or ``percs-like`` / ``null``."""
    if str(ref) == "percs-like":
        return percs_like_model()
    if str(ref) == "null":
        if design is None:
            raise SchemaError("the null model needs a design")
        return null_model(design)
    return model_from_dict(_load_json(ref))


# -- event logs ---------------------------------------------------------------

@dataclass
class IngestResult:
    records: list
    duplicate_learners: int = 0
    dropped_rows: int = 0


def _parse_flag(value, line, column, allow_blank=False):
    if allow_blank and value == "":
        return UNOBSERVED
    if value not in ("0", "1"):
        raise ParseError(f"line {line}: {column} must be 0 or 1, got {value!r}")
    return int(value)


def read_event_log(path, design):
    """Validated LearnerRecords (sorted by learner id) plus dedup counts.

    A learner whose full period block appears again after it was complete
    is treated as a re-enrollment: the later rows are dropped and counted.
    Any other repeated (learner_id, period) is an error.
    """
    P = design.n_periods
    arm_ids = set(design.arm_ids)
    try:
        fh = open(path, encoding="utf-8", newline="")
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = tuple(next(reader))
        except StopIteration:
            raise ParseError("line 1: empty file, expected header") from None
        if header not in (LOG_HEADER, LOG_HEADER_PRIOR):
            raise SchemaError("line 1: header must be exactly " + ",".join(LOG_HEADER)
                              + " (optionally followed by ,active_prior)")
        has_prior = header == LOG_HEADER_PRIOR
        learners = {}
        order = []
        dup_learners = set()
        dropped = 0
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"line {line}: expected {len(header)} fields, got {len(row)}")
            lid, country, period_s, arm, nxt = row[:5]
            if not lid:
                raise ParseError(f"line {line}: empty learner_id")
            try:
                period = int(period_s)
            except ValueError:
                raise ParseError(f"line {line}: period must be an integer, got {period_s!r}") from None
            if not 1 <= period <= P:
                raise SchemaError(f"line {line}: period {period} outside 1..{P}")
            if arm not in arm_ids:
                raise UnknownArmError(f"line {line}: unknown arm {arm}")
            active_next = _parse_flag(nxt, line, "active_next")
            prior = _parse_flag(row[5], line, "active_prior", allow_blank=True) if has_prior \
                else UNOBSERVED
            entry = learners.get(lid)
            if entry is None:
                entry = learners[lid] = {"country": country, "rows": {}, "lines": []}
                order.append(lid)
            if period in entry["rows"]:
                if len(entry["rows"]) == P:
                    dup_learners.add(lid)
                    dropped += 1
                    continue
                raise DuplicateLearnerError(
                    f"line {line}: duplicate row for learner {lid} period {period}")
            if lid in dup_learners:
                dropped += 1
                continue
            if country != entry["country"]:
                raise SchemaError(f"line {line}: learner {lid} changes country "
                                  f"{entry['country']} -> {country}")
            entry["rows"][period] = (arm, active_next, prior, line)
            entry["lines"].append(line)
    records = []
    for lid in sorted(order):
        entry = learners[lid]
        rows = entry["rows"]
        missing = [p for p in range(1, P + 1) if p not in rows]
        if missing:
            lines = ",".join(str(x) for x in sorted(entry["lines"]))
            raise IncompleteHistoryError(
                f"missing period {missing[0]} for learner {lid} (rows at lines {lines})")
        activity = [rows[1][2]] + [rows[p][1] for p in range(1, P + 1)]
        for p in range(2, P + 1):
            prior = rows[p][2]
            if prior != UNOBSERVED and prior != rows[p - 1][1]:
                raise SchemaError(f"line {rows[p][3]}: active_prior disagrees with "
                                  f"active_next of period {p - 1} for learner {lid}")
        records.append(LearnerRecord(
            LearnerProfile(lid, entry["country"]),
            TreatmentSequence(tuple(rows[p][0] for p in range(1, P + 1))),
            tuple(activity)))
    if dup_learners:
        log.warning("collapsed %d re-enrolled learners to their first enrollment "
                    "(%d rows dropped)", len(dup_learners), dropped)
    return IngestResult(records, len(dup_learners), dropped)


def ingest_log(path, design):
    return read_event_log(path, design).records


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def event_log_text(records):
    """Event-log CSV for records; adds ``active_prior`` when week 1 is known."""
    records = sorted(records, key=lambda r: r.learner_id)
    with_prior = any(r.activity[0] != UNOBSERVED for r in records)
    rows = []
    for r in records:
        for p, arm in enumerate(r.sequence, start=1):
            row = [r.learner_id, r.profile.country, p, arm, r.activity[p]]
            if with_prior:
                prior = r.activity[p - 1]
                row.append("" if prior == UNOBSERVED else prior)
            rows.append(row)
    return _csv_text(LOG_HEADER_PRIOR if with_prior else LOG_HEADER, rows)


def write_event_log(path, records):
    atomic_write(path, event_log_text(records))


def assignments_text(assignments):
    rows = [[a.learner_id, a.period, a.arm_id, int(a.eligible)]
            for a in sorted(assignments, key=lambda a: (a.learner_id, a.period))]
    return _csv_text(ASSIGNMENT_HEADER, rows)


def write_assignments(path, assignments):
    atomic_write(path, assignments_text(assignments))


def read_assignments(path):
    from .randomizer import AssignmentRecord

    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        if header != ASSIGNMENT_HEADER:
            raise SchemaError("line 1: header must be exactly " + ",".join(ASSIGNMENT_HEADER))
        out = []
        for line, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise ParseError(f"line {line}: expected 4 fields, got {len(row)}")
            out.append(AssignmentRecord(row[0], int(row[1]), row[2],
                                        bool(_parse_flag(row[3], line, "eligible"))))
    return out


# -- reports ------------------------------------------------------------------

def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def report_payload(command, entries, extra=None):
    out = {
        "toolkit_version": __version__,
        "command": command,
        "n_comparisons": len(entries),
        "multiple_comparison_correction": "none",
        "comparisons": [e.to_dict() for e in entries],
    }
    if extra:
        out.update(extra)
    return out


def plot_data_text(entries):
    rows = []
    for e in entries:
        d = e.to_dict()
        rows.append([_fmt(d["comparison_id"]), _fmt(d["period"]), _fmt(d["group"]),
                     _fmt(d["stratum"]), _fmt(d["estimate"]), _fmt(d["se"]),
                     _fmt(d["ci"][0]), _fmt(d["ci"][1]), _fmt(d["p"]),
                     _fmt(d["n_treated"]), _fmt(d["n_control"]), ";".join(d["flags"])])
    return _csv_text(PLOT_HEADER, rows)
