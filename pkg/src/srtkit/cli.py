"""``srt`` command line: validate | simulate | analyze | power | replay.

Every command that takes ``--out`` writes its outputs plus ``manifest.json``
into that directory. Outputs are built in memory first and only then
written (each via temp file + rename), so a failing command leaves no
partial files. Errors print one line, ``error <code>: <message>``, on
stderr and exit with status 1 (2 for usage errors).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from . import io as srtio
from .design import validate_design
from .errors import ManifestMismatchError, SRTError, UsageError
from .estimators import (ComparisonSpec, average_treatment_effect, delayed_effect,
                         moderator_effect, power_monte_carlo, sequence_return_proportion)
from .records import Cohort
from .simulator import expected_emails, make_profiles, simulate_cohort

MANIFEST = "manifest.json"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _pairs(text):
    out = {}
    for part in text.split(","):
        if "=" not in part:
            raise UsageError(f"expected KEY=COUNT pairs, got {part!r}")
        k, v = part.split("=", 1)
        try:
            out[k.strip()] = int(v)
        except ValueError:
            raise UsageError(f"count for {k} must be an integer") from None
    return out


def _seed(args):
    if args.seed is not None:
        return args.seed
    env = os.environ.get("SRT_SEED")
    if env is None:
        raise UsageError("a seed is required: pass --seed or set SRT_SEED")
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"SRT_SEED must be an integer, got {env!r}") from None


def _input_entry(ref):
    if ref is None:
        return None
    if ref in srtio.BUILTIN_DESIGNS or ref in ("percs-like", "null"):
        return {"builtin": ref}
    return {"path": str(Path(ref).resolve()), "sha256": srtio.sha256_file(ref)}


def _default_groups(design):
    groups = design.arm_groups()
    if all(g in groups for g in ("P0", "P1", "P2")):
        return ["P0", "P1", "P2"]
    ctrl = groups.get("E0", frozenset([design.control]))
    return [a for a in design.arm_ids if a not in ctrl]


def _filter_country(records, country):
    if country is None:
        return records
    out = [r for r in records if r.profile.country == country]
    if not out:
        raise UsageError(f"no learners from country {country}")
    return out


# -- commands: each returns ({filename: text}, manifest args, summary line) ----------

def cmd_validate(args):
    design = srtio.load_design(args.design)
    report = validate_design(design)
    text = srtio.canonical_json(report.to_dict())
    summary = "ok" if report.ok else "invalid: " + "; ".join(map(str, report.violations))
    return {"validation.json": text}, {"design": args.design}, summary, (0 if report.ok else 1)


def cmd_simulate(args):
    design = srtio.load_design(args.design)
    model = srtio.load_model(args.model, design)
    seed = _seed(args)
    if args.countries:
        counts = _pairs(args.countries)
        if args.n is not None and sum(counts.values()) != args.n:
            raise UsageError("--n disagrees with the --countries total")
    else:
        if args.n is None:
            raise UsageError("simulate needs --n or --countries")
        from .estimators import allocate
        counts = allocate(args.n, {c: 1.0 for c in model.countries})
    sim = simulate_cohort(design, make_profiles(counts), model, seed)
    records = sim.records()
    n = len(records)
    summary = {
        "toolkit_version": __version__,
        "n_learners": n,
        "countries": counts,
        "emails_sent": sim.outcome.emails_sent,
        "expected_emails": expected_emails(design, n),
        "activity_rate_by_week": [float(x) for x in sim.outcome.activity.mean(axis=0)],
    }
    files = {
        "events.csv": srtio.event_log_text(records),
        "assignments.csv": srtio.assignments_text(sim.assignments),
        "summary.json": srtio.canonical_json(summary),
    }
    margs = {"design": args.design, "model": args.model, "n": args.n,
             "countries": args.countries, "seed": seed}
    return files, margs, f"simulated {n} learners, {sim.outcome.emails_sent} emails", 0


def cmd_analyze(args):
    design = srtio.load_design(args.design)
    ingest = srtio.read_event_log(args.log, design)
    records = _filter_country(ingest.records, args.country)
    cohort = Cohort.from_records(records, design.arm_ids)
    conf = args.confidence
    kind = args.analysis
    if kind == "sequence":
        if not args.pattern or args.outcome_period is None:
            raise UsageError("analyze sequence needs --pattern (repeatable) and --outcome-period")
        entries = [sequence_return_proportion(cohort, p, args.outcome_period, conf, design=design)
                   for p in args.pattern]
    else:
        groups = args.groups.split(",") if args.groups else _default_groups(design)
        periods = args.period or list(range(1, design.n_periods + 1))
        entries = []
        for period in periods:
            if kind == "ate":
                entries += average_treatment_effect(cohort, period, groups, args.control, conf,
                                                    design=design)
            elif kind == "delayed":
                if args.outcome_period is None:
                    raise UsageError("analyze delayed needs --outcome-period")
                entries += delayed_effect(cohort, period, args.outcome_period, groups,
                                          args.control, conf, design=design)
            else:
                if not args.moderator:
                    raise UsageError("analyze moderator needs --moderator")
                entries += moderator_effect(cohort, period, args.moderator, groups,
                                            args.control, conf, design=design)
    extra = {"analysis": kind, "n_learners": len(records), "country": args.country,
             "duplicate_learners_dropped": ingest.duplicate_learners,
             "duplicate_rows_dropped": ingest.dropped_rows}
    files = {
        "report.json": srtio.canonical_json(srtio.report_payload(f"analyze {kind}", entries, extra)),
        "plot_data.csv": srtio.plot_data_text(entries),
    }
    margs = {"analysis": kind, "design": args.design, "log": args.log,
             "pattern": args.pattern, "outcome_period": args.outcome_period,
             "period": args.period, "groups": args.groups, "control": args.control,
             "moderator": args.moderator, "confidence": conf, "country": args.country}
    return files, margs, f"{len(entries)} estimates", 0


def _comparison(text):
    if os.path.exists(text):
        with open(text, encoding="utf-8") as fh:
            text = fh.read()
    try:
        return ComparisonSpec.from_dict(json.loads(text))
    except json.JSONDecodeError as exc:
        raise UsageError(f"--comparison is neither a file nor JSON: {exc.msg}") from None


def cmd_power(args):
    design = srtio.load_design(args.design)
    model = srtio.load_model(args.model, design)
    comp = _comparison(args.comparison)
    seed = _seed(args)
    shares = _pairs(args.countries) if args.countries else None
    res = power_monte_carlo(design, model, comp, args.n, args.alpha, args.reps, seed,
                            country_shares=shares, jobs=args.jobs)
    payload = {"toolkit_version": __version__, "comparison": comp.to_dict(), "n": args.n,
               **res.to_dict()}
    margs = {"design": args.design, "model": args.model, "comparison": comp.to_dict(),
             "n": args.n, "alpha": args.alpha, "reps": args.reps, "seed": seed,
             "countries": args.countries}
    return ({"power.json": srtio.canonical_json(payload)}, margs,
            f"power {res.power:.4f} (MC SE {res.mc_se:.4f})", 0)


COMMANDS = {"validate": cmd_validate, "simulate": cmd_simulate, "analyze": cmd_analyze,
            "power": cmd_power}


def _manifest(command, margs, files, inputs):
    return {
        "toolkit_version": __version__,
        "command": command,
        "args": margs,
        "seed": margs.get("seed"),
        "inputs": {k: v for k, v in inputs.items() if v is not None},
        "outputs": {name: {"file": name, "sha256": srtio.sha256_bytes(text.encode("utf-8"))}
                    for name, text in sorted(files.items())},
    }


def _write_outputs(out, files, manifest):
    out = Path(out)
    for name, text in sorted(files.items()):
        srtio.atomic_write(out / name, text)
    srtio.atomic_write(out / MANIFEST, srtio.canonical_json(manifest))


def _inputs(args):
    return {"design": _input_entry(getattr(args, "design", None)),
            "model": _input_entry(getattr(args, "model", None)),
            "log": _input_entry(getattr(args, "log", None))}


def run(args):
    files, margs, summary, status = COMMANDS[args.command](args)
    if args.out:
        manifest = _manifest(args.command, margs, files, _inputs(args))
        _write_outputs(args.out, files, manifest)
    elif args.command != "validate":
        raise UsageError(f"{args.command} needs --out")
    if status:
        print(f"error E104: {summary}", file=sys.stderr)
    else:
        print(summary)
    return status


def replay(args):
    with open(args.manifest, encoding="utf-8") as fh:
        manifest = json.load(fh)
    for name, entry in manifest["inputs"].items():
        if "sha256" in entry and srtio.sha256_file(entry["path"]) != entry["sha256"]:
            raise ManifestMismatchError(f"input {name} changed since the manifest was written")
    a = dict(manifest["args"])
    ns = argparse.Namespace(command=manifest["command"], out=None, jobs=args.jobs, **{
        k: v for k, v in a.items() if k != "comparison"})
    for key in ("design", "model", "log"):
        entry = manifest["inputs"].get(key)
        if entry is not None:
            setattr(ns, key, entry.get("path", entry.get("builtin")))
    if manifest["command"] == "power":
        ns.comparison = json.dumps(a["comparison"])
    files, margs, summary, status = COMMANDS[ns.command](ns)
    mismatched = [name for name, e in manifest["outputs"].items()
                  if name not in files
                  or srtio.sha256_bytes(files[name].encode("utf-8")) != e["sha256"]]
    if mismatched:
        raise ManifestMismatchError(f"replay differs from manifest for {mismatched}")
    if args.out:
        _write_outputs(args.out, files, _manifest(ns.command, margs, files, _inputs(ns)))
    print(f"replay ok: {len(files)} outputs identical")
    return 0


def build_parser():
    p = _Parser(prog="srt", description="Sequential randomized trial toolkit")
    p.add_argument("--version", action="version", version=f"srt {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    v = sub.add_parser("validate", help="check a design config")
    v.add_argument("--design", required=True)
    v.add_argument("--out")

    s = sub.add_parser("simulate", help="simulate a cohort and write its event log")
    s.add_argument("--design", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--n", type=int)
    s.add_argument("--countries", help="per-country counts, e.g. IN=3455,US=5226")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)

    a = sub.add_parser("analyze", help="estimate effects from an event log")
    a.add_argument("analysis", choices=["sequence", "ate", "delayed", "moderator"])
    a.add_argument("--design", required=True)
    a.add_argument("--log", required=True)
    a.add_argument("--pattern", action="append")
    a.add_argument("--outcome-period", type=int)
    a.add_argument("--period", type=int, action="append")
    a.add_argument("--groups")
    a.add_argument("--control", default="E0")
    a.add_argument("--moderator")
    a.add_argument("--confidence", type=float, default=0.95)
    a.add_argument("--country")
    a.add_argument("--out", required=True)

    w = sub.add_parser("power", help="Monte-Carlo power of one comparison")
    w.add_argument("--design", required=True)
    w.add_argument("--model", required=True)
    w.add_argument("--comparison", required=True, help="JSON text or path")
    w.add_argument("--n", type=int, required=True)
    w.add_argument("--alpha", type=float, default=0.05)
    w.add_argument("--reps", type=int, default=1000)
    w.add_argument("--seed", type=int)
    w.add_argument("--countries", help="country shares, e.g. IN=3455,US=5226")
    w.add_argument("--jobs", type=int, default=1)
    w.add_argument("--out", required=True)

    r = sub.add_parser("replay", help="re-run a command from its manifest and compare outputs")
    r.add_argument("--manifest", required=True)
    r.add_argument("--out")
    r.add_argument("--jobs", type=int, default=1)
    return p


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="warning: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.command == "replay":
            return replay(args)
        return run(args)
    except SRTError as exc:
        print(f"error {exc.code}: {exc.args[0]}".replace("\n", " "), file=sys.stderr)
        return 2 if isinstance(exc, UsageError) else 1
    except OSError as exc:
        print(f"error E001: {exc}".replace("\n", " "), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
