"""Command-line interface: ``pbtk validate|run|compare|fetch|embed|categories``.

Exit codes: 0 success, 1 domain error (invalid file, failed instance, no
positions...), 2 I/O or usage error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import re
import statistics
import sys
import urllib.error
import urllib.parse
import urllib.request
from concurrent.futures import ProcessPoolExecutor
from fractions import Fraction
from pathlib import Path
from typing import Optional

from . import __version__
from .geometry import GeometryError, export_map, jaccard_matrix, mds_embed, normalize_distances
from .metrics import (
    METRICS,
    UNTAGGED,
    compute_metrics,
    dominance_pair,
    robustness_ratio_of,
    tag_shares,
)
from .model import SchemeElection, UtilityModel, assemble_scheme, to_approval
from .pbformat import ElectionFile, PbFormatError, parse_pb, validate
from .rules import RuleSpec, parse_rule_spec, run_rule

log = logging.getLogger("pbtk")

SCHEMA = "pbtk/1"
EXIT_OK, EXIT_DOMAIN, EXIT_IO = 0, 1, 2


class InputError(OSError):
    pass


# --- number formatting and JSON output -------------------------------------------


def describe(exc: BaseException) -> str:
    # format errors already carry their code in the message
    return str(exc) if isinstance(exc, PbFormatError) else f"{type(exc).__name__}: {exc}"


def fmt6(x) -> str:
    """Exact value rounded (half to even) to 6 decimal places."""
    q = round(Fraction(x) * 10**6)
    sign = "-" if q < 0 else ""
    q = abs(q)
    return f"{sign}{q // 10**6}.{q % 10**6:06d}"


def _emit(obj, indent: int = 0) -> str:
    pad = "  " * indent
    inner = "  " * (indent + 1)
    if isinstance(obj, bool) or obj is None or isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, (Fraction, float)):
        if isinstance(obj, float) and not (obj == obj and abs(obj) != float("inf")):
            return "null"
        return fmt6(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{inner}{json.dumps(str(k), ensure_ascii=False)}: {_emit(v, indent + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        items = [f"{inner}{_emit(v, indent + 1)}" for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + pad + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj) -> str:
    return _emit(obj) + "\n"


def _natural_key(pid: str):
    return [(0, int(t), "") if t.isdigit() else (1, 0, t) for t in re.split(r"(\d+)", pid) if t != ""]


def sort_ids(ids) -> list[str]:
    return sorted(ids, key=_natural_key)


# --- input loading -------------------------------------------------------------


def _is_url(s: str) -> bool:
    return s.startswith(("http://", "https://"))


def http_get(url: str, timeout: float = 30.0) -> bytes:
    with urllib.request.urlopen(url, timeout=timeout) as resp:
        return resp.read()


def expand_inputs(inputs: list[str]) -> list[str]:
    out = []
    for item in inputs:
        if _is_url(item):
            out.append(item)
            continue
        p = Path(item)
        if p.is_dir():
            out.extend(str(x) for x in sorted(p.rglob("*.pb")))
        else:
            out.append(item)
    return out


def read_source(source: str) -> str:
    try:
        if _is_url(source):
            return http_get(source).decode("utf-8")
        return Path(source).read_text(encoding="utf-8")
    except (OSError, urllib.error.URLError, UnicodeDecodeError) as exc:
        raise InputError(f"{source}: {exc}") from exc


def load_files(inputs: list[str]) -> list[ElectionFile]:
    """Read and parse every input; raises InputError or PbFormatError."""
    files = []
    for source in expand_inputs(inputs):
        files.append(parse_pb(read_source(source), source_name=source))
    return files


def group_files(files: list[ElectionFile]) -> list[tuple[tuple[str, str], list[ElectionFile]]]:
    groups: dict[tuple[str, str], list[ElectionFile]] = {}
    for f in files:
        key = (f.meta.get("unit", ""), f.meta.get("instance", ""))
        groups.setdefault(key, []).append(f)
    return sorted(groups.items(), key=lambda kv: kv[0])


# --- running rules on schemes ------------------------------------------------


def run_scheme(se: SchemeElection, spec: RuleSpec, approval: bool = False) -> list[str]:
    """Selected project ids in the merged election after solving every sub-election."""
    selected: list[str] = []
    for _, e in se.sub_elections:
        if approval:
            e = to_approval(e)
        selected.extend(run_rule(e, spec).selected)
    return selected


def _outcome_block(se: SchemeElection, selected: list[str]) -> dict:
    e = se.merged
    cost = e.cost(selected)
    return {
        "selected": sort_ids(selected),
        "total_cost": cost,
        "budget": e.budget,
        "funds_used": Fraction(cost, e.budget) if e.budget else Fraction(0),
    }


def _run_task(task) -> dict:
    kind, key, files, scheme, specs, metric_names = task
    unit, instance = key
    record: dict = {"unit": unit, "instance": instance, "scheme": scheme}
    try:
        se = assemble_scheme(files, scheme)
        e = se.merged
        outcomes = []
        for spec in specs:
            selected = run_scheme(se, spec)
            entry = {"rule": spec.name, "rule_spec": _spec_dict(spec), "outcome": _outcome_block(se, selected)}
            names = [m for m in metric_names if m != "robustness_ratio"]
            rep = compute_metrics(e, selected, spec.utility, names)
            if "robustness_ratio" in metric_names:
                if e.is_approval:
                    rep.scalars["robustness_ratio"] = Fraction(1)
                else:
                    rep.scalars["robustness_ratio"] = robustness_ratio_of(
                        e, selected, run_scheme(se, spec, approval=True)
                    )
            entry["metrics"] = {m: rep.scalars[m] for m in METRICS if m in rep.scalars}
            vectors = {k: v for k, v in rep.vectors.items() if k != "shares"}
            if vectors:
                entry["vectors"] = vectors
            outcomes.append((selected, entry))
        if kind == "run":
            record["results"] = [entry for _, entry in outcomes]
        else:
            (w1, r1), (w2, r2) = outcomes
            spec = specs[0]
            pair = {}
            for model in (UtilityModel.SCORE, UtilityModel.COST):
                pr = dominance_pair(e, w1, w2, model)
                pair[model.value] = {
                    "dominance_1_over_2": pr.dominance_1_over_2,
                    "dominance_2_over_1": pr.dominance_2_over_1,
                    "improvement_margin": pr.improvement_margin,
                }
            pr = dominance_pair(e, w1, w2, spec.utility)
            record["results"] = [r1, r2]
            record["pair"] = {
                "rule_1": r1["rule"],
                "rule_2": r2["rule"],
                "utility": spec.utility.value,
                "dominance_1_over_2": pr.dominance_1_over_2,
                "dominance_2_over_1": pr.dominance_2_over_1,
                "improvement_margin": pr.improvement_margin,
                "by_utility": pair,
            }
    except (PbFormatError, ValueError, LookupError) as exc:
        record["error"] = describe(exc)
    return record


def _spec_dict(spec: RuleSpec) -> dict:
    return {"rule": spec.rule, "utility": spec.utility.value, "completion": spec.completion}


def _map_tasks(tasks, jobs: int):
    if jobs <= 1 or len(tasks) <= 1:
        return [_run_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_task, tasks))


def aggregate(records: list[dict]) -> list[dict]:
    """Per unit, scheme and rule: mean (and sample stdev over >= 2 instances) of each metric."""
    buckets: dict[tuple, list[dict]] = {}
    for rec in records:
        for res in rec.get("results", []):
            key = (rec["unit"], rec["scheme"], res["rule"])
            buckets.setdefault(key, []).append(res["metrics"] | {"funds_used": res["outcome"]["funds_used"]})
    out = []
    for (unit, scheme, rule), rows in sorted(buckets.items()):
        stats = {}
        for name in sorted({k for r in rows for k in r}):
            vals = [Fraction(r[name]) for r in rows if name in r]
            entry = {"mean": sum(vals, Fraction(0)) / len(vals), "count": len(vals)}
            if len(vals) >= 2:
                entry["stdev"] = statistics.stdev(float(v) for v in vals)
            stats[name] = entry
        out.append({"unit": unit, "scheme": scheme, "rule": rule, "instances": len(rows), "metrics": stats})
    return out


def batch(kind: str, files, schemes, specs, metric_names, jobs) -> dict:
    tasks = [(kind, key, group, scheme, specs, metric_names) for key, group in group_files(files) for scheme in schemes]
    records = _map_tasks(tasks, jobs)
    records.sort(key=lambda r: (r["unit"], r["instance"], r["scheme"]))
    return {"schema": SCHEMA, "command": kind, "per_instance": records, "aggregates": aggregate(records)}


def to_csv(report: dict) -> str:
    buf = io.StringIO()
    cols = ["unit", "instance", "scheme", "rule", "selected", "total_cost", "budget", "funds_used", *METRICS, "error"]
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for rec in report["per_instance"]:
        if "error" in rec:
            w.writerow([rec["unit"], rec["instance"], rec["scheme"]] + [""] * (len(cols) - 4) + [rec["error"]])
            continue
        for res in rec["results"]:
            o = res["outcome"]
            row = [rec["unit"], rec["instance"], rec["scheme"], res["rule"], " ".join(o["selected"]), o["total_cost"], o["budget"], fmt6(o["funds_used"])]
            row += [fmt6(res["metrics"][m]) if m in res["metrics"] else "" for m in METRICS]
            w.writerow(row + [""])
    return buf.getvalue()


# --- commands ------------------------------------------------------------------


def _write(args, text: str):
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_validate(args) -> int:
    results = []
    code = EXIT_OK
    for source in expand_inputs(args.inputs):
        entry = {"source": source}
        try:
            text = read_source(source)
        except InputError as exc:
            entry.update(is_valid=False, diagnostics=[{"severity": "error", "code": "IOError", "location": source, "message": str(exc)}])
            results.append(entry)
            code = EXIT_IO
            continue
        try:
            report = validate(parse_pb(text, source_name=source))
            diags = [d.as_dict() for d in report.errors]
            valid = report.is_valid
        except PbFormatError as exc:
            where = f"line {exc.line}" if exc.line is not None else "file"
            diags = [{"severity": "error", "code": exc.code, "location": where, "message": exc.message}]
            valid = False
        entry.update(is_valid=valid, diagnostics=diags)
        if not valid and code == EXIT_OK:
            code = EXIT_DOMAIN
        results.append(entry)
    _write(args, dumps({"schema": SCHEMA, "command": "validate", "files": results}))
    return code


def _specs_from_args(args) -> list[RuleSpec]:
    specs = [parse_rule_spec(s) for s in (args.spec or [])]
    rules = args.rule or []
    if rules:
        utilities = args.utility or ["cost"]
        completions = args.completion or ["none"]
        for i, rule in enumerate(rules):
            utility = utilities[i] if i < len(utilities) else utilities[-1]
            completion = completions[i] if i < len(completions) else completions[-1]
            if rule == "ug":
                completion = "none"
            specs.append(parse_rule_spec(f"{rule}:{utility}:{completion}"))
    return specs


def _metric_names(args) -> list[str]:
    if not args.metrics:
        return list(METRICS)
    names = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = [m for m in names if m not in METRICS]
    if unknown:
        raise ValueError(f"unknown metrics {unknown}; choose from {', '.join(METRICS)}")
    return names


def _run_like(args, kind: str) -> int:
    specs = _specs_from_args(args)
    if kind == "run" and not specs:
        specs = [parse_rule_spec("mes:cost:add1u")]
    if kind == "compare" and len(specs) != 2:
        raise UsageError("compare needs exactly two rule specifications")
    names = _metric_names(args)
    files = load_files(args.inputs)
    report = batch(kind, files, _schemes(args), specs, names, args.jobs)
    _write(args, to_csv(report) if args.format == "csv" else dumps(report))
    return EXIT_DOMAIN if any("error" in r for r in report["per_instance"]) else EXIT_OK


def _schemes(args) -> list[str]:
    return [args.scheme] if args.scheme else ["citywide"]


def cmd_run(args) -> int:
    return _run_like(args, "run")


def cmd_compare(args) -> int:
    return _run_like(args, "compare")


def fetch(urls: list[str], dest_dir) -> tuple[list[dict], bool]:
    dest = Path(dest_dir)
    dest.mkdir(parents=True, exist_ok=True)
    entries, ok = [], True
    for url in urls:
        entry: dict = {"url": url}
        try:
            body = http_get(url)
            parse_pb(body.decode("utf-8"), source_name=url)
        except (OSError, urllib.error.URLError, UnicodeDecodeError, PbFormatError) as exc:
            entry.update(status="failed", error=describe(exc))
            entries.append(entry)
            ok = False
            continue
        digest = hashlib.sha256(body).hexdigest()
        name = os.path.basename(urllib.parse.urlparse(url).path) or f"{digest[:16]}.pb"
        target = dest / name
        if target.exists() and hashlib.sha256(target.read_bytes()).hexdigest() == digest:
            status = "skipped (unchanged)"
        else:
            status = "updated" if target.exists() else "downloaded"
            target.write_bytes(body)
        log.info("%s %s sha256=%s", status, target, digest)
        entry.update(status=status, path=str(target), sha256=digest)
        entries.append(entry)
    return entries, ok


def cmd_fetch(args) -> int:
    entries, ok = fetch(args.urls, args.dest)
    _write(args, dumps({"schema": SCHEMA, "command": "fetch", "files": entries}))
    return EXIT_OK if ok else EXIT_DOMAIN


def cmd_embed(args) -> int:
    specs = _specs_from_args(args) or [parse_rule_spec("mes:cost:add1u"), parse_rule_spec("ug:cost")]
    if len(specs) != 2:
        raise UsageError("embed needs exactly two rule specifications (Equal Shares side first)")
    files = load_files(args.inputs)
    maps, code = [], EXIT_OK
    for (unit, instance), group in group_files(files):
        entry: dict = {"unit": unit, "instance": instance, "source": args.source, "rule_es": specs[0].name, "rule_ug": specs[1].name}
        try:
            se = assemble_scheme(group, args.scheme or "citywide")
            e = se.merged
            w_es = run_scheme(se, specs[0])
            w_ug = run_scheme(se, specs[1])
            if args.source == "jaccard":
                dm = normalize_distances(jaccard_matrix(to_approval(e)))
                emb = mds_embed(dm, seed=args.seed)
                entry.update(stress=emb.stress, iterations=emb.iterations, seed=emb.seed, degenerate=emb.degenerate)
                data = export_map(e, "embedding", w_es, w_ug, embedding=emb)
            else:
                data = export_map(e, "gps", w_es, w_ug)
            entry["projects"] = [d.as_dict() for d in data]
        except (GeometryError, ValueError, LookupError) as exc:
            entry["error"] = describe(exc)
            code = EXIT_DOMAIN
        maps.append(entry)
    _write(args, dumps({"schema": SCHEMA, "command": "embed", "maps": maps}))
    return code


def cmd_categories(args) -> int:
    specs = _specs_from_args(args) or [parse_rule_spec("mes:cost:add1u"), parse_rule_spec("ug:cost")]
    files = load_files(args.inputs)
    tables, code = [], EXIT_OK
    for (unit, instance), group in group_files(files):
        try:
            se = assemble_scheme(group, args.scheme or "citywide")
        except ValueError as exc:
            tables.append({"unit": unit, "instance": instance, "error": describe(exc)})
            code = EXIT_DOMAIN
            continue
        for label, e in se.sub_elections:
            entry: dict = {"unit": unit, "instance": instance, "election": label}
            if not any(p.tags for p in e.projects.values()):
                entry["error"] = "NoTags: no project carries a category"
                code = EXIT_DOMAIN
                tables.append(entry)
                continue
            rules = []
            for spec in specs:
                selected = run_rule(e, spec).selected
                ts = tag_shares(to_approval(e), selected)
                rows = [
                    {"tag": t, "vote_share": ts.vote[t], "spending_share": ts.spending[t]}
                    for t in sorted(ts.vote, key=lambda t: (t == UNTAGGED, t))
                ]
                rules.append({"rule": spec.name, "selected": sort_ids(selected), "l2": ts.l2, "tags": rows})
            entry["rules"] = rules
            tables.append(entry)
    _write(args, dumps({"schema": SCHEMA, "command": "categories", "tables": tables}))
    return code


# --- argument parsing ---------------------------------------------------------------


class UsageError(Exception):
    pass


def _add_rule_flags(p):
    p.add_argument("--rule", action="append", choices=["ug", "mes"], help="rule (repeat for several)")
    p.add_argument("--utility", action="append", choices=["score", "cost"], help="utility model per --rule")
    p.add_argument(
        "--completion",
        action="append",
        type=str.lower,
        choices=["none", "u", "eps", "add1", "add1u"],
        help="Equal Shares completion per --rule",
    )
    p.add_argument("--spec", action="append", help="shorthand RULE:UTILITY[:COMPLETION], e.g. mes:cost:add1u")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pbtk", description="Participatory budgeting toolkit")
    parser.add_argument("--version", action="version", version=f"pbtk {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="write output here instead of stdout")

    p = sub.add_parser("validate", parents=[common], help="check .pb files")
    p.add_argument("inputs", nargs="+")
    p.set_defaults(func=cmd_validate)

    for name, func in (("run", cmd_run), ("compare", cmd_compare)):
        p = sub.add_parser(name, parents=[common], help=f"{name} rules on elections")
        p.add_argument("inputs", nargs="+", help=".pb files, directories or URLs")
        p.add_argument("--scheme", choices=["citywide", "districtwise"])
        _add_rule_flags(p)
        p.add_argument("--metrics", help=f"comma-separated subset of: {', '.join(METRICS)}")
        p.add_argument("--format", choices=["json", "csv"], default="json")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--jobs", type=int, default=1)
        p.set_defaults(func=func)

    p = sub.add_parser("fetch", parents=[common], help="download .pb files")
    p.add_argument("urls", nargs="+")
    p.add_argument("--dest", default=".", help="destination directory")
    p.set_defaults(func=cmd_fetch)

    p = sub.add_parser("embed", parents=[common], help="map data for two-rule comparisons")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--source", choices=["gps", "jaccard"], default="jaccard")
    p.add_argument("--scheme", choices=["citywide", "districtwise"])
    _add_rule_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("categories", parents=[common], help="tag vote and spending shares")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--scheme", choices=["citywide", "districtwise"])
    _add_rule_flags(p)
    p.set_defaults(func=cmd_categories)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("pbtk: --jobs must be positive", file=sys.stderr)
        return EXIT_IO
    try:
        return args.func(args)
    except (InputError, OSError) as exc:
        print(f"pbtk: {exc}", file=sys.stderr)
        return EXIT_IO
    except UsageError as exc:
        print(f"pbtk: {exc}", file=sys.stderr)
        return EXIT_IO
    except PbFormatError as exc:
        print(f"pbtk: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except (GeometryError, ValueError, LookupError) as exc:
        print(f"pbtk: {describe(exc)}", file=sys.stderr)
        return EXIT_DOMAIN


def entry() -> None:
    sys.exit(main())
