"""Reading, checking and writing participatory-budgeting ``.pb`` files.

A ``.pb`` file is a UTF-8 text file with three sections, ``META``,
``PROJECTS`` and ``VOTES``. Each section starts with its name on a line of its
own, followed by a header row and then ``;``-separated data rows. List-valued
cells (``category``, ``target``, ``vote``, ``points``) use ``,`` as the only
sub-delimiter.

Example
-------
>>> f = parse_pb(TOY_FILE)
>>> f.meta["budget"], len(f.projects), len(f.votes)
('2500', 5, 10)
>>> validate(f).is_valid
True
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from typing import Optional

SECTIONS = ("META", "PROJECTS", "VOTES")
VOTE_TYPES = ("approval", "ordinal", "cumulative", "scoring")

OBLIGATORY_META = (
    "description",
    "country",
    "unit",
    "instance",
    "num_projects",
    "num_votes",
    "budget",
    "vote_type",
    "rule",
)

KNOWN_META = set(OBLIGATORY_META) | {
    "subunit",
    "date_begin",
    "date_end",
    "language",
    "edition",
    "district",
    "comment",
    "min_length",
    "max_length",
    "min_sum_cost",
    "max_sum_cost",
    "scoring_fn",
    "min_points",
    "max_points",
    "min_sum_points",
    "max_sum_points",
    "default_score",
}

# Per-vote-type constraint keys that are meaningful in META.
CONSTRAINT_KEYS = {
    "approval": ("min_length", "max_length", "min_sum_cost", "max_sum_cost"),
    "ordinal": ("min_length", "max_length", "scoring_fn"),
    "cumulative": (
        "min_length",
        "max_length",
        "min_points",
        "max_points",
        "min_sum_points",
        "max_sum_points",
    ),
    "scoring": ("min_length", "max_length", "min_points", "max_points", "default_score"),
}

PROJECT_FIELDS = ("project_id", "cost", "name", "category", "target")
VOTE_FIELDS = ("voter_id", "vote", "points", "age", "sex", "voting_method")
_LIST_PROJECT_FIELDS = ("category", "target")

TOY_FILE = """\
META
key; value
description; Municipal PB in Wieliczka
country; Poland
unit; Wieliczka
instance; 2020
num_projects; 5
num_votes; 10
budget; 2500
rule; greedy
vote_type; approval
min_length; 1
max_length; 3
PROJECTS
project_id; cost; category
1; 600; culture, education
2; 800; sport
4; 1400; culture
5; 1000; health, sport
7; 1200; education
VOTES
voter_id; age; sex; vote
1; 34; f; 1,2,4
2; 51; m; 1,2
3; 23; m; 2,4,5
4; 19; f; 5,7
5; 62; f; 1,4,7
6; 54; m; 1,7
7; 49; m; 5
8; 27; f; 4
9; 39; f; 2,4,5
10; 44; m; 4,5
"""


class PbFormatError(ValueError):
    """Base class for errors raised while reading a ``.pb`` file."""

    code = "PbFormatError"

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        self.message = message
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{self.code}: {where}{message}")


class MissingSection(PbFormatError):
    code = "MissingSection"


class MissingObligatoryField(PbFormatError):
    code = "MissingObligatoryField"


class DuplicateId(PbFormatError):
    code = "DuplicateId"


class UnknownVoteType(PbFormatError):
    code = "UnknownVoteType"


class MalformedRow(PbFormatError):
    code = "MalformedRow"


@dataclass
class ProjectRow:
    project_id: str
    cost: int
    name: Optional[str] = None
    category: Optional[list[str]] = None
    target: Optional[list[str]] = None
    extra: dict[str, str] = field(default_factory=dict)
    line: Optional[int] = field(default=None, compare=False, repr=False)


@dataclass
class VoteRow:
    voter_id: str
    vote: list[str]
    points: Optional[list[Decimal]] = None
    age: Optional[str] = None
    sex: Optional[str] = None
    voting_method: Optional[str] = None
    extra: dict[str, str] = field(default_factory=dict)
    line: Optional[int] = field(default=None, compare=False, repr=False)


@dataclass
class ElectionFile:
    """In-memory image of one ``.pb`` file.

    ``project_columns`` and ``vote_columns`` keep the header rows as read so
    that serialization reproduces the original column order.
    """

    meta: dict[str, str]
    projects: list[ProjectRow]
    votes: list[VoteRow]
    project_columns: list[str] = field(default_factory=lambda: ["project_id", "cost"])
    vote_columns: list[str] = field(default_factory=lambda: ["voter_id", "vote"])
    source_name: str = field(default="<string>", compare=False)

    @property
    def vote_type(self) -> str:
        return self.meta.get("vote_type", "")

    @property
    def budget(self) -> int:
        return parse_int(self.meta["budget"], "budget")


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" or "warning"
    code: str
    location: str
    message: str

    def as_dict(self) -> dict[str, str]:
        return {
            "severity": self.severity,
            "code": self.code,
            "location": self.location,
            "message": self.message,
        }


@dataclass
class ValidationReport:
    errors: list[Diagnostic] = field(default_factory=list)

    @property
    def is_valid(self) -> bool:
        return not any(d.severity == "error" for d in self.errors)

    def codes(self, severity: Optional[str] = None) -> list[str]:
        return [d.code for d in self.errors if severity is None or d.severity == severity]

    def _add(self, severity, code, location, message):
        self.errors.append(Diagnostic(severity, code, location, message))


def parse_int(text: str, what: str = "value", line: Optional[int] = None) -> int:
    """Parse an exact integer; integral decimals such as ``"1000.0"`` are accepted."""
    try:
        value = Decimal(text.strip())
    except InvalidOperation:
        raise MalformedRow(f"{what} {text!r} is not a number", line) from None
    if not value.is_finite() or value != value.to_integral_value():
        raise MalformedRow(f"{what} {text!r} is not an integer", line)
    return int(value)


def parse_number(text: str, what: str = "value", line: Optional[int] = None) -> Decimal:
    try:
        value = Decimal(text.strip())
    except InvalidOperation:
        raise MalformedRow(f"{what} {text!r} is not a number", line) from None
    if not value.is_finite():
        raise MalformedRow(f"{what} {text!r} is not finite", line)
    return value


def _split_list(cell: str) -> list[str]:
    return [item.strip() for item in cell.split(",") if item.strip() != ""]


def _split_sections(text: str):
    """Yield ``(section_name, [(line_no, line), ...])`` in file order."""
    current = None
    rows: list[tuple[int, str]] = []
    seen = []
    if text.startswith("\ufeff"):
        text = text[1:]
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.upper() in SECTIONS and ";" not in line:
            if current is not None:
                seen.append((current, rows))
            current, rows = line.upper(), []
            continue
        if current is None:
            raise MissingSection(f"content before the META section: {line!r}", line_no)
        rows.append((line_no, line))
    if current is not None:
        seen.append((current, rows))
    names = [name for name, _ in seen]
    for name in SECTIONS:
        if name not in names:
            raise MissingSection(f"section {name} not found")
    if names != list(SECTIONS):
        raise MissingSection(f"sections must appear once each in order META, PROJECTS, VOTES; got {names}")
    return dict(seen)


def _header(rows, section):
    if not rows:
        raise MissingSection(f"section {section} has no header row")
    line_no, line = rows[0]
    return [c.strip() for c in line.split(";")], rows[1:], line_no


def parse_pb(text: str, source_name: str = "<string>") -> ElectionFile:
    """Parse the body of a ``.pb`` file.

    Raises a :class:`PbFormatError` subclass (carrying the line number where
    known) on structural problems. Count mismatches and ballot constraint
    violations are left to :func:`validate`.
    """
    sections = _split_sections(text)

    meta: dict[str, str] = {}
    meta_lines: dict[str, int] = {}
    _, meta_rows, _ = _header(sections["META"], "META")
    for line_no, line in meta_rows:
        if ";" not in line:
            raise MalformedRow(f"META row without ';': {line!r}", line_no)
        key, value = line.split(";", 1)
        key, value = key.strip(), value.strip()
        if key in meta:
            raise DuplicateId(f"META key {key!r} repeated", line_no)
        meta[key] = value
        meta_lines[key] = line_no
    for key in OBLIGATORY_META:
        if key not in meta:
            raise MissingObligatoryField(f"META key {key!r} is obligatory")
    if meta["vote_type"] not in VOTE_TYPES:
        raise UnknownVoteType(
            f"vote_type {meta['vote_type']!r} not in {VOTE_TYPES}", meta_lines["vote_type"]
        )
    vote_type = meta["vote_type"]

    project_columns, project_rows, header_line = _header(sections["PROJECTS"], "PROJECTS")
    for col in ("project_id", "cost"):
        if col not in project_columns:
            raise MissingObligatoryField(f"PROJECTS column {col!r} is obligatory", header_line)
    _check_header(project_columns, header_line)
    projects: list[ProjectRow] = []
    seen_projects: set[str] = set()
    for line_no, line in project_rows:
        cells = _cells(line, project_columns, line_no)
        pid = cells["project_id"]
        if not pid:
            raise MalformedRow("empty project_id", line_no)
        if pid in seen_projects:
            raise DuplicateId(f"project_id {pid!r} repeated", line_no)
        seen_projects.add(pid)
        row = ProjectRow(
            project_id=pid,
            cost=parse_int(cells["cost"], "cost", line_no),
            line=line_no,
        )
        if "name" in cells:
            row.name = cells["name"]
        for key in _LIST_PROJECT_FIELDS:
            if key in cells:
                setattr(row, key, _split_list(cells[key]))
        row.extra = {k: v for k, v in cells.items() if k not in PROJECT_FIELDS}
        projects.append(row)

    vote_columns, vote_rows, header_line = _header(sections["VOTES"], "VOTES")
    needed = ["voter_id", "vote"]
    if vote_type in ("cumulative", "scoring"):
        needed.append("points")
    for col in needed:
        if col not in vote_columns:
            raise MissingObligatoryField(f"VOTES column {col!r} is obligatory", header_line)
    _check_header(vote_columns, header_line)
    votes: list[VoteRow] = []
    seen_voters: set[str] = set()
    for line_no, line in vote_rows:
        cells = _cells(line, vote_columns, line_no)
        vid = cells["voter_id"]
        if not vid:
            raise MalformedRow("empty voter_id", line_no)
        if vid in seen_voters:
            raise DuplicateId(f"voter_id {vid!r} repeated", line_no)
        seen_voters.add(vid)
        row = VoteRow(voter_id=vid, vote=_split_list(cells["vote"]), line=line_no)
        if "points" in cells:
            row.points = [parse_number(p, "points", line_no) for p in _split_list(cells["points"])]
        for key in ("age", "sex", "voting_method"):
            if key in cells:
                setattr(row, key, cells[key])
        row.extra = {k: v for k, v in cells.items() if k not in VOTE_FIELDS}
        votes.append(row)

    return ElectionFile(
        meta=meta,
        projects=projects,
        votes=votes,
        project_columns=project_columns,
        vote_columns=vote_columns,
        source_name=source_name,
    )


def _check_header(columns, line_no):
    if len(set(columns)) != len(columns):
        raise MalformedRow(f"repeated column in header {columns}", line_no)
    if any(c == "" for c in columns):
        raise MalformedRow(f"empty column name in header {columns}", line_no)


def _cells(line, columns, line_no):
    parts = [p.strip() for p in line.split(";")]
    if len(parts) != len(columns):
        raise MalformedRow(f"expected {len(columns)} cells, found {len(parts)}", line_no)
    return dict(zip(columns, parts))


def read_pb(path) -> ElectionFile:
    with open(path, encoding="utf-8") as fh:
        return parse_pb(fh.read(), source_name=str(path))


# --- validation -------------------------------------------------------------


def constraints(file: ElectionFile) -> dict[str, object]:
    """Ballot constraints for the file's vote type, with defaults filled in.

    Numeric bounds come back as :class:`~decimal.Decimal` (or ``math.inf`` /
    ``-math.inf`` for unbounded defaults); ``scoring_fn`` is a string. A
    missing ``max_sum_points`` for cumulative ballots maps to ``None``.
    """
    vote_type = file.vote_type
    meta = file.meta
    num_projects = Decimal(meta.get("num_projects", len(file.projects)))

    def get(key, default):
        if key in meta and meta[key] != "":
            return Decimal(meta[key])
        return default

    out: dict[str, object] = {
        "min_length": get("min_length", Decimal(1)),
        "max_length": get("max_length", num_projects),
    }
    if vote_type == "approval":
        out["min_sum_cost"] = get("min_sum_cost", Decimal(0))
        out["max_sum_cost"] = get("max_sum_cost", math.inf)
    elif vote_type == "ordinal":
        out["scoring_fn"] = meta.get("scoring_fn") or "Borda"
    elif vote_type == "cumulative":
        max_sum = get("max_sum_points", None)
        out["min_points"] = get("min_points", Decimal(0))
        out["max_points"] = get("max_points", max_sum if max_sum is not None else math.inf)
        out["min_sum_points"] = get("min_sum_points", Decimal(0))
        out["max_sum_points"] = max_sum
    elif vote_type == "scoring":
        out["min_points"] = get("min_points", -math.inf)
        out["max_points"] = get("max_points", math.inf)
        out["default_score"] = get("default_score", Decimal(0))
    return out


def validate(file: ElectionFile) -> ValidationReport:
    """Check a parsed file against the format's constraints.

    Problems are collected into the returned report rather than raised.
    """
    report = ValidationReport()
    meta = file.meta

    for key in OBLIGATORY_META:
        if key not in meta:
            report._add("error", "MissingObligatoryField", "META", f"key {key!r} is obligatory")
    for key in meta:
        if key not in KNOWN_META:
            report._add("warning", "UnknownMetaKey", "META", f"non-standard key {key!r}")

    vote_type = file.vote_type
    if vote_type not in VOTE_TYPES:
        report._add("error", "UnknownVoteType", "META", f"vote_type {vote_type!r}")
        return report
    if vote_type == "cumulative" and "max_sum_points" not in meta:
        report._add(
            "error",
            "MissingObligatoryField",
            "META",
            "key 'max_sum_points' is obligatory for cumulative ballots",
        )

    for key in ("num_projects", "num_votes", "budget"):
        if key in meta:
            try:
                parse_int(meta[key], key)
            except MalformedRow as exc:
                report._add("error", "MalformedValue", "META", exc.message)
    for key in CONSTRAINT_KEYS[vote_type]:
        if key in meta and key != "scoring_fn":
            try:
                Decimal(meta[key])
            except InvalidOperation:
                report._add("error", "MalformedValue", "META", f"{key} {meta[key]!r} is not a number")
    if not report.is_valid:
        return report

    if parse_int(meta["num_projects"]) != len(file.projects):
        report._add(
            "error",
            "CountMismatch",
            "META",
            f"num_projects is {meta['num_projects']} but {len(file.projects)} projects listed",
        )
    if parse_int(meta["num_votes"]) != len(file.votes):
        report._add(
            "error",
            "CountMismatch",
            "META",
            f"num_votes is {meta['num_votes']} but {len(file.votes)} votes listed",
        )
    if parse_int(meta["budget"]) < 0:
        report._add("error", "NegativeBudget", "META", "budget must be nonnegative")

    costs: dict[str, int] = {}
    for p in file.projects:
        where = f"project {p.project_id}"
        if p.project_id in costs:
            report._add("error", "DuplicateId", where, "project_id repeated")
        if p.cost < 1:
            report._add("error", "NonPositiveCost", where, f"cost {p.cost} must be at least 1")
        costs[p.project_id] = p.cost

    c = constraints(file)
    voters: set[str] = set()
    for v in file.votes:
        where = f"voter {v.voter_id}"
        if v.voter_id in voters:
            report._add("error", "DuplicateId", where, "voter_id repeated")
        voters.add(v.voter_id)
        _validate_ballot(report, where, v, vote_type, c, costs)
    return report


def _validate_ballot(report, where, v, vote_type, c, costs):
    unknown = [pid for pid in v.vote if pid not in costs]
    if unknown:
        report._add("error", "UnknownProject", where, f"unknown project ids {unknown}")
    if len(set(v.vote)) != len(v.vote):
        report._add("error", "DuplicateVoteEntry", where, "a project is listed twice")

    length = len(v.vote)
    if length < c["min_length"]:
        report._add("error", "BallotTooShort", where, f"{length} entries, min_length {c['min_length']}")
    if length > c["max_length"]:
        report._add("error", "BallotTooLong", where, f"{length} entries, max_length {c['max_length']}")

    if vote_type == "approval":
        total = sum(costs.get(pid, 0) for pid in set(v.vote))
        if total < c["min_sum_cost"]:
            report._add("error", "BallotCostTooLow", where, f"total cost {total} < {c['min_sum_cost']}")
        if total > c["max_sum_cost"]:
            report._add("error", "BallotCostTooHigh", where, f"total cost {total} > {c['max_sum_cost']}")
        return
    if vote_type == "ordinal":
        return

    if v.points is None or len(v.points) != len(v.vote):
        got = "none" if v.points is None else len(v.points)
        report._add("error", "PointsLengthMismatch", where, f"{len(v.vote)} projects but {got} points")
        return
    for pts in v.points:
        if pts < c["min_points"] or pts > c["max_points"]:
            report._add(
                "error",
                "PointsOutOfRange",
                where,
                f"{pts} outside [{c['min_points']}, {c['max_points']}]",
            )
    if any(a < b for a, b in zip(v.points, v.points[1:])):
        report._add("warning", "PointsNotDecreasing", where, "points are not listed in decreasing order")
    if vote_type == "cumulative":
        total = sum(v.points, Decimal(0))
        if c["max_sum_points"] is not None and total > c["max_sum_points"]:
            report._add("error", "PointsSumTooHigh", where, f"sum {total} > {c['max_sum_points']}")
        if total < c["min_sum_points"]:
            report._add("error", "PointsSumTooLow", where, f"sum {total} < {c['min_sum_points']}")


# --- serialization ----------------------------------------------------------


def _fmt_list(values) -> str:
    return ",".join(str(v) for v in values)


def serialize(file: ElectionFile) -> str:
    """Write ``file`` back out in ``.pb`` syntax (LF line endings)."""
    lines = ["META", "key; value"]
    lines += [f"{k}; {v}" for k, v in file.meta.items()]

    lines.append("PROJECTS")
    lines.append("; ".join(file.project_columns))
    for p in file.projects:
        lines.append("; ".join(_project_cell(p, col) for col in file.project_columns))

    lines.append("VOTES")
    lines.append("; ".join(file.vote_columns))
    for v in file.votes:
        lines.append("; ".join(_vote_cell(v, col) for col in file.vote_columns))
    return "\n".join(line.rstrip() for line in lines) + "\n"


def _project_cell(p: ProjectRow, col: str) -> str:
    if col == "project_id":
        return p.project_id
    if col == "cost":
        return str(p.cost)
    if col == "name":
        return p.name or ""
    if col in _LIST_PROJECT_FIELDS:
        return _fmt_list(getattr(p, col) or [])
    return p.extra.get(col, "")


def _vote_cell(v: VoteRow, col: str) -> str:
    if col == "voter_id":
        return v.voter_id
    if col == "vote":
        return _fmt_list(v.vote)
    if col == "points":
        return _fmt_list(v.points or [])
    if col in ("age", "sex", "voting_method"):
        return getattr(v, col) or ""
    return v.extra.get(col, "")
