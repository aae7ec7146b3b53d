"""Election instances built from ``.pb`` files, utilities and district schemes."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from typing import Iterable, Mapping, Optional

from .pbformat import ElectionFile, constraints

UNKNOWN_DISTRICT = "unknown"
CITYWIDE_LABEL = "citywide"


class UtilityModel(str, enum.Enum):
    SCORE = "score"
    COST = "cost"


class ModelError(ValueError):
    pass


class UnsupportedScoringFn(ModelError):
    pass


class NegativeScore(ModelError):
    pass


class UnknownVoter(LookupError):
    pass


class UnknownProject(LookupError):
    pass


class MixedUnits(ModelError):
    pass


class DuplicateSubunit(ModelError):
    pass


@dataclass(frozen=True)
class Project:
    id: str
    cost: int
    tags: tuple[str, ...] = ()
    gps: Optional[tuple[float, float]] = None
    name: Optional[str] = None


@dataclass(frozen=True, eq=False)
class Election:
    """A participatory-budgeting election with exact rational scores.

    ``scores[voter][project]`` holds only strictly positive scores; a missing
    entry means score zero. Instances are treated as immutable.
    """

    projects: Mapping[str, Project]
    voters: tuple[str, ...]
    budget: int
    scores: Mapping[str, Mapping[str, Fraction]]
    district_of: Optional[Mapping[str, str]] = None
    label: str = ""
    unit: str = ""
    instance: str = ""

    def __post_init__(self):
        for voter, ballot in self.scores.items():
            for pid, s in ballot.items():
                if pid not in self.projects:
                    raise UnknownProject(f"voter {voter!r} scores unknown project {pid!r}")
                if s <= 0:
                    raise ModelError(f"stored score for ({voter!r}, {pid!r}) must be positive")

    @property
    def n(self) -> int:
        return len(self.voters)

    def cost(self, project_ids: Iterable[str]) -> int:
        return sum(self.projects[p].cost for p in project_ids)

    def score(self, voter: str, project: str) -> Fraction:
        return self.scores.get(voter, {}).get(project, Fraction(0))

    def ballot(self, voter: str) -> Mapping[str, Fraction]:
        return self.scores.get(voter, {})

    @cached_property
    def supporters(self) -> dict[str, dict[str, Fraction]]:
        """project -> {voter: positive score}, voters in election order."""
        out: dict[str, dict[str, Fraction]] = {p: {} for p in self.projects}
        for voter in self.voters:
            for pid, s in self.scores.get(voter, {}).items():
                out[pid][voter] = s
        return out

    @cached_property
    def total_score(self) -> dict[str, Fraction]:
        return {p: sum(sup.values(), Fraction(0)) for p, sup in self.supporters.items()}

    @cached_property
    def voter_set(self) -> frozenset[str]:
        return frozenset(self.voters)

    @cached_property
    def is_approval(self) -> bool:
        return all(s == 1 for ballot in self.scores.values() for s in ballot.values())

    def project_utility(self, voter: str, project: str, model: UtilityModel) -> Fraction:
        s = self.score(voter, project)
        if model == UtilityModel.COST:
            return s * self.projects[project].cost
        return s

    def replace(self, **changes) -> "Election":
        fields = dict(
            projects=self.projects,
            voters=self.voters,
            budget=self.budget,
            scores=self.scores,
            district_of=self.district_of,
            label=self.label,
            unit=self.unit,
            instance=self.instance,
        )
        fields.update(changes)
        return Election(**fields)


def _gps(extra: Mapping[str, str]) -> Optional[tuple[float, float]]:
    try:
        return float(extra["latitude"]), float(extra["longitude"])
    except (KeyError, ValueError):
        return None


def build_election(
    file: ElectionFile,
    scoring_fn: Optional[str] = None,
    namespace: str = "",
    label: str = "",
) -> Election:
    """Derive voter scores from the ballots of a parsed file.

    Approval ballots give score 1 to each listed project. Cumulative and
    scoring ballots copy their points (scoring ballots also give
    ``default_score`` to unlisted projects). Ordinal ballots use a
    ballot-relative Borda count: on a ballot of length ``k`` the project in
    position ``j`` (1-indexed) scores ``k - j + 1``.

    ``namespace`` is prefixed to every project id (used when several files are
    pooled into one election).
    """
    vote_type = file.vote_type
    if vote_type == "ordinal":
        fn = scoring_fn or str(constraints(file)["scoring_fn"])
        if fn.strip().lower() != "borda":
            raise UnsupportedScoringFn(f"scoring function {fn!r} is not supported (only Borda)")

    def pid(raw: str) -> str:
        return f"{namespace}{raw}"

    projects = {
        pid(row.project_id): Project(
            id=pid(row.project_id),
            cost=row.cost,
            tags=tuple(row.category or ()),
            gps=_gps(row.extra),
            name=row.name,
        )
        for row in file.projects
    }

    default_score = Fraction(0)
    if vote_type == "scoring":
        default_score = Fraction(constraints(file)["default_score"])
        if default_score < 0:
            raise NegativeScore(f"default_score {default_score} is negative")

    scores: dict[str, dict[str, Fraction]] = {}
    voters = []
    for row in file.votes:
        voters.append(row.voter_id)
        ballot: dict[str, Fraction] = {}
        if vote_type == "approval":
            for p in row.vote:
                ballot[pid(p)] = Fraction(1)
        elif vote_type == "ordinal":
            k = len(row.vote)
            for j, p in enumerate(row.vote, start=1):
                ballot[pid(p)] = Fraction(k - j + 1)
        else:
            if vote_type == "scoring" and default_score:
                ballot = {p: default_score for p in projects}
            for p, pts in zip(row.vote, row.points or ()):
                value = Fraction(pts)
                if value < 0:
                    raise NegativeScore(f"voter {row.voter_id!r} gives {pts} points to {p!r}")
                ballot[pid(p)] = value
        scores[row.voter_id] = {p: s for p, s in ballot.items() if s > 0}

    return Election(
        projects=projects,
        voters=tuple(voters),
        budget=file.budget,
        scores=scores,
        label=label or file.meta.get("subunit", "") or file.meta.get("description", ""),
        unit=file.meta.get("unit", ""),
        instance=file.meta.get("instance", ""),
    )


def utility(e: Election, voter: str, selected: Iterable[str], model: UtilityModel) -> Fraction:
    """Utility of ``voter`` for the project set ``selected``.

    Score utilities sum the voter's scores; cost utilities weight each score
    by the project's cost.
    """
    if voter not in e.voter_set:
        raise UnknownVoter(voter)
    ballot = e.scores.get(voter, {})
    total = Fraction(0)
    for p in selected:
        if p not in e.projects:
            raise UnknownProject(p)
        s = ballot.get(p)
        if s:
            total += s * e.projects[p].cost if model == UtilityModel.COST else s
    return total


def utilities(e: Election, selected: Iterable[str], model: UtilityModel) -> dict[str, Fraction]:
    """Utility of every voter for ``selected``, keyed by voter id."""
    selected = list(selected)
    for p in selected:
        if p not in e.projects:
            raise UnknownProject(p)
    out = {}
    for voter in e.voters:
        ballot = e.scores.get(voter, {})
        total = Fraction(0)
        for p in selected:
            s = ballot.get(p)
            if s:
                total += s * e.projects[p].cost if model == UtilityModel.COST else s
        out[voter] = total
    return out


def to_approval(e: Election) -> Election:
    """Approve every project the voter scored positively."""
    one = Fraction(1)
    scores = {v: {p: one for p in ballot} for v, ballot in e.scores.items()}
    return e.replace(scores=scores)


# --- citywide / districtwise schemes -----------------------------------------


@dataclass(frozen=True)
class SchemeElection:
    """Elections for one unit and instance under a given scheme.

    ``sub_elections`` are solved independently (one per file for the
    districtwise scheme, a single pooled election for the citywide scheme).
    ``merged`` always pools every project and voter; metrics for both schemes
    are evaluated against it.
    """

    scheme: str
    sub_elections: tuple[tuple[str, Election], ...]
    merged: Election
    labels: tuple[str, ...] = field(default=())


SCHEMES = ("citywide", "districtwise")


def _file_label(file: ElectionFile) -> str:
    return file.meta.get("subunit", "").strip() or CITYWIDE_LABEL


def assemble_scheme(files: list[ElectionFile], scheme: str, scoring_fn: Optional[str] = None) -> SchemeElection:
    """Combine the files of one unit and instance into a scheme election.

    Files without a ``subunit`` are the citywide-projects election. With more
    than one file, project ids become ``"<subunit>:<project_id>"`` so that
    pools from different districts cannot collide. Voters are merged by
    ``voter_id``; each voter's district is the subunit of the district-level
    file holding their ballot (``"unknown"`` if they only voted citywide).
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    if not files:
        raise ValueError("no files given")
    keys = {(f.meta.get("unit", ""), f.meta.get("instance", "")) for f in files}
    if len(keys) > 1:
        raise MixedUnits(f"files belong to different unit/instance pairs: {sorted(keys)}")
    unit, instance = next(iter(keys))
    labels = [_file_label(f) for f in files]
    if len(set(labels)) != len(labels):
        dup = sorted({x for x in labels if labels.count(x) > 1})
        raise DuplicateSubunit(f"subunit repeated: {dup}")

    ordered = sorted(zip(labels, files), key=lambda t: (t[0] != CITYWIDE_LABEL, t[0]))

    if len(files) == 1:
        label, file = ordered[0]
        e = build_election(file, scoring_fn, label=label)
        return SchemeElection(scheme, ((label, e),), e, (label,))

    subs = []
    for label, file in ordered:
        e = build_election(file, scoring_fn, namespace=f"{label}:", label=label)
        subs.append((label, e))

    projects: dict[str, Project] = {}
    voters: list[str] = []
    seen: set[str] = set()
    scores: dict[str, dict[str, Fraction]] = {}
    district_of: dict[str, str] = {}
    for label, e in subs:
        projects.update(e.projects)
        for v in e.voters:
            if v not in seen:
                seen.add(v)
                voters.append(v)
                scores[v] = {}
            scores[v].update(e.scores.get(v, {}))
            if label != CITYWIDE_LABEL and v not in district_of:
                district_of[v] = label
    for v in voters:
        district_of.setdefault(v, UNKNOWN_DISTRICT)

    merged = Election(
        projects=projects,
        voters=tuple(voters),
        budget=sum(e.budget for _, e in subs),
        scores=scores,
        district_of=district_of,
        label=CITYWIDE_LABEL,
        unit=unit,
        instance=instance,
    )
    if scheme == "citywide":
        return SchemeElection(scheme, ((CITYWIDE_LABEL, merged),), merged, tuple(lbl for lbl, _ in subs))
    return SchemeElection(scheme, tuple(subs), merged, tuple(lbl for lbl, _ in subs))
