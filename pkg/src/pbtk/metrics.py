"""Efficiency and fairness metrics for outcomes of PB elections.

Every metric is computed exactly on :class:`fractions.Fraction` values. The
only exception is the tag-share distance, which involves a square root.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Optional, Sequence

from .model import UNKNOWN_DISTRICT, Election, UtilityModel, to_approval, utilities

log = logging.getLogger(__name__)

UNTAGGED = "untagged"


class MetricError(ValueError):
    pass


class UnsupportedSelectedProject(MetricError):
    pass


class NoDistricts(MetricError):
    pass


@dataclass(frozen=True)
class PairReport:
    dominance_1_over_2: Fraction
    dominance_2_over_1: Fraction

    @property
    def improvement_margin(self) -> Fraction:
        return self.dominance_1_over_2 - self.dominance_2_over_1


@dataclass
class MetricsReport:
    scalars: dict[str, object] = field(default_factory=dict)
    vectors: dict[str, dict[str, object]] = field(default_factory=dict)


def average_utility(e: Election, selected: Iterable[str], model: UtilityModel) -> Fraction:
    if not e.voters:
        return Fraction(0)
    return sum(utilities(e, selected, model).values(), Fraction(0)) / e.n


def dominance_pair(e: Election, w1: Iterable[str], w2: Iterable[str], model: UtilityModel) -> PairReport:
    """Fractions of voters strictly preferring ``w1`` to ``w2`` and vice versa."""
    if not e.voters:
        return PairReport(Fraction(0), Fraction(0))
    u1 = utilities(e, w1, model)
    u2 = utilities(e, w2, model)
    better = sum(1 for v in e.voters if u1[v] > u2[v])
    worse = sum(1 for v in e.voters if u1[v] < u2[v])
    return PairReport(Fraction(better, e.n), Fraction(worse, e.n))


def exclusion_ratio(e: Election, selected: Iterable[str]) -> Fraction:
    """Fraction of voters who support none of the selected projects."""
    if not e.voters:
        return Fraction(0)
    chosen = set(selected)
    excluded = sum(1 for v in e.voters if not chosen.intersection(e.scores.get(v, {})))
    return Fraction(excluded, e.n)


def voter_shares(e: Election, selected: Iterable[str]) -> dict[str, Fraction]:
    """Each selected project's cost split among supporters in proportion to score."""
    shares = {v: Fraction(0) for v in e.voters}
    for pid in set(selected):
        total = e.total_score[pid]
        if total <= 0:
            raise UnsupportedSelectedProject(f"selected project {pid!r} has no supporters")
        cost = e.projects[pid].cost
        for v, s in e.supporters[pid].items():
            shares[v] += s / total * cost
    return shares


def power_inequality(e: Election, selected: Iterable[str]) -> Fraction:
    """Mean normalized deviation of voter shares from the equal share ``b/n``."""
    if not e.voters or e.budget <= 0:
        return Fraction(0)
    fair = Fraction(e.budget, e.n)
    shares = voter_shares(e, selected)
    return sum((abs(s - fair) for s in shares.values()), Fraction(0)) / e.budget


def gini(values: Sequence) -> Fraction:
    """Gini index ``sum_i sum_j |x_i - x_j| / (2 n^2 mean)``; 0 for all-zero input."""
    xs = sorted(Fraction(x) for x in values)
    n = len(xs)
    if n == 0:
        raise ValueError("gini of an empty sequence")
    total = sum(xs, Fraction(0))
    if total == 0:
        return Fraction(0)
    # sum over ordered pairs of |x_i - x_j| == 2 * sum_i (2i - n - 1) x_(i)
    pair_sum = 2 * sum(((2 * i - n - 1) * x for i, x in enumerate(xs, start=1)), Fraction(0))
    return pair_sum / (2 * n * total)


def budget_dispersion(e: Election, selected: Iterable[str]) -> tuple[Fraction, dict[str, Fraction]]:
    """Mean relative gap between each district's share and its proportional budget.

    Voters whose district is unknown are left out of both the shares and the
    voter count. Returns the dispersion and the per-district terms.
    """
    if not e.district_of:
        raise NoDistricts("election has no district assignment")
    members: dict[str, list[str]] = {}
    for v in e.voters:
        d = e.district_of.get(v, UNKNOWN_DISTRICT)
        if d != UNKNOWN_DISTRICT:
            members.setdefault(d, []).append(v)
    if not members:
        raise NoDistricts("no voter has a known district")
    shares = voter_shares(e, selected)
    counted = sum(len(vs) for vs in members.values())
    terms = {}
    for d in sorted(members):
        expected = Fraction(len(members[d]), counted) * e.budget
        got = sum((shares[v] for v in members[d]), Fraction(0))
        terms[d] = abs(got - expected) / expected
    return sum(terms.values(), Fraction(0)) / len(terms), terms


def robustness_ratio(e: Election, rule_runner: Callable[[Election], object]) -> Fraction:
    """Cost overlap of the outcome before and after collapsing ballots to approvals.

    ``rule_runner`` maps an election to an outcome (anything with a
    ``selected`` attribute, or an iterable of project ids).
    """
    return robustness_ratio_of(e, _ids(rule_runner(e)), _ids(rule_runner(to_approval(e))))


def robustness_ratio_of(e: Election, w_sc: Iterable[str], w_appr: Iterable[str]) -> Fraction:
    """``cost(w_appr & w_sc) / cost(w_sc)``, or 1 when ``w_sc`` is empty."""
    w_sc, w_appr = set(w_sc), set(w_appr)
    base = e.cost(w_sc)
    if base == 0:
        return Fraction(1)
    return Fraction(e.cost(w_sc & w_appr), base)


def _ids(outcome) -> set[str]:
    return set(getattr(outcome, "selected", outcome))


@dataclass(frozen=True)
class TagShares:
    vote: dict[str, Fraction]
    spending: dict[str, Fraction]
    l2: float


def project_tags(e: Election, pid: str) -> tuple[str, ...]:
    return e.projects[pid].tags or (UNTAGGED,)


def tag_shares(e: Election, selected: Iterable[str]) -> TagShares:
    """Per-tag vote shares, spending shares and the Euclidean distance between them.

    Each voter with a non-empty ballot contributes one unit, split equally
    over the projects they support and then over each project's tags.
    Voters with empty ballots are skipped.
    """
    vote: dict[str, Fraction] = {}
    counted = 0
    for v in e.voters:
        approved = e.scores.get(v, {})
        if not approved:
            continue
        counted += 1
        for pid in approved:
            tags = project_tags(e, pid)
            part = Fraction(1, len(approved) * len(tags))
            for t in tags:
                vote[t] = vote.get(t, Fraction(0)) + part
    skipped = e.n - counted
    if skipped:
        log.warning("%d voter(s) with empty ballots skipped in tag vote shares", skipped)
    if counted:
        vote = {t: s / counted for t, s in vote.items()}

    chosen = set(selected)
    spending: dict[str, Fraction] = {}
    spent = e.cost(chosen)
    for pid in chosen:
        tags = project_tags(e, pid)
        for t in tags:
            spending[t] = spending.get(t, Fraction(0)) + Fraction(e.projects[pid].cost, len(tags) * spent)

    universe = sorted(set(vote) | set(spending))
    sq = sum(((vote.get(t, 0) - spending.get(t, 0)) ** 2 for t in universe), Fraction(0))
    return TagShares(
        {t: vote.get(t, Fraction(0)) for t in universe},
        {t: spending.get(t, Fraction(0)) for t in universe},
        math.sqrt(sq),
    )


def funds_used(e: Election, selected: Iterable[str]) -> Fraction:
    if e.budget <= 0:
        return Fraction(0)
    return Fraction(e.cost(set(selected)), e.budget)


METRICS = (
    "average_utility_score",
    "average_utility_cost",
    "exclusion_ratio",
    "power_inequality",
    "gini",
    "funds_used",
    "budget_dispersion",
    "robustness_ratio",
    "category_l2",
)


def compute_metrics(
    e: Election,
    selected: Iterable[str],
    model: UtilityModel,
    names: Optional[Iterable[str]] = None,
    rule_runner: Optional[Callable[[Election], object]] = None,
) -> MetricsReport:
    """Evaluate the requested metrics (default: all that apply) for one outcome.

    ``gini`` is taken over voter utilities under ``model``. Metrics that do
    not apply (dispersion without districts, robustness without a rule
    runner) are omitted.
    """
    chosen = sorted(set(selected))
    wanted = list(METRICS if names is None else names)
    unknown = [n for n in wanted if n not in METRICS]
    if unknown:
        raise MetricError(f"unknown metrics {unknown}")
    rep = MetricsReport()
    for name in wanted:
        if name == "average_utility_score":
            rep.scalars[name] = average_utility(e, chosen, UtilityModel.SCORE)
        elif name == "average_utility_cost":
            rep.scalars[name] = average_utility(e, chosen, UtilityModel.COST)
        elif name == "exclusion_ratio":
            rep.scalars[name] = exclusion_ratio(e, chosen)
        elif name == "power_inequality":
            rep.scalars[name] = power_inequality(e, chosen)
            rep.vectors["shares"] = voter_shares(e, chosen)
        elif name == "gini":
            rep.scalars[name] = gini(list(utilities(e, chosen, model).values()) or [0])
        elif name == "funds_used":
            rep.scalars[name] = funds_used(e, chosen)
        elif name == "budget_dispersion":
            if e.district_of:
                try:
                    value, terms = budget_dispersion(e, chosen)
                except NoDistricts:
                    continue
                rep.scalars[name] = value
                rep.vectors["district_dispersion"] = terms
        elif name == "robustness_ratio":
            if rule_runner is not None:
                rep.scalars[name] = robustness_ratio(e, rule_runner)
        elif name == "category_l2":
            ts = tag_shares(e, chosen)
            rep.scalars[name] = ts.l2
            rep.vectors["tag_vote_shares"] = ts.vote
            rep.vectors["tag_spending_shares"] = ts.spending
    return rep
