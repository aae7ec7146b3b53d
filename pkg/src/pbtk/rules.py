"""Budgeted selection rules: Utilitarian Greedy and the Method of Equal Shares.

All arithmetic is exact (:class:`fractions.Fraction`). Ties are broken by
lower cost first, then by the lexicographically smaller project id.

Example
-------
>>> from pbtk.pbformat import parse_pb, TOY_FILE
>>> from pbtk.model import build_election, UtilityModel
>>> e = build_election(parse_pb(TOY_FILE))
>>> sorted(utilitarian_greedy(e, UtilityModel.COST).selected)
['4', '5']
>>> sorted(complete_add1(e, UtilityModel.COST).selected)
['1', '4']
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Optional, Union

from .model import Election, UtilityModel

try:
    from gmpy2 import mpq as _q
except ImportError:  # pragma: no cover
    _q = Fraction

RULES = ("utilitarian_greedy", "equal_shares")
COMPLETIONS = ("none", "U", "Eps", "Add1", "Add1U")
TIE_BREAKS = ("cost_then_id",)


@dataclass(frozen=True)
class Outcome:
    """Selected projects, in the order the rule picked them.

    ``payments`` maps project -> {voter: amount} for Equal Shares runs (only
    positive payments are stored); it is ``None`` for Utilitarian Greedy.
    ``alphas`` lists the price per unit of utility at each Equal Shares
    selection.
    """

    selected: tuple[str, ...]
    total_cost: int
    budget: int
    payments: Optional[dict[str, dict[str, Fraction]]] = None
    alphas: tuple[Fraction, ...] = ()
    endowment: Optional[Fraction] = None
    notes: tuple[str, ...] = ()

    @property
    def selected_set(self) -> frozenset[str]:
        return frozenset(self.selected)

    @property
    def funds_used_fraction(self) -> Fraction:
        if self.budget <= 0:
            return Fraction(0)
        return Fraction(self.total_cost, self.budget)


@dataclass(frozen=True)
class RuleSpec:
    rule: str
    utility: UtilityModel
    completion: str = "none"
    tie_break: str = "cost_then_id"

    def __post_init__(self):
        if self.rule not in RULES:
            raise ValueError(f"unknown rule {self.rule!r}")
        if self.completion not in COMPLETIONS:
            raise ValueError(f"unknown completion {self.completion!r}")
        if self.rule == "utilitarian_greedy" and self.completion != "none":
            raise ValueError("Utilitarian Greedy takes no completion")
        if self.tie_break not in TIE_BREAKS:
            raise ValueError(f"unknown tie-breaking {self.tie_break!r}")
        object.__setattr__(self, "utility", UtilityModel(self.utility))

    @property
    def name(self) -> str:
        if self.rule == "utilitarian_greedy":
            return f"UG-{self.utility.value}"
        suffix = "" if self.completion == "none" else f"+{self.completion}"
        return f"MES-{self.utility.value}{suffix}"


class BudgetLedger(dict):
    """Remaining endowment of each voter (voter id -> Fraction)."""

    @classmethod
    def uniform(cls, voters: Iterable[str], amount) -> "BudgetLedger":
        amount = Fraction(amount)
        return cls((v, amount) for v in voters)


@dataclass(frozen=True)
class AffordabilityResult:
    alpha: Fraction
    payments: dict[str, Fraction] = field(default_factory=dict)


NOT_AFFORDABLE = None


def _project_utility(score: Fraction, cost: int, model: UtilityModel) -> Fraction:
    return score * cost if model == UtilityModel.COST else score


def is_exhaustive(e: Election, selected: Iterable[str], budget: Optional[int] = None) -> bool:
    """True iff no unselected project fits into the leftover budget."""
    budget = e.budget if budget is None else budget
    chosen = set(selected)
    left = budget - e.cost(chosen)
    return all(p.cost > left for pid, p in e.projects.items() if pid not in chosen)


# --- Utilitarian Greedy -------------------------------------------------------


def utilitarian_greedy(
    e: Election,
    model: UtilityModel,
    budget_override: Optional[int] = None,
    preselected: Optional[Outcome] = None,
) -> Outcome:
    """Greedy by total utility per unit of cost.

    Projects are visited in descending order of ``sum_i u_i(p) / cost(p)``;
    each is added if it still fits and dropped for good otherwise.
    ``preselected`` projects are kept, excluded from the candidates, and their
    cost is charged against the budget.
    """
    budget = e.budget if budget_override is None else budget_override
    if budget_override is not None and budget_override > e.budget:
        raise ValueError("budget_override exceeds the election budget")
    chosen: list[str] = list(preselected.selected) if preselected else []
    taken = set(chosen)
    left = budget - e.cost(taken)

    def key(pid):
        cost = e.projects[pid].cost
        ratio = _project_utility(e.total_score[pid], cost, model) / cost
        return (-ratio, cost, pid)

    for pid in sorted((p for p in e.projects if p not in taken), key=key):
        cost = e.projects[pid].cost
        if cost <= left:
            chosen.append(pid)
            left -= cost

    total = e.cost(chosen)
    if preselected is None:
        return Outcome(tuple(chosen), total, e.budget)
    return Outcome(
        tuple(chosen),
        total,
        e.budget,
        payments=preselected.payments,
        alphas=preselected.alphas,
        endowment=preselected.endowment,
        notes=preselected.notes,
    )


# --- Method of Equal Shares --------------------------------------------------


def _solve_alpha(cost, entries):
    """Minimal alpha with ``sum w * min(b, alpha * u) == cost``.

    ``entries`` holds ``(weight, budget, utility)`` triples with ``utility >
    0``. Returns ``None`` when the supporters cannot cover ``cost``.
    """
    if sum(w * b for w, b, _ in entries) < cost:
        return None
    entries = sorted(entries, key=lambda t: t[1] / t[2])
    paid = 0
    rest = sum(w * u for w, _, u in entries)
    for w, b, u in entries:
        alpha = (cost - paid) / rest
        if alpha * u <= b:
            return alpha
        paid += w * b
        rest -= w * u
    raise AssertionError("unreachable: supporters can cover the cost")


def alpha_affordability(
    e: Election,
    project: str,
    ledger: Mapping[str, Fraction],
    model: UtilityModel,
) -> Optional[AffordabilityResult]:
    """Price per unit of utility at which ``project`` can be bought.

    Returns ``None`` when the project is not affordable (its supporters'
    remaining budgets do not cover its cost, or it has no supporters).
    """
    cost = e.projects[project].cost
    sup = e.supporters[project]
    entries = [(1, Fraction(ledger[v]), _project_utility(s, cost, model)) for v, s in sup.items()]
    if not entries:
        return NOT_AFFORDABLE
    alpha = _solve_alpha(cost, entries)
    if alpha is None:
        return NOT_AFFORDABLE
    payments = {}
    for v, s in sup.items():
        pay = min(Fraction(ledger[v]), alpha * _project_utility(s, cost, model))
        if pay > 0:
            payments[v] = pay
    return AffordabilityResult(alpha, payments)


def _frac(x) -> Fraction:
    return Fraction(int(x.numerator), int(x.denominator))


class _Group:
    __slots__ = ("voters", "weight", "ballot", "budget")

    def __init__(self, voters, ballot, budget):
        self.voters = voters
        self.weight = len(voters)
        self.ballot = ballot
        self.budget = budget


def _group_voters(e: Election, endowment: Fraction, fill: Optional[Fraction] = None):
    """Bundle voters with identical ballots; they are always treated alike."""
    by_ballot: dict[tuple, list[str]] = {}
    for v in e.voters:
        ballot = e.scores.get(v, {})
        if fill is not None:
            ballot = {p: ballot.get(p, fill) for p in e.projects}
        sig = tuple(sorted(ballot.items()))
        by_ballot.setdefault(sig, []).append(v)
    return [_Group(voters, {p: _q(s) for p, s in sig}, _q(endowment)) for sig, voters in by_ballot.items()]


def _equal_shares(e: Election, model: UtilityModel, endowment: Fraction, fill: Optional[Fraction] = None) -> Outcome:
    groups = _group_voters(e, endowment, fill)
    supporters: dict[str, list[tuple[_Group, Fraction]]] = {p: [] for p in e.projects}
    for g in groups:
        for pid, s in g.ballot.items():
            supporters[pid].append((g, _project_utility(s, e.projects[pid].cost, model)))

    # alpha only grows as budgets shrink, so the last computed value is a
    # lower bound and lets most projects be skipped each round
    lower = {p: _q(0) for p, sup in supporters.items() if sup}
    selected: list[str] = []
    alphas: list[Fraction] = []
    payments: dict[str, dict[str, Fraction]] = {}

    def order(pid, alpha):
        return (alpha, e.projects[pid].cost, pid)

    while lower:
        best = None
        for pid in sorted(lower, key=lambda p: order(p, lower[p])):
            if best is not None and order(pid, lower[pid]) > best[0]:
                break
            cost = e.projects[pid].cost
            alpha = _solve_alpha(cost, [(g.weight, g.budget, u) for g, u in supporters[pid]])
            if alpha is None:
                del lower[pid]
                continue
            lower[pid] = alpha
            key = order(pid, alpha)
            if best is None or key < best[0]:
                best = (key, pid, alpha)
        if best is None:
            break
        _, pid, alpha = best
        del lower[pid]
        paid: dict[str, Fraction] = {}
        for g, u in supporters[pid]:
            pay = min(g.budget, alpha * u)
            if pay > 0:
                g.budget -= pay
                exact = _frac(pay)
                for v in g.voters:
                    paid[v] = exact
        selected.append(pid)
        alphas.append(_frac(alpha))
        payments[pid] = paid

    return Outcome(
        tuple(selected),
        e.cost(selected),
        e.budget,
        payments=payments,
        alphas=tuple(alphas),
        endowment=endowment,
    )


def equal_shares_core(e: Election, model: UtilityModel, initial_endowment=None) -> Outcome:
    """Method of Equal Shares without completion.

    Every voter starts with ``initial_endowment`` (default ``b / n``). The
    rule repeatedly buys the project affordable at the lowest price per unit
    of utility and stops when nothing is affordable. With a larger endowment
    the outcome may cost more than ``e.budget``; callers enforce the budget.
    """
    if not e.voters:
        return Outcome((), 0, e.budget, payments={}, endowment=None)
    if initial_endowment is None:
        initial_endowment = Fraction(e.budget, e.n)
    endowment = Fraction(initial_endowment)
    if endowment <= 0:
        raise ValueError("initial endowment must be positive")
    return _equal_shares(e, model, endowment)


def complete_utilitarian(e: Election, model: UtilityModel, partial: Outcome) -> Outcome:
    """Top up ``partial`` with Utilitarian Greedy on the leftover budget."""
    if partial.total_cost > e.budget:
        raise ValueError("partial outcome already exceeds the budget")
    out = utilitarian_greedy(e, model, preselected=partial)
    if len(out.selected) > len(partial.selected):
        return Outcome(
            out.selected,
            out.total_cost,
            out.budget,
            payments=out.payments,
            alphas=out.alphas,
            endowment=out.endowment,
            notes=out.notes + ("utilitarian_completion",),
        )
    return out


def epsilon_for(e: Election) -> Fraction:
    """Score given to unscored pairs by the Eps completion: ``1 / (1 + m n S_max)``."""
    s_max = max((s for ballot in e.scores.values() for s in ballot.values()), default=Fraction(1))
    return Fraction(1) / (1 + len(e.projects) * e.n * s_max)


def complete_eps(e: Election, model: UtilityModel) -> Outcome:
    """Equal Shares after giving every zero-score pair a tiny score epsilon.

    Payments made by voters on projects they did not actually score stay in
    the ledger; the outcome is then flagged with ``"epsilon_payments"``.
    """
    if not e.voters:
        return Outcome((), 0, e.budget, payments={})
    eps = epsilon_for(e)
    out = _equal_shares(e, model, Fraction(e.budget, e.n), fill=eps)
    flagged = any(
        e.score(v, pid) == 0 for pid, paid in (out.payments or {}).items() for v in paid
    )
    notes = ("epsilon_completion",) + (("epsilon_payments",) if flagged else ())
    return Outcome(
        out.selected,
        out.total_cost,
        out.budget,
        payments=out.payments,
        alphas=out.alphas,
        endowment=out.endowment,
        notes=notes,
    )


def complete_add1(e: Election, model: UtilityModel, with_final_ug: bool = False) -> Outcome:
    """Equal Shares with endowments ``b/n + k`` for ``k = 0, 1, 2, ...``.

    Stops at the first exhaustive outcome, or once an endowment produces an
    outcome costing more than the budget; the last outcome within budget is
    returned. ``with_final_ug`` applies the utilitarian top-up afterwards
    (Add1U).
    """
    if not e.voters:
        out = Outcome((), 0, e.budget, payments={})
        return complete_utilitarian(e, model, out) if with_final_ug else out
    base = Fraction(e.budget, e.n)
    # once nobody can run out of money the outcome no longer depends on k
    saturation = sum(p.cost for p in e.projects.values())
    best = None
    k = 0
    while True:
        out = _equal_shares(e, model, base + k)
        if out.total_cost > e.budget:
            break
        best = out
        if is_exhaustive(e, out.selected) or base + k >= saturation:
            break
        k += 1
    if best is None:
        best = _equal_shares(e, model, base)
    best = Outcome(
        best.selected,
        best.total_cost,
        best.budget,
        payments=best.payments,
        alphas=best.alphas,
        endowment=best.endowment,
        notes=best.notes + (f"add1_steps={k}",),
    )
    if with_final_ug:
        return complete_utilitarian(e, model, best)
    return best


def run_rule(e: Election, spec: Union[RuleSpec, str]) -> Outcome:
    """Run the rule described by ``spec`` on ``e``."""
    if isinstance(spec, str):
        spec = parse_rule_spec(spec)
    m = spec.utility
    if spec.rule == "utilitarian_greedy":
        return utilitarian_greedy(e, m)
    if spec.completion == "none":
        return equal_shares_core(e, m)
    if spec.completion == "U":
        return complete_utilitarian(e, m, equal_shares_core(e, m))
    if spec.completion == "Eps":
        return complete_eps(e, m)
    return complete_add1(e, m, with_final_ug=spec.completion == "Add1U")


_COMPLETION_ALIASES = {c.lower(): c for c in COMPLETIONS}


def parse_rule_spec(text: str) -> RuleSpec:
    """Parse ``"ug:cost"``, ``"mes:score"`` or ``"mes:cost:add1u"``."""
    parts = [p.strip().lower() for p in text.split(":")]
    rule = {"ug": "utilitarian_greedy", "mes": "equal_shares"}.get(parts[0], parts[0])
    utility = parts[1] if len(parts) > 1 else "cost"
    completion = _COMPLETION_ALIASES.get(parts[2], parts[2]) if len(parts) > 2 else "none"
    return RuleSpec(rule, UtilityModel(utility), completion)
