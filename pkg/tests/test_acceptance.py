"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the lines are repeated in
the terminal summary under "acceptance criteria".
"""

import itertools
import math
import os
import random
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acceptance_log import record
from conftest import COST, SCORE, make_pb
from oracles import gini_pairwise, knapsack_optimum, naive_equal_shares, random_election, total_utility
from pbtk.geometry import DistanceMatrix, jaccard_distance, jaccard_matrix, mds_embed, normalize_distances
from pbtk.metrics import (
    budget_dispersion,
    dominance_pair,
    exclusion_ratio,
    gini,
    power_inequality,
    robustness_ratio,
    robustness_ratio_of,
    tag_shares,
    voter_shares,
)
from pbtk.model import Project, assemble_scheme, build_election, to_approval
from pbtk.pbformat import (
    OBLIGATORY_META,
    TOY_FILE,
    MissingObligatoryField,
    constraints,
    parse_pb,
    serialize,
    validate,
)
from pbtk.rules import (
    complete_add1,
    complete_eps,
    equal_shares_core,
    is_exhaustive,
    run_rule,
    utilitarian_greedy,
)


class Checks:
    """Collects named boolean checks so a criterion reports every failure."""

    def __init__(self):
        self.failed = []

    def __call__(self, name, ok):
        if not ok:
            self.failed.append(name)

    def finish(self, number, title, started, limit=None):
        elapsed = time.perf_counter() - started
        if limit is not None:
            self(f"runtime {elapsed:.2f}s >= {limit}s", elapsed < limit)
        ok = not self.failed
        detail = f"{elapsed:.2f}s" + ("" if ok else "; failed: " + ", ".join(self.failed[:5]))
        record(number, title, ok, detail)
        assert ok, self.failed


def test_criterion_1_toy_rules():
    t0 = time.perf_counter()
    c = Checks()
    e = build_election(parse_pb(TOY_FILE))

    ug = utilitarian_greedy(e, COST)
    c("UG(cost) = {p4,p5}", set(ug.selected) == {"4", "5"})
    c("UG(cost) cost 2400", ug.total_cost == 2400)

    mes = equal_shares_core(e, COST)
    c("MES(cost) = {p4}", set(mes.selected) == {"4"})
    c("MES(cost) funds 0.56", mes.funds_used_fraction == Fraction(56, 100))
    naive, pay, alphas = naive_equal_shares(e, COST)
    c("MES equals naive simulation", list(mes.selected) == naive and mes.payments == pay and list(mes.alphas) == alphas)

    c("MES+U = {p4,p5}", set(run_rule(e, "mes:cost:u").selected) == {"4", "5"})

    add1 = complete_add1(e, COST)
    c("Add1 = {p1,p4}", set(add1.selected) == {"1", "4"})
    c("Add1 endowment 267", add1.endowment == 267)
    c("Add1 cost 2000", add1.total_cost == 2000)
    steps = [naive_equal_shares(e, COST, endowment=250 + k)[0] for k in range(18)]
    first_exhaustive = next(k for k, sel in enumerate(steps) if is_exhaustive(e, sel))
    c("Add1 oracle stops at k=17", first_exhaustive == 17 and set(steps[17]) == {"1", "4"})
    c.finish(1, "toy rule outcomes", t0, limit=1.0)


def test_criterion_2_toy_metrics():
    t0 = time.perf_counter()
    c = Checks()
    e = build_election(parse_pb(TOY_FILE))
    ug = set(utilitarian_greedy(e, COST).selected)
    add1 = set(complete_add1(e, COST).selected)
    c("power_inequality 0.48", power_inequality(e, ug) == Fraction(48, 100))
    c("exclusion_ratio 0.2", exclusion_ratio(e, ug) == Fraction(2, 10))
    c("improvement margin -0.1", dominance_pair(e, add1, ug, COST).improvement_margin == Fraction(-1, 10))
    ts = tag_shares(e, ug)
    c("culture vote share 11/30", ts.vote["culture"] == Fraction(11, 30))
    c("culture spending share 7/12", ts.spending["culture"] == Fraction(7, 12))
    c("jaccard d(p4,p5) 5/8", jaccard_matrix(e)["4", "5"] == Fraction(5, 8))
    c.finish(2, "toy metric values", t0)


def _ledger_ok(e, out, model, endowment):
    """Payments cover each cost exactly, stay within endowments, and only
    come from voters who scored the project."""
    spent = {v: Fraction(0) for v in e.voters}
    for pid, paid in out.payments.items():
        if sum(paid.values()) != e.projects[pid].cost:
            return False
        for v, x in paid.items():
            if x <= 0 or e.score(v, pid) == 0:
                return False
            spent[v] += x
    return all(x <= endowment for x in spent.values())


def test_criterion_3_random_properties():
    t0 = time.perf_counter()
    c = Checks()
    rng = random.Random(20240601)
    for i in range(1000):
        e = random_election(rng, max_n=50, max_m=12, max_cost=100)
        model = COST if i % 2 == 0 else SCORE
        ug = utilitarian_greedy(e, model)
        c(f"#{i} UG exhaustive", is_exhaustive(e, ug.selected))
        c(f"#{i} Add1U exhaustive", is_exhaustive(e, run_rule(e, f"mes:{model.value}:add1u").selected))
        eps = complete_eps(e, model)
        c(f"#{i} Eps exhaustive", is_exhaustive(e, eps.selected))
        c(f"#{i} Eps payments sum", all(sum(p.values()) == e.projects[pid].cost for pid, p in eps.payments.items()))

        mes = equal_shares_core(e, model)
        c(f"#{i} MES ledger", _ledger_ok(e, mes, model, Fraction(e.budget, e.n)))
        c(f"#{i} MES alphas non-decreasing", all(a <= b for a, b in zip(mes.alphas, mes.alphas[1:])))
        add1 = complete_add1(e, model)
        c(f"#{i} Add1 ledger", _ledger_ok(e, add1, model, add1.endowment))
        c(f"#{i} Add1 alphas non-decreasing", all(a <= b for a, b in zip(add1.alphas, add1.alphas[1:])))
        c(f"#{i} Add1 within budget", add1.total_cost <= e.budget)

        w = set(ug.selected)
        opt = knapsack_optimum(e, model)
        rest = [p for p in e.projects if p not in w]
        if rest:
            c(f"#{i} UG optimal up to one", any(total_utility(e, w | {p}, model) >= opt for p in rest))
        else:
            c(f"#{i} UG optimal", total_utility(e, w, model) >= opt)
    c.finish(3, "1000 random instances: exhaustiveness, ledgers, alphas, UG bound", t0, limit=60.0)


@st.composite
def _elections(draw):
    return random_election(random.Random(draw(st.integers(0, 2**32 - 1))), max_n=30, max_m=8)


def test_criterion_4_metric_invariants():
    t0 = time.perf_counter()
    c = Checks()

    @settings(max_examples=200, deadline=None, database=None)
    @given(_elections(), st.data())
    def shares_and_dominance(e, data):
        supported = sorted(p for p in e.projects if e.total_score[p] > 0)
        w = data.draw(st.sets(st.sampled_from(supported))) if supported else set()
        assert sum(voter_shares(e, w).values()) == e.cost(w)
        w2 = data.draw(st.sets(st.sampled_from(sorted(e.projects))))
        for model in (COST, SCORE):
            a, b = dominance_pair(e, w, w2, model), dominance_pair(e, w2, w, model)
            assert a.dominance_1_over_2 == b.dominance_2_over_1
            assert a.dominance_2_over_1 == b.dominance_1_over_2

    @settings(max_examples=200, deadline=None, database=None)
    @given(_elections(), st.data())
    def tag_vote_shares(e, data):
        projects = {
            p: Project(p, x.cost, tags=tuple(data.draw(st.lists(st.sampled_from("abcd"), max_size=3, unique=True))))
            for p, x in e.projects.items()
        }
        e = e.replace(projects=projects)
        e = e.replace(voters=tuple(v for v in e.voters if e.scores[v]))
        if e.voters:
            assert sum(tag_shares(e, set()).vote.values()) == 1

    @settings(max_examples=300, deadline=None, database=None)
    @given(
        st.lists(st.fractions(min_value=0, max_value=500, max_denominator=9), min_size=1, max_size=40),
        st.fractions(min_value=Fraction(1, 9), max_value=100, max_denominator=9),
    )
    def gini_props(xs, k):
        g = gini(xs)
        assert 0 <= g <= 1 - Fraction(1, len(xs))
        assert g == gini_pairwise(xs)
        assert gini([k * x for x in xs]) == g

    @settings(max_examples=60, deadline=None, database=None)
    @given(_elections(), st.sampled_from(["ug:cost", "ug:score", "mes:cost:add1u", "mes:score:eps"]))
    def robustness_on_approval(e, spec):
        e = to_approval(e)
        assert robustness_ratio(e, lambda el: run_rule(el, spec)) == 1

    for name, prop in [
        ("voter shares / dominance", shares_and_dominance),
        ("tag vote shares", tag_vote_shares),
        ("gini bounds and scale", gini_props),
        ("robustness on approval", robustness_on_approval),
    ]:
        try:
            prop()
            c(name, True)
        except AssertionError:
            c(name, False)
    c.finish(4, "metric invariants (property-based)", t0)


def _mutants():
    """Twenty deterministic variants of the toy file."""
    base = TOY_FILE
    out = [
        base.replace("budget; 2500", "budget; 3100"),
        base.replace("rule; greedy", "rule; greedy\ncomment; mutated"),
        base.replace("; ", ";"),
        base.replace("\n", "\r\n"),
        base.replace("1; 34; f; 1,2,4", "1; ; f; 1,2,4"),
        base.replace("project_id; cost; category", "project_id; cost; category; name")
        .replace("1; 600; culture, education", "1; 600; culture, education; Library")
        .replace("2; 800; sport", "2; 800; sport; Pitch")
        .replace("4; 1400; culture", "4; 1400; culture; Theatre")
        .replace("5; 1000; health, sport", "5; 1000; health, sport; Clinic")
        .replace("7; 1200; education", "7; 1200; education; School"),
        base.replace("7; 49; m; 5", "7; 49; m; 5,1"),
        base.replace("vote_type; approval", "vote_type; ordinal"),
        base.replace("max_length; 3\n", ""),
        base.replace("min_length; 1\n", "min_length; 1\nmin_sum_cost; 500\n"),
        base.replace("2; 800; sport", "2; 800; "),
        base.replace("num_votes; 10", "num_votes; 9").replace("10; 44; m; 4,5\n", ""),
        base.replace("description; Municipal PB in Wieliczka", "description; Zielony budżet, edycja 2"),
        base.replace("1; 600; culture, education", "1; 600.0; culture, education"),
        base.replace("unit; Wieliczka", "unit; Wieliczka\nsubunit; Center"),
        base.replace("2; 800; sport\n", "").replace("7; 1200; education", "7; 1200; education\n2; 800; sport"),
        base.replace("max_length; 3", "max_length; 3\nmax_sum_cost; 2500"),
        base.replace("voter_id; age; sex; vote", "voter_id; age; sex; vote; district")
        .replace("\n1; 34; f; 1,2,4", "\n1; 34; f; 1,2,4; Śródmieście")
        .replace("\n2; 51; m; 1,2", "\n2; 51; m; 1,2; Nowa Huta")
        .replace("\n3; 23; m; 2,4,5", "\n3; 23; m; 2,4,5; ")
        .replace("\n4; 19; f; 5,7", "\n4; 19; f; 5,7; ")
        .replace("\n5; 62; f; 1,4,7", "\n5; 62; f; 1,4,7; ")
        .replace("\n6; 54; m; 1,7", "\n6; 54; m; 1,7; ")
        .replace("\n7; 49; m; 5", "\n7; 49; m; 5; ")
        .replace("\n8; 27; f; 4", "\n8; 27; f; 4; ")
        .replace("\n9; 39; f; 2,4,5", "\n9; 39; f; 2,4,5; ")
        .replace("\n10; 44; m; 4,5", "\n10; 44; m; 4,5; "),
    ]
    out.append(make_pb({"a": 10, "b": 20}, {"x": (["b", "a"], [7, 3]), "y": (["a"], [10])}, 25, vote_type="cumulative", max_sum_points=10))
    out.append(make_pb({"a": 10, "b": 20}, {"x": (["b", "a"], ["2.5", 1])}, 25, vote_type="scoring", default_score=0))
    return out


def test_criterion_5_parser():
    t0 = time.perf_counter()
    c = Checks()
    variants = [TOY_FILE] + _mutants()
    c("at least 20 distinct mutants", len(set(variants)) >= 21)
    for i, text in enumerate(variants):
        f = parse_pb(text)
        s = serialize(f)
        c(f"variant {i} round trip", parse_pb(s) == f)
        c(f"variant {i} serializer idempotent", serialize(parse_pb(s)) == s)
    # the only normalization the toy needs is dropping spaces after list commas
    c("toy serializes canonically", serialize(parse_pb(TOY_FILE)) == TOY_FILE.replace(", ", ","))

    for key in OBLIGATORY_META:
        text = "\n".join(ln for ln in TOY_FILE.splitlines() if not ln.startswith(f"{key};"))
        try:
            parse_pb(text)
            c(f"deleting {key}", False)
        except MissingObligatoryField as exc:
            c(f"deleting {key}", key in str(exc))
    cum = make_pb({"a": 10}, {"x": (["a"], [3])}, 10, vote_type="cumulative")
    c("deleting max_sum_points", "MissingObligatoryField" in validate(parse_pb(cum)).codes())
    for col in ("project_id", "cost"):
        try:
            parse_pb(TOY_FILE.replace(f"project_id; cost; category", "; ".join(x for x in ("project_id", "cost", "category") if x != col)))
            c(f"deleting column {col}", False)
        except Exception as exc:  # missing column or malformed row, both are reported
            c(f"deleting column {col}", type(exc).__name__ in ("MissingObligatoryField", "MalformedRow"))

    bare = "\n".join(ln for ln in TOY_FILE.splitlines() if not ln.startswith(("min_length", "max_length")))
    appr = constraints(parse_pb(bare))
    c("approval defaults", appr == {"min_length": 1, "max_length": 5, "min_sum_cost": 0, "max_sum_cost": math.inf})
    ordi = constraints(parse_pb(bare.replace("vote_type; approval", "vote_type; ordinal")))
    c("ordinal defaults", ordi == {"min_length": 1, "max_length": 5, "scoring_fn": "Borda"})
    cumc = constraints(parse_pb(make_pb({"a": 10, "b": 5}, {}, 10, vote_type="cumulative", max_sum_points=7)))
    c(
        "cumulative defaults",
        cumc == {"min_length": 1, "max_length": 2, "min_points": 0, "max_points": 7, "min_sum_points": 0, "max_sum_points": 7},
    )
    scor = constraints(parse_pb(make_pb({"a": 10, "b": 5}, {}, 10, vote_type="scoring")))
    c(
        "scoring defaults",
        scor == {"min_length": 1, "max_length": 2, "min_points": -math.inf, "max_points": math.inf, "default_score": 0},
    )
    c.finish(5, "parser round trips, obligatory fields, defaults", t0)


def test_criterion_6_geometry():
    t0 = time.perf_counter()
    c = Checks()
    rng = random.Random(7)
    for i in range(30):
        e = random_election(rng, max_n=10, max_m=6, density=0.4)
        sets = [frozenset(e.supporters[p]) for p in e.projects]
        for a, b, d in itertools.product(sets, repeat=3):
            ab, bd, ad = jaccard_distance(a, b), jaccard_distance(b, d), jaccard_distance(a, d)
            c(f"election {i} range/symmetry/identity", 0 <= ab <= 1 and ab == jaccard_distance(b, a) and (ab == 0) == (a == b))
            c(f"election {i} triangle", ad <= ab + bd)

    for i in range(50):
        n = rng.randint(3, 14)
        raw = [[Fraction(0)] * n for _ in range(n)]
        for a, b in itertools.combinations(range(n), 2):
            raw[a][b] = raw[b][a] = Fraction(rng.randint(0, 1000), 1000)
        dm = DistanceMatrix(tuple(f"p{k}" for k in range(n)), tuple(tuple(r) for r in raw))
        emb = mds_embed(dm, seed=i)
        c(f"matrix {i} stress monotone", all(b <= a for a, b in zip(emb.history, emb.history[1:])))

    e = build_election(parse_pb(TOY_FILE))
    dm = normalize_distances(jaccard_matrix(e))
    blobs = [np.array([mds_embed(dm, seed=3).coords[p] for p in dm.labels]).tobytes() for _ in range(3)]
    c("seed determinism", len(set(blobs)) == 1)
    c.finish(6, "Jaccard axioms, SMACOF monotone stress, seed determinism", t0)


# --- data-gated integration ---------------------------------------------------

DATA_DIR = Path(os.environ.get("PBTK_DATA_DIR", Path(__file__).resolve().parent.parent / "data"))


def _krakow_groups():
    if not DATA_DIR.is_dir():
        return []
    groups: dict[tuple, list] = {}
    for path in sorted(DATA_DIR.rglob("*.pb")):
        head = path.read_text(encoding="utf-8", errors="replace")[:4000].lower()
        if "unit; krak" not in head and "unit;krak" not in head:
            continue
        f = parse_pb(path.read_text(encoding="utf-8"), source_name=str(path))
        groups.setdefault((f.meta.get("unit"), f.meta.get("instance")), []).append(f)
    return [g for _, g in sorted(groups.items())]


def _union(se, spec, approval=False):
    out = []
    for _, sub in se.sub_elections:
        out.extend(run_rule(to_approval(sub) if approval else sub, spec).selected)
    return out


def test_criterion_7_krakow_data():
    groups = _krakow_groups()
    if not groups:
        record(7, "Krakow tables (data-gated)", None, f"no Krakow .pb files under {DATA_DIR}")
        pytest.skip("Krakow data not present")
    t0 = time.perf_counter()
    c = Checks()
    disp = {"add1u_c": [], "ug_d": [], "ug_c": []}
    robust = {"add1u_c": [], "ug_d": [], "ug_c": []}
    funds = {"c": [], "d": []}
    for files in groups:
        city = assemble_scheme(files, "citywide")
        dist = assemble_scheme(files, "districtwise")
        e = city.merged
        runs = {
            "add1u_c": (city, "mes:cost:add1u"),
            "ug_d": (dist, "ug:cost"),
            "ug_c": (city, "ug:cost"),
        }
        for key, (se, spec) in runs.items():
            w = _union(se, spec)
            if e.district_of:
                disp[key].append(budget_dispersion(e, w)[0])
            if not e.is_approval:
                robust[key].append(robustness_ratio_of(e, w, _union(se, spec, approval=True)))
        funds["c"].append(Fraction(e.cost(_union(city, "mes:cost")), e.budget))
        funds["d"].append(Fraction(e.cost(_union(dist, "mes:cost")), e.budget))

    def mean(xs):
        return float(sum(xs) / len(xs)) if xs else None

    targets = {"add1u_c": (0.08, 0.78), "ug_d": (0.24, 0.52), "ug_c": (0.23, 0.41)}
    for key, (t_disp, t_rob) in targets.items():
        d, r = mean(disp[key]), mean(robust[key])
        c(f"dispersion {key} {d}", d is not None and abs(d - t_disp) <= 0.02)
        c(f"robustness {key} {r}", r is not None and abs(r - t_rob) <= 0.02)
    c(f"MES funds citywide {mean(funds['c'])}", abs(mean(funds["c"]) - 0.32) <= 0.05)
    c(f"MES funds districtwise {mean(funds['d'])}", abs(mean(funds["d"]) - 0.50) <= 0.05)
    c.finish(7, f"Krakow tables over {len(groups)} instance(s)", t0)
