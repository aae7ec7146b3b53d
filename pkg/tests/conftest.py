import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from pbtk.model import UtilityModel, build_election  # noqa: E402
from pbtk.pbformat import TOY_FILE, parse_pb  # noqa: E402

COST = UtilityModel.COST
SCORE = UtilityModel.SCORE


@pytest.fixture
def toy_text():
    return TOY_FILE


@pytest.fixture
def toy_file():
    return parse_pb(TOY_FILE, source_name="toy.pb")


@pytest.fixture
def toy(toy_file):
    return build_election(toy_file)


@pytest.fixture
def toy_path(tmp_path):
    path = tmp_path / "toy.pb"
    path.write_text(TOY_FILE, encoding="utf-8")
    return path


def make_pb(projects, votes, budget, vote_type="approval", unit="Testville", instance="2021", subunit=None, **meta):
    """Render a small .pb file. ``projects`` maps id -> cost or (cost, tags);
    ``votes`` maps voter id -> list of project ids or (ids, points)."""
    lines = ["META", "key; value", "description; test", "country; Nowhere", f"unit; {unit}"]
    if subunit:
        lines.append(f"subunit; {subunit}")
    lines += [
        f"instance; {instance}",
        f"num_projects; {len(projects)}",
        f"num_votes; {len(votes)}",
        f"budget; {budget}",
        f"vote_type; {vote_type}",
        "rule; greedy",
    ]
    lines += [f"{k}; {v}" for k, v in meta.items()]
    lines += ["PROJECTS", "project_id; cost; category"]
    for pid, spec in projects.items():
        cost, tags = spec if isinstance(spec, tuple) else (spec, [])
        lines.append(f"{pid}; {cost}; {','.join(tags)}")
    cardinal = vote_type in ("cumulative", "scoring")
    lines += ["VOTES", "voter_id; vote" + ("; points" if cardinal else "")]
    for vid, ballot in votes.items():
        if cardinal:
            ids, pts = ballot
            lines.append(f"{vid}; {','.join(ids)}; {','.join(str(x) for x in pts)}")
        else:
            lines.append(f"{vid}; {','.join(ballot)}")
    return "\n".join(lines) + "\n"


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_log.LINES:
            terminalreporter.write_line(line)
