"""Project maps: Jaccard distances between supporter sets and a 2-D SMACOF embedding."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Optional

import numpy as np

from .model import Election

log = logging.getLogger(__name__)

STATUSES = ("neither", "both", "es_only", "ug_only")


class GeometryError(ValueError):
    pass


class TooFewProjects(GeometryError):
    pass


class NoPositions(GeometryError):
    pass


@dataclass(frozen=True)
class DistanceMatrix:
    labels: tuple[str, ...]
    d: tuple[tuple[Fraction, ...], ...]

    def __post_init__(self):
        n = len(self.labels)
        if len(self.d) != n or any(len(row) != n for row in self.d):
            raise ValueError("distance matrix shape does not match labels")

    def as_array(self) -> np.ndarray:
        return np.array([[float(x) for x in row] for row in self.d], dtype=float)

    def __getitem__(self, pair):
        i, j = (self.labels.index(x) for x in pair)
        return self.d[i][j]


@dataclass(frozen=True)
class Embedding:
    coords: dict[str, tuple[float, float]]
    stress: float
    iterations: int
    seed: int
    history: tuple[float, ...] = field(default=(), repr=False)
    degenerate: bool = False


@dataclass(frozen=True)
class MapDatum:
    project_id: str
    position: tuple[float, float]
    cost_radius: float
    votes_radius: float
    status: str

    def as_dict(self) -> dict:
        return {
            "project_id": self.project_id,
            "x": self.position[0],
            "y": self.position[1],
            "cost_radius": self.cost_radius,
            "votes_radius": self.votes_radius,
            "status": self.status,
        }


def jaccard_distance(a: set, b: set) -> Fraction:
    union = a | b
    if not union:
        return Fraction(0)
    return Fraction(len(a ^ b), len(union))


def jaccard_matrix(e: Election) -> DistanceMatrix:
    """Exact Jaccard distances between the supporter sets of all projects.

    Projects nobody supports are dropped (with a warning).
    """
    support = {p: set(sup) for p, sup in e.supporters.items()}
    labels = tuple(p for p in e.projects if support[p])
    dropped = len(e.projects) - len(labels)
    if dropped:
        log.warning("%d project(s) without supporters left out of the distance matrix", dropped)
    if len(labels) < 2:
        raise TooFewProjects(f"need at least 2 supported projects, have {len(labels)}")
    rows = []
    for p in labels:
        rows.append(tuple(jaccard_distance(support[p], support[q]) for q in labels))
    return DistanceMatrix(labels, tuple(rows))


def normalize_distances(dm: DistanceMatrix, offset=Fraction(1, 2)) -> DistanceMatrix:
    """Shift distances down by ``offset`` and clip at zero."""
    offset = Fraction(offset)
    rows = tuple(tuple(max(Fraction(0), x - offset) for x in row) for row in dm.d)
    return DistanceMatrix(dm.labels, rows)


def raw_stress(d: np.ndarray, x: np.ndarray) -> float:
    diff = x[:, None, :] - x[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=-1))
    iu = np.triu_indices(len(d), k=1)
    return float(((d[iu] - dist[iu]) ** 2).sum())


def _guttman(d: np.ndarray, x: np.ndarray) -> np.ndarray:
    n = len(d)
    diff = x[:, None, :] - x[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=-1))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(dist > 0, d / dist, 0.0)
    b = -ratio
    np.fill_diagonal(b, 0.0)
    np.fill_diagonal(b, -b.sum(axis=1))
    return b @ x / n


def mds_embed(
    dm: DistanceMatrix,
    seed: int = 0,
    max_iter: int = 1000,
    tol: float = 1e-9,
) -> Embedding:
    """Embed ``dm`` in the plane by SMACOF stress majorization.

    Starts from points drawn uniformly from ``[-0.5, 0.5]^2`` with the given
    seed and iterates the Guttman transform until the relative decrease of
    raw stress drops below ``tol`` or ``max_iter`` is reached.
    """
    d = dm.as_array()
    n = len(d)
    if n == 0:
        return Embedding({}, 0.0, 0, seed)
    if not d.any():
        return Embedding({p: (0.0, 0.0) for p in dm.labels}, 0.0, 0, seed, (0.0,), degenerate=True)

    rng = np.random.default_rng(seed)
    x = rng.uniform(-0.5, 0.5, size=(n, 2))
    stress = raw_stress(d, x)
    history = [stress]
    it = 0
    for it in range(1, max_iter + 1):
        candidate = _guttman(d, x)
        new = raw_stress(d, candidate)
        if new > stress:
            # rounding noise at convergence; majorization cannot increase stress
            break
        x = candidate
        history.append(new)
        done = new <= 1e-30 or (stress - new) <= tol * stress
        stress = new
        if done:
            break
    coords = {p: (float(x[i, 0]), float(x[i, 1])) for i, p in enumerate(dm.labels)}
    return Embedding(coords, stress, it, seed, tuple(history))


def _status(pid: str, es: set, ug: set) -> str:
    if pid in es and pid in ug:
        return "both"
    if pid in es:
        return "es_only"
    if pid in ug:
        return "ug_only"
    return "neither"


def export_map(
    e: Election,
    positions_source: str,
    w_es: Iterable[str],
    w_ug: Iterable[str],
    embedding: Optional[Embedding] = None,
) -> list[MapDatum]:
    """One plottable record per project for a two-rule comparison map.

    Positions come from the projects' GPS data (``"gps"``, as ``(lon, lat)``)
    or from ``embedding`` (``"embedding"``). Disc radii are proportional to
    the square root of cost and of the number of supporters, scaled so the
    largest disc has radius 1.
    """
    es = set(getattr(w_es, "selected", w_es))
    ug = set(getattr(w_ug, "selected", w_ug))
    if positions_source == "gps":
        positions = {p: (proj.gps[1], proj.gps[0]) for p, proj in e.projects.items() if proj.gps}
    elif positions_source == "embedding":
        if embedding is None:
            raise NoPositions("embedding source requested without an embedding")
        positions = dict(embedding.coords)
    else:
        raise ValueError(f"unknown positions source {positions_source!r}")
    missing = [p for p in e.projects if p not in positions]
    if missing:
        log.warning("%d project(s) without a position omitted from the map", len(missing))
    plotted = [p for p in e.projects if p in positions]
    if not plotted:
        raise NoPositions("no project has a position")

    votes = {p: len(e.supporters[p]) for p in plotted}
    max_cost = max(e.projects[p].cost for p in plotted)
    max_votes = max(votes.values()) or 1
    out = []
    for p in plotted:
        out.append(
            MapDatum(
                project_id=p,
                position=positions[p],
                cost_radius=math.sqrt(e.projects[p].cost / max_cost),
                # unsupported projects still get a visible sliver
                votes_radius=math.sqrt(max(votes[p], 1e-4) / max_votes),
                status=_status(p, es, ug),
            )
        )
    return out
