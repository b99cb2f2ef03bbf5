"""Sampled region graph with O(sqrt n) degree and diameter at most 2.

Construction:

1. the ``r = floor(sqrt n)`` regions with the largest total similarity become hubs;
2. hubs, in selection order, each claim their ``r - 1`` most similar unclaimed
   non-hub regions as children (child position j = j-th most similar);
3. children of one hub form a clique, and children at the same position are
   linked across hubs;
4. if n is not a perfect square, each leftover region links to every hub,
   otherwise one seeded hub (the star hub) links to the other hubs.

Ties are broken toward the lower region index.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .numkern import EdgeIndex
from .similarity import SimilarityMatrix


@dataclass(frozen=True)
class RegionGraph:
    n: int
    adjacency: tuple[tuple[int, ...], ...]
    hubs: tuple[int, ...] = ()
    children: dict[int, tuple[int, ...]] = field(default_factory=dict)
    leftovers: tuple[int, ...] = ()
    star_hub: int | None = None
    seed: int | None = None

    @classmethod
    def from_edges(cls, n: int, edges, **roles) -> "RegionGraph":
        nbrs: list[set[int]] = [set() for _ in range(n)]
        for i, j in edges:
            if i == j:
                raise ValueError(f"self-loop at {i}")
            if not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"edge ({i}, {j}) out of range for {n} nodes")
            nbrs[i].add(j)
            nbrs[j].add(i)
        return cls(n, tuple(tuple(sorted(s)) for s in nbrs), **roles)

    @classmethod
    def from_matrix(cls, linked: np.ndarray, **roles) -> "RegionGraph":
        """Graph from a boolean matrix; either triangle marks an edge and the diagonal is ignored."""
        sym = np.asarray(linked, dtype=bool)
        sym = sym | sym.T
        np.fill_diagonal(sym, False)
        return cls(sym.shape[0], tuple(tuple(int(j) for j in np.flatnonzero(row)) for row in sym), **roles)

    def edges(self) -> list[tuple[int, int]]:
        return [(i, j) for i in range(self.n) for j in self.adjacency[i] if i < j]

    @property
    def num_edges(self) -> int:
        return sum(len(a) for a in self.adjacency) // 2

    def degrees(self) -> np.ndarray:
        return np.array([len(a) for a in self.adjacency], dtype=np.int64)

    def edge_index(self) -> EdgeIndex:
        return EdgeIndex.from_adjacency(self.adjacency)

    def to_json(self) -> str:
        doc = {
            "n": self.n,
            "seed": self.seed,
            "hubs": list(self.hubs),
            "children": {str(h): list(c) for h, c in self.children.items()},
            "leftovers": list(self.leftovers),
            "star_hub": self.star_hub,
            "edges": [list(e) for e in self.edges()],
        }
        return json.dumps(doc, separators=(",", ":")) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RegionGraph":
        doc = json.loads(text)
        return cls.from_edges(
            doc["n"],
            [tuple(e) for e in doc["edges"]],
            hubs=tuple(doc.get("hubs", ())),
            children={int(h): tuple(c) for h, c in doc.get("children", {}).items()},
            leftovers=tuple(doc.get("leftovers", ())),
            star_hub=doc.get("star_hub"),
            seed=doc.get("seed"),
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "RegionGraph":
        return cls.from_json(Path(path).read_text())


def degree_bound(n: int) -> int:
    r = math.isqrt(n)
    return max(2 * r - 2, n - r * r + r - 1)


def _ranked(scores: np.ndarray, candidates) -> list[int]:
    """Candidates sorted by descending score, lower index first on ties."""
    cand = np.asarray(sorted(candidates), dtype=np.int64)
    order = np.lexsort((cand, -scores[cand]))
    return [int(c) for c in cand[order]]


def build_graph(sim: SimilarityMatrix | np.ndarray, seed: int = 0) -> RegionGraph:
    m = np.asarray(sim.values if isinstance(sim, SimilarityMatrix) else sim, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DataError(f"similarity matrix must be square, got shape {m.shape}")
    n = m.shape[0]
    if n < 4:
        raise DataError(f"region graph needs n >= 4, got {n}; use complete_graph() for tiny grids")
    r = math.isqrt(n)
    off_diag = m.sum(axis=1) - np.diag(m)
    hubs = _ranked(off_diag, range(n))[:r]

    claimed = set(hubs)
    children: dict[int, tuple[int, ...]] = {}
    for h in hubs:
        picks = _ranked(m[h], set(range(n)) - claimed)[: r - 1]
        children[h] = tuple(picks)
        claimed.update(picks)
    leftovers = tuple(sorted(set(range(n)) - claimed))

    # every hub gets exactly r - 1 children because n >= r * r
    kids = np.array([children[h] for h in hubs], dtype=np.int64).reshape(r, r - 1)
    linked = np.zeros((n, n), dtype=bool)
    for row, h in enumerate(hubs):
        linked[h, kids[row]] = True
        linked[np.ix_(kids[row], kids[row])] = True
    for pos in range(r - 1):
        linked[np.ix_(kids[:, pos], kids[:, pos])] = True

    star = None
    if leftovers:
        linked[np.ix_(list(leftovers), hubs)] = True
    else:
        star = hubs[int(np.random.default_rng(seed).integers(r))]
        linked[star, hubs] = True

    return RegionGraph.from_matrix(
        linked, hubs=tuple(hubs), children=children, leftovers=leftovers, star_hub=star, seed=seed
    )


def complete_graph(n: int) -> RegionGraph:
    """Fallback for grids too small for the sampler (n < 4)."""
    if n < 2:
        raise DataError("a graph needs at least two regions")
    return RegionGraph.from_edges(n, [(i, j) for i in range(n) for j in range(i + 1, n)])


def neighbors(graph: RegionGraph, i: int) -> tuple[int, ...]:
    if not 0 <= i < graph.n:
        raise IndexError(f"region {i} out of range for {graph.n} regions")
    return graph.adjacency[i]


@dataclass(frozen=True)
class ValidationReport:
    n: int
    max_degree: int
    degree_bound: int
    diameter: float  # inf when disconnected
    connected: bool
    num_edges: int
    edge_budget: float
    symmetric: bool

    @property
    def degree_ok(self) -> bool:
        return self.max_degree <= self.degree_bound

    @property
    def diameter_ok(self) -> bool:
        return self.connected and self.diameter <= 2

    @property
    def edges_ok(self) -> bool:
        return self.num_edges <= self.edge_budget

    @property
    def passed(self) -> bool:
        return self.symmetric and self.degree_ok and self.diameter_ok and self.edges_ok

    def lines(self) -> list[str]:
        mark = lambda ok: "ok" if ok else "FAIL"  # noqa: E731
        return [
            f"nodes           {self.n}",
            f"max degree      {self.max_degree} (bound {self.degree_bound}) {mark(self.degree_ok)}",
            f"diameter        {self.diameter} (bound 2) {mark(self.diameter_ok)}",
            f"connected       {self.connected}",
            f"edges           {self.num_edges} (budget {self.edge_budget:.1f}) {mark(self.edges_ok)}",
            f"undirected      {self.symmetric}",
            f"result          {'PASS' if self.passed else 'FAIL'}",
        ]


def adjacency_matrix(adjacency) -> np.ndarray:
    """Directed 0/1 matrix with a one at (i, j) for every j listed under i."""
    n = len(adjacency)
    mat = np.zeros((n, n))
    for i, nb in enumerate(adjacency):
        mat[i, list(nb)] = 1.0
    return mat


def hop_diameter(mat: np.ndarray) -> float:
    """Largest shortest-path length, grown one hop at a time by matrix products; inf if disconnected."""
    n = mat.shape[0]
    reach = np.eye(n, dtype=bool)
    hops = 0
    while not reach.all():
        grown = reach | (reach.astype(float) @ mat > 0)
        if np.array_equal(grown, reach):
            return math.inf
        reach, hops = grown, hops + 1
    return float(hops)


def validate(graph: RegionGraph) -> ValidationReport:
    mat = adjacency_matrix(graph.adjacency)
    symmetric = bool(np.array_equal(mat, mat.T) and not np.diag(mat).any())
    diameter = hop_diameter(mat)
    return ValidationReport(
        n=graph.n,
        max_degree=int(graph.degrees().max()),
        degree_bound=degree_bound(graph.n),
        diameter=diameter,
        connected=math.isfinite(diameter),
        num_edges=graph.num_edges,
        edge_budget=1.5 * graph.n * math.sqrt(graph.n),
        symmetric=symmetric,
    )
