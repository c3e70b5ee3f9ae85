"""Range-limited sample sharing between CAVs and clique-cover diagnostics of the neighbor graph."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import Batch, ReplayBuffer
from .traffic import WorldState

EXACT_LIMIT = 16


@dataclass
class CommGraph:
    n: int
    adj: np.ndarray  # (n, n) bool, symmetric, zero diagonal
    d: float = 0.0

    def __post_init__(self):
        self.adj = np.asarray(self.adj, dtype=bool)
        if self.adj.shape != (self.n, self.n):
            raise ValueError("adjacency must be n x n")
        if not np.array_equal(self.adj, self.adj.T):
            raise ValueError("adjacency must be symmetric")
        if self.adj.diagonal().any():
            raise ValueError("self-loops are not allowed")

    @classmethod
    def from_edges(cls, n, edges, d=0.0) -> "CommGraph":
        adj = np.zeros((n, n), dtype=bool)
        for i, j in edges:
            adj[i, j] = adj[j, i] = True
        return cls(n, adj, d)

    @property
    def edges(self) -> list[tuple[int, int]]:
        i, j = np.nonzero(np.triu(self.adj, 1))
        return list(zip(i.tolist(), j.tolist()))

    def neighbors(self, i) -> list[int]:
        return np.flatnonzero(self.adj[i]).tolist()

    def is_clique(self, block) -> bool:
        block = list(block)
        return all(self.adj[a, b] for k, a in enumerate(block) for b in block[k + 1:])


def graph_from_positions(xy, d: float) -> CommGraph:
    xy = np.asarray(xy, dtype=np.float64)
    if d < 0:
        raise ValueError("communication range must be non-negative")
    diff = xy[:, None, :] - xy[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=-1))
    adj = dist <= d
    np.fill_diagonal(adj, False)
    if d == 0:
        adj[:] = False
    return CommGraph(len(xy), adj, d)


def build_graph(world: WorldState, d: float) -> CommGraph:
    """Neighbor graph over the CAVs (indexed 0..I-1 in CAV order) by planar distance."""
    x, y = world.positions()
    ids = world.cav_ids
    return graph_from_positions(np.column_stack([x[ids], y[ids]]), d)


def exchange(buffers: list[ReplayBuffer], graph: CommGraph, tails: list[Batch]) -> int:
    """Send each agent's episode tail to its neighbors.

    ``tails[i]`` is agent i's own data from the episode just finished.  Each
    tail is counted once per receiving neighbor; keys on the receiving side
    keep repeated deliveries from creating duplicates.  Returns the overhead.
    """
    if len(buffers) != graph.n or len(tails) != graph.n:
        raise ValueError("need one buffer and one tail per agent")
    overhead = 0
    for i in range(graph.n):
        for j in graph.neighbors(i):
            buffers[i].add_batch(tails[j], keyed=True)
            overhead += len(tails[j])
    return overhead


@dataclass
class CliqueCover:
    cliques: list[list[int]]
    exact: bool = True

    @property
    def size(self) -> int:
        return len(self.cliques)

    def is_valid(self, graph: CommGraph) -> bool:
        seen = sorted(v for c in self.cliques for v in c)
        return seen == list(range(graph.n)) and all(graph.is_clique(c) for c in self.cliques)


def _greedy_coloring(conflict: np.ndarray, order) -> list[int]:
    colors = [-1] * len(conflict)
    for v in order:
        used = {colors[u] for u in np.flatnonzero(conflict[v]) if colors[u] >= 0}
        c = 0
        while c in used:
            c += 1
        colors[v] = c
    return colors


def _exact_coloring(conflict: np.ndarray) -> list[int]:
    """Minimum proper coloring by branch and bound over a degree-sorted vertex order."""
    n = len(conflict)
    order = sorted(range(n), key=lambda v: -int(conflict[v].sum()))
    best = _greedy_coloring(conflict, order)
    best_k = max(best) + 1 if n else 0
    colors = [-1] * n

    def search(pos, k):
        nonlocal best, best_k
        if k >= best_k:
            return
        if pos == n:
            best, best_k = list(colors), k
            return
        v = order[pos]
        used = {colors[u] for u in np.flatnonzero(conflict[v]) if colors[u] >= 0}
        for c in range(k):
            if c not in used:
                colors[v] = c
                search(pos + 1, k)
        colors[v] = k
        search(pos + 1, k + 1)
        colors[v] = -1

    search(0, 0)
    return best


def min_clique_cover(graph: CommGraph) -> CliqueCover:
    """Minimum partition of the vertices into cliques (coloring of the complement)."""
    comp = ~graph.adj
    np.fill_diagonal(comp, False)
    if graph.n == 0:
        return CliqueCover([], True)
    exact = graph.n <= EXACT_LIMIT
    if exact:
        colors = _exact_coloring(comp)
    else:
        colors = _greedy_coloring(comp, sorted(range(graph.n), key=lambda v: -int(comp[v].sum())))
    blocks: dict[int, list[int]] = {}
    for v, c in enumerate(colors):
        blocks.setdefault(c, []).append(v)
    return CliqueCover([blocks[c] for c in sorted(blocks)], exact)


def clique_cover_by_enumeration(graph: CommGraph) -> int:
    """Smallest clique partition found by trying every set partition (small graphs only)."""
    best = graph.n

    def rec(v, blocks):
        nonlocal best
        if len(blocks) >= best:
            return
        if v == graph.n:
            best = len(blocks)
            return
        for b in blocks:
            if all(graph.adj[v, u] for u in b):
                b.append(v)
                rec(v + 1, blocks)
                b.pop()
        blocks.append([v])
        rec(v + 1, blocks)
        blocks.pop()

    if graph.n == 0:
        return 0
    rec(0, [])
    return best


def sqrt_size_sum(cover: CliqueCover) -> float:
    return float(sum(math.sqrt(len(c)) for c in cover.cliques))


@dataclass
class OverheadLog:
    rows: list = field(default_factory=list)

    def record(self, d, episode, transitions_tx, chi_bar) -> None:
        self.rows.append((float(d), int(episode), int(transitions_tx), int(chi_bar)))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["d", "episode", "transitions_tx", "chi_bar"])
            for d, ep, tx, chi in self.rows:
                w.writerow([_fmt_d(d), ep, tx, chi])

    @classmethod
    def read_csv(cls, path) -> "OverheadLog":
        out = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                out.record(float(row["d"]), int(row["episode"]), int(row["transitions_tx"]), int(row["chi_bar"]))
        return out


def _fmt_d(d: float) -> str:
    return str(int(d)) if float(d).is_integer() else repr(float(d))


def overhead_report(log: OverheadLog) -> list[tuple[float, float]]:
    """Mean per-episode transmitted transitions for each communication range, sorted by range."""
    by_d: dict[float, list[int]] = {}
    for d, _, tx, _ in log.rows:
        by_d.setdefault(d, []).append(tx)
    return [(d, float(np.mean(v))) for d, v in sorted(by_d.items())]


def write_edge_list(graph: CommGraph, path) -> None:
    lines = [f"# n={graph.n} d={_fmt_d(graph.d)}"] + [f"{i} {j}" for i, j in graph.edges]
    Path(path).write_text("\n".join(lines) + "\n")


def read_edge_list(path) -> CommGraph:
    lines = Path(path).read_text().splitlines()
    head = dict(kv.split("=") for kv in lines[0].lstrip("# ").split())
    edges = [tuple(int(t) for t in ln.split()) for ln in lines[1:] if ln.strip()]
    return CommGraph.from_edges(int(head["n"]), edges, float(head["d"]))
