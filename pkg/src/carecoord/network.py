"""Coordination networks over operational areas and their summary statistics."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .cocluster import CoClusterAssignment
from .datamodel import AreaUtilizationMatrix, DataError


@dataclass(frozen=True)
class CoordinationNetwork:
    nodes: tuple
    edges: tuple  # (a, b, w) with a != b, 0 < w <= 1

    def __post_init__(self):
        index = {n: i for i, n in enumerate(self.nodes)}
        if len(index) != len(self.nodes):
            raise ValueError("duplicate node ids")
        seen = set()
        for a, b, w in self.edges:
            if a == b:
                raise ValueError(f"self-loop on {a!r}")
            if a not in index or b not in index:
                raise ValueError(f"edge ({a!r}, {b!r}) has an endpoint outside the node set")
            key = frozenset((a, b))
            if key in seen:
                raise ValueError(f"parallel edge ({a!r}, {b!r})")
            seen.add(key)
            if not 0 < w <= 1:
                raise ValueError(f"edge weight {w} outside (0, 1]")

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def adjacency(self) -> list:
        """Neighbour lists indexed by node position."""
        index = {n: i for i, n in enumerate(self.nodes)}
        adj = [[] for _ in self.nodes]
        for a, b, w in self.edges:
            i, j = index[a], index[b]
            adj[i].append((j, w))
            adj[j].append((i, w))
        return adj

    def degrees(self) -> np.ndarray:
        return np.array([len(n) for n in self.adjacency()], dtype=np.int64)


@dataclass(frozen=True)
class NetworkMetrics:
    n_nodes: int
    avg_degree: float
    avg_weighted_degree: float
    density: float
    avg_clustering: float
    avg_path_length: float


@dataclass(frozen=True)
class CommunityPartition:
    community: dict
    modularity: float
    levels: tuple = field(default=())  # objective after each aggregation level

    @property
    def n_communities(self) -> int:
        return len(set(self.community.values()))


# ---------------------------------------------------------------------------

def build_network(aprime: AreaUtilizationMatrix, assignment: CoClusterAssignment, group,
                  tau: float = 0.1, min_actions: int = 1) -> CoordinationNetwork:
    """Cosine-similarity network among the areas active on one patient group."""
    if not 0 <= tau < 1:
        raise ValueError(f"tau must be in [0, 1), got {tau}")
    if min_actions < 1:
        raise ValueError("min_actions must be >= 1")
    members = set(assignment.patients_in(group))
    cols = [j for j, p in enumerate(aprime.patients) if p in members]
    if not cols:
        raise DataError(f"empty group {group!r}")
    sub = sp.csr_matrix(aprime.counts[:, cols], dtype=np.float64)
    totals = np.asarray(sub.sum(axis=1)).ravel()
    keep = np.flatnonzero(totals >= min_actions)
    sub = sub[keep]
    # Integer Gram entries keep parallel count vectors at exactly 1.0.
    gram = (sub @ sub.T).toarray()
    sq = np.diag(gram)
    cos = gram / np.sqrt(np.outer(sq, sq))
    nodes = tuple(aprime.areas[i] for i in keep)
    edges = []
    iu, ju = np.triu_indices(len(nodes), k=1)
    w = np.minimum(cos[iu, ju], 1.0)
    sel = (w >= tau) & (w > 0)
    for i, j, wij in zip(iu[sel], ju[sel], w[sel]):
        edges.append((nodes[i], nodes[j], float(wij)))
    return CoordinationNetwork(nodes, tuple(edges))


def avg_degree(net: CoordinationNetwork) -> float:
    if net.n_nodes < 1:
        raise ValueError("empty network")
    return 2.0 * net.n_edges / net.n_nodes


def avg_weighted_degree(net: CoordinationNetwork) -> float:
    if net.n_nodes < 1:
        raise ValueError("empty network")
    return 2.0 * sum(w for _, _, w in net.edges) / net.n_nodes


def density(net: CoordinationNetwork) -> float:
    n = net.n_nodes
    if n < 2:
        raise ValueError("density needs at least two nodes")
    return net.n_edges / (n * (n - 1) / 2.0)


def local_clustering(net: CoordinationNetwork) -> np.ndarray:
    nbrs = [set(j for j, _ in row) for row in net.adjacency()]
    out = np.zeros(net.n_nodes)
    for i, ns in enumerate(nbrs):
        d = len(ns)
        if d < 2:
            continue
        links = sum(len(nbrs[j] & ns) for j in ns) / 2
        out[i] = links / (d * (d - 1) / 2)
    return out


def avg_clustering(net: CoordinationNetwork) -> float:
    if net.n_nodes < 1:
        raise ValueError("empty network")
    return float(local_clustering(net).mean())


def avg_path_length(net: CoordinationNetwork) -> float:
    """Mean hop distance over unordered node pairs that are connected."""
    if net.n_nodes < 2:
        raise ValueError("path length needs at least two nodes")
    adj = [[j for j, _ in row] for row in net.adjacency()]
    total = 0
    pairs = 0
    for s in range(net.n_nodes):
        dist = {s: 0}
        queue = deque([s])
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if v not in dist:
                    dist[v] = dist[u] + 1
                    queue.append(v)
        for t, d in dist.items():
            if t > s:
                total += d
                pairs += 1
    if pairs == 0:
        raise DataError("no paths")
    return total / pairs


def metrics(net: CoordinationNetwork) -> NetworkMetrics:
    if net.n_nodes < 2:
        raise ValueError("metrics need at least two nodes")
    return NetworkMetrics(net.n_nodes, avg_degree(net), avg_weighted_degree(net), density(net),
                          avg_clustering(net), avg_path_length(net))


# ---------------------------------------------------------------------------
# modularity

def modularity(net: CoordinationNetwork, partition, resolution: float = 1.0) -> float:
    """Weighted Newman modularity of ``partition`` (node -> community, or a CommunityPartition)."""
    if isinstance(partition, CommunityPartition):
        partition = partition.community
    missing = [n for n in net.nodes if n not in partition]
    if missing:
        raise ValueError(f"partition does not cover node {missing[0]!r}")
    m = sum(w for _, _, w in net.edges)
    if m == 0:
        raise ValueError("modularity undefined on an edgeless graph")
    inside = {}
    tot = {}
    for a, b, w in net.edges:
        ca, cb = partition[a], partition[b]
        tot[ca] = tot.get(ca, 0.0) + w
        tot[cb] = tot.get(cb, 0.0) + w
        if ca == cb:
            inside[ca] = inside.get(ca, 0.0) + 2 * w
    return sum(inside.get(c, 0.0) / (2 * m) - resolution * (t / (2 * m)) ** 2 for c, t in tot.items())


class _Graph:
    """Weighted graph on nodes 0..n-1 with self-loops, used between Louvain levels."""

    def __init__(self, n, nbrs, loops):
        self.n = n
        self.nbrs = nbrs          # list of dict neighbour -> weight (no self entries)
        self.loops = loops        # self-loop weight per node, counted once
        self.strength = np.array([sum(nb.values()) + 2 * loops[i] for i, nb in enumerate(nbrs)])
        self.m2 = float(self.strength.sum())

    def quality(self, comm, resolution):
        inside = np.zeros(self.n)
        tot = np.bincount(comm, weights=self.strength, minlength=self.n)
        for i in range(self.n):
            inside[comm[i]] += 2 * self.loops[i]
            for j, w in self.nbrs[i].items():
                if comm[j] == comm[i]:
                    inside[comm[i]] += w
        return float((inside / self.m2).sum() - resolution * ((tot / self.m2) ** 2).sum())

    def aggregate(self, comm):
        k = int(comm.max()) + 1
        nbrs = [dict() for _ in range(k)]
        loops = np.zeros(k)
        for i in range(self.n):
            ci = comm[i]
            loops[ci] += self.loops[i]
            for j, w in self.nbrs[i].items():
                cj = comm[j]
                if ci == cj:
                    loops[ci] += w / 2  # each internal edge is seen from both ends
                else:
                    nbrs[ci][cj] = nbrs[ci].get(cj, 0.0) + w
        return _Graph(k, nbrs, loops)


def _one_level(g: _Graph, rng, resolution, eps=1e-12):
    comm = np.arange(g.n)
    tot = g.strength.copy()
    order = rng.permutation(g.n)
    improved = False
    while True:
        moved = 0
        for i in order:
            ci = comm[i]
            ki = g.strength[i]
            links = {}
            for j, w in g.nbrs[i].items():
                links[comm[j]] = links.get(comm[j], 0.0) + w
            tot[ci] -= ki
            # Gain of inserting i into c, up to a constant factor.
            stay = links.get(ci, 0.0) - resolution * tot[ci] * ki / g.m2
            best_c, best_gain = ci, stay
            for c in sorted(links):
                if c == ci:
                    continue
                gain = links[c] - resolution * tot[c] * ki / g.m2
                if gain > best_gain + eps:
                    best_c, best_gain = c, gain
            tot[best_c] += ki
            if best_c != ci:
                comm[i] = best_c
                moved += 1
        if moved == 0:
            break
        improved = True
    _, comm = np.unique(comm, return_inverse=True)
    return comm, improved


def louvain(net: CoordinationNetwork, seed: int = 0, resolution: float = 1.0) -> CommunityPartition:
    """Multi-level greedy modularity optimization.

    Nodes are visited in a seed-shuffled order; a node moves only on a strict
    gain and equal gains go to the lowest community id.
    """
    if net.n_edges == 0:
        raise ValueError("louvain needs at least one edge")
    rng = np.random.default_rng(seed)
    index = {n: i for i, n in enumerate(net.nodes)}
    nbrs = [dict() for _ in net.nodes]
    for a, b, w in net.edges:
        nbrs[index[a]][index[b]] = w
        nbrs[index[b]][index[a]] = w
    g = _Graph(net.n_nodes, nbrs, np.zeros(net.n_nodes))
    membership = np.arange(net.n_nodes)
    levels = [g.quality(np.arange(g.n), resolution)]
    while True:
        comm, improved = _one_level(g, rng, resolution)
        if not improved:
            break
        membership = comm[membership]
        g = g.aggregate(comm)
        levels.append(g.quality(np.arange(g.n), resolution))
        if g.n == 1:
            break
    # Renumber communities by first appearance in node order.
    first = {}
    for c in membership:
        first.setdefault(int(c), len(first))
    community = {n: first[int(membership[i])] for i, n in enumerate(net.nodes)}
    return CommunityPartition(community, modularity(net, community), tuple(levels))
