"""Transport and distribution network data model and coverage-set generation.

Coverage semantics: journeys are round trips repeated day after day, so the
trip is treated as a closed cycle origin -> destination -> origin.  A node
covers a directed arc crossing when an EV that recharged to full at some
occurrence of that node on the cycle reaches the head of the arc without
the distance travelled exceeding the driving range.  Recharging at the head
itself does not help (the arc is already behind), which is why the set for
the last outbound arc excludes the destination.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

from .errors import InfeasibleArc, NoPath, SchemaError


@dataclass(frozen=True)
class TransportNetwork:
    nodes: tuple
    candidates: frozenset
    arcs: dict  # (j, k) -> length in miles, both directions present

    def __post_init__(self):
        for (j, k), length in self.arcs.items():
            if length <= 0:
                raise SchemaError(f"arc ({j},{k}) has non-positive length {length}")
            if (k, j) not in self.arcs:
                raise SchemaError(f"arc ({j},{k}) missing its reverse direction")
            if abs(self.arcs[(k, j)] - length) > 1e-9:
                raise SchemaError(f"arc ({j},{k}) length differs between directions")
        unknown = self.candidates - set(self.nodes)
        if unknown:
            raise SchemaError(f"candidate flags on unknown nodes {sorted(unknown)}")

    def neighbors(self, u):
        return [(k, l) for (j, k), l in self.arcs.items() if j == u]

    @staticmethod
    def from_edges(nodes, edges, candidates=None):
        """Build from undirected edges; each edge is expanded to two arcs."""
        arcs = {}
        for j, k, length in edges:
            arcs[(j, k)] = float(length)
            arcs[(k, j)] = float(length)
        cand = frozenset(candidates) if candidates is not None else frozenset(nodes)
        return TransportNetwork(tuple(nodes), cand, arcs)


@dataclass(frozen=True)
class ODPair:
    origin: object
    destination: object
    path_nodes: tuple
    round_trip_arcs: tuple   # forward arc sequence then the reversed sequence
    length: float            # one-way miles

    @property
    def key(self):
        return (self.origin, self.destination)


def shortest_path(tn: TransportNetwork, origin, destination) -> ODPair:
    """Minimum-length simple path; ties broken by smallest node sequence."""
    if origin == destination:
        raise ValueError("origin equals destination")
    if origin not in tn.nodes or destination not in tn.nodes:
        raise NoPath(f"{origin} or {destination} not in the network")
    d_from = _dijkstra(tn, origin)
    if destination not in d_from:
        raise NoPath(f"no path from {origin} to {destination}")
    d_to = _dijkstra(tn, destination)
    total = d_from[destination]
    # walk greedily, always taking the smallest next node that stays on a
    # shortest path; this yields the lexicographically smallest sequence
    path = [origin]
    u = origin
    seen = {origin}
    while u != destination:
        choices = []
        for v, w in tn.neighbors(u):
            if v in seen or v not in d_to:
                continue
            if abs(d_from[u] + w + d_to[v] - total) <= 1e-9 * max(1.0, total):
                choices.append(v)
        if not choices:
            raise NoPath(f"path reconstruction failed between {origin} and {destination}")
        u = min(choices)
        seen.add(u)
        path.append(u)
    forward = [(path[m], path[m + 1]) for m in range(len(path) - 1)]
    backward = [(k, j) for (j, k) in reversed(forward)]
    return ODPair(origin, destination, tuple(path), tuple(forward + backward), total)


def _dijkstra(tn, source):
    dist = {source: 0.0}
    heap = [(0.0, source)]
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist.get(u, float("inf")):
            continue
        for v, w in tn.neighbors(u):
            nd = d + w
            if nd < dist.get(v, float("inf")) - 1e-12:
                dist[v] = nd
                heapq.heappush(heap, (nd, v))
    return dist


@dataclass
class CoverageSets:
    """Map (od key, directed arc) -> frozenset of covering candidate nodes."""

    sets: dict = field(default_factory=dict)

    def get(self, od_key, arc):
        return self.sets[(od_key, arc)]

    def items(self):
        return self.sets.items()

    def for_od(self, od_key):
        return {arc: s for (key, arc), s in self.sets.items() if key == od_key}


def generate_coverage_sets(tn: TransportNetwork, od: ODPair, driving_range: float,
                           recharge_threshold: float = 0.0) -> CoverageSets:
    """Candidate nodes able to cover each arc crossing of the round trip.

    ``recharge_threshold`` reserves a fraction of the battery that drivers
    will not plan into; 0 reproduces the pure traversability rule.
    """
    if driving_range <= 0:
        raise ValueError("driving_range must be positive")
    usable = driving_range * (1.0 - recharge_threshold)
    # cumulative positions along the cycle
    cum = [0.0]
    pos = {od.path_nodes[0]: 0}
    for m in range(1, len(od.path_nodes)):
        j, k = od.path_nodes[m - 1], od.path_nodes[m]
        cum.append(cum[-1] + tn.arcs[(j, k)])
        pos[k] = m
    n = len(od.path_nodes)
    one_way = cum[-1]
    cycle = 2.0 * one_way
    # occurrence list over one cycle: outbound nodes then return nodes
    occ_nodes = list(od.path_nodes) + list(od.path_nodes[-2::-1])
    occ_cum = cum + [one_way + (one_way - cum[m]) for m in range(n - 2, -1, -1)]

    out = CoverageSets()
    for t in range(1, len(occ_nodes)):
        head_node, head_cum = occ_nodes[t], occ_cum[t]
        tail_node = occ_nodes[t - 1]
        covering = set()
        for o in range(len(occ_nodes)):
            node = occ_nodes[o]
            if node not in tn.candidates:
                continue
            back = head_cum - occ_cum[o]
            if back <= 0:
                back += cycle
            if back <= usable:
                covering.add(node)
        if not covering:
            raise InfeasibleArc(
                f"arc ({tail_node},{head_node}) on {od.key} admits no covering node "
                f"within range {usable:g}")
        out.sets[(od.key, (tail_node, head_node))] = frozenset(covering)
    return out


def brute_force_coverage(tn, od, driving_range, recharge_threshold=0.0):
    """Oracle: simulate the battery for every (arc, recharge occurrence).

    Walks the repeated round trip arc by arc from each candidate recharge
    occurrence and records whether the arc head is reached before the
    battery runs out.  Deliberately simple and independent of the closed
    form used by :func:`generate_coverage_sets`.
    """
    usable = driving_range * (1.0 - recharge_threshold)
    seq = list(od.round_trip_arcs)
    n_steps = len(seq)
    out = {}
    for t in range(n_steps):
        covering = set()
        for node in od.path_nodes:
            if node not in tn.candidates:
                continue
            if _can_cover(tn, seq, t, node, usable):
                covering.add(node)
        arc = seq[t]
        if not covering:
            raise InfeasibleArc(f"arc {arc} on {od.key} admits no covering node")
        out[(od.key, arc)] = frozenset(covering)
    return out


def _can_cover(tn, seq, target, node, usable):
    n_steps = len(seq)
    # try every occurrence of `node` as the recharge point: it is the tail
    # of some step, in this cycle or (wrapping) the previous one
    for start in range(n_steps):
        if seq[start][0] != node:
            continue
        dist = 0.0
        k = start
        for _ in range(n_steps):
            dist += tn.arcs[seq[k]]
            if dist > usable:
                break
            if k == target:
                return True
            k = (k + 1) % n_steps
    return False


def filter_od_pairs(od_list, driving_range: float, recharge_threshold: float):
    """Drop pairs whose round trip never takes the charge below the threshold.

    Starting full, the state of charge after the whole round trip is
    1 - 2*length/range; a pair is kept only if that dips strictly below
    the threshold somewhere, i.e. 2*length > (1-threshold)*range.
    """
    if not (0.0 < recharge_threshold <= 1.0):
        raise ValueError("recharge_threshold must lie in (0, 1]")
    keep = []
    for od in od_list:
        if 2.0 * od.length > (1.0 - recharge_threshold) * driving_range:
            keep.append(od)
    return keep


# ---------------------------------------------------------------------------
# distribution side
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DistributionLine:
    tail: object
    head: object
    r_pu: float
    x_pu: float
    p_rating_mw: float
    q_rating_mvar: float
    expandable: bool
    length_km: float

    @property
    def key(self):
        return (self.tail, self.head)


@dataclass(frozen=True)
class DistributionNetwork:
    nodes: tuple
    root: object
    sbase_mva: float
    vmin_sqr: dict
    vmax_sqr: dict
    lines: tuple
    sub_initial_mva: dict   # TN coupling node -> initial substation capacity

    def __post_init__(self):
        if self.root not in self.nodes:
            raise SchemaError(f"root {self.root} not a DN node")
        if len(self.lines) != len(self.nodes) - 1:
            raise SchemaError(
                f"not radial: {len(self.lines)} lines for {len(self.nodes)} nodes")
        adj = {n: [] for n in self.nodes}
        for ln in self.lines:
            if ln.r_pu < 0 or ln.x_pu < 0:
                raise SchemaError(f"line {ln.key} has negative impedance")
            adj[ln.tail].append(ln.head)
            adj[ln.head].append(ln.tail)
        seen = {self.root}
        stack = [self.root]
        while stack:
            u = stack.pop()
            for v in adj[u]:
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        if seen != set(self.nodes):
            raise SchemaError("distribution network is not connected")
        for n in self.nodes:
            if not self.vmin_sqr[n] < self.vmax_sqr[n]:
                raise SchemaError(f"voltage window empty at node {n}")


@dataclass(frozen=True)
class CouplingMap:
    tn_to_dn: dict

    def dn_of(self, tn_node):
        return self.tn_to_dn[tn_node]

    def tn_at(self, dn_node):
        return [i for i, n in self.tn_to_dn.items() if n == dn_node]


def build_od_pairs(tn, pairs, driving_range, recharge_threshold):
    """Shortest paths for the requested pairs, short round trips dropped."""
    ods = [shortest_path(tn, o, d) for o, d in pairs]
    return filter_od_pairs(ods, driving_range, recharge_threshold)


def coverage_for_instance(tn, od_pairs, driving_range):
    merged = CoverageSets()
    for od in od_pairs:
        cs = generate_coverage_sets(tn, od, driving_range)
        merged.sets.update(cs.sets)
    return merged
