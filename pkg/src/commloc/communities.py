"""Ego-network extraction and flow-based community detection.

Communities are found per ego network (the induced graph over one user's
friends, the user removed) by minimizing the two-level map equation: the
expected per-step description length, in nats, of a random walk encoded with
one index codebook across modules and one codebook per module.  Visit rates
are the stationary distribution of an unweighted undirected walk, i.e.
degree / 2m, with no teleportation.

For a partition M with module exit rates q_i = (boundary edges of i) / 2m and
within-module rates p_a = deg(a) / 2m:

    L(M) = q H(Q) + sum_i (q_i + s_i) H(P_i)

where q = sum q_i, s_i = sum of p_a inside module i, H(Q) is the entropy of
the normalized exit rates and H(P_i) the entropy of the normalized
(exit + member visit) rates of module i.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Collection, Iterable, Mapping, Sequence, TextIO

from .corpus import SocialGraph, UnknownUserError

# merges / moves must beat this improvement, in nats, to be accepted
MIN_GAIN_NATS = 1e-12
_MAX_REFINE_PASSES = 64


def _g(x: float) -> float:
    # x ln x with the 0 ln 0 := 0 convention
    return x * math.log(x) if x > 0.0 else 0.0


@dataclass(frozen=True)
class EgoNetwork:
    """Induced friendship graph over one user's friends (the owner excluded)."""

    owner: str
    nodes: tuple[str, ...]
    edges: tuple[tuple[str, str], ...]

    def adjacency(self) -> dict[str, set[str]]:
        adj: dict[str, set[str]] = {a: set() for a in self.nodes}
        for a, b in self.edges:
            adj[a].add(b)
            adj[b].add(a)
        return adj

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)


@dataclass(frozen=True)
class CommunityPartition:
    """Disjoint cover of an ego network's nodes, normalized for stable output:
    communities ordered by (size desc, smallest member), members sorted."""

    owner: str
    communities: tuple[tuple[str, ...], ...]

    @classmethod
    def from_groups(cls, owner: str, groups: Iterable[Collection[str]]) -> "CommunityPartition":
        normd = sorted(
            (tuple(sorted(g)) for g in groups if g),
            key=lambda c: (-len(c), c[0]),
        )
        return cls(owner, tuple(normd))

    @property
    def n_communities(self) -> int:
        return len(self.communities)

    def sizes(self) -> list[int]:
        return [len(c) for c in self.communities]

    def member_index(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for idx, comm in enumerate(self.communities):
            for a in comm:
                out[a] = idx
        return out


@dataclass(frozen=True)
class CommunityStats:
    size: int
    internal_edges: int
    connectivity: float  # internal edge density in [0, 1]
    total_checkins: int
    n_fma: int


def ego_network(graph: SocialGraph, user_id: str) -> EgoNetwork:
    """Ego network of a user: friends as nodes, friend-friend links as edges."""
    friends = graph.friends(user_id)  # raises UnknownUserError
    fset = set(friends)
    edges = []
    for a in friends:
        for b in graph.neighbors(a):
            if b in fset and a < b:
                edges.append((a, b))
    return EgoNetwork(user_id, tuple(friends), tuple(sorted(edges)))


def map_equation_length(
    net: EgoNetwork, partition: Sequence[Collection[str]]
) -> float:
    """Two-level map equation length L(M) in nats for a candidate partition.

    The partition must cover net.nodes exactly once; the network must have at
    least one edge (callers handle edgeless networks separately).
    """
    if not net.edges:
        raise ValueError("map_equation_length needs a network with at least one edge")
    node_mod: dict[str, int] = {}
    for idx, module in enumerate(partition):
        for a in module:
            if a in node_mod:
                raise ValueError(f"node {a!r} appears in more than one module")
            node_mod[a] = idx
    if set(node_mod) != set(net.nodes):
        raise ValueError("partition does not cover the network's nodes exactly")

    two_m = 2.0 * len(net.edges)
    deg = Counter()
    w_exit = Counter()
    for a, b in net.edges:
        deg[a] += 1
        deg[b] += 1
        if node_mod[a] != node_mod[b]:
            w_exit[node_mod[a]] += 1
            w_exit[node_mod[b]] += 1

    n_modules = len(partition)
    q = [w_exit[i] / two_m for i in range(n_modules)]
    s = [0.0] * n_modules
    t = [0.0] * n_modules  # sum of p_a ln p_a per module
    for a in net.nodes:
        p = deg[a] / two_m
        s[node_mod[a]] += p
        t[node_mod[a]] += _g(p)

    q_tot = sum(q)
    length = _g(q_tot)
    for i in range(n_modules):
        length += _g(q[i] + s[i]) - 2.0 * _g(q[i]) - t[i]
    return length


class _Greedy:
    """Mutable module state for greedy map-equation minimization."""

    def __init__(self, net: EgoNetwork):
        self.nodes = net.nodes
        self.adj = net.adjacency()
        self.two_m = 2.0 * len(net.edges)
        self.deg = {a: len(self.adj[a]) for a in self.nodes}
        self.p = {a: self.deg[a] / self.two_m for a in self.nodes}
        self.mod_of = {a: i for i, a in enumerate(self.nodes)}
        self.s = {i: self.p[a] for i, a in enumerate(self.nodes)}
        self.w = {i: float(self.deg[a]) for i, a in enumerate(self.nodes)}
        self.members: dict[int, set[str]] = {i: {a} for i, a in enumerate(self.nodes)}
        self.e_between: dict[tuple[int, int], int] = {}
        for a, b in net.edges:
            key = self._key(self.mod_of[a], self.mod_of[b])
            self.e_between[key] = self.e_between.get(key, 0) + 1
        self.q_tot = sum(self.w.values()) / self.two_m

    @staticmethod
    def _key(i: int, j: int) -> tuple[int, int]:
        return (i, j) if i < j else (j, i)

    def merge_delta(self, i: int, j: int, e_ij: int) -> float:
        qi = self.w[i] / self.two_m
        qj = self.w[j] / self.two_m
        qij = (self.w[i] + self.w[j] - 2.0 * e_ij) / self.two_m
        qt_new = self.q_tot - qi - qj + qij
        return (
            _g(qt_new)
            - _g(self.q_tot)
            - 2.0 * (_g(qij) - _g(qi) - _g(qj))
            + _g(qij + self.s[i] + self.s[j])
            - _g(qi + self.s[i])
            - _g(qj + self.s[j])
        )

    def merge(self, i: int, j: int) -> None:
        # keep the lower id
        if i > j:
            i, j = j, i
        e_ij = self.e_between.pop((i, j), 0)
        qi = self.w[i] / self.two_m
        qj = self.w[j] / self.two_m
        self.w[i] = self.w[i] + self.w[j] - 2.0 * e_ij
        self.s[i] += self.s[j]
        self.q_tot += self.w[i] / self.two_m - qi - qj
        self.members[i] |= self.members[j]
        for a in self.members[j]:
            self.mod_of[a] = i
        del self.members[j], self.w[j], self.s[j]
        for key in [k for k in self.e_between if j in k]:
            cnt = self.e_between.pop(key)
            other = key[0] if key[1] == j else key[1]
            if other == i:
                continue
            nk = self._key(i, other)
            self.e_between[nk] = self.e_between.get(nk, 0) + cnt

    def merge_phase(self) -> None:
        while True:
            best_pair = None
            best_delta = -MIN_GAIN_NATS
            for (i, j) in sorted(self.e_between):
                e = self.e_between[(i, j)]
                if e <= 0:
                    continue
                d = self.merge_delta(i, j, e)
                if d < best_delta:
                    best_delta = d
                    best_pair = (i, j)
            if best_pair is None:
                return
            self.merge(*best_pair)

    def move_delta(self, a: str, cur: int, tgt: int, k_cur: int, k_tgt: int) -> float:
        pa = self.p[a]
        qc = self.w[cur] / self.two_m
        qt = self.w[tgt] / self.two_m
        qc_new = (self.w[cur] + 2.0 * k_cur - self.deg[a]) / self.two_m
        qt_new = (self.w[tgt] + self.deg[a] - 2.0 * k_tgt) / self.two_m
        qtot_new = self.q_tot + (qc_new - qc) + (qt_new - qt)
        return (
            _g(qtot_new)
            - _g(self.q_tot)
            - 2.0 * (_g(qc_new) + _g(qt_new) - _g(qc) - _g(qt))
            + _g(qc_new + self.s[cur] - pa)
            + _g(qt_new + self.s[tgt] + pa)
            - _g(qc + self.s[cur])
            - _g(qt + self.s[tgt])
        )

    def move(self, a: str, tgt: int) -> None:
        cur = self.mod_of[a]
        k_by_mod = Counter(self.mod_of[b] for b in self.adj[a])
        k_cur = k_by_mod.get(cur, 0)
        k_tgt = k_by_mod.get(tgt, 0)
        qc = self.w[cur] / self.two_m
        qt = self.w[tgt] / self.two_m
        self.w[cur] += 2.0 * k_cur - self.deg[a]
        self.w[tgt] += self.deg[a] - 2.0 * k_tgt
        self.q_tot += (self.w[cur] / self.two_m - qc) + (self.w[tgt] / self.two_m - qt)
        self.s[cur] -= self.p[a]
        self.s[tgt] += self.p[a]
        self.members[cur].discard(a)
        self.members[tgt].add(a)
        self.mod_of[a] = tgt
        for b in self.adj[a]:
            mb = self.mod_of[b]
            if mb != cur:
                key = self._key(cur, mb)
                left = self.e_between.get(key, 0) - 1
                if left > 0:
                    self.e_between[key] = left
                else:
                    self.e_between.pop(key, None)
            if mb != tgt:
                nk = self._key(tgt, mb)
                self.e_between[nk] = self.e_between.get(nk, 0) + 1
        if not self.members[cur]:
            del self.members[cur], self.w[cur], self.s[cur]

    def refine_phase(self) -> None:
        for _ in range(_MAX_REFINE_PASSES):
            moved = False
            for a in self.nodes:
                if self.deg[a] == 0:
                    continue
                cur = self.mod_of[a]
                k_by_mod = Counter(self.mod_of[b] for b in self.adj[a])
                k_cur = k_by_mod.get(cur, 0)
                best_tgt = None
                best_delta = -MIN_GAIN_NATS
                for tgt in sorted(k_by_mod):
                    if tgt == cur:
                        continue
                    d = self.move_delta(a, cur, tgt, k_cur, k_by_mod[tgt])
                    if d < best_delta:
                        best_delta = d
                        best_tgt = tgt
                if best_tgt is not None:
                    self.move(a, best_tgt)
                    moved = True
            if not moved:
                return

    def groups(self) -> list[set[str]]:
        return [set(v) for v in self.members.values()]


def detect_communities(net: EgoNetwork, seed: int = 0) -> CommunityPartition:
    """Partition an ego network into communities by greedy map-equation search.

    Starts from singletons, repeatedly applies the connected module merge with
    the largest description-length decrease, then refines by single-node moves
    until no move improves the length by more than MIN_GAIN_NATS.  The
    procedure is deterministic; ``seed`` is accepted for interface stability.

    Isolated friends (degree 0) always end up as singleton communities; an
    empty ego network yields an empty partition.
    """
    del seed
    if not net.nodes:
        return CommunityPartition(net.owner, ())
    if not net.edges:
        return CommunityPartition.from_groups(net.owner, [{a} for a in net.nodes])
    state = _Greedy(net)
    state.merge_phase()
    state.refine_phase()
    return CommunityPartition.from_groups(net.owner, state.groups())


def community_stats(
    members: Collection[str],
    net: EgoNetwork,
    checkin_counts: Mapping[str, int],
    n_fma: int,
) -> CommunityStats:
    """Size, internal connectivity, pooled check-in count, and area count."""
    mset = set(members)
    size = len(mset)
    internal = sum(1 for a, b in net.edges if a in mset and b in mset)
    pairs = size * (size - 1) // 2
    connectivity = internal / pairs if pairs else 0.0
    total = sum(checkin_counts.get(a, 0) for a in mset)
    return CommunityStats(size, internal, connectivity, total, n_fma)


def dump_partitions(partitions: Iterable[CommunityPartition], stream: TextIO) -> None:
    """Write partitions as 'owner<TAB>friend<TAB>community_index' lines."""
    for part in sorted(partitions, key=lambda p: p.owner):
        for idx, comm in enumerate(part.communities):
            for friend in comm:
                stream.write(f"{part.owner}\t{friend}\t{idx}\n")


def load_partitions(stream: Iterable[str]) -> dict[str, CommunityPartition]:
    """Inverse of dump_partitions."""
    grouped: dict[str, dict[int, set[str]]] = {}
    for ln, line in enumerate(stream, 1):
        line = line.strip()
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"bad partition line {ln}: {line!r}")
        owner, friend, idx = parts
        grouped.setdefault(owner, {}).setdefault(int(idx), set()).add(friend)
    return {
        owner: CommunityPartition.from_groups(owner, by_idx.values())
        for owner, by_idx in grouped.items()
    }
