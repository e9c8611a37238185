"""
Communication topology of the platoon.

Vertices are 0 (the virtual leader) and followers 1..N. An edge (j, i) means
vehicle i receives vehicle j's assumed trajectory.
"""

import logging
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict

from .errors import ContractViolation, TopologyError

logger = logging.getLogger(__name__)

Edge = Tuple[int, int]

GENERATORS = ("pf", "bd", "two-pred", "leader-broadcast")


class TopologyGraph:
    """Immutable directed graph over vehicles 0..n_followers."""

    def __init__(self, n_followers: int, edges: Iterable[Edge]):
        if n_followers < 1:
            raise ContractViolation(f"a platoon needs at least one follower, got N={n_followers}")
        edge_set = set()
        for j, i in edges:
            j, i = int(j), int(i)
            if j == i:
                raise ContractViolation(f"self-loop on vehicle {i}")
            if not (0 <= j <= n_followers and 0 <= i <= n_followers):
                raise ContractViolation(f"edge ({j}, {i}) references a vehicle outside 0..{n_followers}")
            if i == 0:
                raise ContractViolation(f"edge ({j}, 0): the virtual leader receives nothing")
            edge_set.add((j, i))
        self.n_followers = n_followers
        self.edges: FrozenSet[Edge] = frozenset(edge_set)

    def __repr__(self) -> str:
        return f"TopologyGraph(N={self.n_followers}, edges={sorted(self.edges)})"

    def __eq__(self, other) -> bool:
        return isinstance(other, TopologyGraph) and (self.n_followers, self.edges) == (other.n_followers, other.edges)

    def __hash__(self) -> int:
        return hash((self.n_followers, self.edges))

    def followers(self) -> range:
        return range(1, self.n_followers + 1)


def generate(kind: str, n_followers: int, extra_edges: Sequence[Edge] = ()) -> TopologyGraph:
    """
    Build one of the named topologies, optionally with extra edges.

    pf               each i hears i-1
    bd               each i hears i-1 and i+1
    two-pred         each i hears i-1 and i-2 (vehicle 1 hears only the leader)
    leader-broadcast each i hears the leader
    custom           only the explicit edges
    """
    n = n_followers
    if kind == "pf":
        edges = [(i - 1, i) for i in range(1, n + 1)]
    elif kind == "bd":
        edges = [(i - 1, i) for i in range(1, n + 1)] + [(i + 1, i) for i in range(1, n)]
    elif kind == "two-pred":
        edges = [(i - 1, i) for i in range(1, n + 1)] + [(i - 2, i) for i in range(2, n + 1)]
    elif kind == "leader-broadcast":
        edges = [(0, i) for i in range(1, n + 1)]
    elif kind == "custom":
        edges = []
    else:
        raise ContractViolation(f"unknown topology generator '{kind}'")
    return TopologyGraph(n, list(edges) + [tuple(e) for e in extra_edges])


class TopologyMatrices(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    M: np.ndarray
    M_pre: np.ndarray
    D: np.ndarray
    D_pre: np.ndarray
    L: np.ndarray
    L_pre: np.ndarray
    P: np.ndarray
    P_pre: np.ndarray


class VehicleSets(BaseModel):
    model_config = ConfigDict(frozen=True)

    receive: FrozenSet[int]
    share: FrozenSet[int]
    leader: FrozenSet[int]
    info: FrozenSet[int]
    info_pre: FrozenSet[int]


class AdmissibilityReport(BaseModel):
    ok: bool
    unreachable: List[int] = []
    missing_predecessor: List[int] = []

    def describe(self) -> str:
        if self.ok:
            return "topology admissible: every follower is reachable from the leader and hears a preceding vehicle"
        parts = []
        if self.unreachable:
            parts.append(f"(a) not reachable from the leader: vehicles {self.unreachable}")
        if self.missing_predecessor:
            parts.append(f"(b) no edge from a preceding vehicle: vehicles {self.missing_predecessor}")
        return "topology not admissible: " + "; ".join(parts)


def build_matrices(g: TopologyGraph) -> TopologyMatrices:
    """Adjacency, in-degree, Laplacian and pinning matrices over the followers."""
    n = g.n_followers
    M = np.zeros((n, n))
    P = np.zeros((n, n))
    for j, i in g.edges:
        if j == 0:
            P[i - 1, i - 1] = 1.0
        else:
            M[i - 1, j - 1] = 1.0
    M_pre = np.tril(M, k=-1)
    D = np.diag(M.sum(axis=1))
    D_pre = np.diag(M_pre.sum(axis=1))
    # the leader precedes every follower
    P_pre = P.copy()
    return TopologyMatrices(M=M, M_pre=M_pre, D=D, D_pre=D_pre, L=D - M, L_pre=D_pre - M_pre, P=P, P_pre=P_pre)


def vehicle_sets(g: TopologyGraph, i: int) -> VehicleSets:
    if not 1 <= i <= g.n_followers:
        raise ContractViolation(f"vehicle index {i} outside 1..{g.n_followers}")
    receive = frozenset(j for (j, k) in g.edges if k == i and j != 0)
    share = frozenset(k for (j, k) in g.edges if j == i)
    leader = frozenset({0}) if (0, i) in g.edges else frozenset()
    info = receive | leader
    info_pre = frozenset(j for j in info if j < i)
    return VehicleSets(receive=receive, share=share, leader=leader, info=info, info_pre=info_pre)


def all_vehicle_sets(g: TopologyGraph) -> Dict[int, VehicleSets]:
    return {i: vehicle_sets(g, i) for i in g.followers()}


def check_admissible(g: TopologyGraph) -> AdmissibilityReport:
    """Check the spanning-tree and preceding-sender conditions."""
    successors: Dict[int, List[int]] = {}
    for j, i in g.edges:
        successors.setdefault(j, []).append(i)
    reached = {0}
    frontier = [0]
    while frontier:
        node = frontier.pop()
        for nxt in successors.get(node, []):
            if nxt not in reached:
                reached.add(nxt)
                frontier.append(nxt)
    unreachable = [i for i in g.followers() if i not in reached]
    missing = [i for i in g.followers() if not any(j < i for (j, k) in g.edges if k == i)]
    report = AdmissibilityReport(ok=not unreachable and not missing, unreachable=unreachable, missing_predecessor=missing)
    if not report.ok:
        logger.debug(report.describe())
    return report


def require_admissible(g: TopologyGraph) -> None:
    report = check_admissible(g)
    if not report.ok:
        raise TopologyError(report.describe())


def headway_gap(i: int, j: int, delta_h: Union[float, Sequence[float]]) -> float:
    """Signed sum of the time headways of vehicles j+1..i."""
    if np.isscalar(delta_h):
        return (i - j) * float(delta_h)
    lo, hi = (j, i) if i >= j else (i, j)
    total = sum(float(delta_h[m]) for m in range(lo + 1, hi + 1))
    return total if i >= j else -total


def terminal_error_matrix(g: TopologyGraph, dt: float, delta_h: Union[float, Sequence[float]]) -> np.ndarray:
    """
    Map from the platoon's terminal output error at t to the error at t+1.

    Block (i, j) is [[1, dt - headway gap], [0, 1]] divided by the number of
    preceding neighbors of i, for each preceding follower j. The leader's column is dropped
    since its terminal error is identically zero. ``delta_h`` is a scalar or a
    per-vehicle sequence indexed 0..N.
    """
    require_admissible(g)
    n = g.n_followers
    p = 2
    T = np.zeros((n * p, n * p))
    for i in g.followers():
        pre = vehicle_sets(g, i).info_pre
        weight = 1.0 / len(pre)
        for j in pre:
            if j == 0:
                continue
            block = np.array([[1.0, dt - headway_gap(i, j, delta_h)], [0.0, 1.0]])
            T[(i - 1) * p:i * p, (j - 1) * p:j * p] = weight * block
    return T


def is_strictly_block_lower(T: np.ndarray, block: int = 2) -> bool:
    nb = T.shape[0] // block
    for bi in range(nb):
        if np.any(T[bi * block:(bi + 1) * block, bi * block:] != 0.0):
            return False
    return True


def nilpotency_index(T: np.ndarray, block: int = 2, tol: float = 1e-12) -> int:
    """
    Smallest k with T^k = 0.

    Nilpotency is decided structurally (strict block lower triangularity);
    the index itself comes from powering, which for such matrices reaches an
    exact zero.
    """
    if T.size == 0 or not np.any(T):
        return 1
    if not is_strictly_block_lower(T, block):
        raise TopologyError("matrix is not strictly block lower triangular, so it is not nilpotent")
    n_blocks = T.shape[0] // block
    power = T.copy()
    for k in range(1, n_blocks + 1):
        if np.max(np.abs(power)) <= tol:
            return k
        power = power @ T
    raise TopologyError(f"T^{n_blocks} is not zero")


def information_matrix(g: TopologyGraph) -> np.ndarray:
    """Row-normalised adjacency over all senders: the terminal-error map had the full information set been used."""
    m = build_matrices(g)
    degree = np.diag(m.D + m.P)
    if np.any(degree == 0):
        raise TopologyError("some follower receives from nobody")
    return m.M / degree[:, None]


def spectral_radius(A: np.ndarray) -> float:
    if A.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(A))))


def random_admissible_graph(n_followers: int, rng: np.random.Generator, density: float = 0.3) -> TopologyGraph:
    """A random admissible graph: reachable from the leader, every follower hears a preceding vehicle."""
    edges = []
    for i in range(1, n_followers + 1):
        edges.append((int(rng.integers(0, i)), i))
        for j in range(0, n_followers + 1):
            if j != i and rng.random() < density:
                edges.append((j, i))
    return TopologyGraph(n_followers, edges)
