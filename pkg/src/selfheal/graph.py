"""Weighted digraphs, their Laplacians, and connectivity/balance diagnostics.

Edge convention: an edge (i, j) means agent i *receives* from agent j.
Agent indices are 1-based in all public interfaces.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

ROW_SUM_TOL = 1e-12
COL_SUM_TOL = 1e-12

# Above this size the spectral norm falls back to power iteration.
_DENSE_SVD_LIMIT = 64


class GraphError(ValueError):
    """Raised for invalid topologies or malformed topology files."""


@dataclass(frozen=True)
class Topology:
    """A weighted digraph given as an agent count and receive-edges.

    edges is a tuple of (i, j, weight) triples, 1-based, meaning i receives
    from j with the given positive weight.
    """

    n: int
    edges: tuple[tuple[int, int, float], ...]

    def __post_init__(self):
        if self.n < 1:
            raise GraphError(f"agent count must be positive, got {self.n}")
        object.__setattr__(self, "edges", tuple(
            (int(i), int(j), float(w)) for i, j, w in self.edges))
        seen: dict[tuple[int, int], int] = {}
        for idx, (i, j, w) in enumerate(self.edges):
            if not (1 <= i <= self.n and 1 <= j <= self.n):
                raise GraphError(f"edge ({i}, {j}) out of range for n={self.n}")
            if i == j:
                raise GraphError(f"self-loop at agent {i}")
            if w <= 0:
                raise GraphError(f"edge ({i}, {j}) has non-positive weight {w}")
            if (i, j) in seen:
                first = seen[(i, j)]
                raise GraphError(
                    f"duplicate edge ({i}, {j}): entries {first} "
                    f"(weight {self.edges[first][2]}) and {idx} (weight {w})")
            seen[(i, j)] = idx

    def in_neighbors(self, i: int) -> list[int]:
        return [j for (r, j, _) in self.edges if r == i]


@dataclass(frozen=True)
class LaplacianMatrix:
    """A graph Laplacian with its disagreement norm and assumption flags."""

    entries: np.ndarray          # n x n, rows sum to zero
    sigma: float                 # ||I - Pi - L|| (spectral norm)
    balanced: bool               # 1^T L = 0
    strongly_connected: bool

    @property
    def n(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True)
class AssumptionReport:
    """Pass/fail status of the connectivity, balance and sigma assumptions."""

    strongly_connected: bool     # A2
    weight_balanced: bool        # A3
    sigma: float
    sigma_ok: bool               # A4: sigma < 1

    @property
    def all_ok(self) -> bool:
        return self.strongly_connected and self.weight_balanced and self.sigma_ok


def ring_lattice(n: int, offsets: set[int] | list[int], weight: float) -> Topology:
    """Directed ring lattice: agent i receives from i+o (mod n) for each offset o."""
    offsets = sorted(set(int(o) for o in offsets))
    if not offsets:
        raise GraphError("offsets must be nonempty")
    for o in offsets:
        if not (1 <= o <= n - 1):
            raise GraphError(f"offset {o} outside [1, {n - 1}]")
    edges = []
    for i in range(1, n + 1):
        for o in offsets:
            j = (i + o - 1) % n + 1
            edges.append((i, j, weight))
    return Topology(n=n, edges=tuple(edges))


def complete_graph(n: int, weight: float | None = None) -> Topology:
    """Complete digraph; default weight 1/n gives sigma = 0 exactly."""
    w = 1.0 / n if weight is None else weight
    edges = tuple((i, j, w) for i in range(1, n + 1)
                  for j in range(1, n + 1) if i != j)
    return Topology(n=n, edges=edges)


def spectral_norm_svd(a: np.ndarray) -> float:
    return float(np.linalg.norm(a, 2))


def spectral_norm_power(a: np.ndarray, tol: float = 1e-12,
                        max_iter: int = 10_000, seed: int = 0) -> float:
    """Largest singular value via power iteration on a^T a."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(a.shape[1])
    v /= np.linalg.norm(v)
    ata = a.T @ a
    prev = 0.0
    for _ in range(max_iter):
        v = ata @ v
        norm = np.linalg.norm(v)
        if norm == 0.0:
            return 0.0
        v /= norm
        cur = float(np.linalg.norm(a @ v))
        if abs(cur - prev) <= tol * max(cur, 1.0):
            return cur
        prev = cur
    return prev


def disagreement_norm(lap_entries: np.ndarray) -> float:
    """sigma = ||I - Pi - L||, the spectral norm of the disagreement map."""
    n = lap_entries.shape[0]
    pi = np.full((n, n), 1.0 / n)
    a = np.eye(n) - pi - lap_entries
    if n <= _DENSE_SVD_LIMIT:
        return spectral_norm_svd(a)
    return spectral_norm_power(a)


def _is_strongly_connected(topology: Topology) -> bool:
    if topology.n == 1:
        return True
    rows = [i - 1 for (i, _, _) in topology.edges]
    cols = [j - 1 for (_, j, _) in topology.edges]
    adj = csr_matrix((np.ones(len(rows)), (rows, cols)),
                     shape=(topology.n, topology.n))
    ncomp, _ = connected_components(adj, directed=True, connection="strong")
    return ncomp == 1


def build_laplacian(topology: Topology) -> LaplacianMatrix:
    """Assemble L with -weight off-diagonal and zero row sums."""
    n = topology.n
    lap = np.zeros((n, n))
    for (i, j, w) in topology.edges:
        lap[i - 1, j - 1] = -w
    np.fill_diagonal(lap, 0.0)
    lap[np.arange(n), np.arange(n)] = -lap.sum(axis=1)
    col_sums = lap.sum(axis=0)
    balanced = bool(np.max(np.abs(col_sums)) < COL_SUM_TOL)
    return LaplacianMatrix(
        entries=lap,
        sigma=disagreement_norm(lap),
        balanced=balanced,
        strongly_connected=_is_strongly_connected(topology),
    )


def check_assumptions(lap: LaplacianMatrix) -> AssumptionReport:
    return AssumptionReport(
        strongly_connected=lap.strongly_connected,
        weight_balanced=lap.balanced,
        sigma=lap.sigma,
        sigma_ok=lap.sigma < 1.0,
    )


def topology_to_text(topology: Topology) -> str:
    """Serialize as: first line n, then one 'i j weight' line per edge."""
    lines = [str(topology.n)]
    lines += [f"{i} {j} {w!r}" for (i, j, w) in topology.edges]
    return "\n".join(lines) + "\n"


def topology_from_text(text: str) -> Topology:
    lines = text.splitlines()
    body = [(no + 1, ln.strip()) for no, ln in enumerate(lines)
            if ln.strip() and not ln.strip().startswith("#")]
    if not body:
        raise GraphError("empty topology file")
    first_no, first = body[0]
    try:
        n = int(first)
    except ValueError:
        raise GraphError(f"line {first_no}: expected agent count, got {first!r}")
    edges = []
    for no, ln in body[1:]:
        parts = ln.split()
        if len(parts) != 3:
            raise GraphError(f"line {no}: expected 'i j weight', got {ln!r}")
        try:
            i, j, w = int(parts[0]), int(parts[1]), float(parts[2])
        except ValueError:
            raise GraphError(f"line {no}: malformed edge {ln!r}")
        edges.append((i, j, w))
    return Topology(n=n, edges=tuple(edges))
