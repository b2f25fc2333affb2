"""Packet-loss protocol with per-edge memory, loss models, and the
hold-last-message SVL baseline.

Loss is applied per directed edge per step. The steppers take an explicit
set of lost edges so deterministic schedules and Bernoulli draws share one
code path. Self-messages (the diagonal Laplacian term) never traverse the
network and are never lost.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import AlgorithmParams, NetworkState, StepRecord, _guard, _max_error
from .graph import LaplacianMatrix, Topology
from .objectives import ObjectiveModel

Edge = tuple[int, int]


@dataclass
class EdgeMemory:
    """Per-receiver memory of the last usable message on every in-edge.

    values holds the working message for initialized, unsevered edges.
    ever_received distinguishes a never-initialized edge (treated as a
    delivery on loss) from one cleared by the forgetting rule (excluded
    from the mix until a packet arrives).
    """

    values: dict[Edge, np.ndarray] = field(default_factory=dict)
    last_received: dict[Edge, int] = field(default_factory=dict)
    ever_received: set[Edge] = field(default_factory=set)
    x_prev: np.ndarray | None = None   # receiver estimates from the previous step


class BernoulliLoss:
    """Independent per-edge, per-step loss; draws are a pure function of (seed, k)."""

    def __init__(self, rate: float, seed: int = 0):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"loss rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.seed = seed

    def lost_edges(self, k: int, edges) -> set[Edge]:
        if self.rate == 0.0:
            return set()
        rng = np.random.default_rng([self.seed, k])
        draws = rng.uniform(size=len(edges))
        return {(i, j) for (i, j, _), r in zip(edges, draws) if r < self.rate}


class MaskSchedule:
    """Deterministic loss schedule: one set of lost edges per step."""

    def __init__(self, masks: list[set[Edge]]):
        self.masks = [set(m) for m in masks]

    def lost_edges(self, k: int, edges) -> set[Edge]:
        return self.masks[k] if k < len(self.masks) else set()

    @classmethod
    def from_text(cls, text: str) -> "MaskSchedule":
        """One line per step with comma-separated i:j pairs; blank line = no losses."""
        masks = []
        for no, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            mask: set[Edge] = set()
            if line:
                for token in line.split(","):
                    try:
                        i, j = token.strip().split(":")
                        mask.add((int(i), int(j)))
                    except ValueError:
                        raise ValueError(f"mask schedule line {no}: bad token {token!r}")
            masks.append(mask)
        return cls(masks)


@dataclass(frozen=True)
class ForgettingConfig:
    """Edges silent for q consecutive steps are presumed severed."""

    q: int

    def __post_init__(self):
        if self.q < 1:
            raise ValueError(f"forgetting factor must be >= 1, got {self.q}")


def apply_forgetting(memory: EdgeMemory, k: int, config: ForgettingConfig) -> None:
    """Clear edges that have been silent for q or more steps (in place)."""
    stale = [e for e, last in memory.last_received.items()
             if e in memory.values and k - last >= config.q]
    for e in stale:
        del memory.values[e]


def _receive(memory: EdgeMemory, topology: Topology, y: np.ndarray,
             lost: set[Edge], k: int, extrapolate: bool, eta: float) -> dict[Edge, bool]:
    """Update edge memories for one round; returns which edges are active.

    On delivery the memory takes y_j. On loss: extrapolate from the
    receiver's previous estimate (the self-healing protocol) or hold the
    stored message (the SVL baseline); a never-initialized lost edge is
    treated as delivered, and a cleared edge stays inactive.
    """
    active: dict[Edge, bool] = {}
    for (i, j, _) in topology.edges:
        e = (i, j)
        if e in lost and e in memory.values:
            if extrapolate:
                memory.values[e] = eta * memory.x_prev[i - 1] + memory.values[e]
            active[e] = True
        elif e in lost and e in memory.ever_received:
            active[e] = False          # severed by forgetting; wait for a packet
        else:                           # delivered, or first-contact loss
            memory.values[e] = y[j - 1].copy()
            memory.last_received[e] = k
            memory.ever_received.add(e)
            active[e] = True
    return active


def _mix(lap: LaplacianMatrix, topology: Topology, y: np.ndarray,
         memory: EdgeMemory, lost: set[Edge], active: dict[Edge, bool]) -> np.ndarray:
    """v_i = L_i . E_i with E_i the receiver's view of y.

    E_i starts as y itself so that a loss-free round reproduces the
    lossless stepper's arithmetic exactly; substituted rows only appear
    for this receiver's lost or severed in-edges. Severed edges contribute
    zero without rebalancing the Laplacian row.
    """
    n = lap.n
    views: dict[int, np.ndarray] = {}
    for (i, j, _) in topology.edges:
        e = (i, j)
        if not active[e]:
            views.setdefault(i, y.copy())[j - 1] = 0.0
        elif e in lost:
            views.setdefault(i, y.copy())[j - 1] = memory.values[e]
    return np.stack([np.dot(lap.entries[i], views.get(i + 1, y))
                     for i in range(n)])


def step_alg2(state: NetworkState, memory: EdgeMemory, params: AlgorithmParams,
              lap: LaplacianMatrix, topology: Topology, model: ObjectiveModel,
              lost: set[Edge], x_opt: np.ndarray | None = None,
              ) -> tuple[NetworkState, StepRecord]:
    """One round of the packet-loss protocol; memory is updated in place.

    Lost edges are filled with eta * x_i^{k-1} + e_ij^{k-1}, tracking the
    linear quasi-steady-state growth of the transmitted signal.
    """
    w1, w2 = state.w1, state.w2
    y = params.delta * w1 + params.eta * w2
    active = _receive(memory, topology, y, lost, state.k,
                      extrapolate=True, eta=params.eta)
    v = _mix(lap, topology, y, memory, lost, active)
    x = w1 - v
    u = model.gradient_all(x)
    w1_next = w1 - params.alpha * u - params.zeta * v
    w2_next = w1 + w2 - v
    _guard((w1_next, w2_next), state.k)
    memory.x_prev = x
    record = StepRecord(k=state.k, x=x, y=y, u=u, v=v,
                        max_error=_max_error(x, x_opt))
    return NetworkState(w1=w1_next, w2=w2_next, k=state.k + 1), record


def step_svl_holdlast(state: NetworkState, memory: EdgeMemory,
                      params: AlgorithmParams, lap: LaplacianMatrix,
                      topology: Topology, model: ObjectiveModel,
                      lost: set[Edge], x_opt: np.ndarray | None = None,
                      ) -> tuple[NetworkState, StepRecord]:
    """SVL baseline under loss: lost packets reuse the last received message."""
    w1, w2 = state.w1, state.w2
    y = w1
    active = _receive(memory, topology, y, lost, state.k,
                      extrapolate=False, eta=0.0)
    v = _mix(lap, topology, y, memory, lost, active)
    x = w1 - params.delta * v
    u = model.gradient_all(x)
    w1_next = w1 + params.beta * w2 - params.alpha * u - params.gamma * v
    w2_next = w2 - v
    _guard((w1_next, w2_next), state.k)
    memory.x_prev = x
    record = StepRecord(k=state.k, x=x, y=y, u=u, v=v,
                        max_error=_max_error(x, x_opt))
    return NetworkState(w1=w1_next, w2=w2_next, k=state.k + 1), record
