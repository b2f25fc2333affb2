"""Steppers for the self-healing algorithm and the SVL baseline.

All stacked quantities are n x d arrays, one row per agent. The update
order inside a step follows the per-agent pseudocode: communicate y,
mix through the Laplacian, evaluate gradients, then update states.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .graph import LaplacianMatrix, Topology
from .objectives import ObjectiveModel

STATE_CEILING = 1e12
FIXED_POINT_TOL = 1e-9


class ParameterError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, k: int):
        super().__init__(f"state exceeded the divergence guard at step {k}")
        self.k = k


class FixedPointError(RuntimeError):
    """The closed-form fixed point failed its defining equation (broken assumption)."""


@dataclass(frozen=True)
class AlgorithmParams:
    alpha: float
    beta: float
    gamma: float
    delta: float
    zeta: float
    eta: float


def derive_params(beta: float, gamma: float, delta: float) -> tuple[float, float]:
    """Factorization parameters (zeta, eta) from (beta, gamma, delta).

    Requires gamma^2 >= 4 beta delta so the factor zeros stay real.
    """
    if delta == 0.0:
        if gamma == 0.0:
            raise ParameterError("gamma must be nonzero when delta = 0")
        zeta = beta / gamma
    else:
        disc = gamma * gamma - 4.0 * beta * delta
        if disc < 0.0:
            raise ParameterError(
                f"gamma^2 >= 4*beta*delta violated: {gamma**2} < {4 * beta * delta}")
        zeta = (gamma - np.sqrt(disc)) / (2.0 * delta)
    eta = gamma - delta * zeta
    return float(zeta), float(eta)


def make_params(alpha: float, beta: float, gamma: float, delta: float) -> AlgorithmParams:
    if alpha <= 0.0:
        raise ParameterError(f"alpha must be positive, got {alpha}")
    zeta, eta = derive_params(beta, gamma, delta)
    return AlgorithmParams(alpha=alpha, beta=beta, gamma=gamma, delta=delta,
                           zeta=zeta, eta=eta)


@dataclass(frozen=True)
class NetworkState:
    w1: np.ndarray   # n x d
    w2: np.ndarray   # n x d (or w2-hat for the projected system)
    k: int = 0


@dataclass(frozen=True)
class StepRecord:
    k: int
    x: np.ndarray
    y: np.ndarray
    u: np.ndarray
    v: np.ndarray
    max_error: float  # max_i ||x_i - x_opt||; nan when no reference given


@dataclass(frozen=True)
class FixedPoint:
    w1_star: np.ndarray
    w2hat_star: np.ndarray
    x_star: np.ndarray
    yhat_star: np.ndarray
    u_star: np.ndarray
    v_star: np.ndarray


def zero_state(n: int, d: int) -> NetworkState:
    return NetworkState(w1=np.zeros((n, d)), w2=np.zeros((n, d)), k=0)


def uniform_state(n: int, d: int, lo: float, hi: float, seed) -> NetworkState:
    rng = np.random.default_rng(seed)
    return NetworkState(w1=rng.uniform(lo, hi, (n, d)),
                        w2=rng.uniform(lo, hi, (n, d)), k=0)


def laplacian_rows(lap_entries: np.ndarray, y: np.ndarray) -> np.ndarray:
    """L @ y computed row by row.

    The packet-loss steppers mix each receiver's own edge-memory matrix,
    so the lossless path here must use the identical per-row arithmetic
    for the zero-loss trajectories to match bit for bit.
    """
    return np.stack([np.dot(lap_entries[i], y) for i in range(lap_entries.shape[0])])


def _max_error(x: np.ndarray, x_opt: np.ndarray | None) -> float:
    if x_opt is None:
        return float("nan")
    return float(np.max(np.linalg.norm(x - x_opt[None, :], axis=1)))


def _guard(arrays, k: int):
    for a in arrays:
        if not np.all(np.isfinite(a)) or np.max(np.abs(a)) > STATE_CEILING:
            raise DivergenceError(k)


def step_alg1(state: NetworkState, params: AlgorithmParams, lap: LaplacianMatrix,
              model: ObjectiveModel, x_opt: np.ndarray | None = None,
              ) -> tuple[NetworkState, StepRecord]:
    """One synchronous round of the self-healing gradient method."""
    w1, w2 = state.w1, state.w2
    y = params.delta * w1 + params.eta * w2
    v = laplacian_rows(lap.entries, y)
    x = w1 - v
    u = model.gradient_all(x)
    w1_next = w1 - params.alpha * u - params.zeta * v
    w2_next = w1 + w2 - v
    _guard((w1_next, w2_next), state.k)
    record = StepRecord(k=state.k, x=x, y=y, u=u, v=v,
                        max_error=_max_error(x, x_opt))
    return NetworkState(w1=w1_next, w2=w2_next, k=state.k + 1), record


def step_svl(state: NetworkState, params: AlgorithmParams, lap: LaplacianMatrix,
             model: ObjectiveModel, x_opt: np.ndarray | None = None,
             ) -> tuple[NetworkState, StepRecord]:
    """One round of the SVL-template baseline (integrator after the Laplacian)."""
    w1, w2 = state.w1, state.w2
    y = w1
    v = laplacian_rows(lap.entries, y)
    x = w1 - params.delta * v
    u = model.gradient_all(x)
    w1_next = w1 + params.beta * w2 - params.alpha * u - params.gamma * v
    w2_next = w2 - v
    _guard((w1_next, w2_next), state.k)
    record = StepRecord(k=state.k, x=x, y=y, u=u, v=v,
                        max_error=_max_error(x, x_opt))
    return NetworkState(w1=w1_next, w2=w2_next, k=state.k + 1), record


def _project_off_consensus(a: np.ndarray) -> np.ndarray:
    """(I - Pi) a: remove the per-column mean across agents."""
    return a - a.mean(axis=0, keepdims=True)


def step_gm(state: NetworkState, params: AlgorithmParams, lap: LaplacianMatrix,
            model: ObjectiveModel, x_opt: np.ndarray | None = None,
            ) -> tuple[NetworkState, StepRecord]:
    """Analysis-only variant with the unobservable consensus drift projected out.

    Identical to step_alg1 except the second state is w2-hat with update
    w2hat+ = (I - Pi)(w1 + w2hat - v).
    """
    w1, w2hat = state.w1, state.w2
    y = params.delta * w1 + params.eta * w2hat
    v = laplacian_rows(lap.entries, y)
    x = w1 - v
    u = model.gradient_all(x)
    w1_next = w1 - params.alpha * u - params.zeta * v
    w2hat_next = _project_off_consensus(w1 + w2hat - v)
    _guard((w1_next, w2hat_next), state.k)
    record = StepRecord(k=state.k, x=x, y=y, u=u, v=v,
                        max_error=_max_error(x, x_opt))
    return NetworkState(w1=w1_next, w2=w2hat_next, k=state.k + 1), record


def construct_fixed_point(params: AlgorithmParams, lap: LaplacianMatrix,
                          model: ObjectiveModel, x_opt: np.ndarray) -> FixedPoint:
    """Closed-form stationary point of the projected system.

    x* stacks x_opt; v* = -(alpha/zeta) u*; w1* = x* + v*; and w2hat* is the
    row-space solution of zeta*eta*L w2hat* = -alpha (I - delta L) u*.
    """
    if params.zeta == 0.0 or params.eta == 0.0:
        raise ParameterError("fixed-point construction needs zeta and eta nonzero")
    n = lap.n
    lap_m = lap.entries
    x_star = np.tile(np.asarray(x_opt, dtype=float), (n, 1))
    u_star = model.gradient_all(x_star)
    v_star = -(params.alpha / params.zeta) * u_star
    w1_star = x_star + v_star
    scale = params.alpha / (params.zeta * params.eta)
    w2hat_star = scale * (np.linalg.pinv(lap_m) @ (params.delta * lap_m - np.eye(n)) @ u_star)
    residual = np.max(np.abs(params.zeta * params.eta * (lap_m @ w2hat_star)
                             + params.alpha * (np.eye(n) - params.delta * lap_m) @ u_star))
    if residual > FIXED_POINT_TOL:
        raise FixedPointError(
            f"fixed-point equation residual {residual:.3e} exceeds {FIXED_POINT_TOL}; "
            "check the connectivity/balance assumptions")
    yhat_star = params.delta * w1_star + params.eta * w2hat_star
    return FixedPoint(w1_star=w1_star, w2hat_star=w2hat_star, x_star=x_star,
                      yhat_star=yhat_star, u_star=u_star, v_star=v_star)


# --- transfer-function cross-checks (scalar case, n = d = 1) ---

def _tf_original(params: AlgorithmParams, z: complex) -> np.ndarray:
    a, b, g, dl = params.alpha, params.beta, params.gamma, params.delta
    return np.array([
        [-a / (z - 1),
         -(dl * z**2 + (g - 2 * dl) * z + (b + dl - g)) / (z - 1) ** 2],
        [-a / (z - 1),
         -(g * z + (b - g)) / (z - 1) ** 2],
    ])


def _tf_factors(params: AlgorithmParams, z: complex) -> tuple[np.ndarray, np.ndarray]:
    a, b, g, dl = params.alpha, params.beta, params.gamma, params.delta
    zt, et = params.zeta, params.eta
    left = np.array([
        [-a / (z - 1), -(z - 1 + zt) / (z - 1)],
        [-a / (z - 1), (-g * z - (b - g)) / ((z - 1) * (dl * z + et - dl))],
    ])
    right = np.array([
        [1.0, 0.0],
        [0.0, (dl * z + et - dl) / (z - 1)],
    ])
    return left, right


def _tf_swapped_state_space(params: AlgorithmParams, z: complex) -> np.ndarray:
    """Transfer function of the compact two-state realization of the new method."""
    a_mat = np.array([[1.0, 0.0], [1.0, 1.0]])
    b_mat = np.array([[-params.alpha, -params.zeta], [0.0, -1.0]])
    c_mat = np.array([[1.0, 0.0], [params.delta, params.eta]])
    d_mat = np.array([[0.0, -1.0], [0.0, 0.0]])
    return c_mat @ np.linalg.solve(z * np.eye(2) - a_mat, b_mat) + d_mat


def verify_factorization(params: AlgorithmParams, z: complex) -> float:
    """Max discrepancy across the factorization identities at the sample z.

    Checks (a) the original transfer matrix against the product of its two
    factors and (b) the reversed product against the compact realization.
    """
    a, dl, et = params.alpha, params.delta, params.eta
    if abs(z - 1) < 1e-9:
        raise ParameterError("z = 1 is an integrator pole")
    if abs(dl * z + et - dl) < 1e-9:
        raise ParameterError("z hits the factor pole delta*z + eta - delta = 0")
    left, right = _tf_factors(params, z)
    disc1 = np.max(np.abs(_tf_original(params, z) - left @ right))
    swapped = right @ left
    disc2 = np.max(np.abs(swapped - _tf_swapped_state_space(params, z)))
    return float(max(disc1, disc2))


# --- fault injection ---

def perturb_state(state: NetworkState, scale: float, seed) -> NetworkState:
    """Add seeded uniform noise in [-scale, scale] to all internal states."""
    rng = np.random.default_rng(seed)
    return replace(state,
                   w1=state.w1 + rng.uniform(-scale, scale, state.w1.shape),
                   w2=state.w2 + rng.uniform(-scale, scale, state.w2.shape))


def drop_agent(topology: Topology, state: NetworkState, model, agent: int,
               ) -> tuple[Topology, NetworkState, ObjectiveModel]:
    """Remove agent (1-based) and its edges; surviving agents are renumbered."""
    keep = [a for a in range(1, topology.n + 1) if a != agent]
    remap = {a: r + 1 for r, a in enumerate(keep)}
    edges = tuple((remap[i], remap[j], w) for (i, j, w) in topology.edges
                  if i != agent and j != agent)
    new_top = Topology(n=topology.n - 1, edges=edges)
    rows = [a - 1 for a in keep]
    new_state = NetworkState(w1=state.w1[rows], w2=state.w2[rows], k=state.k)
    return new_top, new_state, model.subset(keep)


def add_agent(topology: Topology, state: NetworkState, model, agent: int,
              edges: list[tuple[int, int, float]], center, curvature=None,
              init: np.ndarray | None = None,
              ) -> tuple[Topology, NetworkState, ObjectiveModel]:
    """Insert a new agent at 1-based position `agent` with the given edges.

    Edge endpoints refer to the post-insertion numbering. New states default
    to zeros (any value converges by self-healing; zeros keep tests exact).
    Only quadratic models support insertion.
    """
    def shift(a):
        return a + 1 if a >= agent else a

    old_edges = [(shift(i), shift(j), w) for (i, j, w) in topology.edges]
    new_top = Topology(n=topology.n + 1, edges=tuple(old_edges) + tuple(edges))
    d = state.w1.shape[1]
    row = np.zeros((1, d)) if init is None else np.atleast_2d(init)
    pos = agent - 1
    new_state = NetworkState(
        w1=np.vstack([state.w1[:pos], row, state.w1[pos:]]),
        w2=np.vstack([state.w2[:pos], row, state.w2[pos:]]),
        k=state.k)
    new_model = model.with_agent_added(center, curvature)
    if agent != model.n + 1:
        order = list(range(1, model.n + 2))
        order.insert(pos, order.pop())
        new_model = new_model.subset(order)
    return new_top, new_state, new_model


def swap_objective(model, agent: int, center, curvature=None) -> ObjectiveModel:
    """Replace one agent's local cost (quadratic models)."""
    return model.with_agent_swapped(agent, center, curvature)
