"""Worst-case linear rate certification via small LMI feasibility problems.

The consensus and disagreement components of the projected system are
certified separately: a 3x3 LMI couples the consensus state with the
gradient sector constraint, and a 4x4 LMI additionally couples the
Laplacian's (1-sigma, 1+sigma) sector on the disagreement subspace.

The feasibility search runs through a convex solver, but every returned
certificate is re-verified with plain symmetric eigenvalue checks, so the
search backend never has to be trusted.
"""

from __future__ import annotations

import contextlib
import os
from dataclasses import dataclass

import cvxpy as cp
import numpy as np
from scipy.optimize import linprog, minimize_scalar

from .engine import AlgorithmParams

PSD_EPS = 1e-8          # strict positivity margin for P and Q
VERIFY_TOL = 1e-9       # allowed residual on the LMI eigenvalues
CANONICAL_MIN_EIG = 1e-2  # returned certificates are scaled to this floor
DEFAULT_BISECT_TOL = 1e-4


class CertificationError(RuntimeError):
    pass


def sector_matrix_gradient(m: float, L: float) -> np.ndarray:
    """Multiplier for the (m, L) gradient sector constraint."""
    return np.array([[-2.0 * m * L, L + m], [L + m, -2.0]])


def sector_matrix_laplacian(sigma: float) -> np.ndarray:
    """Multiplier for the (1-sigma, 1+sigma) sector on the disagreement map."""
    return np.array([[sigma * sigma - 1.0, 1.0], [1.0, -1.0]])


@dataclass(frozen=True)
class IqcData:
    M0: np.ndarray
    M1: np.ndarray


@dataclass(frozen=True)
class SplitRealization:
    """Consensus (p) and disagreement (q) blocks of the projected system."""

    A_p: np.ndarray
    A_q: np.ndarray
    B_pu: np.ndarray
    B_pv: np.ndarray
    B_qu: np.ndarray
    B_qv: np.ndarray
    C_x: np.ndarray
    D_xu: float
    D_xv: float
    C_y: np.ndarray
    D_yu: float
    D_yv: float


def split_realization(params: AlgorithmParams) -> SplitRealization:
    a, zt = params.alpha, params.zeta
    return SplitRealization(
        A_p=np.array([[1.0, 0.0], [0.0, 0.0]]),
        A_q=np.array([[1.0, 0.0], [1.0, 1.0]]),
        B_pu=np.array([[-a], [0.0]]),
        B_pv=np.array([[-zt], [0.0]]),
        B_qu=np.array([[-a], [0.0]]),
        B_qv=np.array([[-zt], [-1.0]]),
        C_x=np.array([[1.0, 0.0]]),
        D_xu=0.0,
        D_xv=-1.0,
        C_y=np.array([[params.delta, params.eta]]),
        D_yu=0.0,
        D_yv=0.0,
    )


@dataclass(frozen=True)
class Certificate:
    rho: float
    P: np.ndarray
    Q: np.ndarray
    lambda0: float
    lambda1: float
    lmi1_max_eig: float
    lmi2_max_eig: float
    cond_T: float


def _outer_factors(params: AlgorithmParams) -> tuple[np.ndarray, np.ndarray]:
    """The constant stacking matrices R1 (6x3) and R2 (8x4) of the two LMIs."""
    r = split_realization(params)
    r1 = np.vstack([
        np.hstack([r.A_p, r.B_pu]),
        np.hstack([np.eye(2), np.zeros((2, 1))]),
        np.hstack([r.C_x, [[r.D_xu]]]),
        np.hstack([np.zeros((1, 2)), [[1.0]]]),
    ])
    r2 = np.vstack([
        np.hstack([r.A_q, r.B_qu, r.B_qv]),
        np.hstack([np.eye(2), np.zeros((2, 2))]),
        np.hstack([r.C_x, [[r.D_xu, r.D_xv]]]),
        np.hstack([np.zeros((1, 2)), [[1.0, 0.0]]]),
        np.hstack([r.C_y, [[r.D_yu, r.D_yv]]]),
        np.hstack([np.zeros((1, 2)), [[0.0, 1.0]]]),
    ])
    return r1, r2


def assemble_lmis(rho: float, params: AlgorithmParams, m: float, L: float,
                  sigma: float, P: np.ndarray, Q: np.ndarray,
                  lambda0: float, lambda1: float) -> tuple[np.ndarray, np.ndarray]:
    """The two LMI left-hand sides; feasibility means both are negative semidefinite."""
    if rho <= 0.0:
        raise CertificationError(f"rho must be positive, got {rho}")
    m0 = sector_matrix_gradient(m, L)
    m1 = sector_matrix_laplacian(sigma)
    r1, r2 = _outer_factors(params)
    rho2 = rho * rho
    mid1 = np.zeros((6, 6))
    mid1[0:2, 0:2] = P
    mid1[2:4, 2:4] = -rho2 * P
    mid1[4:6, 4:6] = lambda0 * m0
    mid2 = np.zeros((8, 8))
    mid2[0:2, 0:2] = Q
    mid2[2:4, 2:4] = -rho2 * Q
    mid2[4:6, 4:6] = lambda0 * m0
    mid2[6:8, 6:8] = lambda1 * m1
    s1 = r1.T @ mid1 @ r1
    s2 = r2.T @ mid2 @ r2
    return 0.5 * (s1 + s1.T), 0.5 * (s2 + s2.T)


@contextlib.contextmanager
def _silenced_stderr():
    """Mute fd-level stderr; native solver threads panic straight to fd 2."""
    saved = os.dup(2)
    try:
        with open(os.devnull, "wb") as devnull:
            os.dup2(devnull.fileno(), 2)
        yield
    finally:
        os.dup2(saved, 2)
        os.close(saved)


def _solve_quietly(prob: "cp.Problem", solver: str) -> bool:
    """Run the solver, falling back to SCS; failures mean 'no certificate found'.

    Clarabel aborts with a pyo3 panic (a BaseException) on some marginal
    instances, so the net here is deliberately wide.
    """
    import warnings

    for backend in (solver, "SCS"):
        try:
            with warnings.catch_warnings(), _silenced_stderr():
                warnings.simplefilter("ignore")
                prob.solve(solver=backend)
            return True
        except KeyboardInterrupt:
            raise
        except BaseException:
            continue
    return False


def find_certificate(rho: float, params: AlgorithmParams, m: float, L: float,
                     sigma: float, solver: str = "CLARABEL") -> Certificate | None:
    """Search for a feasibility certificate at the given rate.

    Returns None when the search fails; that is not a proof of infeasibility.
    The returned certificate has been re-verified by eigenvalue checks.
    """
    m0 = sector_matrix_gradient(m, L)
    m1 = sector_matrix_laplacian(sigma)
    r1, r2 = _outer_factors(params)
    rho2 = rho * rho

    p_var = cp.Variable((2, 2), symmetric=True)
    q_var = cp.Variable((2, 2), symmetric=True)
    l0 = cp.Variable(nonneg=True)
    l1 = cp.Variable(nonneg=True)
    s = cp.Variable()
    zero2 = np.zeros((2, 2))
    mid1 = cp.bmat([
        [p_var, zero2, zero2],
        [zero2, -rho2 * p_var, zero2],
        [zero2, zero2, l0 * m0],
    ])
    mid2 = cp.bmat([
        [q_var, zero2, zero2, zero2],
        [zero2, -rho2 * q_var, zero2, zero2],
        [zero2, zero2, l0 * m0, zero2],
        [zero2, zero2, zero2, l1 * m1],
    ])
    s1 = r1.T @ mid1 @ r1
    s2 = r2.T @ mid2 @ r2
    # Maximize the smallest eigenvalue of P and Q under a trace
    # normalization (the problem is homogeneous). A plain feasibility or
    # min-slack formulation happily returns certificates with P or Q
    # collapsed onto the positivity floor, which certify nothing once the
    # LMI residual is compared against the certificate's own scale; the
    # conditioning objective steers away from those whenever a
    # non-degenerate witness exists, and keeps cond(T) small for the
    # transient bound.
    constraints = [
        s1 << 0,
        s2 << 0,
        p_var >> s * np.eye(2),
        q_var >> s * np.eye(2),
        s >= PSD_EPS,
        cp.trace(p_var) + cp.trace(q_var) == 2.0,  # fixes the free scaling
    ]
    prob = cp.Problem(cp.Maximize(s), constraints)
    if not _solve_quietly(prob, solver):
        return None
    if prob.status not in ("optimal", "optimal_inaccurate") or p_var.value is None:
        return None
    p = 0.5 * (p_var.value + p_var.value.T)
    q = 0.5 * (q_var.value + q_var.value.T)
    lam0 = max(float(l0.value), 0.0)
    lam1 = max(float(l1.value), 0.0)
    cert = verify_certificate(rho, params, m, L, sigma, p, q, lam0, lam1)
    if cert is None:
        refined = _polish(rho, params, m, L, sigma, p, q, lam0, lam1)
        if refined is not None:
            cert = verify_certificate(rho, params, m, L, sigma, *refined)
    return cert


def _lmi_basis(rho: float, params: AlgorithmParams, m: float, L: float,
               sigma: float) -> list[tuple[np.ndarray, np.ndarray]]:
    """Both LMIs evaluated on unit certificate vectors.

    The LMI left-hand sides are linear and homogeneous in the eight
    unknowns (P upper triangle, Q upper triangle, both multipliers), so
    these eight matrix pairs span every assembled LMI exactly.
    """
    basis = []
    for k in range(8):
        z = np.zeros(8)
        z[k] = 1.0
        p = np.array([[z[0], z[1]], [z[1], z[2]]])
        q = np.array([[z[3], z[4]], [z[4], z[5]]])
        basis.append(assemble_lmis(rho, params, m, L, sigma, p, q, z[6], z[7]))
    return basis


def _polish(rho: float, params: AlgorithmParams, m: float, L: float,
            sigma: float, p: np.ndarray, q: np.ndarray, lam0: float,
            lam1: float, max_iter: int = 150,
            ) -> tuple[np.ndarray, np.ndarray, float, float] | None:
    """Refine a near-feasible candidate by cutting planes on the residual.

    First-order SDP backends stall around 1e-4 residuals on marginal
    instances. Because the LMIs are linear in the candidate, the worst
    eigenvalue is a pointwise maximum of linear functionals, and Kelley
    cuts through the top eigenvectors drive it toward its true minimum
    with small LPs. The candidate's conditioning is preserved by floor
    cuts on the smallest eigenvalues of P and Q.
    """
    floor = 0.5 * min(float(np.linalg.eigvalsh(p)[0]),
                      float(np.linalg.eigvalsh(q)[0]))
    if floor <= 0.0:
        return None
    target = 0.5 * floor * VERIFY_TOL / CANONICAL_MIN_EIG
    basis = _lmi_basis(rho, params, m, L, sigma)
    z = np.array([p[0, 0], p[0, 1], p[1, 1], q[0, 0], q[0, 1], q[1, 1],
                  lam0, lam1])
    radius = np.maximum(10.0 * np.abs(z), 1.0)
    bounds = [(z[k] - radius[k], z[k] + radius[k]) for k in range(6)]
    bounds += [(0.0, z[6] + radius[6]), (0.0, z[7] + radius[7]), (None, None)]
    cost = np.zeros(9)
    cost[8] = 1.0
    rows_ub: list[np.ndarray] = []
    rhs_ub: list[float] = []

    def unpack(zv):
        return (np.array([[zv[0], zv[1]], [zv[1], zv[2]]]),
                np.array([[zv[3], zv[4]], [zv[4], zv[5]]]), zv[6], zv[7])

    for _ in range(max_iter):
        pk, qk, l0k, l1k = unpack(z)
        s1, s2 = assemble_lmis(rho, params, m, L, sigma, pk, qk, l0k, l1k)
        worst = -np.inf
        for ell, s_mat in enumerate((s1, s2)):
            vals, vecs = np.linalg.eigh(s_mat)
            worst = max(worst, float(vals[-1]))
            for idx in range(len(vals) - 1, -1, -1):
                if vals[idx] <= -1e-13:
                    break
                w = vecs[:, idx]
                row = np.append([w @ basis[k][ell] @ w for k in range(8)], -1.0)
                rows_ub.append(row)
                rhs_ub.append(0.0)
        p_vals, p_vecs = np.linalg.eigh(pk)
        q_vals, q_vecs = np.linalg.eigh(qk)
        for block, (vals, vecs) in enumerate(((p_vals, p_vecs), (q_vals, q_vecs))):
            if vals[0] < floor:
                v = vecs[:, 0]
                row = np.zeros(9)
                row[3 * block:3 * block + 3] = -np.array(
                    [v[0] * v[0], 2.0 * v[0] * v[1], v[1] * v[1]])
                rows_ub.append(row)
                rhs_ub.append(-floor)
        if worst <= target and min(p_vals[0], q_vals[0]) >= floor * (1.0 - 1e-9):
            return pk, qk, max(l0k, 0.0), max(l1k, 0.0)
        res = linprog(cost, A_ub=np.array(rows_ub), b_ub=np.array(rhs_ub),
                      bounds=bounds, method="highs")
        if not res.success:
            return None
        # The cuts outer-approximate the true residual, so the LP optimum
        # is a lower bound: once it clears the target, no point in the
        # trust region can be polished to feasibility.
        if res.fun > target:
            return None
        z = res.x[:8]
    return None


def verify_certificate(rho: float, params: AlgorithmParams, m: float, L: float,
                       sigma: float, p: np.ndarray, q: np.ndarray,
                       lam0: float, lam1: float) -> Certificate | None:
    """Independent eigenvalue verification of a candidate certificate.

    The LMI residual is judged relative to the certificate's own smallest
    eigenvalue: the whole system is homogeneous, so an absolute residual
    threshold would wave through certificates whose P or Q has collapsed
    to numerical zero in the directions that matter. Accepted candidates
    are rescaled to a canonical smallest eigenvalue, after which the
    residual meets the absolute tolerance as well.
    """
    if lam0 < 0.0 or lam1 < 0.0 or not (0.0 < rho):
        return None
    min_eig = min(float(np.linalg.eigvalsh(p)[0]), float(np.linalg.eigvalsh(q)[0]))
    if min_eig <= 0.0:
        return None
    s1, s2 = assemble_lmis(rho, params, m, L, sigma, p, q, lam0, lam1)
    worst = max(np.max(np.linalg.eigvalsh(s1)), np.max(np.linalg.eigvalsh(s2)), 0.0)
    if worst / min_eig > VERIFY_TOL / CANONICAL_MIN_EIG:
        return None
    scale = CANONICAL_MIN_EIG / min_eig
    p, q = scale * p, scale * q
    lam0, lam1 = scale * lam0, scale * lam1
    p_eigs = np.linalg.eigvalsh(p)
    q_eigs = np.linalg.eigvalsh(q)
    s1, s2 = assemble_lmis(rho, params, m, L, sigma, p, q, lam0, lam1)
    e1 = float(np.max(np.linalg.eigvalsh(s1)))
    e2 = float(np.max(np.linalg.eigvalsh(s2)))
    if e1 > VERIFY_TOL or e2 > VERIFY_TOL:
        return None
    if p_eigs[0] < PSD_EPS or q_eigs[0] < PSD_EPS:
        return None
    cond_t = max(p_eigs[-1], q_eigs[-1]) / min(p_eigs[0], q_eigs[0])
    return Certificate(rho=rho, P=p, Q=q, lambda0=lam0, lambda1=lam1,
                       lmi1_max_eig=e1, lmi2_max_eig=e2, cond_T=float(cond_t))


def lower_bound(kappa: float, sigma: float) -> float:
    """Known worst-case rate floor for single-Laplacian methods."""
    if kappa < 1.0:
        raise CertificationError(f"kappa must be >= 1, got {kappa}")
    if not 0.0 <= sigma < 1.0:
        raise CertificationError(f"sigma must be in [0, 1), got {sigma}")
    return max((kappa - 1.0) / (kappa + 1.0), sigma)


def bisect_rho(params: AlgorithmParams, m: float, L: float, sigma: float,
               tol: float = DEFAULT_BISECT_TOL) -> tuple[float, Certificate]:
    """Minimum certified rate by bisection over [lower_bound, 1)."""
    if tol <= 0.0:
        raise CertificationError("bisection tolerance must be positive")
    lo = lower_bound(L / m, sigma)
    cert = find_certificate(lo, params, m, L, sigma) if lo > 0.0 else None
    if cert is not None:
        return lo, cert
    hi = 1.0 - 1e-9
    cert = find_certificate(hi, params, m, L, sigma)
    if cert is None:
        raise CertificationError(
            f"no certificate found for any rho < 1 (alpha={params.alpha:.4g}, "
            f"kappa={L / m:.4g}, sigma={sigma:.4g})")
    best_rho, best = hi, cert
    while best_rho - lo > tol:
        mid = 0.5 * (best_rho + lo)
        cand = find_certificate(mid, params, m, L, sigma)
        if cand is not None:
            best_rho, best = mid, cand
        else:
            lo = mid
    return best_rho, best


def default_alpha_range(m: float, L: float) -> tuple[float, float]:
    kappa = L / m
    return 1e-3 / L, 2.0 / L * (1.0 + 1.0 / kappa)


def optimize_alpha(beta: float, gamma: float, delta: float, m: float, L: float,
                   sigma: float, alpha_range: tuple[float, float] | None = None,
                   bisect_tol: float = DEFAULT_BISECT_TOL,
                   ) -> tuple[float, float, Certificate]:
    """Step size minimizing the certified rate, via bounded scalar minimization."""
    from .engine import make_params

    if alpha_range is None:
        alpha_range = default_alpha_range(m, L)

    cache: dict[float, float] = {}

    def certified_rate(alpha: float) -> float:
        alpha = float(alpha)
        if alpha not in cache:
            try:
                rho, _ = bisect_rho(make_params(alpha, beta, gamma, delta),
                                    m, L, sigma, tol=bisect_tol)
            except CertificationError:
                rho = 1.0
            cache[alpha] = rho
        return cache[alpha]

    # Coarse scan first: the rate is 1.0 on a whole infeasible plateau of
    # large step sizes, which strands a bracketing minimizer started blind.
    grid = np.linspace(alpha_range[0], alpha_range[1], 13)
    rates = [certified_rate(a) for a in grid]
    best = int(np.argmin(rates))
    if rates[best] >= 1.0:
        raise CertificationError(
            f"no convergent step size in [{alpha_range[0]:.4g}, {alpha_range[1]:.4g}]")
    lo_b = grid[max(best - 1, 0)]
    hi_b = grid[min(best + 1, len(grid) - 1)]
    res = minimize_scalar(certified_rate, bounds=(lo_b, hi_b), method="bounded",
                          options={"xatol": 1e-3 * (alpha_range[1] - alpha_range[0])})
    alpha_star = float(res.x)
    if certified_rate(alpha_star) > rates[best]:
        alpha_star = float(grid[best])
    rho_star, cert = bisect_rho(make_params(alpha_star, beta, gamma, delta),
                                m, L, sigma, tol=bisect_tol)
    return alpha_star, rho_star, cert


def transient_factor(cert: Certificate) -> float:
    """sqrt(cond(T)): the initial-condition amplification in the rate bound."""
    return float(np.sqrt(cert.cond_T))
