"""Per-agent gradient oracles with sector bounds and a centralized reference solver.

Decision variables are 1 x d rows; stacked quantities are n x d with one row
per agent. Agent indices are 1-based in public interfaces.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit


class ObjectiveError(ValueError):
    pass


class SolverError(RuntimeError):
    """Centralized solver failed to reach tolerance; carries the residual."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class SectorBounds:
    m: float
    L: float

    @property
    def kappa(self) -> float:
        return self.L / self.m

    def __iter__(self):
        yield self.m
        yield self.L
        yield self.kappa


def embed_polynomial(point: np.ndarray, degree: int) -> np.ndarray:
    """All monomials of the features up to the given total degree.

    Graded-lexicographic order with the constant term first, e.g.
    (a, b) at degree 2 -> (1, a, b, a^2, ab, b^2).
    """
    if degree < 1:
        raise ObjectiveError(f"embedding degree must be >= 1, got {degree}")
    point = np.asarray(point, dtype=float).ravel()
    out = []
    for total in range(degree + 1):
        for combo in itertools.combinations_with_replacement(range(point.size), total):
            out.append(np.prod(point[list(combo)]) if combo else 1.0)
    return np.array(out)


@dataclass(frozen=True)
class LabeledDataset:
    """Binary-labeled 2-D points with a per-agent index partition."""

    points: np.ndarray                    # N x 2 raw features
    labels: np.ndarray                    # N, values in {-1, +1}
    partition: tuple[tuple[int, ...], ...]  # index lists, one per agent
    degree: int = 2

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if not np.all(np.isin(labels, (-1, 1))):
            raise ObjectiveError("labels must be -1 or +1")
        covered = sorted(idx for part in self.partition for idx in part)
        if covered != list(range(len(labels))):
            raise ObjectiveError("partition must cover every index exactly once")

    @property
    def n_agents(self) -> int:
        return len(self.partition)

    def embedded(self, agent: int) -> np.ndarray:
        """Embedded feature matrix M_i (one row per local data point), 1-based agent."""
        idx = list(self.partition[agent - 1])
        return np.stack([embed_polynomial(self.points[j], self.degree) for j in idx])

    def agent_labels(self, agent: int) -> np.ndarray:
        return self.labels[list(self.partition[agent - 1])].astype(float)


class ObjectiveModel:
    """Base class: n agents, each holding a smooth strongly convex local cost."""

    kind = "custom"
    n: int
    d: int

    def gradient(self, agent: int, x: np.ndarray) -> np.ndarray:
        """Analytic gradient of agent's local cost at the row x (agent 1-based)."""
        x = np.asarray(x, dtype=float).ravel()
        if x.size != self.d:
            raise ObjectiveError(f"expected dimension {self.d}, got {x.size}")
        if not 1 <= agent <= self.n:
            raise ObjectiveError(f"agent {agent} outside [1, {self.n}]")
        return self._gradient(agent, x)

    def gradient_all(self, x_stack: np.ndarray) -> np.ndarray:
        """Row-wise gradients: row i of the result is grad f_i at row i of x_stack."""
        x_stack = np.asarray(x_stack, dtype=float)
        return np.stack([self.gradient(i + 1, x_stack[i]) for i in range(self.n)])

    def value(self, agent: int, x: np.ndarray) -> float:
        raise NotImplementedError

    def _gradient(self, agent: int, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class QuadraticObjective(ObjectiveModel):
    """f_i(x) = 1/2 (x - c_i) H_i (x - c_i)^T with symmetric PD curvature H_i."""

    kind = "quadratic"

    def __init__(self, centers: np.ndarray, curvatures=None):
        centers = np.atleast_2d(np.asarray(centers, dtype=float))
        self.n, self.d = centers.shape
        self.centers = centers
        if curvatures is None:
            curvatures = [np.eye(self.d)] * self.n
        hs = []
        for h in curvatures:
            h = np.asarray(h, dtype=float)
            if h.ndim == 0:
                h = float(h) * np.eye(self.d)
            if h.shape != (self.d, self.d) or not np.allclose(h, h.T):
                raise ObjectiveError("curvatures must be symmetric d x d (or scalars)")
            hs.append(h)
        if len(hs) != self.n:
            raise ObjectiveError("need one curvature per agent")
        self.curvatures = hs

    def _gradient(self, agent, x):
        return (x - self.centers[agent - 1]) @ self.curvatures[agent - 1]

    def value(self, agent, x):
        r = np.asarray(x, dtype=float).ravel() - self.centers[agent - 1]
        return 0.5 * float(r @ self.curvatures[agent - 1] @ r)

    def sector_bounds(self) -> SectorBounds:
        eigs = np.concatenate([np.linalg.eigvalsh(h) for h in self.curvatures])
        m, L = float(eigs.min()), float(eigs.max())
        if m <= 0:
            raise ObjectiveError("quadratic model is not strongly convex")
        return SectorBounds(m=m, L=L)

    def subset(self, keep: list[int]) -> "QuadraticObjective":
        """New model over the (1-based) agents in `keep`, in order."""
        idx = [a - 1 for a in keep]
        return QuadraticObjective(self.centers[idx],
                                  [self.curvatures[i] for i in idx])

    def with_agent_swapped(self, agent: int, center, curvature=None) -> "QuadraticObjective":
        centers = self.centers.copy()
        centers[agent - 1] = np.asarray(center, dtype=float)
        curvs = list(self.curvatures)
        if curvature is not None:
            curvs[agent - 1] = curvature
        return QuadraticObjective(centers, curvs)

    def with_agent_added(self, center, curvature=None) -> "QuadraticObjective":
        centers = np.vstack([self.centers, np.atleast_2d(center)])
        curvs = list(self.curvatures) + [curvature if curvature is not None
                                         else np.eye(self.d)]
        return QuadraticObjective(centers, curvs)


class LogisticObjective(ObjectiveModel):
    """Regularized logistic loss over a partitioned, polynomially embedded dataset.

    f_i(x) = sum_{j in S_i} log(1 + exp(-l_j x M(d_j)^T)) + (1/n) ||x||^2
    """

    kind = "logistic"

    def __init__(self, dataset: LabeledDataset):
        self.dataset = dataset
        self.n = dataset.n_agents
        self._m_mats = [dataset.embedded(i) for i in range(1, self.n + 1)]
        self._labels = [dataset.agent_labels(i) for i in range(1, self.n + 1)]
        self.d = self._m_mats[0].shape[1]

    def _gradient(self, agent, x):
        m_mat = self._m_mats[agent - 1]
        labels = self._labels[agent - 1]
        margins = labels * (m_mat @ x)
        # d/dx log(1+e^{-t}) = -sigmoid(-t)
        coeff = -labels * expit(-margins)
        return coeff @ m_mat + (2.0 / self.n) * x

    def value(self, agent, x):
        x = np.asarray(x, dtype=float).ravel()
        m_mat = self._m_mats[agent - 1]
        labels = self._labels[agent - 1]
        margins = labels * (m_mat @ x)
        return float(np.sum(np.logaddexp(0.0, -margins))
                     + (1.0 / self.n) * x @ x)

    def sector_bounds(self) -> SectorBounds:
        """The 2/n regularizer lower bound and the spectral-norm Hessian bound
        L_i = ||(2/n) I + 1/4 M_i^T M_i||, L = max_i L_i."""
        m = 2.0 / self.n
        l_vals = []
        for m_mat in self._m_mats:
            h = (2.0 / self.n) * np.eye(self.d) + 0.25 * (m_mat.T @ m_mat)
            l_vals.append(float(np.linalg.norm(h, 2)))
        return SectorBounds(m=m, L=max(l_vals))

    def empirical_curvature_bounds(self, xs: np.ndarray) -> SectorBounds:
        """Tighter diagnostic: Hessian eigenvalue range over sample rows xs."""
        lo, hi = np.inf, -np.inf
        for x in np.atleast_2d(xs):
            for m_mat, labels in zip(self._m_mats, self._labels):
                margins = labels * (m_mat @ x)
                s = expit(margins)
                w = s * (1.0 - s)
                h = (m_mat.T * w) @ m_mat + (2.0 / self.n) * np.eye(self.d)
                eigs = np.linalg.eigvalsh(h)
                lo, hi = min(lo, eigs[0]), max(hi, eigs[-1])
        return SectorBounds(m=float(lo), L=float(hi))

    def subset(self, keep: list[int]) -> "LogisticObjective":
        part = tuple(self.dataset.partition[a - 1] for a in keep)
        # reindex the surviving points compactly
        old_idx = [j for p in part for j in p]
        remap = {old: new for new, old in enumerate(old_idx)}
        new_part = tuple(tuple(remap[j] for j in p) for p in part)
        ds = LabeledDataset(points=self.dataset.points[old_idx],
                            labels=self.dataset.labels[old_idx],
                            partition=new_part,
                            degree=self.dataset.degree)
        return LogisticObjective(ds)


class CustomObjective(ObjectiveModel):
    """Caller-supplied gradient oracles with caller-supplied sector bounds."""

    kind = "custom"

    def __init__(self, grads, d: int, bounds: SectorBounds | None = None):
        self.n = len(grads)
        self.d = d
        self._grads = list(grads)
        self._bounds = bounds

    def _gradient(self, agent, x):
        return np.asarray(self._grads[agent - 1](x), dtype=float).ravel()

    def sector_bounds(self) -> SectorBounds:
        if self._bounds is None:
            raise ObjectiveError(
                "custom models carry no closed-form sector bounds; supply them")
        return self._bounds


def estimate_sector_bounds(model: ObjectiveModel) -> SectorBounds:
    return model.sector_bounds()


def aggregate_gradient(model: ObjectiveModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float).ravel()
    return sum(model.gradient(i, x) for i in range(1, model.n + 1))


def solve_centralized(model: ObjectiveModel, tol: float = 1e-12,
                      max_iter: int = 10_000_000) -> np.ndarray:
    """Reference optimizer of sum_i f_i via deterministic gradient descent.

    Step size 1/(n L); stops when ||sum_i grad f_i(x)|| < tol.
    """
    bounds = model.sector_bounds()
    if bounds.m <= 0:
        raise ObjectiveError("model must be strongly convex")
    step = 1.0 / (model.n * bounds.L)
    x = np.zeros(model.d)
    g = aggregate_gradient(model, x)
    for _ in range(max_iter):
        res = float(np.linalg.norm(g))
        if res < tol:
            return x
        x = x - step * g
        g = aggregate_gradient(model, x)
    res = float(np.linalg.norm(g))
    if res < tol:
        return x
    raise SolverError(
        f"centralized solver hit the iteration cap with residual {res:.3e}", res)


def two_cluster_dataset(n_points: int = 21, seed: int = 1,
                        n_agents: int = 7, degree: int = 2) -> LabeledDataset:
    """Deterministic synthetic 2-D set: an inner blob (+1) inside a ring (-1).

    A circle separates the classes, so a degree-2 embedding makes the
    logistic problem well-posed. Points are dealt round-robin to agents.
    """
    rng = np.random.default_rng(seed)
    n_inner = n_points // 2
    n_outer = n_points - n_inner
    # Kept within the unit disc: the embedded features then stay O(1), so
    # the Lipschitz bound (and with it the stable step-size range of the
    # lossy protocol) does not blow up with the embedding degree.
    inner = rng.normal(scale=0.2, size=(n_inner, 2))
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n_outer)
    radius = rng.uniform(0.8, 1.0, size=n_outer)
    outer = np.column_stack([radius * np.cos(theta), radius * np.sin(theta)])
    points = np.vstack([inner, outer])
    labels = np.concatenate([np.ones(n_inner), -np.ones(n_outer)])
    order = rng.permutation(n_points)
    points, labels = points[order], labels[order]
    partition = tuple(tuple(range(a, n_points, n_agents)) for a in range(n_agents))
    return LabeledDataset(points=points, labels=labels,
                          partition=partition, degree=degree)


def load_dataset_csv(path, partition: tuple[tuple[int, ...], ...],
                     degree: int = 2) -> LabeledDataset:
    """Load a dataset with header x1,x2,label and labels in {-1, 1}."""
    points, labels = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["x1", "x2", "label"]:
            raise ObjectiveError(f"{path}: expected header x1,x2,label")
        for row_no, row in enumerate(reader, start=2):
            try:
                points.append((float(row["x1"]), float(row["x2"])))
                labels.append(int(float(row["label"])))
            except (TypeError, ValueError):
                raise ObjectiveError(f"{path}: malformed row at line {row_no}")
    return LabeledDataset(points=np.array(points), labels=np.array(labels),
                          partition=partition, degree=degree)
