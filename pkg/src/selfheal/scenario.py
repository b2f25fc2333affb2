"""Declarative scenario schema: validated descriptions of a full experiment.

Scenarios are plain YAML/JSON documents. Everything a run needs --- graph,
objectives, algorithm, parameters, initialization, loss model, fault
schedule, stopping rule --- lives in one validated structure with a stable
content digest, so a report can always be traced back to the exact inputs
that produced it.
"""

from __future__ import annotations

import hashlib
import json
from typing import Literal, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TopologySpec(_Strict):
    kind: Literal["ring_lattice", "complete", "explicit", "file"]
    n: int | None = None
    offsets: list[int] | None = None
    weight: float | None = None
    edges: list[tuple[int, int, float]] | None = None
    path: str | None = None

    @model_validator(mode="after")
    def _check(self):
        required = {
            "ring_lattice": ("n", "offsets", "weight"),
            "complete": ("n",),
            "explicit": ("n", "edges"),
            "file": ("path",),
        }[self.kind]
        missing = [f for f in required if getattr(self, f) is None]
        if missing:
            raise ValueError(f"topology kind {self.kind!r} requires {missing}")
        return self


class QuadraticSpec(_Strict):
    kind: Literal["quadratic"] = "quadratic"
    centers: list[list[float]]
    curvatures: list[float] | None = None   # scalar curvature per agent


class LogisticSpec(_Strict):
    kind: Literal["logistic"] = "logistic"
    dataset_path: str | None = None         # CSV with header x1,x2,label
    generator_seed: int | None = None       # built-in two-cluster generator
    n_points: int = 21
    n_agents: int | None = None             # defaults to the topology size
    degree: int = 2

    @model_validator(mode="after")
    def _check(self):
        if (self.dataset_path is None) == (self.generator_seed is None):
            raise ValueError(
                "logistic objective needs exactly one of dataset_path or generator_seed")
        return self


ObjectiveSpec = Union[QuadraticSpec, LogisticSpec]


class ParamsSpec(_Strict):
    beta: float = 0.5
    gamma: float = 1.0
    delta: float = 0.5
    alpha: float | Literal["optimize"] = "optimize"


class InitSpec(_Strict):
    kind: Literal["zeros", "uniform", "explicit"] = "zeros"
    lo: float = 0.0
    hi: float = 1.0
    w1: list[list[float]] | None = None
    w2: list[list[float]] | None = None

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "explicit" and (self.w1 is None or self.w2 is None):
            raise ValueError("explicit init requires w1 and w2")
        return self


class LossSpec(_Strict):
    kind: Literal["bernoulli", "mask"] = "bernoulli"
    rate: float = 0.0
    masks: list[list[tuple[int, int]]] | None = None  # per-step lost edges
    forgetting: int | None = None                     # silence steps before severing

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "bernoulli" and not 0.0 <= self.rate < 1.0:
            raise ValueError(f"loss rate must be in [0, 1), got {self.rate}")
        if self.kind == "mask" and self.masks is None:
            raise ValueError("mask loss requires masks")
        if self.forgetting is not None and self.forgetting < 1:
            raise ValueError("forgetting must be >= 1")
        return self


class FaultSpec(_Strict):
    """A fault applied after the step-k update, before step k+1."""

    step: int
    kind: Literal["perturb", "drop_agent", "add_agent", "swap_objective"]
    scale: float | None = None              # perturb
    agent: int | None = None                # drop / add / swap target
    edges: list[tuple[int, int, float]] | None = None   # add_agent wiring
    center: list[float] | None = None       # add / swap quadratic center
    curvature: float | None = None          # add / swap quadratic curvature

    @model_validator(mode="after")
    def _check(self):
        required = {
            "perturb": ("scale",),
            "drop_agent": ("agent",),
            "add_agent": ("agent", "edges", "center"),
            "swap_objective": ("agent", "center"),
        }[self.kind]
        missing = [f for f in required if getattr(self, f) is None]
        if missing:
            raise ValueError(f"fault {self.kind!r} requires {missing}")
        return self


class StopSpec(_Strict):
    max_steps: int = 100_000
    tol: float = 1e-10


class Scenario(_Strict):
    name: str = "unnamed"
    topology: TopologySpec
    objective: ObjectiveSpec = Field(discriminator="kind")
    algorithm: Literal["alg1", "alg2", "svl", "svl_holdlast"]
    params: ParamsSpec = ParamsSpec()
    init: InitSpec = InitSpec()
    loss: LossSpec | None = None
    faults: list[FaultSpec] = []
    stop: StopSpec = StopSpec()
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        lossy = self.loss is not None and (
            self.loss.kind == "mask" or self.loss.rate > 0.0)
        if lossy and self.algorithm not in ("alg2", "svl_holdlast"):
            raise ValueError(
                f"algorithm {self.algorithm!r} has no loss handling; "
                "use alg2 or svl_holdlast")
        steps = [f.step for f in self.faults]
        if steps != sorted(steps):
            raise ValueError("faults must be sorted by step")
        return self

    def digest(self) -> str:
        """Stable content hash of the scenario (sha256 of canonical JSON)."""
        payload = json.dumps(self.model_dump(mode="json"), sort_keys=True,
                             separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()


class AssumptionSummary(_Strict):
    strongly_connected: bool
    weight_balanced: bool
    sigma: float
    sigma_ok: bool
    all_ok: bool


class CertificateSummary(_Strict):
    rho: float
    alpha: float
    lambda0: float
    lambda1: float
    cond_T: float
    lmi1_max_eig: float
    lmi2_max_eig: float


class RunReport(_Strict):
    """Everything a run produced, traceable to the scenario that made it."""

    scenario_digest: str
    scenario_name: str
    status: Literal["converged", "max_steps", "diverged"]
    iterations: int
    final_max_error: float
    tail_rate: float | None = None
    tail_rate_r2: float | None = None
    assumptions: AssumptionSummary
    certificate: CertificateSummary | None = None
    trace_path: str | None = None


def scenario_from_yaml(text: str) -> Scenario:
    data = yaml.safe_load(text)
    if not isinstance(data, dict):
        raise ValueError("scenario document must be a mapping")
    return Scenario.model_validate(data)


def scenario_to_yaml(scenario: Scenario) -> str:
    return yaml.safe_dump(scenario.model_dump(mode="json", exclude_none=True),
                          sort_keys=True)


def load_scenario(path) -> Scenario:
    with open(path, encoding="utf-8") as fh:
        return scenario_from_yaml(fh.read())
