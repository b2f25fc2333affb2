"""HTTP facade over the simulator and certifier.

Endpoints mirror the CLI subcommands one-to-one: /simulate, /certify,
/sweep, /check, plus /health. The CLI acts as a thin client against this
service when pointed at a server, and calls the same underlying functions
in-process otherwise.
"""

from __future__ import annotations

import math
import tempfile
from pathlib import Path

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, ConfigDict

from . import __version__, certify, runner
from .scenario import RunReport, Scenario

app = FastAPI(title="selfheal", version=__version__)


class SimulateRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    scenario: Scenario
    seed: int | None = None
    full_states: bool = False
    include_trace: bool = False


class SimulateResponse(BaseModel):
    report: RunReport
    trace: list[str] | None = None
    summary_csv: str | None = None


class CertifyRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kappa: float
    sigma: float
    beta: float = 0.5
    gamma: float = 1.0
    delta: float = 0.5
    alpha: float | None = None       # None: optimize the step size
    tol: float = certify.DEFAULT_BISECT_TOL


class CertifyResponse(BaseModel):
    kappa: float
    sigma: float
    alpha: float | None
    rho: float | None
    lambda0: float | None
    lambda1: float | None
    cond_T: float | None
    feasible: bool


class SweepRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kappa: float
    sigmas: list[float]
    beta: float = 0.5
    gamma: float = 1.0
    delta: float = 0.5
    tol: float = certify.DEFAULT_BISECT_TOL


class SweepResponse(BaseModel):
    rows: list[CertifyResponse]
    csv: str


class CheckItem(BaseModel):
    name: str
    ok: bool
    detail: str


class CheckResponse(BaseModel):
    all_ok: bool
    checks: list[CheckItem]


def _none_if_nan(value: float) -> float | None:
    return None if isinstance(value, float) and math.isnan(value) else value


def _row_to_response(row: dict) -> CertifyResponse:
    return CertifyResponse(
        kappa=row["kappa"], sigma=row["sigma"],
        alpha=_none_if_nan(row["alpha"]), rho=_none_if_nan(row["rho"]),
        lambda0=_none_if_nan(row["lambda0"]),
        lambda1=_none_if_nan(row["lambda1"]),
        cond_T=_none_if_nan(row["cond_T"]), feasible=row["feasible"])


@app.get("/health")
def health() -> dict:
    return {"status": "ok", "version": __version__}


@app.post("/simulate", response_model=SimulateResponse,
          response_model_exclude_none=True)
def simulate(req: SimulateRequest) -> SimulateResponse:
    try:
        if req.include_trace:
            with tempfile.TemporaryDirectory() as tmp:
                report = runner.run_scenario(req.scenario, out_dir=tmp,
                                             full_states=req.full_states,
                                             seed=req.seed)
                trace = Path(report.trace_path).read_text().splitlines()
                csv_text = (Path(tmp) / f"{req.scenario.name}.csv").read_text()
            report = report.model_copy(update={"trace_path": None})
            return SimulateResponse(report=report, trace=trace,
                                    summary_csv=csv_text)
        report = runner.run_scenario(req.scenario, full_states=req.full_states,
                                     seed=req.seed)
        return SimulateResponse(report=report)
    except (runner.ScenarioError, ValueError) as exc:
        raise HTTPException(status_code=422, detail=str(exc))


@app.post("/certify", response_model=CertifyResponse)
def certify_endpoint(req: CertifyRequest) -> CertifyResponse:
    if req.kappa < 1.0 or not 0.0 <= req.sigma < 1.0:
        raise HTTPException(status_code=422,
                            detail="need kappa >= 1 and sigma in [0, 1)")
    row = runner.certify_point(req.kappa, req.sigma, req.beta, req.gamma,
                               req.delta, req.alpha, req.tol)
    return _row_to_response(row)


@app.post("/sweep", response_model=SweepResponse)
def sweep(req: SweepRequest) -> SweepResponse:
    if req.kappa < 1.0 or any(not 0.0 <= s < 1.0 for s in req.sigmas):
        raise HTTPException(status_code=422,
                            detail="need kappa >= 1 and sigmas in [0, 1)")
    rows = runner.sweep_rates(req.kappa, req.sigmas, req.beta, req.gamma,
                              req.delta, req.tol)
    return SweepResponse(rows=[_row_to_response(r) for r in rows],
                         csv=runner.sweep_to_csv(rows))


@app.post("/check", response_model=CheckResponse)
def check() -> CheckResponse:
    checks = [CheckItem(**c) for c in runner.verify_invariants()]
    return CheckResponse(all_ok=all(c.ok for c in checks), checks=checks)
