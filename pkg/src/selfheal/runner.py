"""Scenario execution: wire graphs, objectives, steppers, faults, and the
certifier into deterministic runs with machine-readable traces.

A run is a pure function of its scenario document: the master seed is
split hierarchically into independent init / loss / fault streams, so
e.g. toggling packet loss never perturbs the initialization draw.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import certify, engine, graph, objectives, resilience
from .scenario import (
    AssumptionSummary,
    CertificateSummary,
    FaultSpec,
    RunReport,
    Scenario,
)

TAIL_FRACTION = 0.3
SWEEP_FIELDS = ("kappa", "sigma", "alpha", "rho", "lambda0", "lambda1",
                "cond_T", "feasible")


class ScenarioError(ValueError):
    pass


def materialize_topology(spec) -> graph.Topology:
    if spec.kind == "ring_lattice":
        return graph.ring_lattice(spec.n, spec.offsets, spec.weight)
    if spec.kind == "complete":
        return graph.complete_graph(spec.n, spec.weight)
    if spec.kind == "explicit":
        return graph.Topology(n=spec.n, edges=tuple(spec.edges))
    with open(spec.path, encoding="utf-8") as fh:
        return graph.topology_from_text(fh.read())


def materialize_objective(spec, n: int) -> objectives.ObjectiveModel:
    if spec.kind == "quadratic":
        centers = np.asarray(spec.centers, dtype=float)
        if centers.shape[0] != n:
            raise ScenarioError(
                f"objective has {centers.shape[0]} agents, topology has {n}")
        return objectives.QuadraticObjective(centers, spec.curvatures)
    n_agents = spec.n_agents if spec.n_agents is not None else n
    if n_agents != n:
        raise ScenarioError(
            f"objective has {n_agents} agents, topology has {n}")
    if spec.dataset_path is not None:
        n_points = sum(1 for _ in open(spec.dataset_path)) - 1
        partition = tuple(tuple(range(a, n_points, n_agents))
                          for a in range(n_agents))
        ds = objectives.load_dataset_csv(spec.dataset_path, partition,
                                         spec.degree)
    else:
        ds = objectives.two_cluster_dataset(spec.n_points, spec.generator_seed,
                                            n_agents, spec.degree)
    return objectives.LogisticObjective(ds)


def resolve_alpha(scenario: Scenario, bounds: objectives.SectorBounds,
                  sigma: float) -> tuple[float, CertificateSummary | None]:
    """The scenario's step size, running the certifier's optimizer on demand."""
    p = scenario.params
    if p.alpha != "optimize":
        return float(p.alpha), None
    alpha, rho, cert = certify.optimize_alpha(p.beta, p.gamma, p.delta,
                                              bounds.m, bounds.L, sigma)
    return alpha, CertificateSummary(
        rho=rho, alpha=alpha, lambda0=cert.lambda0, lambda1=cert.lambda1,
        cond_T=cert.cond_T, lmi1_max_eig=cert.lmi1_max_eig,
        lmi2_max_eig=cert.lmi2_max_eig)


@dataclass
class _RunState:
    """Everything a fault may rewrite mid-run."""

    topology: graph.Topology
    lap: graph.LaplacianMatrix
    model: objectives.ObjectiveModel
    x_opt: np.ndarray
    state: engine.NetworkState
    memory: resilience.EdgeMemory = field(default_factory=resilience.EdgeMemory)


def _apply_fault(rs: _RunState, fault: FaultSpec, seed) -> None:
    if fault.kind == "perturb":
        rs.state = engine.perturb_state(rs.state, fault.scale, seed)
        return
    if fault.kind == "swap_objective":
        rs.model = engine.swap_objective(rs.model, fault.agent, fault.center,
                                         fault.curvature)
    elif fault.kind == "drop_agent":
        rs.topology, rs.state, rs.model = engine.drop_agent(
            rs.topology, rs.state, rs.model, fault.agent)
    else:
        rs.topology, rs.state, rs.model = engine.add_agent(
            rs.topology, rs.state, rs.model, fault.agent, fault.edges or [],
            fault.center, fault.curvature)
    rs.lap = graph.build_laplacian(rs.topology)
    rs.x_opt = objectives.solve_centralized(rs.model)
    rs.memory = resilience.EdgeMemory()  # edge set changed; no stale entries


def estimate_tail_rate(ks, errors, tol: float) -> tuple[float | None, float | None]:
    """Least-squares rate on log(error) over the last 30% of pre-tolerance steps."""
    pts = [(k, e) for k, e in zip(ks, errors)
           if np.isfinite(e) and e > max(tol, 0.0)]
    if len(pts) < 4:
        return None, None
    tail = pts[-max(int(np.ceil(TAIL_FRACTION * len(pts))), 4):]
    kk = np.array([p[0] for p in tail], dtype=float)
    le = np.log(np.array([p[1] for p in tail]))
    slope, intercept = np.polyfit(kk, le, 1)
    pred = slope * kk + intercept
    ss_res = float(np.sum((le - pred) ** 2))
    ss_tot = float(np.sum((le - le.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(np.exp(slope)), r2


def _trace_line(record: engine.StepRecord, full_states: bool,
                state: engine.NetworkState) -> str:
    obj = {"k": record.k, "max_error": record.max_error}
    if full_states:
        obj["w1"] = state.w1.tolist()
        obj["w2"] = state.w2.tolist()
        obj["x"] = record.x.tolist()
    return json.dumps(obj, sort_keys=True)


def run_scenario(scenario: Scenario, out_dir=None, full_states: bool = False,
                 seed: int | None = None, force: bool = False) -> RunReport:
    """Execute a scenario to its stop condition; deterministic given inputs.

    Writes an NDJSON trace plus a summary CSV when out_dir is given. The
    divergence guard converts runaway trajectories into a 'diverged'
    report instead of an exception.
    """
    master = scenario.seed if seed is None else seed
    init_ss, loss_ss, fault_ss = np.random.SeedSequence(master).spawn(3)

    topology = materialize_topology(scenario.topology)
    lap = graph.build_laplacian(topology)
    report_assumptions = graph.check_assumptions(lap)
    if not report_assumptions.all_ok and not force:
        raise ScenarioError(
            f"graph assumptions violated (connected={report_assumptions.strongly_connected}, "
            f"balanced={report_assumptions.weight_balanced}, "
            f"sigma={report_assumptions.sigma:.4f}); pass force=True to run anyway")
    model = materialize_objective(scenario.objective, topology.n)
    bounds = model.sector_bounds()
    alpha, cert_summary = resolve_alpha(scenario, bounds, lap.sigma)
    params = engine.make_params(alpha, scenario.params.beta,
                                scenario.params.gamma, scenario.params.delta)
    x_opt = objectives.solve_centralized(model)

    if scenario.init.kind == "zeros":
        state = engine.zero_state(topology.n, model.d)
    elif scenario.init.kind == "uniform":
        state = engine.uniform_state(topology.n, model.d, scenario.init.lo,
                                     scenario.init.hi, init_ss)
    else:
        state = engine.NetworkState(
            w1=np.asarray(scenario.init.w1, dtype=float),
            w2=np.asarray(scenario.init.w2, dtype=float), k=0)

    loss_model = None
    forgetting = None
    if scenario.loss is not None:
        if scenario.loss.kind == "bernoulli":
            loss_seed = int(loss_ss.generate_state(1)[0])
            loss_model = resilience.BernoulliLoss(scenario.loss.rate, loss_seed)
        else:
            loss_model = resilience.MaskSchedule(
                [set(map(tuple, m)) for m in scenario.loss.masks])
        if scenario.loss.forgetting is not None:
            forgetting = resilience.ForgettingConfig(scenario.loss.forgetting)

    faults_at: dict[int, list[FaultSpec]] = {}
    for f in scenario.faults:
        faults_at.setdefault(f.step, []).append(f)
    fault_seeds = fault_ss.spawn(max(len(scenario.faults), 1))

    rs = _RunState(topology=topology, lap=lap, model=model, x_opt=x_opt,
                   state=state)
    trace: list[str] = []
    ks: list[int] = []
    errors: list[float] = []
    status = "max_steps"
    fault_idx = 0

    for _ in range(scenario.stop.max_steps):
        k = rs.state.k
        try:
            if scenario.algorithm == "alg1":
                rs.state, record = engine.step_alg1(
                    rs.state, params, rs.lap, rs.model, rs.x_opt)
            elif scenario.algorithm == "svl":
                rs.state, record = engine.step_svl(
                    rs.state, params, rs.lap, rs.model, rs.x_opt)
            else:
                lost = (loss_model.lost_edges(k, rs.topology.edges)
                        if loss_model is not None else set())
                if forgetting is not None:
                    resilience.apply_forgetting(rs.memory, k, forgetting)
                stepper = (resilience.step_alg2 if scenario.algorithm == "alg2"
                           else resilience.step_svl_holdlast)
                rs.state, record = stepper(rs.state, rs.memory, params, rs.lap,
                                           rs.topology, rs.model, lost, rs.x_opt)
        except engine.DivergenceError:
            status = "diverged"
            break
        ks.append(record.k)
        errors.append(record.max_error)
        trace.append(_trace_line(record, full_states, rs.state))
        for fault in faults_at.get(record.k, ()):
            _apply_fault(rs, fault, fault_seeds[fault_idx])
            fault_idx += 1
        if record.max_error < scenario.stop.tol and record.k not in faults_at:
            status = "converged"
            break

    tail_rate, tail_r2 = estimate_tail_rate(ks, errors, scenario.stop.tol)
    final_assumptions = graph.check_assumptions(rs.lap)

    trace_path = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        trace_path = str(out / f"{scenario.name}.ndjson")
        with open(trace_path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(trace) + "\n")
        with open(out / f"{scenario.name}.csv", "w", newline="",
                  encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["k", "max_error"])
            writer.writerows(zip(ks, (repr(e) for e in errors)))

    return RunReport(
        scenario_digest=scenario.digest(),
        scenario_name=scenario.name,
        status=status,
        iterations=len(ks),
        final_max_error=errors[-1] if errors else float("nan"),
        tail_rate=tail_rate,
        tail_rate_r2=tail_r2,
        assumptions=AssumptionSummary(
            strongly_connected=final_assumptions.strongly_connected,
            weight_balanced=final_assumptions.weight_balanced,
            sigma=final_assumptions.sigma,
            sigma_ok=final_assumptions.sigma_ok,
            all_ok=final_assumptions.all_ok),
        certificate=cert_summary,
        trace_path=trace_path,
    )


def certify_point(kappa: float, sigma: float, beta: float, gamma: float,
                  delta: float, alpha: float | None = None,
                  tol: float = certify.DEFAULT_BISECT_TOL) -> dict:
    """One certification row; alpha=None optimizes the step size."""
    m, L = 1.0 / kappa, 1.0
    try:
        if alpha is None:
            alpha_star, rho, cert = certify.optimize_alpha(
                beta, gamma, delta, m, L, sigma, bisect_tol=tol)
        else:
            alpha_star = alpha
            rho, cert = certify.bisect_rho(
                engine.make_params(alpha, beta, gamma, delta), m, L, sigma,
                tol=tol)
        return {"kappa": kappa, "sigma": sigma, "alpha": alpha_star,
                "rho": rho, "lambda0": cert.lambda0, "lambda1": cert.lambda1,
                "cond_T": cert.cond_T, "feasible": True}
    except certify.CertificationError:
        return {"kappa": kappa, "sigma": sigma,
                "alpha": alpha if alpha is not None else float("nan"),
                "rho": float("nan"), "lambda0": float("nan"),
                "lambda1": float("nan"), "cond_T": float("nan"),
                "feasible": False}


def sweep_rates(kappa: float, sigma_list, beta: float = 0.5,
                gamma: float = 1.0, delta: float = 0.5,
                tol: float = certify.DEFAULT_BISECT_TOL) -> list[dict]:
    """Optimized certified rate per sigma; failures become infeasible rows."""
    rows = [certify_point(kappa, float(s), beta, gamma, delta, None, tol)
            for s in sigma_list]
    return sorted(rows, key=lambda r: r["sigma"])


def sweep_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SWEEP_FIELDS)
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


def _check(name: str, ok: bool, detail: str) -> dict:
    return {"name": name, "ok": bool(ok), "detail": detail}


def verify_invariants() -> list[dict]:
    """Cross-module smoke checks of the headline quantitative claims."""
    checks = []

    lattice = graph.ring_lattice(7, {1, 3, 5}, 0.25)
    lap = graph.build_laplacian(lattice)
    checks.append(_check(
        "lattice_sigma", abs(lap.sigma - 0.562) < 1e-3,
        f"sigma = {lap.sigma:.6f}, reference 0.562 +/- 1e-3"))

    rng = np.random.default_rng(7)
    model = objectives.QuadraticObjective(rng.normal(size=(7, 2)))
    x_opt = objectives.solve_centralized(model)
    params = engine.make_params(0.3, 0.5, 1.0, 0.5)
    fp = engine.construct_fixed_point(params, lap, model, x_opt)
    state = engine.NetworkState(w1=fp.w1_star, w2=fp.w2hat_star, k=0)
    nxt, _ = engine.step_gm(state, params, lap, model, x_opt)
    drift = max(float(np.max(np.abs(nxt.w1 - fp.w1_star))),
                float(np.max(np.abs(nxt.w2 - fp.w2hat_star))))
    checks.append(_check(
        "fixed_point_stationary", drift < 1e-9,
        f"one-step drift {drift:.2e} (tolerance 1e-9)"))

    base = engine.uniform_state(7, 2, 0.0, 1.0, 11)
    shifted = engine.NetworkState(w1=base.w1, w2=base.w2 + 3.7, k=0)
    worst = 0.0
    a, b = base, shifted
    for _ in range(50):
        a, ra = engine.step_alg1(a, params, lap, model, x_opt)
        b, rb = engine.step_alg1(b, params, lap, model, x_opt)
        worst = max(worst, float(np.max(np.abs(ra.x - rb.x))))
    checks.append(_check(
        "consensus_shift_invariance", worst < 1e-12,
        f"max |x| deviation over 50 steps {worst:.2e} (tolerance 1e-12)"))

    state_a = engine.uniform_state(7, 2, 0.0, 1.0, 13)
    state_b = state_a
    memory = resilience.EdgeMemory()
    identical = True
    for k in range(100):
        state_a, _ = engine.step_alg1(state_a, params, lap, model, x_opt)
        state_b, _ = resilience.step_alg2(state_b, memory, params, lap,
                                          lattice, model, set(), x_opt)
        if not (np.array_equal(state_a.w1, state_b.w1)
                and np.array_equal(state_a.w2, state_b.w2)):
            identical = False
            break
    checks.append(_check(
        "zero_loss_equivalence", identical,
        "lossless protocol trajectories bit-identical over 100 steps"
        if identical else f"trajectories diverged at step {k}"))

    bounds = model.sector_bounds()
    try:
        rho, cert = certify.bisect_rho(params, bounds.m, bounds.L, lap.sigma)
        factor = certify.transient_factor(cert)
        state = engine.uniform_state(7, 2, 0.0, 1.0, 17)
        # the bound governs the projected system, whose second state lives
        # off the consensus subspace
        state = engine.NetworkState(
            w1=state.w1, w2=engine._project_off_consensus(state.w2), k=0)
        fp = engine.construct_fixed_point(params, lap, model, x_opt)
        dev0 = float(np.linalg.norm(
            np.hstack([state.w1 - fp.w1_star, state.w2 - fp.w2hat_star])))
        violation = -np.inf
        for k in range(1, 120):
            state, _ = engine.step_gm(state, params, lap, model, x_opt)
            dev = float(np.linalg.norm(
                np.hstack([state.w1 - fp.w1_star, state.w2 - fp.w2hat_star])))
            bound = factor * rho ** k * dev0
            violation = max(violation, dev - bound * (1.0 + 1e-9))
        checks.append(_check(
            "transient_bound", violation <= 0.0,
            f"rho = {rho:.4f}, sqrt(cond_T) = {factor:.3f}, "
            f"worst bound violation {violation:.2e}"))
    except certify.CertificationError as exc:
        checks.append(_check("transient_bound", False, str(exc)))

    return checks
