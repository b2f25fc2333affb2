"""Command-line interface.

Runs in-process by default; with --server URL it becomes a thin HTTP
client of the same operations exposed by the service module, so results
are identical either way.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from . import certify as certify_mod
from . import runner
from .scenario import RunReport, load_scenario


@click.group()
@click.option("--server", default=None, metavar="URL",
              help="Run against a selfheal service instead of in-process.")
@click.pass_context
def main(ctx, server):
    """Simulate and certify self-healing distributed optimization."""
    ctx.obj = {"server": server.rstrip("/") if server else None}


def _post(server: str, endpoint: str, payload: dict) -> dict:
    import httpx

    resp = httpx.post(f"{server}{endpoint}", json=payload, timeout=3600.0)
    if resp.status_code != 200:
        raise click.ClickException(f"{endpoint}: HTTP {resp.status_code}: {resp.text}")
    return resp.json()


def _echo_report(report: RunReport) -> None:
    click.echo(f"scenario : {report.scenario_name} ({report.scenario_digest[:12]})")
    click.echo(f"status   : {report.status} after {report.iterations} steps")
    click.echo(f"max_error: {report.final_max_error:.3e}")
    if report.tail_rate is not None:
        click.echo(f"tail rate: {report.tail_rate:.4f} (R^2 = {report.tail_rate_r2:.3f})")
    a = report.assumptions
    click.echo(f"graph    : connected={a.strongly_connected} balanced={a.weight_balanced} "
               f"sigma={a.sigma:.4f} (ok={a.all_ok})")
    if report.certificate is not None:
        c = report.certificate
        click.echo(f"certified: rho={c.rho:.4f} alpha={c.alpha:.4f} cond_T={c.cond_T:.3f}")


@main.command()
@click.argument("scenario_file", type=click.Path(exists=True))
@click.option("--seed", type=int, default=None, help="Override the scenario seed.")
@click.option("--out", type=click.Path(), default=None,
              help="Directory for the NDJSON trace and summary CSV.")
@click.option("--full-states", is_flag=True, help="Include w1/w2/x in the trace.")
@click.pass_context
def simulate(ctx, scenario_file, seed, out, full_states):
    """Run a scenario file to its stop condition."""
    scenario = load_scenario(scenario_file)
    server = ctx.obj["server"]
    if server is None:
        try:
            report = runner.run_scenario(scenario, out_dir=out,
                                         full_states=full_states, seed=seed)
        except runner.ScenarioError as exc:
            raise click.ClickException(str(exc))
    else:
        payload = {"scenario": scenario.model_dump(mode="json"), "seed": seed,
                   "full_states": full_states, "include_trace": out is not None}
        data = _post(server, "/simulate", payload)
        report = RunReport.model_validate(data["report"])
        if out is not None:
            out_dir = Path(out)
            out_dir.mkdir(parents=True, exist_ok=True)
            trace_path = out_dir / f"{scenario.name}.ndjson"
            trace_path.write_text("\n".join(data["trace"]) + "\n")
            (out_dir / f"{scenario.name}.csv").write_text(data["summary_csv"])
            report = report.model_copy(update={"trace_path": str(trace_path)})
    _echo_report(report)
    if report.status == "diverged":
        sys.exit(1)


@main.command()
@click.option("--kappa", type=float, required=True)
@click.option("--sigma", type=float, required=True)
@click.option("--beta", type=float, default=0.5, show_default=True)
@click.option("--gamma", type=float, default=1.0, show_default=True)
@click.option("--delta", type=float, default=0.5, show_default=True)
@click.option("--alpha", type=float, default=None,
              help="Fixed step size (mutually exclusive with --optimize-alpha).")
@click.option("--optimize-alpha", "optimize", is_flag=True,
              help="Search for the rate-optimal step size (the default).")
@click.option("--tol", type=float, default=certify_mod.DEFAULT_BISECT_TOL,
              show_default=True, help="Bisection tolerance on rho.")
@click.pass_context
def certify(ctx, kappa, sigma, beta, gamma, delta, alpha, optimize, tol):
    """Certify a worst-case convergence rate; emits a one-row CSV."""
    if alpha is not None and optimize:
        raise click.UsageError("--alpha and --optimize-alpha are mutually exclusive")
    server = ctx.obj["server"]
    if server is None:
        row = runner.certify_point(kappa, sigma, beta, gamma, delta, alpha, tol)
        rows = [row]
    else:
        data = _post(server, "/certify", {
            "kappa": kappa, "sigma": sigma, "beta": beta, "gamma": gamma,
            "delta": delta, "alpha": alpha, "tol": tol})
        nan = float("nan")
        rows = [{f: (data[f] if data[f] is not None else nan)
                 for f in runner.SWEEP_FIELDS}]
    click.echo(runner.sweep_to_csv(rows), nl=False)
    if not rows[0]["feasible"]:
        sys.exit(1)


@main.command()
@click.option("--kappa", type=float, required=True)
@click.option("--sigmas", required=True, metavar="A,B,C",
              help="Comma-separated sigma values.")
@click.option("--beta", type=float, default=0.5, show_default=True)
@click.option("--gamma", type=float, default=1.0, show_default=True)
@click.option("--delta", type=float, default=0.5, show_default=True)
@click.option("--tol", type=float, default=certify_mod.DEFAULT_BISECT_TOL,
              show_default=True)
@click.option("--out", type=click.Path(), default=None,
              help="Write the CSV here instead of stdout.")
@click.pass_context
def sweep(ctx, kappa, sigmas, beta, gamma, delta, tol, out):
    """Optimized certified rate for each sigma; emits a CSV table."""
    try:
        sigma_list = [float(s) for s in sigmas.split(",") if s.strip()]
    except ValueError:
        raise click.UsageError(f"bad --sigmas value: {sigmas!r}")
    server = ctx.obj["server"]
    if server is None:
        rows = runner.sweep_rates(kappa, sigma_list, beta, gamma, delta, tol)
        csv_text = runner.sweep_to_csv(rows)
    else:
        data = _post(server, "/sweep", {
            "kappa": kappa, "sigmas": sigma_list, "beta": beta,
            "gamma": gamma, "delta": delta, "tol": tol})
        csv_text = data["csv"]
    if out is not None:
        Path(out).write_text(csv_text)
        click.echo(f"wrote {out}")
    else:
        click.echo(csv_text, nl=False)


@main.command()
@click.pass_context
def check(ctx):
    """Verify the cross-module invariants; nonzero exit on any failure."""
    server = ctx.obj["server"]
    if server is None:
        checks = runner.verify_invariants()
    else:
        checks = _post(server, "/check", {})["checks"]
    ok = True
    for c in checks:
        status = "PASS" if c["ok"] else "FAIL"
        click.echo(f"[{status}] {c['name']}: {c['detail']}")
        ok = ok and c["ok"]
    click.echo("all checks passed" if ok else "some checks FAILED")
    if not ok:
        sys.exit(1)


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
def serve(host, port):
    """Start the HTTP service."""
    import uvicorn

    uvicorn.run("selfheal.service:app", host=host, port=port)


if __name__ == "__main__":
    main()
