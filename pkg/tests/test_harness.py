import math

import numpy as np
import pytest
from click.testing import CliRunner
from pydantic import ValidationError

from selfheal.cli import main as cli_main
from selfheal.runner import (
    SWEEP_FIELDS,
    ScenarioError,
    certify_point,
    estimate_tail_rate,
    run_scenario,
    sweep_to_csv,
)
from selfheal.scenario import (
    Scenario,
    scenario_from_yaml,
    scenario_to_yaml,
)


def quad_scenario(**overrides) -> Scenario:
    base = {
        "name": "quad",
        "topology": {"kind": "ring_lattice", "n": 7, "offsets": [1, 3, 5],
                     "weight": 0.25},
        "objective": {"kind": "quadratic",
                      "centers": [[float(i), float(-i)] for i in range(7)]},
        "algorithm": "alg1",
        "params": {"alpha": 0.3},
        "init": {"kind": "uniform", "lo": -1.0, "hi": 1.0},
        "stop": {"max_steps": 2000, "tol": 1e-10},
        "seed": 3,
    }
    base.update(overrides)
    return Scenario.model_validate(base)


class TestScenarioSchema:
    def test_yaml_round_trip(self):
        s = quad_scenario()
        assert scenario_from_yaml(scenario_to_yaml(s)) == s

    def test_digest_stable_under_key_order(self):
        s = quad_scenario()
        text = scenario_to_yaml(s)
        reordered = "\n".join(reversed(text.strip().splitlines())) + "\n"
        # yaml mappings are order-free; the digest must not care
        assert scenario_from_yaml(text).digest() == s.digest()

    def test_digest_tracks_content(self):
        assert quad_scenario().digest() != quad_scenario(seed=4).digest()

    def test_unknown_field_rejected(self):
        with pytest.raises(ValidationError):
            Scenario.model_validate({**quad_scenario().model_dump(),
                                     "typo_field": 1})

    def test_loss_requires_loss_aware_algorithm(self):
        with pytest.raises(ValidationError, match="loss handling"):
            quad_scenario(loss={"kind": "bernoulli", "rate": 0.3})

    def test_zero_rate_loss_allowed_anywhere(self):
        assert quad_scenario(loss={"kind": "bernoulli", "rate": 0.0})

    def test_faults_must_be_sorted(self):
        with pytest.raises(ValidationError, match="sorted"):
            quad_scenario(faults=[{"step": 20, "kind": "perturb", "scale": 1.0},
                                  {"step": 10, "kind": "perturb", "scale": 1.0}])

    def test_fault_requires_its_fields(self):
        with pytest.raises(ValidationError, match="requires"):
            quad_scenario(faults=[{"step": 5, "kind": "drop_agent"}])

    def test_topology_requires_kind_fields(self):
        with pytest.raises(ValidationError, match="requires"):
            Scenario.model_validate({**quad_scenario().model_dump(),
                                     "topology": {"kind": "ring_lattice", "n": 7}})

    def test_logistic_needs_one_dataset_source(self):
        with pytest.raises(ValidationError, match="exactly one"):
            quad_scenario(objective={"kind": "logistic"})


class TestTailRate:
    def test_exact_geometric_sequence(self):
        ks = list(range(50))
        errors = [0.9 ** k for k in ks]
        rate, r2 = estimate_tail_rate(ks, errors, 0.0)
        assert rate == pytest.approx(0.9, abs=1e-12)
        assert r2 == pytest.approx(1.0)

    def test_plateau_below_tolerance_excluded(self):
        ks = list(range(100))
        errors = [max(0.5 ** k, 1e-12) for k in ks]
        rate, _ = estimate_tail_rate(ks, errors, 1e-10)
        assert rate == pytest.approx(0.5, abs=1e-6)

    def test_too_few_points(self):
        assert estimate_tail_rate([0, 1], [1.0, 0.5], 0.0) == (None, None)


class TestRunScenario:
    def test_converges_and_reports(self):
        report = run_scenario(quad_scenario())
        assert report.status == "converged"
        assert report.final_max_error < 1e-10
        assert 0.0 < report.tail_rate < 1.0
        assert report.tail_rate_r2 > 0.9
        assert report.assumptions.all_ok
        assert report.scenario_digest == quad_scenario().digest()

    def test_traces_byte_identical(self, tmp_path):
        s = quad_scenario()
        a = run_scenario(s, out_dir=tmp_path / "a")
        b = run_scenario(s, out_dir=tmp_path / "b")
        assert (tmp_path / "a" / "quad.ndjson").read_bytes() == \
               (tmp_path / "b" / "quad.ndjson").read_bytes()
        assert (tmp_path / "a" / "quad.csv").read_bytes() == \
               (tmp_path / "b" / "quad.csv").read_bytes()
        assert a.final_max_error == b.final_max_error

    def test_seed_override_changes_trajectory(self, tmp_path):
        s = quad_scenario()
        a = run_scenario(s, out_dir=tmp_path / "a")
        b = run_scenario(s, out_dir=tmp_path / "b", seed=99)
        assert (tmp_path / "a" / "quad.ndjson").read_bytes() != \
               (tmp_path / "b" / "quad.ndjson").read_bytes()
        assert a.scenario_digest == b.scenario_digest

    def test_full_states_in_trace(self, tmp_path):
        run_scenario(quad_scenario(), out_dir=tmp_path, full_states=True)
        first = (tmp_path / "quad.ndjson").read_text().splitlines()[0]
        assert '"w1"' in first and '"x"' in first

    def test_perturb_fault_reconverges(self):
        s = quad_scenario(faults=[{"step": 50, "kind": "perturb",
                                   "scale": 10.0}])
        report = run_scenario(s)
        assert report.status == "converged"
        assert report.iterations > 50

    def test_swap_fault_moves_target(self):
        faults = [{"step": 40, "kind": "swap_objective", "agent": a,
                   "center": [5.0, 5.0]} for a in range(1, 8)]
        report = run_scenario(quad_scenario(faults=faults))
        assert report.status == "converged"

    def test_divergence_reported_not_raised(self):
        report = run_scenario(quad_scenario(params={"alpha": 50.0}))
        assert report.status == "diverged"

    def test_assumption_gate(self):
        bad = quad_scenario(topology={
            "kind": "explicit", "n": 4,
            "edges": [[1, 2, 0.5], [2, 1, 0.5], [3, 4, 0.5], [4, 3, 0.5]]})
        with pytest.raises(ScenarioError, match="assumptions"):
            run_scenario(bad)
        forced = run_scenario(
            quad_scenario(topology=bad.topology.model_dump(),
                          objective={"kind": "quadratic",
                                     "centers": [[0.0, 0.0]] * 4},
                          stop={"max_steps": 50, "tol": 1e-10}),
            force=True)
        assert forced.status in ("converged", "max_steps")

    def test_lossy_scenario_runs(self):
        s = quad_scenario(algorithm="alg2",
                          loss={"kind": "bernoulli", "rate": 0.3},
                          stop={"max_steps": 5000, "tol": 1e-10})
        report = run_scenario(s)
        assert report.status == "converged"

    def test_mask_loss_deterministic(self, tmp_path):
        masks = [[[1, 2], [3, 1]], [], [[2, 3]]]
        s = quad_scenario(name="masked", algorithm="alg2",
                          loss={"kind": "mask", "masks": masks})
        run_scenario(s, out_dir=tmp_path / "a")
        run_scenario(s, out_dir=tmp_path / "b")
        assert (tmp_path / "a" / "masked.ndjson").read_bytes() == \
               (tmp_path / "b" / "masked.ndjson").read_bytes()


class TestCertifyPoint:
    def test_fixed_alpha_row(self):
        row = certify_point(10.0, 0.5, 0.5, 1.0, 0.5, alpha=1.8172)
        assert row["feasible"]
        assert row["rho"] == pytest.approx(0.9285, abs=1.5e-3)
        assert set(row) == set(SWEEP_FIELDS)

    def test_infeasible_row_is_nan(self):
        row = certify_point(10.0, 0.5, 0.5, 1.0, 0.5, alpha=0.18)
        assert not row["feasible"]
        assert math.isnan(row["rho"])

    def test_csv_fields(self):
        row = {f: 1.0 for f in SWEEP_FIELDS}
        text = sweep_to_csv([row])
        header = text.splitlines()[0]
        assert header == ",".join(SWEEP_FIELDS)


class TestCli:
    def write_scenario(self, tmp_path, scenario):
        path = tmp_path / "scenario.yaml"
        path.write_text(scenario_to_yaml(scenario))
        return str(path)

    def test_simulate(self, tmp_path):
        runner = CliRunner()
        path = self.write_scenario(tmp_path, quad_scenario())
        result = runner.invoke(cli_main, ["simulate", path, "--out",
                                          str(tmp_path / "out")])
        assert result.exit_code == 0, result.output
        assert "converged" in result.output
        assert (tmp_path / "out" / "quad.ndjson").exists()
        assert (tmp_path / "out" / "quad.csv").exists()

    def test_simulate_diverged_exit_code(self, tmp_path):
        runner = CliRunner()
        path = self.write_scenario(tmp_path,
                                   quad_scenario(params={"alpha": 50.0}))
        result = runner.invoke(cli_main, ["simulate", path])
        assert result.exit_code == 1
        assert "diverged" in result.output

    def test_certify_fixed_alpha(self):
        runner = CliRunner()
        result = runner.invoke(cli_main, ["certify", "--kappa", "10",
                                          "--sigma", "0.5", "--alpha", "1.8172"])
        assert result.exit_code == 0, result.output
        lines = result.output.strip().splitlines()
        assert lines[0] == ",".join(SWEEP_FIELDS)
        rho = float(lines[1].split(",")[3])
        assert rho == pytest.approx(0.9285, abs=1.5e-3)

    def test_certify_infeasible_exit_code(self):
        runner = CliRunner()
        result = runner.invoke(cli_main, ["certify", "--kappa", "10",
                                          "--sigma", "0.5", "--alpha", "0.18"])
        assert result.exit_code == 1

    def test_certify_flag_conflict(self):
        runner = CliRunner()
        result = runner.invoke(cli_main, ["certify", "--kappa", "2",
                                          "--sigma", "0.1", "--alpha", "0.5",
                                          "--optimize-alpha"])
        assert result.exit_code == 2
        assert "mutually exclusive" in result.output

    def test_sweep_bad_sigmas(self):
        runner = CliRunner()
        result = runner.invoke(cli_main, ["sweep", "--kappa", "2",
                                          "--sigmas", "a,b"])
        assert result.exit_code == 2

    def test_check_passes(self):
        runner = CliRunner()
        result = runner.invoke(cli_main, ["check"])
        assert result.exit_code == 0, result.output
        assert "all checks passed" in result.output
        assert "FAIL" not in result.output
