#!/usr/bin/env python3
"""
Tests for the experiment configuration and the command-line harness
"""

import copy
import json
import math

import pytest

from mismatched_regression.config import ExperimentConfig, load_config
from mismatched_regression.errors import ConfigError
from mismatched_regression.harness import (
    CSV_COLUMNS,
    cmd_check_potential,
    cmd_closed_form,
    cmd_compare,
    cmd_free_energy,
    cmd_simulate,
    cmd_solve,
    cmd_sweep,
    format_float,
    json_sidecar_path,
    run,
)
from mismatched_regression.simulate import SamplerKind

BASE = {
    "model": {
        "alpha": 2.0,
        "delta_star": 1.0,
        "kappa": 0.5,
        "gamma": 1.0,
        "potential": {"kind": "quadratic", "delta": 1.0},
    },
    "solver": {"tol": 1e-12},
}

GOLDEN_HEADER = (
    "param_name,param_value,alpha,delta_star,kappa,gamma,h,potential,"
    "theory_q,theory_rho,theory_r,theory_rbar,theory_F,theory_free_energy,"
    "n,seeds_used,seeds_failed,"
    "sim_mse,sim_free_energy,sim_r11,sim_r12,sim_q11,sim_q12,"
    "se_mse,se_free_energy,se_r11,se_r12,se_q11,se_q12,"
    "z_mse,z_free_energy,z_r11,z_r12,z_q11,z_q12,"
    "flagged,converged,iterations,residual,multistart_spread,clamp_events"
)


def _config(**sections):
    data = copy.deepcopy(BASE)
    data.update(sections)
    return ExperimentConfig.from_dict(data)


def _write(tmp_path, data, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


def test_csv_header_is_stable():
    assert ",".join(CSV_COLUMNS) == GOLDEN_HEADER
    report, code = cmd_sweep(_config(sweep={"param_name": "alpha", "grid": [1.0]}), no_timestamp=True)
    assert code == 0
    assert report.to_csv().splitlines()[0] == GOLDEN_HEADER


def test_timestamp_header_line():
    report, _ = cmd_sweep(_config(sweep={"param_name": "alpha", "grid": [1.0]}))
    lines = report.to_csv().splitlines()
    assert lines[0].startswith("# generated ")
    assert lines[1] == GOLDEN_HEADER


def test_float_formatting():
    assert format_float(0.1) == "0.10000000000000001"
    assert float(format_float(math.pi)) == math.pi
    assert format_float(None) == ""
    assert format_float(float("nan")) == ""
    assert format_float(True) == "true"
    assert format_float(3) == "3"


def test_config_round_trip():
    config = _config(
        sim={"n": 50, "seeds": 3, "sampler": {"kind": "mala", "samples": 100}},
        sweep={"param_name": "beta", "grid": [0.5, 2.0]},
        output={"format": "csv", "path": "out.csv"},
    )
    assert config.sim.seeds == [0, 1, 2]
    assert config.sim.sampler.kind == SamplerKind.MALA
    data = config.to_dict()
    assert ExperimentConfig.from_dict(data).to_dict() == data
    assert data["solver"]["max_iter"] == 10_000


@pytest.mark.parametrize(
    "patch,field_path",
    [
        ({"model": {**BASE["model"], "alpah": 1.0}}, "model.alpah"),
        ({"model": {**BASE["model"], "alpha": -1.0}}, "model.alpha"),
        ({"model": {**BASE["model"], "kappa": "big"}}, "model.kappa"),
        ({"model": {**BASE["model"], "potential": {"kind": "cubic"}}}, "model.potential.kind"),
        ({"solver": {"damping": 1.5}}, "solver.damping"),
        ({"solver": {"quad_nodes_inner": 1}}, "solver.quad_nodes_inner"),
        ({"sweep": {"param_name": "foo", "grid": [1.0]}}, "sweep.param_name"),
        ({"sweep": {"param_name": "alpha", "grid": []}}, "sweep.grid"),
        ({"sim": {"n": 10, "x_star_mode": "uniform"}}, "sim.x_star_mode"),
        ({"output": {"format": "xml"}}, "output.format"),
    ],
)
def test_config_errors_name_the_field(patch, field_path):
    data = copy.deepcopy(BASE)
    data.update(patch)
    with pytest.raises(ConfigError) as err:
        ExperimentConfig.from_dict(data)
    assert err.value.field_path == field_path
    assert err.value.exit_code == 2


def test_beta_sweep_needs_a_quadratic_potential():
    data = copy.deepcopy(BASE)
    data["model"]["potential"] = {"kind": "pseudo_huber", "scale": 1.0}
    data["sweep"] = {"param_name": "beta", "grid": [2.0]}
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(data)


def test_cmd_solve():
    data, code = cmd_solve(_config())
    assert code == 0
    assert data["converged"] is True
    assert data["state"]["q"] == pytest.approx(0.41421356, abs=1e-8)
    assert ExperimentConfig.from_dict(data["config"]).to_dict() == data["config"]


def test_cmd_solve_zero_potential():
    data, code = cmd_solve(_config(model={**BASE["model"], "potential": {"kind": "zero"}}))
    assert code == 0
    assert data["state"]["r"] == 0.0
    assert data["state"]["rbar"] == 0.0


def test_cmd_solve_forced_non_convergence():
    data, code = cmd_solve(_config(solver={"tol": 1e-30, "max_iter": 10}))
    assert data["converged"] is False
    assert code == 3


def test_cmd_free_energy():
    data, code = cmd_free_energy(_config())
    assert code == 0
    assert data["F"] == pytest.approx(data["F_bar"], abs=1e-10)
    assert data["gradient_sup_norm"] < 1e-5
    assert data["free_energy_prediction"] == pytest.approx(data["F"] - 0.5)
    assert data["reference"]["state0"]["q"] == pytest.approx(1.0)


def test_cmd_closed_form_over_a_sweep():
    data, code = cmd_closed_form(_config(sweep={"param_name": "delta", "grid": [0.5, 1.0]}))
    assert code == 0
    assert len(data["points"]) == 2
    assert data["points"][1]["state"]["q"] == pytest.approx(math.sqrt(2.0) - 1.0)
    assert data["points"][1]["ridge_mse"] == pytest.approx(data["points"][1]["state"]["q"])


def test_cmd_check_potential():
    data, code = cmd_check_potential(_config(model={**BASE["model"], "potential": {"kind": "pseudo_huber", "scale": 1.0}}))
    assert code == 0
    assert data["growth"]["ok"] is True
    assert data["finite_difference_error"]["u1"] < 1e-6


def test_alpha_sweep_rows():
    grid = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0]
    report, code = cmd_sweep(_config(sweep={"param_name": "alpha", "grid": grid}), no_timestamp=True)
    assert code == 0
    assert [row.param_value for row in report.rows] == grid
    lines = report.to_csv().splitlines()
    assert len(lines) == 1 + len(grid)
    assert all(row.simulation is None for row in report.rows)


def test_gamma_zero_row_matches_zero_field():
    report, _ = cmd_sweep(_config(sweep={"param_name": "gamma", "grid": [0.0, 1.0]}))
    first = report.rows[0]
    assert first.theory.params.h == 0.0
    assert first.cells()["theory_q"] == pytest.approx(0.20710678, abs=1e-8)


def test_sweep_reports_non_convergent_points():
    config = _config(solver={"tol": 1e-30, "max_iter": 2}, sweep={"param_name": "kappa", "grid": [0.5, 1.0]})
    report, code = cmd_sweep(config, no_timestamp=True)
    assert code == 3
    assert len(report.rows) == 2
    assert all(row.cells()["converged"] is False for row in report.rows)
    assert ",false," in report.to_csv().splitlines()[1]


def test_compare_beta_sweep_has_identical_mse_column():
    config = _config(sim={"n": 60, "seeds": 4}, sweep={"param_name": "beta", "grid": [0.5, 1.0, 2.0]})
    report, code = cmd_compare(config, no_timestamp=True)
    assert code == 0
    mse = [row.simulation.means["mse"] for row in report.rows]
    assert mse[0] == pytest.approx(mse[1], rel=1e-10)
    assert mse[2] == pytest.approx(mse[1], rel=1e-10)
    theory = [row.theory.report.state.q for row in report.rows]
    assert theory[0] == pytest.approx(theory[2], abs=1e-9)


def test_compare_z_scores_at_n_500():
    config = _config(sim={"n": 500, "seeds": 32})
    report, code = cmd_compare(config, workers=4, no_timestamp=True)
    assert code == 0
    row = report.rows[0]
    assert row.simulation.seeds_used == list(range(32))
    assert abs(row.z_scores["mse"]) <= 3.0 or abs(row.simulation.means["mse"] - row.theory.report.state.q) <= 0.02
    assert row.z_scores["free_energy"] is not None
    cells = row.cells()
    assert cells["seeds_failed"] == 0
    assert cells["sim_mse"] == row.simulation.means["mse"]


def test_compare_notes_failed_seeds():
    sim = {"n": 20, "seeds": 2, "sampler": {"kind": "mala", "step": 50.0, "burn_in": 0, "samples": 50}}
    report, code = cmd_compare(_config(sim=sim), no_timestamp=True)
    assert code == 4
    assert report.failed_seed_count == 2
    cells = report.rows[0].cells()
    assert cells["seeds_used"] == 0
    assert cells["seeds_failed"] == 2
    assert report.to_csv().count("\n") == 2


def test_compare_needs_a_sim_section():
    with pytest.raises(ConfigError):
        cmd_compare(_config())


def test_cmd_simulate_json():
    data, code = cmd_simulate(_config(sim={"n": 40, "seeds": [3, 5], "with_mode": True}), base_seed=10)
    assert code == 0
    assert [s["seed"] for s in data["seeds"]] == [13, 15]
    assert data["seeds"][0]["mode_mse_per_n"] == pytest.approx(data["seeds"][0]["mse_per_n"], rel=1e-4)


def test_cli_solve_writes_json(tmp_path):
    out = tmp_path / "solve.json"
    code = run(["solve", "--config", _write(tmp_path, BASE), "--output", str(out), "--no-timestamp"])
    assert code == 0
    data = json.loads(out.read_text())
    assert data["state"]["q"] == pytest.approx(0.41421356, abs=1e-8)
    assert "generated_at" not in data


def test_cli_config_error_exit_code(tmp_path):
    bad = copy.deepcopy(BASE)
    bad["model"]["alpha"] = 0
    assert run(["solve", "--config", _write(tmp_path, bad)]) == 2
    assert run(["solve", "--config", str(tmp_path / "missing.json")]) == 2


def test_cli_compare_is_byte_identical_across_runs_and_workers(tmp_path):
    data = copy.deepcopy(BASE)
    data["sim"] = {"n": 50, "seeds": 6}
    data["output"] = {"format": "csv"}
    config = _write(tmp_path, data)
    first, second = tmp_path / "a.csv", tmp_path / "b.csv"
    assert run(["compare", "--config", config, "--no-timestamp", "--output", str(first)]) == 0
    assert run(["compare", "--config", config, "--no-timestamp", "--workers", "3", "--output", str(second)]) == 0
    assert first.read_bytes() == second.read_bytes()
    assert (tmp_path / "a.json").exists()
    report = json.loads((tmp_path / "a.json").read_text())
    assert ExperimentConfig.from_dict(report["config"]).to_dict() == report["config"]


def test_load_config_reads_example(tmp_path):
    config = load_config(_write(tmp_path, BASE))
    assert config.model.params().h == pytest.approx(1.0)
    assert config.solver.grid().outer.size == 80


def _strict_json(text):
    def reject(token):
        raise ValueError(f"non-standard JSON constant {token}")

    return json.loads(text, parse_constant=reject)


def test_simulate_output_is_strict_json(tmp_path):
    data = copy.deepcopy(BASE)
    data["model"]["potential"] = {"kind": "pseudo_huber", "scale": 1.0}
    # a high acceptance target keeps the single draw from tripping the health check
    sampler = {"kind": "mala", "burn_in": 1000, "samples": 1, "target_accept": 0.99}
    data["sim"] = {"n": 20, "seeds": 1, "sampler": sampler}
    config = ExperimentConfig.from_dict(data)

    result, code = cmd_simulate(config)
    assert code == 0
    assert result["seeds"][0]["overlaps"]["se_r12"] is None
    json.dumps(result, allow_nan=False)

    out = tmp_path / "simulate.json"
    assert run(["simulate", "--config", _write(tmp_path, data), "--output", str(out)]) == 0
    parsed = _strict_json(out.read_text())
    assert parsed["seeds"][0]["overlaps"]["se_r12"] is None


def test_csv_sidecar_never_replaces_the_csv(tmp_path):
    data = copy.deepcopy(BASE)
    data["sim"] = {"n": 30, "seeds": 2}
    data["output"] = {"format": "csv"}
    out = tmp_path / "report.json"
    assert run(["compare", "--config", _write(tmp_path, data), "--no-timestamp", "--output", str(out)]) == 0
    assert out.read_text().splitlines()[0] == GOLDEN_HEADER
    sidecar = tmp_path / "report.json.json"
    assert _strict_json(sidecar.read_text())["rows"]


@pytest.mark.parametrize(
    "output,sidecar",
    [("report.csv", "report.json"), ("report.json", "report.json.json"), ("out/report", "out/report.json")],
)
def test_json_sidecar_path(output, sidecar):
    assert json_sidecar_path(output) == sidecar
    assert json_sidecar_path(output) != output


def test_solver_cross_check_option():
    config = _config(solver={"tol": 1e-12, "cross_check": True})
    assert config.solver.options().cross_check is True
    assert config.to_dict()["solver"]["cross_check"] is True
    data, code = cmd_solve(config)
    assert code == 0
    assert data["state"]["q"] == pytest.approx(math.sqrt(2.0) - 1.0, abs=1e-10)

    with pytest.raises(ConfigError) as err:
        _config(solver={"cross_check": "yes"})
    assert err.value.field_path == "solver.cross_check"
