#!/usr/bin/env python3
"""
Experiment harness
==================

Command-line entry point: solve the replica-symmetric system, evaluate free
energies, run seeded simulations and compare the two in one CSV row per
parameter point.

Usage:
    python -m mismatched_regression solve --config configs/quadratic.json
    python -m mismatched_regression compare --config configs/compare.json --workers 4 --output out.csv
    python -m mismatched_regression sweep --config configs/alpha_sweep.json --no-timestamp

Exit codes: 0 success, 1 model error, 2 config error, 3 non-convergence,
4 sampler-health failure.
"""

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from mismatched_regression.config import DEFAULT_WORKERS, ExperimentConfig, load_config
from mismatched_regression.errors import ConfigError, ModelError, NonConvergenceError, SamplerHealthError
from mismatched_regression.potential import check_growth, describe, finite_difference_error
from mismatched_regression.replica import (
    ModelParams,
    SolveReport,
    closed_form_quadratic,
    free_energy,
    free_energy_bar,
    free_energy_gradient,
    reference_endpoints,
    ridge_mse,
    solve_fixed_point,
)
from mismatched_regression.simulate import SeedResult, simulate_seed

logger = logging.getLogger(__name__)

Z_FLAG = 3.0
EXIT_OK = 0
EXIT_CONFIG = ConfigError.exit_code
EXIT_NONCONVERGENCE = NonConvergenceError.exit_code
EXIT_SAMPLER = SamplerHealthError.exit_code

# Column order of every comparison / sweep CSV. Changing it breaks downstream readers.
CSV_COLUMNS = [
    "param_name",
    "param_value",
    "alpha",
    "delta_star",
    "kappa",
    "gamma",
    "h",
    "potential",
    "theory_q",
    "theory_rho",
    "theory_r",
    "theory_rbar",
    "theory_F",
    "theory_free_energy",
    "n",
    "seeds_used",
    "seeds_failed",
    "sim_mse",
    "sim_free_energy",
    "sim_r11",
    "sim_r12",
    "sim_q11",
    "sim_q12",
    "se_mse",
    "se_free_energy",
    "se_r11",
    "se_r12",
    "se_q11",
    "se_q12",
    "z_mse",
    "z_free_energy",
    "z_r11",
    "z_r12",
    "z_q11",
    "z_q12",
    "flagged",
    "converged",
    "iterations",
    "residual",
    "multistart_spread",
    "clamp_events",
]

# simulated quantity -> theory column it estimates
PAIRINGS = {
    "mse": "theory_q",
    "free_energy": "theory_free_energy",
    "r11": "theory_rho",
    "r12": "theory_q",
    "q11": "theory_rbar",
    "q12": "theory_r",
}


def configure_logging() -> None:
    level = os.environ.get("MISMATCH_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        stream=sys.stderr,
    )


def status(message: str) -> None:
    print(message, file=sys.stderr)


def format_float(value: Any) -> str:
    """17 significant digits; empty cell for missing values."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        if math.isnan(value):
            return ""
        return format(float(value), ".17g")
    return str(value)


def _effective_gamma(params: ModelParams) -> float:
    if params.gamma is not None:
        return params.gamma
    return (params.h / (2.0 * params.kappa)) ** 2


@dataclass
class TheoryPoint:
    params: ModelParams
    report: SolveReport
    f_value: Optional[float]
    free_energy_prediction: Optional[float]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "params": self.params.to_dict(),
            "solver": self.report.to_dict(),
            "F": self.f_value,
            "free_energy_prediction": self.free_energy_prediction,
        }


@dataclass
class SimulationAggregate:
    n: int
    seeds_used: List[int]
    seeds_failed: Dict[int, str]
    means: Dict[str, Optional[float]]
    standard_errors: Dict[str, Optional[float]]
    per_seed: List[SeedResult] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n": self.n,
            "seeds_used": self.seeds_used,
            "seeds_failed": {str(k): v for k, v in self.seeds_failed.items()},
            "means": self.means,
            "standard_errors": self.standard_errors,
            "per_seed": [r.to_dict() for r in self.per_seed],
        }


@dataclass
class ComparisonRow:
    param_name: Optional[str]
    param_value: Optional[float]
    theory: TheoryPoint
    simulation: Optional[SimulationAggregate] = None
    z_scores: Dict[str, Optional[float]] = field(default_factory=dict)

    @property
    def flagged(self) -> bool:
        return any(z is not None and abs(z) > Z_FLAG for z in self.z_scores.values())

    def cells(self) -> Dict[str, Any]:
        params, state = self.theory.params, self.theory.report.state
        row: Dict[str, Any] = {
            "param_name": self.param_name,
            "param_value": self.param_value,
            "alpha": params.alpha,
            "delta_star": params.delta_star,
            "kappa": params.kappa,
            "gamma": params.gamma,
            "h": params.h,
            "potential": describe(params.potential),
            "theory_q": state.q,
            "theory_rho": state.rho,
            "theory_r": state.r,
            "theory_rbar": state.rbar,
            "theory_F": self.theory.f_value,
            "theory_free_energy": self.theory.free_energy_prediction,
            "converged": self.theory.report.converged,
            "iterations": self.theory.report.iterations,
            "residual": self.theory.report.residual,
            "multistart_spread": self.theory.report.multistart_spread,
            "clamp_events": self.theory.report.clamp_events,
            "flagged": self.flagged,
        }
        sim = self.simulation
        if sim is not None:
            row["n"] = sim.n
            row["seeds_used"] = len(sim.seeds_used)
            row["seeds_failed"] = len(sim.seeds_failed)
            for key in PAIRINGS:
                row[f"sim_{key}"] = sim.means.get(key)
                row[f"se_{key}"] = sim.standard_errors.get(key)
                row[f"z_{key}"] = self.z_scores.get(key)
        return row

    def to_dict(self) -> Dict[str, Any]:
        return {
            "param_name": self.param_name,
            "param_value": self.param_value,
            "theory": self.theory.to_dict(),
            "simulation": self.simulation.to_dict() if self.simulation else None,
            "z_scores": self.z_scores,
            "flagged": self.flagged,
        }


@dataclass
class ComparisonReport:
    config: ExperimentConfig
    rows: List[ComparisonRow]
    generated_at: Optional[str] = None

    @property
    def all_converged(self) -> bool:
        return all(row.theory.report.converged for row in self.rows)

    @property
    def failed_seed_count(self) -> int:
        return sum(len(row.simulation.seeds_failed) for row in self.rows if row.simulation)

    def to_csv(self) -> str:
        buffer = io.StringIO()
        if self.generated_at:
            buffer.write(f"# generated {self.generated_at}\n")
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in self.rows:
            cells = row.cells()
            writer.writerow([format_float(cells.get(column)) for column in CSV_COLUMNS])
        return buffer.getvalue()

    def to_dict(self) -> Dict[str, Any]:
        data = {
            "config": self.config.to_dict(),
            "rows": [row.to_dict() for row in self.rows],
            "failed_seeds": self.failed_seed_count,
        }
        if self.generated_at:
            data["generated_at"] = self.generated_at
        return data


def solve_point(config: ExperimentConfig, params: ModelParams) -> TheoryPoint:
    grid = config.solver.grid()
    report = solve_fixed_point(params, grid, config.solver.options())
    f_value = prediction = None
    try:
        f_value = free_energy(params, report.state.q, report.state.rho, grid)
        prediction = -params.kappa * _effective_gamma(params) + f_value
    except ModelError as e:
        logger.warning(f"Free energy unavailable at {params.to_dict()}: {e}")
    return TheoryPoint(params=params, report=report, f_value=f_value, free_energy_prediction=prediction)


def run_seeds(
    params: ModelParams,
    config: ExperimentConfig,
    seeds: Sequence[int],
    workers: int = 1,
) -> Tuple[List[SeedResult], Dict[int, str]]:
    """Simulate every seed (in a thread pool when workers > 1); results keep seed order."""
    sim = config.sim
    if sim is None:
        raise ConfigError("sim", "this command needs a sim section")

    def run(seed: int):
        dump = f"{sim.dump_path}.seed{seed}" if sim.dump_path else None
        try:
            return seed, simulate_seed(params, sim.n, seed, sim.x_star_mode, sim.sampler, sim.with_mode, dump), None
        except SamplerHealthError as e:
            logger.warning(f"Seed {seed} failed the sampler health check: {e}")
            return seed, None, str(e)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run, seeds))
    else:
        outcomes = [run(seed) for seed in seeds]

    results = [res for _, res, _ in outcomes if res is not None]
    failed = {seed: err for seed, _, err in outcomes if err is not None}
    return results, failed


def _mean_se(values: List[float]) -> Tuple[Optional[float], Optional[float]]:
    if not values:
        return None, None
    arr = np.asarray(values, dtype=float)
    if arr.size < 2:
        return float(arr.mean()), None
    return float(arr.mean()), float(arr.std(ddof=1) / math.sqrt(arr.size))


def aggregate(n: int, results: List[SeedResult], failed: Dict[int, str]) -> SimulationAggregate:
    columns = {
        "mse": [r.mse_per_n for r in results],
        "free_energy": [r.free_energy for r in results if r.free_energy is not None],
        "r11": [r.overlaps.r11 for r in results],
        "r12": [r.overlaps.r12 for r in results],
        "q11": [r.overlaps.q11 for r in results],
        "q12": [r.overlaps.q12 for r in results],
    }
    means, errors = {}, {}
    for key, values in columns.items():
        means[key], errors[key] = _mean_se(values)
    return SimulationAggregate(
        n=n,
        seeds_used=[r.seed for r in results],
        seeds_failed=failed,
        means=means,
        standard_errors=errors,
        per_seed=results,
    )


def z_scores(theory: TheoryPoint, sim: SimulationAggregate) -> Dict[str, Optional[float]]:
    """(sim mean - theory) / SE for every paired quantity with SE > 0."""
    row = ComparisonRow(None, None, theory).cells()
    scores: Dict[str, Optional[float]] = {}
    for key, theory_column in PAIRINGS.items():
        mean, se, target = sim.means.get(key), sim.standard_errors.get(key), row[theory_column]
        if mean is None or target is None or se is None or not se > 0:
            scores[key] = None
        else:
            scores[key] = (mean - target) / se
    return scores


def _seeds(config: ExperimentConfig, base_seed: Optional[int]) -> List[int]:
    seeds = list(config.sim.seeds)
    if base_seed is not None:
        seeds = [base_seed + s for s in seeds]
    return seeds


def _timestamp(no_timestamp: bool) -> Optional[str]:
    return None if no_timestamp else datetime.now(timezone.utc).isoformat()


def cmd_solve(config: ExperimentConfig) -> Tuple[Dict[str, Any], int]:
    params = config.model.params()
    report = solve_fixed_point(params, config.solver.grid(), config.solver.options())
    data = report.to_dict()
    data["config"] = config.to_dict()
    return data, EXIT_OK if report.converged else EXIT_NONCONVERGENCE


def cmd_free_energy(config: ExperimentConfig) -> Tuple[Dict[str, Any], int]:
    params = config.model.params()
    grid = config.solver.grid()
    point = solve_point(config, params)
    state = point.report.state
    endpoints = reference_endpoints(params)
    gradient = free_energy_gradient(params, state, grid)
    data = {
        "state": state.to_dict(),
        "converged": point.report.converged,
        "F": point.f_value,
        "F_bar": free_energy_bar(params, state, grid),
        "gradient_sup_norm": float(np.max(np.abs(gradient))),
        "free_energy_prediction": point.free_energy_prediction,
        "reference": {"f0": endpoints.f0, "state0": endpoints.state0.to_dict()},
        "config": config.to_dict(),
    }
    return data, EXIT_OK if point.report.converged else EXIT_NONCONVERGENCE


def cmd_closed_form(config: ExperimentConfig) -> Tuple[Dict[str, Any], int]:
    rows = []
    for overrides, params in config.points():
        state = closed_form_quadratic(params)
        rows.append({"overrides": overrides, "state": state.to_dict(), "ridge_mse": ridge_mse(params)})
    data = {"points": rows, "config": config.to_dict()}
    return data, EXIT_OK


def cmd_check_potential(config: ExperimentConfig) -> Tuple[Dict[str, Any], int]:
    potential = config.model.potential
    report = check_growth(potential)
    err1, err2 = finite_difference_error(potential)
    data = {
        "potential": potential.to_dict(),
        "growth": report.to_dict(),
        "finite_difference_error": {"u1": err1, "u2": err2},
    }
    return data, EXIT_OK if report.ok else 1


def cmd_simulate(config: ExperimentConfig, workers: int = 1, base_seed: Optional[int] = None) -> Tuple[Dict[str, Any], int]:
    if config.sim is None:
        raise ConfigError("sim", "simulate needs a sim section")
    params = config.model.params()
    results, failed = run_seeds(params, config, _seeds(config, base_seed), workers)
    data = {
        "seeds": [r.to_dict() for r in results],
        "failed": {str(k): v for k, v in failed.items()},
        "config": config.to_dict(),
    }
    return data, EXIT_SAMPLER if failed else EXIT_OK


def cmd_compare(
    config: ExperimentConfig,
    workers: int = 1,
    base_seed: Optional[int] = None,
    no_timestamp: bool = False,
) -> Tuple[ComparisonReport, int]:
    if config.sim is None:
        raise ConfigError("sim", "compare needs a sim section")
    seeds = _seeds(config, base_seed)
    rows = []
    for overrides, params in config.points():
        theory = solve_point(config, params)
        results, failed = run_seeds(params, config, seeds, workers)
        sim = aggregate(config.sim.n, results, failed)
        row = ComparisonRow(
            param_name=config.sweep.param_name if config.sweep else None,
            param_value=next(iter(overrides.values()), None),
            theory=theory,
            simulation=sim,
            z_scores=z_scores(theory, sim),
        )
        if failed:
            logger.warning(f"{len(failed)} of {len(seeds)} seeds failed at {overrides or 'the base point'}")
        if row.flagged:
            logger.warning(f"|z| > {Z_FLAG:g} at {overrides or 'the base point'}: {row.z_scores}")
        rows.append(row)

    report = ComparisonReport(config=config, rows=rows, generated_at=_timestamp(no_timestamp))
    if any(not row.simulation.seeds_used for row in rows):
        code = EXIT_SAMPLER
    elif not report.all_converged:
        code = EXIT_NONCONVERGENCE
    else:
        code = EXIT_OK
    return report, code


def cmd_sweep(
    config: ExperimentConfig,
    workers: int = 1,
    base_seed: Optional[int] = None,
    no_timestamp: bool = False,
) -> Tuple[ComparisonReport, int]:
    if config.sweep is None:
        raise ConfigError("sweep", "sweep needs a sweep section")
    if config.sim is not None:
        return cmd_compare(config, workers, base_seed, no_timestamp)
    rows = [
        ComparisonRow(param_name=config.sweep.param_name, param_value=value, theory=solve_point(config, params))
        for (_, params), value in zip(config.points(), config.sweep.grid)
    ]
    report = ComparisonReport(config=config, rows=rows, generated_at=_timestamp(no_timestamp))
    return report, EXIT_OK if report.all_converged else EXIT_NONCONVERGENCE


def write_output(text: str, path: Optional[str]) -> None:
    if path:
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        logger.info(f"Wrote {path}")
    else:
        sys.stdout.write(text)


def _json_safe(value: Any) -> Any:
    """Non-finite floats become null; JSON has no NaN or Infinity."""
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {key: _json_safe(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(item) for item in value]
    return value


def _json_text(data: Dict[str, Any]) -> str:
    return json.dumps(_json_safe(data), indent=2, sort_keys=False, allow_nan=False) + "\n"


def json_sidecar_path(output: str) -> str:
    """Path of the JSON report written next to a CSV; never the CSV path itself."""
    root, ext = os.path.splitext(output)
    if ext.lower() == ".json":
        return output + ".json"
    return root + ".json"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mismatched_regression",
        description="Replica-symmetric theory and finite-N simulation of mismatched Bayesian regression",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("solve", "Solve the fixed-point system"),
        ("free-energy", "Free energy at the solved point and the reference endpoints"),
        ("closed-form", "Closed-form overlaps (quadratic potential)"),
        ("simulate", "Seeded finite-N simulations"),
        ("compare", "Theory against simulation, one CSV row per parameter point"),
        ("sweep", "Theory (and simulation, with a sim section) over a parameter grid"),
        ("check-potential", "Growth and concavity check of the configured potential"),
    ]:
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", required=True, help="Experiment configuration (JSON)")
        cmd.add_argument("--seed", type=int, help="Base seed added to every configured seed")
        cmd.add_argument("--workers", type=int, default=DEFAULT_WORKERS, help="Seed-level worker threads")
        cmd.add_argument("--no-timestamp", action="store_true", help="Omit the timestamp header line")
        cmd.add_argument("--output", help="Output file (default: the config's output.path, else stdout)")
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.workers < 1:
            raise ConfigError("--workers", f"must be >= 1, got {args.workers}")
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed", f"must be >= 0, got {args.seed}")
        config = load_config(args.config)
        output = args.output or config.output.path
        status(f"🔧 {args.command}: {args.config}")

        if args.command in ("compare", "sweep"):
            runner = cmd_compare if args.command == "compare" else cmd_sweep
            report, code = runner(config, args.workers, args.seed, args.no_timestamp)
            if config.output.format == "csv":
                write_output(report.to_csv(), output)
                if output:
                    write_output(_json_text(report.to_dict()), json_sidecar_path(output))
            else:
                write_output(_json_text(report.to_dict()), output)
            if report.failed_seed_count:
                status(f"⚠️  {report.failed_seed_count} seed runs failed the sampler health check")
        else:
            if args.command == "simulate":
                data, code = cmd_simulate(config, args.workers, args.seed)
            else:
                handlers = {
                    "solve": cmd_solve,
                    "free-energy": cmd_free_energy,
                    "closed-form": cmd_closed_form,
                    "check-potential": cmd_check_potential,
                }
                data, code = handlers[args.command](config)
            if not args.no_timestamp:
                data["generated_at"] = datetime.now(timezone.utc).isoformat()
            write_output(_json_text(data), output)
    except ModelError as e:
        logger.error(f"{type(e).__name__}: {e}")
        status(f"❌ {e}")
        return e.exit_code

    if code == EXIT_OK:
        status("✅ done")
    elif code == EXIT_NONCONVERGENCE:
        status("⚠️  fixed-point iteration did not converge")
    else:
        status(f"⚠️  finished with exit code {code}")
    return code


def main() -> None:
    configure_logging()
    sys.exit(run())


if __name__ == "__main__":
    main()
