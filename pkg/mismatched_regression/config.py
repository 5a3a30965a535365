"""
Experiment configuration
========================

A single JSON document with the sections ``model``, ``solver``, ``sim``,
``sweep`` and ``output``. Every default is written back by ``to_dict`` so an
emitted report carries the full configuration it was produced with.
"""

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

from typing_extensions import Self

from mismatched_regression.errors import ConfigError, ModelError
from mismatched_regression.potential import Potential
from mismatched_regression.quadrature import MAX_NODES, MIN_NODES, QuadratureGrid, make_grid
from mismatched_regression.replica import ModelParams, SolveOptions, beta_reparametrize
from mismatched_regression.simulate import SamplerConfig, SamplerKind, XStarMode

logger = logging.getLogger(__name__)

SWEEPABLE = ("alpha", "delta_star", "delta", "kappa", "gamma", "beta")
OUTPUT_FORMATS = ("csv", "json")
DEFAULT_WORKERS = int(os.environ.get("MISMATCH_WORKERS", "1"))


def _check_keys(data: Any, allowed: Tuple[str, ...], path: str) -> Dict[str, Any]:
    if not isinstance(data, dict):
        raise ConfigError(path, "expected an object")
    for key in data:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}" if path else key, "unknown field")
    return data


def _number(data: Dict[str, Any], key: str, path: str, default: Any = None, check: Optional[Callable[[float], bool]] = None, rule: str = "") -> Any:
    value = data.get(key, default)
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path}.{key}", f"expected a number, got {value!r}")
    if check is not None and not check(value):
        raise ConfigError(f"{path}.{key}", f"must be {rule}, got {value!r}")
    return value


def _integer(data: Dict[str, Any], key: str, path: str, default: int, low: int, high: Optional[int] = None) -> int:
    value = data.get(key, default)
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{path}.{key}", f"expected an integer, got {value!r}")
    if value < low or (high is not None and value > high):
        bound = f"in [{low}, {high}]" if high is not None else f">= {low}"
        raise ConfigError(f"{path}.{key}", f"must be {bound}, got {value}")
    return value


@dataclass(frozen=True)
class ModelSection:
    alpha: float
    delta_star: float
    kappa: float
    potential: Potential
    gamma: Optional[float] = None
    h: Optional[float] = None
    beta: float = 1.0

    @classmethod
    def from_dict(cls, data: Any, path: str = "model") -> Self:
        _check_keys(data, ("alpha", "delta_star", "kappa", "gamma", "h", "beta", "potential"), path)
        for key in ("alpha", "delta_star", "kappa"):
            if key not in data:
                raise ConfigError(f"{path}.{key}", "required")
        if "potential" not in data:
            raise ConfigError(f"{path}.potential", "required")
        section = cls(
            alpha=_number(data, "alpha", path, check=lambda v: v > 0, rule="> 0"),
            delta_star=_number(data, "delta_star", path, check=lambda v: v >= 0, rule=">= 0"),
            kappa=_number(data, "kappa", path, check=lambda v: v > 0, rule="> 0"),
            gamma=_number(data, "gamma", path, check=lambda v: v >= 0, rule=">= 0"),
            h=_number(data, "h", path),
            beta=_number(data, "beta", path, default=1.0, check=lambda v: v > 0, rule="> 0"),
            potential=Potential.from_dict(data["potential"], f"{path}.potential"),
        )
        section.params()
        return section

    def to_dict(self) -> Dict[str, Any]:
        return {
            "alpha": self.alpha,
            "delta_star": self.delta_star,
            "kappa": self.kappa,
            "gamma": self.gamma,
            "h": self.h,
            "beta": self.beta,
            "potential": self.potential.to_dict(),
        }

    def params(self, overrides: Optional[Dict[str, float]] = None) -> ModelParams:
        """ModelParams at this point, after sweep overrides and the beta reparametrization."""
        values = {
            "alpha": self.alpha,
            "delta_star": self.delta_star,
            "kappa": self.kappa,
            "gamma": self.gamma,
            "beta": self.beta,
        }
        potential = self.potential
        for name, value in (overrides or {}).items():
            if name == "delta":
                if not potential.is_quadratic:
                    raise ConfigError("sweep.param_name", "delta can only be swept for the quadratic potential")
                potential = Potential.quadratic(value)
            else:
                values[name] = value
        try:
            if values["gamma"] is not None:
                params = ModelParams.regression(values["alpha"], values["delta_star"], values["kappa"], values["gamma"], potential)
                if self.h is not None and "gamma" not in (overrides or {}) and "kappa" not in (overrides or {}):
                    # explicit h must agree with 2 kappa sqrt(gamma)
                    ModelParams(params.alpha, params.delta_star, params.kappa, potential, h=self.h, gamma=params.gamma)
            else:
                params = ModelParams(values["alpha"], values["delta_star"], values["kappa"], potential, h=self.h or 0.0)
            if values["beta"] != 1.0:
                params = beta_reparametrize(params, values["beta"])
        except ModelError as e:
            raise ConfigError("model", str(e))
        return params


@dataclass(frozen=True)
class SolverSection:
    damping: float = 0.5
    tol: float = 1e-10
    max_iter: int = 10_000
    n_starts: int = 4
    quad_nodes_inner: int = 80
    quad_nodes_outer: int = 80
    cross_check: bool = False

    @classmethod
    def from_dict(cls, data: Any, path: str = "solver") -> Self:
        _check_keys(
            data, ("damping", "tol", "max_iter", "n_starts", "quad_nodes_inner", "quad_nodes_outer", "cross_check"), path
        )
        cross_check = data.get("cross_check", False)
        if not isinstance(cross_check, bool):
            raise ConfigError(f"{path}.cross_check", "expected a boolean")
        return cls(
            damping=_number(data, "damping", path, 0.5, lambda v: 0 < v <= 1, "in (0, 1]"),
            tol=_number(data, "tol", path, 1e-10, lambda v: v > 0, "> 0"),
            max_iter=_integer(data, "max_iter", path, 10_000, 1),
            n_starts=_integer(data, "n_starts", path, 4, 1),
            quad_nodes_inner=_integer(data, "quad_nodes_inner", path, 80, MIN_NODES, MAX_NODES),
            quad_nodes_outer=_integer(data, "quad_nodes_outer", path, 80, MIN_NODES, MAX_NODES),
            cross_check=cross_check,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "damping": self.damping,
            "tol": self.tol,
            "max_iter": self.max_iter,
            "n_starts": self.n_starts,
            "quad_nodes_inner": self.quad_nodes_inner,
            "quad_nodes_outer": self.quad_nodes_outer,
            "cross_check": self.cross_check,
        }

    def options(self) -> SolveOptions:
        return SolveOptions(
            damping=self.damping,
            tol=self.tol,
            max_iter=self.max_iter,
            n_starts=self.n_starts,
            cross_check=self.cross_check,
        )

    def grid(self) -> QuadratureGrid:
        return make_grid(self.quad_nodes_outer, self.quad_nodes_inner)


@dataclass(frozen=True)
class SimSection:
    n: int
    seeds: List[int]
    x_star_mode: XStarMode = XStarMode.DETERMINISTIC_NORM
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    with_mode: bool = False
    dump_path: Optional[str] = None

    @classmethod
    def from_dict(cls, data: Any, path: str = "sim") -> Self:
        _check_keys(data, ("n", "seeds", "x_star_mode", "sampler", "with_mode", "dump_path"), path)
        if "n" not in data:
            raise ConfigError(f"{path}.n", "required")
        seeds = data.get("seeds", [0])
        if isinstance(seeds, int) and not isinstance(seeds, bool):
            seeds = list(range(seeds))
        if not isinstance(seeds, list) or not seeds or any(isinstance(s, bool) or not isinstance(s, int) or s < 0 for s in seeds):
            raise ConfigError(f"{path}.seeds", "expected a non-empty list of non-negative integers (or a count)")
        try:
            mode = XStarMode(data.get("x_star_mode", XStarMode.DETERMINISTIC_NORM.value))
        except ValueError:
            raise ConfigError(f"{path}.x_star_mode", f"must be one of {', '.join(m.value for m in XStarMode)}")
        with_mode = data.get("with_mode", False)
        if not isinstance(with_mode, bool):
            raise ConfigError(f"{path}.with_mode", "expected a boolean")
        dump_path = data.get("dump_path")
        if dump_path is not None and not isinstance(dump_path, str):
            raise ConfigError(f"{path}.dump_path", "expected a string")
        return cls(
            n=_integer(data, "n", path, 0, 1),
            seeds=list(seeds),
            x_star_mode=mode,
            sampler=_sampler_from_dict(data.get("sampler", {}), f"{path}.sampler"),
            with_mode=with_mode,
            dump_path=dump_path,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n": self.n,
            "seeds": list(self.seeds),
            "x_star_mode": self.x_star_mode.value,
            "sampler": self.sampler.to_dict(),
            "with_mode": self.with_mode,
            "dump_path": self.dump_path,
        }


def _sampler_from_dict(data: Any, path: str) -> SamplerConfig:
    _check_keys(data, ("kind", "step", "burn_in", "samples", "thin", "target_accept", "replicas"), path)
    try:
        kind = SamplerKind(data.get("kind", SamplerKind.EXACT_GAUSSIAN.value))
    except ValueError:
        raise ConfigError(f"{path}.kind", f"must be one of {', '.join(k.value for k in SamplerKind)}")
    defaults = SamplerConfig()
    return SamplerConfig(
        kind=kind,
        step=_number(data, "step", path, defaults.step, lambda v: v > 0, "> 0"),
        burn_in=_integer(data, "burn_in", path, defaults.burn_in, 0),
        samples=_integer(data, "samples", path, defaults.samples, 1),
        thin=_integer(data, "thin", path, defaults.thin, 1),
        target_accept=_number(data, "target_accept", path, defaults.target_accept, lambda v: 0 < v < 1, "in (0, 1)"),
        replicas=_integer(data, "replicas", path, defaults.replicas, 1),
    )


@dataclass(frozen=True)
class SweepSection:
    param_name: str
    grid: List[float]

    @classmethod
    def from_dict(cls, data: Any, path: str = "sweep") -> Self:
        _check_keys(data, ("param_name", "grid"), path)
        name = data.get("param_name")
        if name not in SWEEPABLE:
            raise ConfigError(f"{path}.param_name", f"must be one of {', '.join(SWEEPABLE)}, got {name!r}")
        grid = data.get("grid")
        if not isinstance(grid, list) or not grid:
            raise ConfigError(f"{path}.grid", "expected a non-empty list of numbers")
        for i, value in enumerate(grid):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{path}.grid[{i}]", f"expected a number, got {value!r}")
        return cls(param_name=name, grid=[float(v) for v in grid])

    def to_dict(self) -> Dict[str, Any]:
        return {"param_name": self.param_name, "grid": list(self.grid)}


@dataclass(frozen=True)
class OutputSection:
    format: str = "json"
    path: Optional[str] = None

    @classmethod
    def from_dict(cls, data: Any, path: str = "output") -> Self:
        _check_keys(data, ("format", "path"), path)
        fmt = data.get("format", "json")
        if fmt not in OUTPUT_FORMATS:
            raise ConfigError(f"{path}.format", f"must be csv or json, got {fmt!r}")
        out = data.get("path")
        if out is not None and not isinstance(out, str):
            raise ConfigError(f"{path}.path", "expected a string")
        return cls(format=fmt, path=out)

    def to_dict(self) -> Dict[str, Any]:
        return {"format": self.format, "path": self.path}


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSection
    solver: SolverSection = field(default_factory=SolverSection)
    sim: Optional[SimSection] = None
    sweep: Optional[SweepSection] = None
    output: OutputSection = field(default_factory=OutputSection)

    @classmethod
    def from_dict(cls, data: Any) -> Self:
        _check_keys(data, ("model", "solver", "sim", "sweep", "output"), "")
        if "model" not in data:
            raise ConfigError("model", "required")
        config = cls(
            model=ModelSection.from_dict(data["model"]),
            solver=SolverSection.from_dict(data.get("solver", {})),
            sim=SimSection.from_dict(data["sim"]) if data.get("sim") is not None else None,
            sweep=SweepSection.from_dict(data["sweep"]) if data.get("sweep") is not None else None,
            output=OutputSection.from_dict(data.get("output", {})),
        )
        if config.sweep is not None:
            # validates every grid point up front
            for value in config.sweep.grid:
                config.model.params({config.sweep.param_name: value})
        return config

    def to_dict(self) -> Dict[str, Any]:
        return {
            "model": self.model.to_dict(),
            "solver": self.solver.to_dict(),
            "sim": self.sim.to_dict() if self.sim else None,
            "sweep": self.sweep.to_dict() if self.sweep else None,
            "output": self.output.to_dict(),
        }

    def points(self) -> List[Tuple[Dict[str, float], ModelParams]]:
        """(sweep overrides, params) for every parameter point, in grid order."""
        if self.sweep is None:
            return [({}, self.model.params())]
        return [
            ({self.sweep.param_name: value}, self.model.params({self.sweep.param_name: value}))
            for value in self.sweep.grid
        ]


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError("--config", f"file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError("--config", f"invalid JSON in {path}: {e}")
    config = ExperimentConfig.from_dict(data)
    logger.debug(f"Loaded configuration from {path}")
    return config
