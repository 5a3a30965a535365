"""
Replica-symmetric predictions
=============================

Order parameters (q, rho, r, rbar) solve

    q    = Psi(r, rbar)    = (r + h^2) / (2 kappa + r - rbar)^2
    rho  = Psibar(r, rbar) = q + 1 / (2 kappa + r - rbar)
    r    = Phi(q, rho)     = alpha E[(E_xi u'(theta) e^u / E_xi e^u)^2]
    rbar = Phibar(q, rho)  = alpha E[E_xi (u'' + u'^2)(theta) e^u / E_xi e^u]

with theta = z sqrt(delta_star + q) + xi sqrt(rho - q). The limiting free
energy is F(q, rho) at the solution; on the regression side the mean-square
error per coordinate converges to q and (1/N) ln Z to -kappa gamma + F(q, rho)
with h = 2 kappa sqrt(gamma).
"""

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from typing_extensions import Self

from mismatched_regression.errors import DomainError, NumericalError, UnsupportedPotentialError
from mismatched_regression.potential import Potential
from mismatched_regression.quadrature import QuadratureGrid, ThetaSpec, make_grid, nested_expect

logger = logging.getLogger(__name__)

DOMAIN_EPS = 1e-12
UNIQUENESS_SPREAD = 1e-6
# multiplicative perturbations of (q, rho - q) used by the extra starts
START_FACTORS = ((1.0, 1.0), (0.5, 2.0), (2.0, 0.5), (1.5, 1.5), (0.75, 0.75), (2.0, 2.0), (0.5, 0.5), (1.25, 0.8))


@dataclass(frozen=True)
class ModelParams:
    alpha: float
    delta_star: float
    kappa: float
    potential: Potential
    h: float = 0.0
    gamma: Optional[float] = None

    def __post_init__(self):
        if not self.alpha > 0:
            raise DomainError(f"alpha must be > 0, got {self.alpha}")
        if not self.delta_star >= 0:
            raise DomainError(f"delta_star must be >= 0, got {self.delta_star}")
        if not self.kappa > 0:
            raise DomainError(f"kappa must be > 0, got {self.kappa}")
        if self.gamma is not None:
            if not self.gamma >= 0:
                raise DomainError(f"gamma must be >= 0, got {self.gamma}")
            expected = 2.0 * self.kappa * math.sqrt(self.gamma)
            if not math.isclose(self.h, expected, rel_tol=1e-12, abs_tol=1e-15):
                raise DomainError(f"h must equal 2*kappa*sqrt(gamma) = {expected}, got {self.h}")

    @classmethod
    def regression(cls, alpha: float, delta_star: float, kappa: float, gamma: float, potential: Potential) -> Self:
        """Parameters of the regression problem: the field is h = 2 kappa sqrt(gamma)."""
        if not gamma >= 0:
            raise DomainError(f"gamma must be >= 0, got {gamma}")
        return cls(
            alpha=alpha,
            delta_star=delta_star,
            kappa=kappa,
            potential=potential,
            h=2.0 * kappa * math.sqrt(gamma),
            gamma=gamma,
        )

    def replace(self, **changes: Any) -> Self:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "alpha": self.alpha,
            "delta_star": self.delta_star,
            "kappa": self.kappa,
            "h": self.h,
            "gamma": self.gamma,
            "potential": self.potential.to_dict(),
        }


@dataclass(frozen=True)
class OverlapState:
    q: float
    rho: float
    r: float
    rbar: float

    @classmethod
    def from_array(cls, x: np.ndarray) -> Self:
        return cls(q=float(x[0]), rho=float(x[1]), r=float(x[2]), rbar=float(x[3]))

    def as_array(self) -> np.ndarray:
        return np.array([self.q, self.rho, self.r, self.rbar])

    def validate(self, kappa: float) -> None:
        if not 0 <= self.q < self.rho:
            raise DomainError(f"need 0 <= q < rho, got q={self.q}, rho={self.rho}")
        if not 2.0 * kappa + self.r - self.rbar > 0:
            raise DomainError(f"need 2*kappa + r - rbar > 0, got {2.0 * kappa + self.r - self.rbar}")

    def distance(self, other: "OverlapState") -> float:
        return float(np.max(np.abs(self.as_array() - other.as_array())))

    def to_dict(self) -> Dict[str, float]:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class SolveOptions:
    damping: float = 0.5
    tol: float = 1e-10
    max_iter: int = 10_000
    init: Optional[OverlapState] = None
    n_starts: int = 4
    # start quadratic potentials from the closed form
    cross_check: bool = False

    def __post_init__(self):
        if not 0 < self.damping <= 1:
            raise DomainError(f"damping must be in (0, 1], got {self.damping}")
        if not self.tol > 0:
            raise DomainError(f"tol must be > 0, got {self.tol}")
        if self.max_iter < 1 or self.n_starts < 1:
            raise DomainError("max_iter and n_starts must be >= 1")


@dataclass
class SolveReport:
    state: OverlapState
    iterations: int
    residual: float
    converged: bool
    multistart_spread: float
    clamp_events: int = 0
    starts: List[OverlapState] = field(default_factory=list)

    @property
    def uniqueness_warning(self) -> bool:
        return self.multistart_spread > UNIQUENESS_SPREAD

    def to_dict(self) -> Dict[str, Any]:
        return {
            "state": self.state.to_dict(),
            "iterations": self.iterations,
            "residual": self.residual,
            "converged": self.converged,
            "multistart_spread": self.multistart_spread,
            "clamp_events": self.clamp_events,
            "uniqueness_warning": self.uniqueness_warning,
        }


@dataclass(frozen=True)
class RegressionPrediction:
    mse_per_n: float
    free_energy: float
    state: OverlapState
    report: SolveReport

    def to_dict(self) -> Dict[str, Any]:
        return {
            "mse_per_n": self.mse_per_n,
            "free_energy": self.free_energy,
            "state": self.state.to_dict(),
            "solver": self.report.to_dict(),
        }


@dataclass(frozen=True)
class ReferenceEndpoints:
    f0: float
    state0: OverlapState


def map_psi(params: ModelParams, r: float, rbar: float) -> Tuple[float, float]:
    precision = 2.0 * params.kappa + r - rbar
    if not precision > 0:
        raise DomainError(f"need 2*kappa + r - rbar > 0, got {precision}")
    q = (r + params.h**2) / precision**2
    return q, q + 1.0 / precision


def map_phi(params: ModelParams, q: float, rho: float, grid: QuadratureGrid) -> Tuple[float, float]:
    theta = ThetaSpec.from_overlaps(params.delta_star, q, rho)
    p = params.potential
    r = params.alpha * nested_expect(grid, theta, p, lambda m: m.ratio1**2)
    rbar = params.alpha * nested_expect(grid, theta, p, lambda m: m.ratio2)
    return r, rbar


def fixed_point_map(params: ModelParams, state: OverlapState, grid: QuadratureGrid) -> Tuple[OverlapState, bool]:
    """One application of Psi after Phi; reports whether rbar had to be clamped."""
    r, rbar = map_phi(params, state.q, state.rho, grid)
    clamped = False
    if 2.0 * params.kappa + r - rbar <= DOMAIN_EPS:
        rbar = 2.0 * params.kappa + r - DOMAIN_EPS
        clamped = True
    q, rho = map_psi(params, r, rbar)
    return OverlapState(q=q, rho=rho, r=r, rbar=rbar), clamped


def reference_endpoints(params: ModelParams) -> ReferenceEndpoints:
    """Free energy and overlaps of the decoupled Gaussian model (all u-interaction removed)."""
    kappa, h = params.kappa, params.h
    f0 = params.alpha * params.potential.value(0.0) + h**2 / (4.0 * kappa) + 0.5 * math.log(math.pi / kappa)
    q0, rho0 = map_psi(params, 0.0, 0.0)
    return ReferenceEndpoints(f0=f0, state0=OverlapState(q=q0, rho=rho0, r=0.0, rbar=0.0))


def _perturbed_start(base: OverlapState, factors: Tuple[float, float]) -> OverlapState:
    q = base.q * factors[0]
    gap = (base.rho - base.q) * factors[1]
    return OverlapState(q=q, rho=q + gap, r=base.r, rbar=base.rbar)


def _iterate(params: ModelParams, grid: QuadratureGrid, start: OverlapState, options: SolveOptions) -> SolveReport:
    x = start.as_array()
    clamps = 0
    residual = math.inf
    delta = options.damping
    for iteration in range(1, options.max_iter + 1):
        mapped, clamped = fixed_point_map(params, OverlapState.from_array(x), grid)
        clamps += int(clamped)
        x_new = (1.0 - delta) * x + delta * mapped.as_array()
        residual = float(np.max(np.abs(x_new - x)))
        x = x_new
        if residual <= options.tol:
            return SolveReport(OverlapState.from_array(x), iteration, residual, True, 0.0, clamps)
    return SolveReport(OverlapState.from_array(x), options.max_iter, residual, False, 0.0, clamps)


def _initial_state(params: ModelParams, options: SolveOptions) -> OverlapState:
    if options.cross_check:
        if params.potential.is_quadratic:
            return closed_form_quadratic(params)
        logger.warning(f"cross-check start needs a quadratic potential, got {params.potential.kind.value}")
    return reference_endpoints(params).state0


def solve_fixed_point(
    params: ModelParams,
    grid: Optional[QuadratureGrid] = None,
    options: Optional[SolveOptions] = None,
) -> SolveReport:
    """
    Damped iteration x <- (1 - delta) x + delta T(x) from several starts.
    Non-convergence is reported, never raised.
    """
    grid = grid or make_grid()
    options = options or SolveOptions()
    base = options.init or _initial_state(params, options)
    logger.debug(f"Solving fixed point for {params.to_dict()} from {base.to_dict()}")

    runs = [
        _iterate(params, grid, _perturbed_start(base, START_FACTORS[i % len(START_FACTORS)]), options)
        for i in range(options.n_starts)
    ]
    best = runs[0]
    spread = max((a.state.distance(b.state) for a in runs for b in runs), default=0.0)
    report = SolveReport(
        state=best.state,
        iterations=max(run.iterations for run in runs),
        residual=max(run.residual for run in runs),
        converged=all(run.converged for run in runs),
        multistart_spread=spread,
        clamp_events=sum(run.clamp_events for run in runs),
        starts=[run.state for run in runs],
    )

    if report.converged:
        logger.info(
            f"Fixed point q={report.state.q:.10g} rho={report.state.rho:.10g} "
            f"r={report.state.r:.10g} rbar={report.state.rbar:.10g} after {report.iterations} iterations"
        )
    else:
        logger.warning(f"Fixed-point iteration did not converge: residual {report.residual:.3e} after {report.iterations} iterations")
    if report.clamp_events:
        logger.warning(f"rbar was clamped {report.clamp_events} times to stay in the domain")
    if report.uniqueness_warning:
        logger.warning(f"Starts disagree by {report.multistart_spread:.3e}: the fixed point may not be unique")
    return report


def _quadratic_gap(params: ModelParams) -> float:
    """The non-negative root c = rho - q of 2 kappa a^2 + (2 kappa delta + alpha - 1) a - delta = 0."""
    kappa, alpha, delta = params.kappa, params.alpha, params.potential.delta
    b = 2.0 * kappa * delta + alpha - 1.0
    disc = math.sqrt(b * b + 8.0 * kappa * delta)
    # avoid cancellation when b > 0
    if b > 0:
        return 2.0 * delta / (disc + b)
    return (disc - b) / (4.0 * kappa)


def closed_form_quadratic(params: ModelParams) -> OverlapState:
    if not params.potential.is_quadratic:
        raise UnsupportedPotentialError("closed form exists for the quadratic potential only")
    alpha, delta, delta_star, h = params.alpha, params.potential.delta, params.delta_star, params.h
    c = _quadratic_gap(params)
    denominator = (delta + c) ** 2 - alpha * c**2
    if not denominator > 0:
        raise NumericalError(f"closed form denominator is not positive: {denominator}")
    q = c**2 * (h**2 * (delta + c) ** 2 + delta_star * alpha) / denominator
    r = alpha * (delta_star + q) / (delta + c) ** 2
    return OverlapState(q=q, rho=q + c, r=r, rbar=r - alpha / (delta + c))


def ridge_mse(params: ModelParams) -> float:
    """Zero-temperature ridge risk per coordinate; coincides with q of the quadratic closed form."""
    return closed_form_quadratic(params).q


def _log_partition_term(params: ModelParams, q: float, rho: float, grid: QuadratureGrid) -> float:
    theta = ThetaSpec.from_overlaps(params.delta_star, q, rho)
    return params.alpha * nested_expect(grid, theta, params.potential, lambda m: m.log_e0)


def free_energy(params: ModelParams, q: float, rho: float, grid: Optional[QuadratureGrid] = None) -> float:
    """F(q, rho)."""
    if not 0 <= q < rho:
        raise DomainError(f"need 0 <= q < rho, got q={q}, rho={rho}")
    grid = grid or make_grid()
    gap = rho - q
    gaussian = 0.5 * (math.log(gap) + params.h**2 * gap + rho / gap - 2.0 * params.kappa * rho + math.log(2.0 * math.pi))
    return _log_partition_term(params, q, rho, grid) + gaussian


def free_energy_bar(params: ModelParams, state: OverlapState, grid: Optional[QuadratureGrid] = None) -> float:
    """Fbar(q, rho, r, rbar); equals F(q, rho) at solutions of the fixed-point system."""
    state.validate(params.kappa)
    grid = grid or make_grid()
    precision = 2.0 * params.kappa + state.r - state.rbar
    gaussian = 0.5 * (
        (state.r + params.h**2) / precision
        - math.log(precision)
        + state.r * state.q
        - state.rbar * state.rho
        + math.log(2.0 * math.pi)
    )
    return _log_partition_term(params, state.q, state.rho, grid) + gaussian


def free_energy_gradient(
    params: ModelParams,
    state: OverlapState,
    grid: Optional[QuadratureGrid] = None,
    step: float = 1e-4,
) -> np.ndarray:
    """Central-difference gradient of Fbar in (q, rho, r, rbar)."""
    grid = grid or make_grid()
    x = state.as_array()
    grad = np.empty(4)
    for i in range(4):
        e = np.zeros(4)
        e[i] = step
        up = free_energy_bar(params, OverlapState.from_array(x + e), grid)
        down = free_energy_bar(params, OverlapState.from_array(x - e), grid)
        grad[i] = (up - down) / (2.0 * step)
    return grad


def predict_regression(
    params: ModelParams,
    grid: Optional[QuadratureGrid] = None,
    options: Optional[SolveOptions] = None,
) -> RegressionPrediction:
    if params.gamma is None:
        raise DomainError("regression predictions need gamma (and h = 2*kappa*sqrt(gamma))")
    grid = grid or make_grid()
    report = solve_fixed_point(params, grid, options)
    state = report.state
    limit = -params.kappa * params.gamma + free_energy(params, state.q, state.rho, grid)
    return RegressionPrediction(mse_per_n=state.q, free_energy=limit, state=state, report=report)


def beta_reparametrize(params: ModelParams, beta: float) -> ModelParams:
    """Inverse-temperature model: delta -> delta/beta, kappa -> beta kappa, h = 2 beta kappa sqrt(gamma)."""
    if not beta > 0:
        raise DomainError(f"beta must be > 0, got {beta}")
    if not params.potential.is_quadratic:
        raise UnsupportedPotentialError("beta reparametrization is defined for quadratic potentials only")
    kappa = beta * params.kappa
    if params.gamma is None:
        # no regression side: the field scales with the prior strength
        return params.replace(kappa=kappa, potential=params.potential.scaled(beta), h=beta * params.h)
    return ModelParams.regression(
        alpha=params.alpha,
        delta_star=params.delta_star,
        kappa=kappa,
        gamma=params.gamma,
        potential=params.potential.scaled(beta),
    )
