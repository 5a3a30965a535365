"""
Finite-N Monte Carlo laboratory
===============================

Instances of the regression model

    y = G_bar x* + z,   G_bar = G / sqrt(N),   z ~ N(0, delta_star),   M = floor(alpha N)

and the posterior exp(sum_k u((G_bar x)_k - y_k) - kappa |x|^2). Gaussian
potentials are handled exactly (Cholesky of the precision matrix); any other
concave potential is sampled with MALA.

Randomness: every stream (design, noise, x*, each chain, ...) is a child of the
instance seed under a fixed label, so adding replicas or chains never perturbs
the instance itself.
"""

import dataclasses
import itertools
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, solve_triangular
from scipy.optimize import minimize

from mismatched_regression.errors import (
    ConfigError,
    DomainError,
    NumericalError,
    SamplerHealthError,
    UnsupportedPotentialError,
)
from mismatched_regression.potential import Potential, check_growth
from mismatched_regression.replica import ModelParams

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
MIN_ACCEPTANCE = 0.05
OVERLAP_CHUNK = 1024

# sub-stream labels
STREAM_DESIGN = 0
STREAM_NOISE = 1
STREAM_X_STAR = 2
STREAM_ST_DESIGN = 3
STREAM_ST_NOISE = 4
STREAM_CHAIN = 5
STREAM_EXACT_REPLICAS = 6


class XStarMode(str, Enum):
    DETERMINISTIC_NORM = "deterministic_norm"
    GAUSSIAN = "gaussian"


class SamplerKind(str, Enum):
    EXACT_GAUSSIAN = "exact_gaussian"
    MALA = "mala"


class FieldMode(str, Enum):
    INSTANCE = "instance"
    FIXED = "fixed"


def substream(seed: int, label: int, index: int = 0) -> np.random.Generator:
    if seed < 0:
        raise DomainError(f"seeds must be non-negative, got {seed}")
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(label, index)))


@dataclass(frozen=True)
class SamplerConfig:
    kind: SamplerKind = SamplerKind.EXACT_GAUSSIAN
    step: float = 0.1
    burn_in: int = 5_000
    samples: int = 20_000
    thin: int = 1
    target_accept: float = 0.57
    replicas: int = 2

    def __post_init__(self):
        if not self.step > 0:
            raise DomainError(f"sampler step must be > 0, got {self.step}")
        if self.burn_in < 0 or self.samples < 1 or self.thin < 1 or self.replicas < 1:
            raise DomainError("sampler needs burn_in >= 0, samples >= 1, thin >= 1, replicas >= 1")
        if not 0 < self.target_accept < 1:
            raise DomainError(f"target_accept must be in (0, 1), got {self.target_accept}")

    def to_dict(self) -> Dict[str, Any]:
        data = dataclasses.asdict(self)
        data["kind"] = self.kind.value
        return data


@dataclass(frozen=True, eq=False)
class SimulationInstance:
    n: int
    m: int
    g_bar: np.ndarray = field(repr=False)
    z: np.ndarray = field(repr=False)
    x_star: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)
    seed: int
    x_star_mode: XStarMode

    @property
    def gamma_n(self) -> float:
        return float(self.x_star @ self.x_star) / self.n

    def residuals(self, x: np.ndarray) -> np.ndarray:
        """s_k = (G_bar x)_k - y_k, for one point or a stack of points (last axis N)."""
        return x @ self.g_bar.T - self.y


@dataclass
class PosteriorSummary:
    x_hat: np.ndarray = field(repr=False)
    mse_per_n: float
    free_energy: Optional[float]
    method: SamplerKind
    inverse_delta: Optional[float] = None
    factor: Optional[Tuple[np.ndarray, bool]] = field(default=None, repr=False)


@dataclass(frozen=True)
class OverlapEstimates:
    r11: float
    r12: float
    q11: float
    q12: float
    n_replicas: int
    # None when a single sample leaves no spread to estimate
    se_r11: Optional[float] = 0.0
    se_r12: Optional[float] = 0.0
    se_q11: Optional[float] = 0.0
    se_q12: Optional[float] = 0.0
    exact: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass
class MalaResult:
    samples: np.ndarray = field(repr=False)  # (replicas, samples, N)
    acceptance_rate: float
    steps: np.ndarray
    acceptance_per_replica: np.ndarray

    def posterior_mean(self) -> np.ndarray:
        return self.samples.reshape(-1, self.samples.shape[-1]).mean(axis=0)


@dataclass(frozen=True, eq=False)
class ModeSummary:
    x_mode: np.ndarray = field(repr=False)
    mse_per_n: float
    converged: bool
    iterations: int


@dataclass(frozen=True)
class StEquivalence:
    lhs: float
    rhs: float
    h: float
    lhs_free_energy: float
    rhs_free_energy: float
    coupled: bool


@dataclass
class SeedResult:
    seed: int
    n: int
    mse_per_n: float
    free_energy: Optional[float]
    overlaps: OverlapEstimates
    method: SamplerKind
    acceptance_rate: Optional[float] = None
    mode_mse_per_n: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "n": self.n,
            "mse_per_n": self.mse_per_n,
            "free_energy": self.free_energy,
            "overlaps": self.overlaps.to_dict(),
            "method": self.method.value,
            "acceptance_rate": self.acceptance_rate,
            "mode_mse_per_n": self.mode_mse_per_n,
        }


@dataclass(frozen=True)
class ConcentrationRow:
    n: int
    seeds: int
    mean_r11: float
    mean_r12: float
    var_r11: float
    var_r12: float
    se_var_r12: float
    var_q11: float
    var_q12: float

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


def _gamma(params: ModelParams) -> float:
    if params.gamma is not None:
        return params.gamma
    return (params.h / (2.0 * params.kappa)) ** 2


def generate_instance(
    params: ModelParams,
    n: int,
    seed: int,
    x_star_mode: XStarMode = XStarMode.DETERMINISTIC_NORM,
) -> SimulationInstance:
    if n < 1:
        raise ConfigError("sim.n", f"must be >= 1, got {n}")
    m = int(math.floor(params.alpha * n + 1e-9))
    if m == 0:
        raise ConfigError("sim.n", f"alpha * n = {params.alpha * n:g} gives no samples")
    mode = XStarMode(x_star_mode)
    gamma = _gamma(params)

    g_bar = substream(seed, STREAM_DESIGN).standard_normal((m, n)) / math.sqrt(n)
    z = math.sqrt(params.delta_star) * substream(seed, STREAM_NOISE).standard_normal(m)
    if mode == XStarMode.DETERMINISTIC_NORM:
        x_star = np.full(n, math.sqrt(gamma))
    else:
        x_star = math.sqrt(gamma) * substream(seed, STREAM_X_STAR).standard_normal(n)
    y = g_bar @ x_star + z
    logger.debug(f"Generated instance seed={seed} n={n} m={m} mode={mode.value}")
    return SimulationInstance(n=n, m=m, g_bar=g_bar, z=z, x_star=x_star, y=y, seed=seed, x_star_mode=mode)


def _gaussian_solve(g_bar: np.ndarray, linear: np.ndarray, inverse_delta: float, kappa: float):
    """Factor P = G^T G / delta + 2 kappa I and return (factor, P^-1 linear, log det P)."""
    n = g_bar.shape[1]
    precision = inverse_delta * (g_bar.T @ g_bar)
    precision[np.diag_indices(n)] += 2.0 * kappa
    try:
        factor = cho_factor(precision, lower=True)
    except LinAlgError as e:
        raise NumericalError(f"precision matrix is not positive definite: {e}")
    mean = cho_solve(factor, linear)
    logdet = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
    return factor, mean, logdet


def exact_posterior(instance: SimulationInstance, potential: Potential, kappa: float) -> PosteriorSummary:
    """Posterior mean and (1/N) ln Z for a Gaussian potential, through one Cholesky factor."""
    if not potential.is_gaussian:
        raise UnsupportedPotentialError(f"exact posterior needs a quadratic potential, got {potential.kind.value}")
    inv = potential.inverse_delta
    linear = inv * (instance.g_bar.T @ instance.y)
    factor, x_hat, logdet = _gaussian_solve(instance.g_bar, linear, inv, kappa)
    n = instance.n
    log_z = -0.5 * inv * float(instance.y @ instance.y) + 0.5 * float(x_hat @ linear) + 0.5 * n * LOG_2PI - 0.5 * logdet
    err = x_hat - instance.x_star
    return PosteriorSummary(
        x_hat=x_hat,
        mse_per_n=float(err @ err) / n,
        free_energy=log_z / n,
        method=SamplerKind.EXACT_GAUSSIAN,
        inverse_delta=inv,
        factor=factor,
    )


def exact_overlaps(instance: SimulationInstance, posterior: PosteriorSummary, centered: bool = True) -> OverlapEstimates:
    """Gibbs averages of (R11, R12, Q11, Q12) under a Gaussian posterior, in closed form."""
    if posterior.factor is None or posterior.inverse_delta is None:
        raise UnsupportedPotentialError("closed-form overlaps need an exact Gaussian posterior")
    lower = posterior.factor[0]
    n, inv = instance.n, posterior.inverse_delta
    center = posterior.x_hat - instance.x_star if centered else posterior.x_hat
    trace_cov = float(np.sum(solve_triangular(lower, np.eye(n), lower=True, check_finite=False) ** 2))
    trace_fitted = float(np.sum(solve_triangular(lower, instance.g_bar.T, lower=True, check_finite=False) ** 2))
    mean_residual = instance.residuals(posterior.x_hat)
    rss = float(mean_residual @ mean_residual)
    r12 = float(center @ center) / n
    return OverlapEstimates(
        r11=r12 + trace_cov / n,
        r12=r12,
        q11=(inv**2 * (rss + trace_fitted) - instance.m * inv) / n,
        q12=inv**2 * rss / n,
        n_replicas=0,
        exact=True,
    )


def exact_replicas(
    instance: SimulationInstance,
    posterior: PosteriorSummary,
    n_replicas: int,
    n_samples: int,
    seed: Optional[int] = None,
) -> np.ndarray:
    """Independent draws x_hat + L^-T xi from the Gaussian posterior; shape (replicas, samples, N)."""
    if posterior.factor is None:
        raise UnsupportedPotentialError("exact replicas need an exact Gaussian posterior")
    seed = instance.seed if seed is None else seed
    lower = posterior.factor[0]
    out = np.empty((n_replicas, n_samples, instance.n))
    for i in range(n_replicas):
        xi = substream(seed, STREAM_EXACT_REPLICAS, i).standard_normal((instance.n, n_samples))
        out[i] = (posterior.x_hat[:, None] + solve_triangular(lower, xi, lower=True, trans="T", check_finite=False)).T
    return out


def _log_target(instance: SimulationInstance, potential: Potential, kappa: float, x: np.ndarray):
    """Log density (up to a constant) and its gradient, row-wise for a stack of chains."""
    u, u1, _ = potential.eval(instance.residuals(x))
    logp = u.sum(axis=-1) - kappa * np.sum(x * x, axis=-1)
    grad = u1 @ instance.g_bar - 2.0 * kappa * x
    return logp, grad


def mala_sample(
    instance: SimulationInstance,
    potential: Potential,
    kappa: float,
    cfg: SamplerConfig,
    n_replicas: Optional[int] = None,
    seed: Optional[int] = None,
) -> MalaResult:
    """
    Independent MALA chains, vectorized across replicas. Each chain adapts its
    own step toward ``target_accept`` during burn-in and then freezes it.
    """
    report = check_growth(potential)
    if not report.ok:
        raise DomainError(f"MALA needs a concave, non-positive potential: {report.to_dict()}")
    n_replicas = cfg.replicas if n_replicas is None else n_replicas
    seed = instance.seed if seed is None else seed
    rngs = [substream(seed, STREAM_CHAIN, i) for i in range(n_replicas)]
    n = instance.n

    x = np.zeros((n_replicas, n))
    logp, grad = _log_target(instance, potential, kappa, x)
    log_step = np.full(n_replicas, math.log(cfg.step))
    accepted = np.zeros(n_replicas)
    samples = np.empty((n_replicas, cfg.samples, n))
    total = cfg.burn_in + cfg.samples * cfg.thin

    for t in range(total):
        h = np.exp(log_step)[:, None]
        xi = np.stack([rng.standard_normal(n) for rng in rngs])
        log_uniform = np.log(np.array([rng.random() for rng in rngs]))

        forward_mean = x + 0.5 * h**2 * grad
        proposal = forward_mean + h * xi
        logp_new, grad_new = _log_target(instance, potential, kappa, proposal)
        backward_mean = proposal + 0.5 * h**2 * grad_new
        log_q_forward = -np.sum((proposal - forward_mean) ** 2, axis=1) / (2.0 * h[:, 0] ** 2)
        log_q_backward = -np.sum((x - backward_mean) ** 2, axis=1) / (2.0 * h[:, 0] ** 2)
        log_ratio = logp_new - logp + log_q_backward - log_q_forward

        accept = log_uniform < log_ratio
        x = np.where(accept[:, None], proposal, x)
        logp = np.where(accept, logp_new, logp)
        grad = np.where(accept[:, None], grad_new, grad)

        if t < cfg.burn_in:
            prob = np.exp(np.minimum(0.0, log_ratio))
            log_step += (prob - cfg.target_accept) / (t + 1) ** 0.6
        else:
            accepted += accept
            k = t - cfg.burn_in
            if k % cfg.thin == cfg.thin - 1:
                samples[:, k // cfg.thin] = x

    per_replica = accepted / (cfg.samples * cfg.thin)
    rate = float(per_replica.mean())
    steps = np.exp(log_step)
    logger.info(f"MALA seed={seed}: steps {np.array2string(steps, precision=4)} acceptance {rate:.3f}")
    if rate < MIN_ACCEPTANCE:
        logger.error(f"MALA acceptance {rate:.3f} below {MIN_ACCEPTANCE} after adaptation (seed={seed})")
        raise SamplerHealthError(f"acceptance rate {rate:.3f} below {MIN_ACCEPTANCE}", acceptance_rate=rate)
    return MalaResult(samples=samples, acceptance_rate=rate, steps=steps, acceptance_per_replica=per_replica)


def chain_standard_error(samples: np.ndarray, n_batches: int = 50) -> np.ndarray:
    """Per-coordinate Monte Carlo standard error of the pooled chain mean, by batch means."""
    n_replicas, n_samples, n = samples.shape
    size = n_samples // n_batches
    if size < 1:
        raise DomainError(f"need at least {n_batches} samples per chain for batch means, got {n_samples}")
    batches = samples[:, : size * n_batches].reshape(n_replicas, n_batches, size, n).mean(axis=2)
    batches = batches.reshape(n_replicas * n_batches, n)
    return batches.std(axis=0, ddof=1) / math.sqrt(batches.shape[0])


def _mean_and_se(values: np.ndarray) -> Tuple[float, Optional[float]]:
    flat = np.ravel(values)
    if flat.size < 2:
        return float(flat.mean()), None
    return float(flat.mean()), float(flat.std(ddof=1) / math.sqrt(flat.size))


def estimate_overlaps(
    instance: SimulationInstance,
    samples: np.ndarray,
    potential: Potential,
    centered: bool = True,
) -> OverlapEstimates:
    """
    Sample averages of the replica overlaps; samples has shape (replicas, samples, N).
    u' and u'' are evaluated at the residuals (G_bar x)_k - y_k.
    """
    n_replicas, n_samples, n = samples.shape
    if n_replicas < 2:
        raise DomainError(f"pair overlaps need at least 2 replicas, got {n_replicas}")
    pairs = list(itertools.combinations(range(n_replicas), 2))
    r11 = np.empty((n_replicas, n_samples))
    q11 = np.empty((n_replicas, n_samples))
    r12 = np.empty((len(pairs), n_samples))
    q12 = np.empty((len(pairs), n_samples))

    for start in range(0, n_samples, OVERLAP_CHUNK):
        chunk = slice(start, min(start + OVERLAP_CHUNK, n_samples))
        x = samples[:, chunk, :]
        sigma = x - instance.x_star if centered else x
        _, a, b = potential.eval(instance.residuals(x))
        r11[:, chunk] = np.sum(sigma * sigma, axis=-1) / n
        q11[:, chunk] = np.sum(a * a + b, axis=-1) / n
        for j, (p1, p2) in enumerate(pairs):
            r12[j, chunk] = np.sum(sigma[p1] * sigma[p2], axis=-1) / n
            q12[j, chunk] = np.sum(a[p1] * a[p2], axis=-1) / n

    (m11, s11), (m12, s12) = _mean_and_se(r11), _mean_and_se(r12)
    (mq11, sq11), (mq12, sq12) = _mean_and_se(q11), _mean_and_se(q12)
    return OverlapEstimates(
        r11=m11, r12=m12, q11=mq11, q12=mq12, n_replicas=n_replicas,
        se_r11=s11, se_r12=s12, se_q11=sq11, se_q12=sq12,
    )


def posterior_mode(instance: SimulationInstance, potential: Potential, kappa: float) -> ModeSummary:
    """MAP estimate: minimizer of the convex negative log posterior."""

    def objective(x):
        logp, grad = _log_target(instance, potential, kappa, x)
        return -float(logp), -grad

    result = minimize(objective, np.zeros(instance.n), jac=True, method="L-BFGS-B", options={"gtol": 1e-9, "ftol": 1e-15, "maxiter": 10_000})
    if not result.success:
        logger.warning(f"Posterior mode search stopped early: {result.message}")
    err = result.x - instance.x_star
    return ModeSummary(x_mode=result.x, mse_per_n=float(err @ err) / instance.n, converged=bool(result.success), iterations=int(result.nit))


def _householder_design(g_bar: np.ndarray, x_star: np.ndarray) -> np.ndarray:
    """G_bar O^T for the reflection O that maps x*/|x*| onto 1/sqrt(N)."""
    n = x_star.size
    norm = math.sqrt(float(x_star @ x_star))
    if norm == 0.0:
        return g_bar.copy()
    v = np.full(n, 1.0 / math.sqrt(n)) - x_star / norm
    vv = float(v @ v)
    if vv < 1e-30:
        return g_bar.copy()
    return g_bar - (2.0 / vv) * np.outer(g_bar @ v, v)


def st_model_equivalence(
    instance: SimulationInstance,
    params: ModelParams,
    field_mode: FieldMode = FieldMode.INSTANCE,
    coupled: bool = False,
) -> StEquivalence:
    """
    Compare |x_hat - x*|^2/N with |<sigma>|^2/N of the spin-glass model
    sum_k u(S_k(sigma) + z_k) - h sum_i sigma_i - kappa |sigma|^2.

    With ``coupled`` the spin-glass design is G_bar O^T and its noise -z, which
    makes both sides (and both free energies) equal per seed. Otherwise a fresh
    design and noise are drawn and the equality only holds in distribution.
    """
    potential, kappa = params.potential, params.kappa
    if not potential.is_gaussian:
        raise UnsupportedPotentialError("the spin-glass comparison is exact for quadratic potentials only")
    regression = exact_posterior(instance, potential, kappa)

    gamma = instance.gamma_n if FieldMode(field_mode) == FieldMode.INSTANCE else _gamma(params)
    h = 2.0 * kappa * math.sqrt(gamma)
    if coupled:
        design, noise = _householder_design(instance.g_bar, instance.x_star), -instance.z
    else:
        design = substream(instance.seed, STREAM_ST_DESIGN).standard_normal(instance.g_bar.shape) / math.sqrt(instance.n)
        noise = math.sqrt(params.delta_star) * substream(instance.seed, STREAM_ST_NOISE).standard_normal(instance.m)

    inv = potential.inverse_delta
    linear = -inv * (design.T @ noise) - h
    _, mean, logdet = _gaussian_solve(design, linear, inv, kappa)
    n = instance.n
    st_log_z = -0.5 * inv * float(noise @ noise) + 0.5 * float(mean @ linear) + 0.5 * n * LOG_2PI - 0.5 * logdet
    return StEquivalence(
        lhs=regression.mse_per_n,
        rhs=float(mean @ mean) / n,
        h=h,
        lhs_free_energy=float(regression.free_energy),
        rhs_free_energy=-kappa * gamma + st_log_z / n,
        coupled=coupled,
    )


def simulate_seed(
    params: ModelParams,
    n: int,
    seed: int,
    x_star_mode: XStarMode = XStarMode.DETERMINISTIC_NORM,
    sampler: Optional[SamplerConfig] = None,
    with_mode: bool = False,
    dump_path: Optional[str] = None,
) -> SeedResult:
    """One instance, its posterior, MSE, free energy and overlaps. MALA chains are dumped to ``dump_path`` when given."""
    sampler = sampler or SamplerConfig()
    instance = generate_instance(params, n, seed, x_star_mode)
    potential, kappa = params.potential, params.kappa

    if sampler.kind == SamplerKind.EXACT_GAUSSIAN:
        posterior = exact_posterior(instance, potential, kappa)
        result = SeedResult(
            seed=seed,
            n=n,
            mse_per_n=posterior.mse_per_n,
            free_energy=posterior.free_energy,
            overlaps=exact_overlaps(instance, posterior),
            method=SamplerKind.EXACT_GAUSSIAN,
        )
    else:
        chains = mala_sample(instance, potential, kappa, sampler)
        if dump_path:
            write_sample_dump(dump_path, chains.samples)
        err = chains.posterior_mean() - instance.x_star
        result = SeedResult(
            seed=seed,
            n=n,
            mse_per_n=float(err @ err) / n,
            free_energy=None,
            overlaps=estimate_overlaps(instance, chains.samples, potential),
            method=SamplerKind.MALA,
            acceptance_rate=chains.acceptance_rate,
        )
    if with_mode:
        result.mode_mse_per_n = posterior_mode(instance, potential, kappa).mse_per_n
    return result


def concentration_scan(
    params: ModelParams,
    n_list: Sequence[int],
    seeds: Sequence[int],
    x_star_mode: XStarMode = XStarMode.DETERMINISTIC_NORM,
    sampler: Optional[SamplerConfig] = None,
) -> List[ConcentrationRow]:
    """Across-seed variance of the overlaps for each N (a diagnostic of their concentration)."""
    if any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise DomainError(f"n_list must be increasing, got {list(n_list)}")
    if len(seeds) < 2:
        raise DomainError("the variance scan needs at least 2 seeds")
    rows = []
    for n in n_list:
        results = [simulate_seed(params, n, seed, x_star_mode, sampler) for seed in seeds]
        r11 = np.array([res.overlaps.r11 for res in results])
        r12 = np.array([res.overlaps.r12 for res in results])
        q11 = np.array([res.overlaps.q11 for res in results])
        q12 = np.array([res.overlaps.q12 for res in results])
        var_r12 = float(r12.var(ddof=1))
        rows.append(
            ConcentrationRow(
                n=int(n),
                seeds=len(seeds),
                mean_r11=float(r11.mean()),
                mean_r12=float(r12.mean()),
                var_r11=float(r11.var(ddof=1)),
                var_r12=var_r12,
                se_var_r12=var_r12 * math.sqrt(2.0 / (len(seeds) - 1)),
                var_q11=float(q11.var(ddof=1)),
                var_q12=float(q12.var(ddof=1)),
            )
        )
        logger.info(f"Concentration N={n}: var(r12)={var_r12:.3e} over {len(seeds)} seeds")
    return rows


def write_sample_dump(path: str, samples: np.ndarray) -> None:
    """Raw chain dump: little-endian float64, one row per iteration, replicas side by side."""
    n_replicas, n_samples, n = samples.shape
    rows = np.ascontiguousarray(samples.transpose(1, 0, 2).reshape(n_samples, n_replicas * n), dtype="<f8")
    rows.tofile(path)
    logger.info(f"Wrote {n_samples} x {n_replicas * n} samples to {path}")
