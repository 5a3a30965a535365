"""
Nested Gaussian expectations by Gauss-Hermite quadrature
========================================================

The fixed-point maps and the free energy need expectations of the form

    E_z [ g( E_xi[ f(theta) exp u(theta) ] ) ],   theta = m z + s xi,

with z, xi independent standard normals. Hermite nodes for exp(-x^2) are
rescaled by sqrt(2) (and the weights by 1/sqrt(pi)) so that every rule below
computes standard-normal expectations directly and its weights sum to one.

The inner rule is re-centred at every outer node on the Gaussian that matches
exp(u(theta)) phi(xi) at its mode (mean mu, width sigma), with the weights
corrected by sigma phi(mu + sigma eta) / phi(eta). When u is quadratic the
tilted integrand is exactly Gaussian and the inner sums are exact at any order,
however narrow exp(u) is.
"""

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Tuple, Union

import numpy as np
from numpy.polynomial.hermite import hermgauss

from mismatched_regression.errors import DomainError, EvaluationError
from mismatched_regression.potential import Potential

logger = logging.getLogger(__name__)

MIN_NODES = 2
MAX_NODES = 512
DEFAULT_OUTER_NODES = 80
DEFAULT_INNER_NODES = 80
CENTRE_MAX_STEPS = 50
CENTRE_TOL = 1e-13


@dataclass(frozen=True)
class GaussHermiteRule:
    """Nodes/weights for a standard-normal expectation."""

    nodes: np.ndarray
    weights: np.ndarray

    @property
    def size(self) -> int:
        return int(self.nodes.size)

    def expect(self, f: Callable[[np.ndarray], np.ndarray]) -> float:
        return float(np.dot(self.weights, f(self.nodes)))

    def moment(self, power: int) -> float:
        return float(np.dot(self.weights, self.nodes**power))

    @property
    def log_weights(self) -> np.ndarray:
        # the outermost weights of large rules underflow to 0
        with np.errstate(divide="ignore"):
            return np.log(self.weights)


@dataclass(frozen=True)
class QuadratureGrid:
    outer: GaussHermiteRule
    inner: GaussHermiteRule

    @property
    def nodes_outer(self) -> np.ndarray:
        return self.outer.nodes

    @property
    def nodes_inner(self) -> np.ndarray:
        return self.inner.nodes


@dataclass(frozen=True)
class ThetaSpec:
    """theta = m_coeff * z_tilde + s_coeff * xi."""

    m_coeff: float
    s_coeff: float

    def __post_init__(self):
        if not (self.m_coeff >= 0 and self.s_coeff >= 0):
            raise DomainError(f"theta coefficients must be >= 0, got m={self.m_coeff}, s={self.s_coeff}")

    @classmethod
    def from_overlaps(cls, delta_star: float, q: float, rho: float) -> "ThetaSpec":
        if not 0 <= q < rho:
            raise DomainError(f"need 0 <= q < rho, got q={q}, rho={rho}")
        return cls(m_coeff=float(np.sqrt(delta_star + q)), s_coeff=float(np.sqrt(rho - q)))


@dataclass(frozen=True)
class InnerMoments:
    """
    Inner expectations at each outer node, stored relative to exp(shift):

        E0  = E_xi exp u(theta)
        E1  = E_xi u'(theta) exp u(theta)
        E2  = E_xi (u''(theta) + u'(theta)^2) exp u(theta)
        E12 = E_xi u(theta) exp u(theta)

    ``shift`` is the largest log-weighted term over the inner nodes, so the
    scaled sums never underflow and ratios / log E0 are taken on the scaled
    values.
    """

    shift: np.ndarray
    scaled_e0: np.ndarray
    scaled_e1: np.ndarray
    scaled_e2: np.ndarray
    scaled_e12: np.ndarray

    @property
    def e0(self) -> np.ndarray:
        return np.exp(self.shift) * self.scaled_e0

    @property
    def e1(self) -> np.ndarray:
        return np.exp(self.shift) * self.scaled_e1

    @property
    def e2(self) -> np.ndarray:
        return np.exp(self.shift) * self.scaled_e2

    @property
    def e12(self) -> np.ndarray:
        return np.exp(self.shift) * self.scaled_e12

    @property
    def log_e0(self) -> np.ndarray:
        return self.shift + np.log(self.scaled_e0)

    @property
    def ratio1(self) -> np.ndarray:
        """E1 / E0."""
        return self.scaled_e1 / self.scaled_e0

    @property
    def ratio2(self) -> np.ndarray:
        """E2 / E0."""
        return self.scaled_e2 / self.scaled_e0

    def as_tuple(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        return self.e0, self.e1, self.e2, self.e12


@lru_cache(maxsize=64)
def standard_normal_rule(n: int) -> GaussHermiteRule:
    if not MIN_NODES <= n <= MAX_NODES:
        raise DomainError(f"quadrature order must be in [{MIN_NODES}, {MAX_NODES}], got {n}")
    x, w = hermgauss(n)
    nodes = np.sqrt(2.0) * x
    weights = w / np.sqrt(np.pi)
    # hermgauss returns nodes that are symmetric only up to rounding
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = 0.5 * (weights + weights[::-1])
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return GaussHermiteRule(nodes=nodes, weights=weights)


def make_grid(n_outer: int = DEFAULT_OUTER_NODES, n_inner: int = DEFAULT_INNER_NODES) -> QuadratureGrid:
    return QuadratureGrid(outer=standard_normal_rule(int(n_outer)), inner=standard_normal_rule(int(n_inner)))


def inner_centre(theta: ThetaSpec, p: Potential, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Mode and curvature width of xi -> u(m z + s xi) - xi^2/2 at every z.

    The log-integrand has second derivative s^2 u'' - 1 <= -1 for concave u, so
    plain Newton from xi = 0 converges; one step is exact for quadratic u.
    Non-finite results fall back to the standard rule (mu = 0, sigma = 1).
    """
    m, s = theta.m_coeff, theta.s_coeff
    mu = np.zeros_like(z)
    curvature = np.ones_like(z)
    if s == 0.0:
        return mu, curvature
    for _ in range(CENTRE_MAX_STEPS):
        _, u1, u2 = p.eval(m * z + s * mu)
        curvature = 1.0 - s * s * np.asarray(u2)
        step = (s * np.asarray(u1) - mu) / curvature
        mu = mu + step
        if not np.all(np.isfinite(mu)):
            logger.warning("inner rule centring diverged; using the standard rule")
            return np.zeros_like(z), np.ones_like(z)
        if np.all(np.abs(step) <= CENTRE_TOL * (1.0 + np.abs(mu))):
            break
    _, _, u2 = p.eval(m * z + s * mu)
    curvature = 1.0 - s * s * np.asarray(u2)
    return mu, 1.0 / np.sqrt(curvature)


def inner_moments(
    grid: QuadratureGrid,
    theta: ThetaSpec,
    p: Potential,
    z_tilde: Union[float, np.ndarray],
) -> InnerMoments:
    """All four inner moments at the given outer point(s), in one pass over exp(u)."""
    z = np.atleast_1d(np.asarray(z_tilde, dtype=float))
    mu, sigma = inner_centre(theta, p, z)
    eta = grid.inner.nodes[None, :]
    xi = mu[:, None] + sigma[:, None] * eta
    points = theta.m_coeff * z[:, None] + theta.s_coeff * xi
    u, u1, u2 = p.eval(points)
    # log of w * sigma * phi(xi) / phi(eta) * exp(u)
    log_terms = grid.inner.log_weights[None, :] + np.log(sigma)[:, None] + 0.5 * (eta * eta - xi * xi) + u
    shift = np.max(log_terms, axis=1)
    tilted = np.exp(log_terms - shift[:, None])
    return InnerMoments(
        shift=shift,
        scaled_e0=tilted.sum(axis=1),
        scaled_e1=(u1 * tilted).sum(axis=1),
        scaled_e2=((u2 + u1 * u1) * tilted).sum(axis=1),
        scaled_e12=(u * tilted).sum(axis=1),
    )


def nested_expect(
    grid: QuadratureGrid,
    theta: ThetaSpec,
    p: Potential,
    g: Callable[[InnerMoments], np.ndarray],
) -> float:
    """Outer expectation of g applied to the inner moments at every outer node."""
    moments = inner_moments(grid, theta, p, grid.outer.nodes)
    values = np.broadcast_to(np.asarray(g(moments), dtype=float), grid.outer.nodes.shape)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        node = int(bad[0])
        raise EvaluationError(
            f"integrand is not finite at outer node {node} (z={grid.outer.nodes[node]:.6g})",
            node=node,
        )
    return float(np.dot(grid.outer.weights, values))
