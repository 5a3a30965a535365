"""
Mismatch potentials for the regression posterior
================================================

A potential u is the log of the (unnormalized) noise density the statistician
assumes. It must be concave and non-positive; the growth condition
|u'(s)| <= d(1 + sqrt|u(s)|) is checked on a grid by ``check_growth``.

Built-in kinds:
    quadratic     u(s) = -s^2 / (2 delta)
    pseudo_huber  u(s) = b^2 (1 - sqrt(1 + s^2 / b^2))
    zero          u(s) = 0
"""

import logging
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Any, Callable, Dict, Tuple, Union

import numpy as np
from typing_extensions import Self

from mismatched_regression.errors import ConfigError, DomainError, UnsupportedPotentialError

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]
Evaluator = Callable[["Potential", np.ndarray], Tuple[np.ndarray, np.ndarray, np.ndarray]]


class PotentialKind(str, Enum):
    QUADRATIC = "quadratic"
    PSEUDO_HUBER = "pseudo_huber"
    ZERO = "zero"


# kind -> evaluator returning (u, u', u'') on an array of finite points
_EVALUATORS: Dict[PotentialKind, Evaluator] = {}


def register_evaluator(kind: PotentialKind) -> Callable[[Evaluator], Evaluator]:
    """Register the closed-form evaluator of a potential kind."""

    def decorator(fn: Evaluator) -> Evaluator:
        _EVALUATORS[kind] = fn
        return fn

    return decorator


@dataclass(frozen=True)
class Potential:
    kind: PotentialKind
    delta: float = 1.0
    scale: float = 1.0

    def __post_init__(self):
        if self.kind == PotentialKind.QUADRATIC and not self.delta > 0:
            raise DomainError(f"quadratic potential needs delta > 0, got {self.delta}")
        if self.kind == PotentialKind.PSEUDO_HUBER and not self.scale > 0:
            raise DomainError(f"pseudo-Huber potential needs scale > 0, got {self.scale}")

    @classmethod
    def quadratic(cls, delta: float) -> Self:
        return cls(PotentialKind.QUADRATIC, delta=float(delta))

    @classmethod
    def pseudo_huber(cls, scale: float) -> Self:
        return cls(PotentialKind.PSEUDO_HUBER, scale=float(scale))

    @classmethod
    def zero(cls) -> Self:
        return cls(PotentialKind.ZERO)

    @property
    def is_quadratic(self) -> bool:
        return self.kind == PotentialKind.QUADRATIC

    @property
    def is_gaussian(self) -> bool:
        """True when exp(u) is a Gaussian factor (or constant) in s."""
        return self.kind in (PotentialKind.QUADRATIC, PotentialKind.ZERO)

    @property
    def inverse_delta(self) -> float:
        """1/delta for Gaussian kinds; the zero potential is the delta -> inf limit."""
        if self.kind == PotentialKind.QUADRATIC:
            return 1.0 / self.delta
        if self.kind == PotentialKind.ZERO:
            return 0.0
        raise UnsupportedPotentialError(f"{self.kind.value} potential has no Gaussian form")

    def eval(self, s: ArrayLike) -> Tuple[ArrayLike, ArrayLike, ArrayLike]:
        """Return (u(s), u'(s), u''(s)); scalars in, scalars out."""
        arr = np.asarray(s, dtype=float)
        if not np.all(np.isfinite(arr)):
            raise DomainError("potential evaluated at a non-finite point")
        u, u1, u2 = _EVALUATORS[self.kind](self, arr)
        if arr.ndim == 0:
            return float(u), float(u1), float(u2)
        return u, u1, u2

    def value(self, s: ArrayLike) -> ArrayLike:
        return self.eval(s)[0]

    def scaled(self, beta: float) -> Self:
        """Quadratic potential of the inverse-temperature model: beta*u, i.e. delta -> delta/beta."""
        if not beta > 0:
            raise DomainError(f"beta must be > 0, got {beta}")
        if self.kind == PotentialKind.ZERO:
            return self
        if self.kind != PotentialKind.QUADRATIC:
            raise UnsupportedPotentialError("inverse-temperature scaling is implemented for quadratic potentials only")
        return type(self).quadratic(self.delta / beta)

    def growth_constant(self) -> float:
        return check_growth(self).d

    def to_dict(self) -> Dict[str, Any]:
        if self.kind == PotentialKind.QUADRATIC:
            return {"kind": self.kind.value, "delta": self.delta}
        if self.kind == PotentialKind.PSEUDO_HUBER:
            return {"kind": self.kind.value, "scale": self.scale}
        return {"kind": self.kind.value}

    @classmethod
    def from_dict(cls, data: Dict[str, Any], field_path: str = "potential") -> Self:
        if not isinstance(data, dict):
            raise ConfigError(field_path, "expected an object")
        try:
            kind = PotentialKind(data.get("kind"))
        except ValueError:
            choices = ", ".join(k.value for k in PotentialKind)
            raise ConfigError(f"{field_path}.kind", f"must be one of {choices}")
        allowed = {"kind", "delta"} if kind == PotentialKind.QUADRATIC else {"kind", "scale"}
        if kind == PotentialKind.ZERO:
            allowed = {"kind"}
        for key in data:
            if key not in allowed:
                raise ConfigError(f"{field_path}.{key}", f"not a parameter of the {kind.value} potential")
        try:
            if kind == PotentialKind.QUADRATIC:
                return cls.quadratic(float(data.get("delta", 1.0)))
            if kind == PotentialKind.PSEUDO_HUBER:
                return cls.pseudo_huber(float(data.get("scale", 1.0)))
        except (TypeError, ValueError) as e:
            raise ConfigError(field_path, str(e))
        return cls.zero()


def evaluate(p: Potential, s: ArrayLike) -> Tuple[ArrayLike, ArrayLike, ArrayLike]:
    return p.eval(s)


@register_evaluator(PotentialKind.QUADRATIC)
def _quadratic(p: Potential, s: np.ndarray):
    return -s * s / (2.0 * p.delta), -s / p.delta, np.full_like(s, -1.0 / p.delta)


@register_evaluator(PotentialKind.PSEUDO_HUBER)
def _pseudo_huber(p: Potential, s: np.ndarray):
    b = p.scale
    root = np.sqrt(1.0 + (s / b) ** 2)
    return b * b * (1.0 - root), -s / root, -1.0 / root**3


@register_evaluator(PotentialKind.ZERO)
def _zero(p: Potential, s: np.ndarray):
    zeros = np.zeros_like(s)
    return zeros, zeros.copy(), zeros.copy()


@dataclass(frozen=True)
class GrowthReport:
    kind: str
    d: float
    growth_ratio: float
    abs_u_at_zero: float
    abs_u1_at_zero: float
    sup_abs_u2: float
    positivity_violations: int
    concavity_violations: int
    grid_half_width: float
    grid_points: int

    @property
    def ok(self) -> bool:
        return self.positivity_violations == 0 and self.concavity_violations == 0

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["ok"] = self.ok
        return data


def check_growth(p: Potential, grid_half_width: float = 10.0, grid_points: int = 1001) -> GrowthReport:
    """
    Scan a symmetric grid and report the smallest d satisfying the growth
    condition there, together with sign and concavity violations.
    Bounds on u''' and u'''' are not checked.
    """
    if grid_points < 2:
        raise DomainError(f"grid_points must be >= 2, got {grid_points}")
    s = np.linspace(-grid_half_width, grid_half_width, grid_points)
    u, u1, u2 = p.eval(s)
    u0, u10, _ = p.eval(0.0)

    ratio = float(np.max(np.abs(u1) / (1.0 + np.sqrt(np.abs(u)))))
    sup_u2 = float(np.max(np.abs(u2)))
    report = GrowthReport(
        kind=p.kind.value,
        d=max(abs(u0), abs(u10), sup_u2, ratio),
        growth_ratio=ratio,
        abs_u_at_zero=abs(u0),
        abs_u1_at_zero=abs(u10),
        sup_abs_u2=sup_u2,
        positivity_violations=int(np.count_nonzero(u > 0.0)),
        concavity_violations=int(np.count_nonzero(u2 > 0.0)),
        grid_half_width=float(grid_half_width),
        grid_points=int(grid_points),
    )
    if not report.ok:
        logger.warning(f"Potential {p.kind.value} violates the growth assumptions on the grid: {report.to_dict()}")
    return report


def finite_difference_error(p: Potential, step: float = 1e-5, half_width: float = 10.0, points: int = 201) -> Tuple[float, float]:
    """Max relative mismatch of (u', u'') against central differences of (u, u')."""
    s = np.linspace(-half_width, half_width, points)
    u_plus, u1_plus, _ = p.eval(s + step)
    u_minus, u1_minus, _ = p.eval(s - step)
    _, u1, u2 = p.eval(s)
    fd1 = (u_plus - u_minus) / (2.0 * step)
    fd2 = (u1_plus - u1_minus) / (2.0 * step)
    err1 = np.abs(fd1 - u1) / np.maximum(1.0, np.abs(u1))
    err2 = np.abs(fd2 - u2) / np.maximum(1.0, np.abs(u2))
    return float(np.max(err1)), float(np.max(err2))


def describe(p: Potential) -> str:
    if p.kind == PotentialKind.QUADRATIC:
        return f"quadratic(delta={p.delta:g})"
    if p.kind == PotentialKind.PSEUDO_HUBER:
        return f"pseudo_huber(scale={p.scale:g})"
    return "zero"
