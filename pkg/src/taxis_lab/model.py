"""Right-hand sides of the regularized nutrient-taxis system and initial data.

    u_t = div(u^{l-1} v grad u) - div(u^l v grad v) + u - u^2
    v_t = lap v - u v

with homogeneous Neumann data and u(0) = u0 + eps, v(0) = v0.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator

from .errors import FieldError, InitialDataError
from .grid import (
    FaceVectorField,
    GridSpec,
    ScalarField,
    check_finite,
    check_same_grid,
    divergence,
    face_gradient,
    face_mean,
    integrate,
    neumann_laplacian,
)

logger = logging.getLogger(__name__)


class ModelParams(BaseModel):
    """Degeneracy exponent ``l`` and regularization level ``eps``."""

    model_config = ConfigDict(frozen=True)

    l: float
    eps: float

    @field_validator("l")
    @classmethod
    def _check_l(cls, value: float) -> float:
        if not value >= 1:
            raise ValueError("l must be ≥ 1")
        return value

    @field_validator("eps")
    @classmethod
    def _check_eps(cls, value: float) -> float:
        if not 0 < value <= 1:
            raise ValueError("eps must be in (0, 1]")
        return value


def admissibility_class(l: float) -> str:
    if l < 3:
        return "l<3"
    if l == 3:
        return "l=3"
    return "l>3"


@dataclass
class AdmissibilityReport:
    """Outcome of checking initial data against the admissible classes."""

    admissibility_class: str
    min_u0: float
    min_v0: float
    ln_u0_integral: Optional[float] = None
    moment_integral: Optional[float] = None
    flags: List[str] = field(default_factory=list)

    @property
    def accepted(self) -> bool:
        return self.min_u0 >= 0 and self.min_v0 > 0


@dataclass(frozen=True)
class InitialData:
    u0: ScalarField
    v0: ScalarField
    admissibility_class: str
    report: AdmissibilityReport

    def regularized(self, eps: float) -> Tuple[ScalarField, ScalarField]:
        """``(u0 + eps, v0)`` as strictly positive fields."""
        return (
            ScalarField(self.u0.grid, self.u0.values + eps, positive=True),
            ScalarField(self.v0.grid, self.v0.values, positive=True),
        )


def _first_cell(mask: np.ndarray) -> Tuple[int, int]:
    j, i = (int(k) for k in np.argwhere(mask)[0])
    return i, j


def validate_initial_data(u0: ScalarField, v0: ScalarField, l: float) -> AdmissibilityReport:
    check_same_grid(u0, v0)
    check_finite(u0, "u0")
    check_finite(v0, "v0")
    if (u0.values < 0).any():
        i, j = _first_cell(u0.values < 0)
        raise InitialDataError(f"u0 must be nonnegative: u0={u0.values[j, i]:.17g} at cell ({i},{j})")
    if (v0.values <= 0).any():
        i, j = _first_cell(v0.values <= 0)
        raise InitialDataError(f"v0 must be positive: v0={v0.values[j, i]:.17g} at cell ({i},{j})")

    report = AdmissibilityReport(
        admissibility_class=admissibility_class(l),
        min_u0=u0.min(),
        min_v0=v0.min(),
    )
    zero = u0.values == 0
    if l == 3:
        if zero.any():
            i, j = _first_cell(zero)
            report.ln_u0_integral = float("-inf")
            report.flags.append(f"ln u0 integral divergent at cell ({i},{j})")
        else:
            report.ln_u0_integral = integrate(u0.with_values(np.log(u0.values)))
    elif l > 3:
        if zero.any():
            i, j = _first_cell(zero)
            report.moment_integral = float("inf")
            report.flags.append(f"u0^(3-l) integral divergent at cell ({i},{j})")
        else:
            report.moment_integral = integrate(u0.with_values(positive_power(u0.values, 3 - l)))
    for flag in report.flags:
        logger.warning(f"Initial data flag: {flag}")
    return report


def prepare_initial_data(u0: ScalarField, v0: ScalarField, l: float) -> InitialData:
    report = validate_initial_data(u0, v0, l)
    return InitialData(u0=u0, v0=v0, admissibility_class=report.admissibility_class, report=report)


def positive_power(values: np.ndarray, exponent: float) -> np.ndarray:
    """``values ** exponent`` through exp/log; valid for strictly positive input."""
    if exponent == 0:
        return np.ones_like(values)
    return np.exp(exponent * np.log(values))


def upwind_faces(cell: np.ndarray, slope: FaceVectorField) -> FaceVectorField:
    """Cell value taken from the side the drift along ``slope`` comes from."""
    g = slope.grid
    fx = np.zeros((g.ny, g.nx + 1))
    fy = np.zeros((g.ny + 1, g.nx))
    fx[:, 1:-1] = np.where(slope.fx[:, 1:-1] > 0, cell[:, :-1], cell[:, 1:])
    fy[1:-1, :] = np.where(slope.fy[1:-1, :] > 0, cell[:-1, :], cell[1:, :])
    return FaceVectorField(g, fx, fy)


def flux_u(u: ScalarField, v: ScalarField, p: ModelParams) -> FaceVectorField:
    """Face flux ``a_f grad u - b_f grad v`` of the population equation.

    ``a_f`` is the arithmetic face mean of ``u^{l-1} v``; ``b_f`` is ``u^l``
    from the upwind cell times the face mean of ``v``.
    """
    check_same_grid(u, v)
    check_finite(u, "u")
    check_finite(v, "v")
    if not u.min() > 0:
        raise FieldError(f"flux requires u > 0, got min u = {u.min():.17g}")
    if v.min() < 0:
        raise FieldError(f"flux requires v >= 0, got min v = {v.min():.17g}")

    diffusivity = face_mean(u.with_values(positive_power(u.values, p.l - 1) * v.values))
    grad_u = face_gradient(u)
    grad_v = face_gradient(v)
    drift = upwind_faces(positive_power(u.values, p.l), grad_v)
    v_face = face_mean(v)
    return FaceVectorField(
        u.grid,
        diffusivity.fx * grad_u.fx - drift.fx * v_face.fx * grad_v.fx,
        diffusivity.fy * grad_u.fy - drift.fy * v_face.fy * grad_v.fy,
    )


def rhs_u(u: ScalarField, v: ScalarField, p: ModelParams) -> ScalarField:
    transport = divergence(flux_u(u, v, p))
    return ScalarField(u.grid, transport.values + u.values - u.values**2)


def rhs_v(u: ScalarField, v: ScalarField) -> ScalarField:
    check_same_grid(u, v)
    return ScalarField(v.grid, neumann_laplacian(v).values - u.values * v.values)


# Built-in initial profiles


def gaussian_bump(
    grid: GridSpec, cx: float, cy: float, sigma: float, amplitude: float, floor: float
) -> ScalarField:
    return ScalarField.from_function(
        grid,
        lambda x, y: floor + amplitude * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * sigma**2)),
    )


def fourier_series(grid: GridSpec, seed: int, modes: int) -> np.ndarray:
    """Random cosine series with ``1/(k^2+m^2)`` decay, modes ``k, m = 1..modes``."""
    rng = np.random.default_rng(seed)
    coeffs = rng.standard_normal((modes, modes))
    k = np.arange(1, modes + 1)
    coeffs = coeffs / (k[:, None] ** 2 + k[None, :] ** 2)
    x = (np.arange(grid.nx) + 0.5) * grid.hx
    y = (np.arange(grid.ny) + 0.5) * grid.hy
    cos_x = np.cos(np.pi * np.outer(k, x) / grid.lx)
    cos_y = np.cos(np.pi * np.outer(k, y) / grid.ly)
    return cos_y.T @ coeffs.T @ cos_x


def random_fourier(
    grid: GridSpec, seed: int, modes: int, low: float, high: float
) -> ScalarField:
    """Exponential of a random cosine series rescaled into ``[low, high]``."""
    series = np.exp(fourier_series(grid, seed, modes))
    spread = series.max() - series.min()
    if high == low or spread == 0:
        return ScalarField.constant(grid, low)
    return ScalarField(grid, low + (high - low) * (series - series.min()) / spread)
