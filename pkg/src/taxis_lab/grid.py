"""Structured grid, cell-centered fields and discrete calculus.

Fields are stored as ``(ny, nx)`` arrays: row ``j`` is the y index and column
``i`` the x index, so a C-order flatten is "j outer, i inner". Boundary faces
always carry zero gradient/flux (homogeneous Neumann by ghost reflection).
"""

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Callable, Tuple, Union

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, FieldError, PersistenceError

logger = logging.getLogger(__name__)

SNAPSHOT_MAGIC = "DGT1"


@dataclass(frozen=True)
class GridSpec:
    """Uniform rectangular grid on ``[0, lx] x [0, ly]``."""

    nx: int
    ny: int
    lx: float = 1.0
    ly: float = 1.0

    def __post_init__(self) -> None:
        if self.nx < 4 or self.ny < 4:
            raise ConfigError(f"grid needs at least 4x4 cells, got {self.nx}x{self.ny}")
        if not (self.lx > 0 and self.ly > 0):
            raise ConfigError(f"domain extents must be positive, got {self.lx}x{self.ly}")

    @property
    def hx(self) -> float:
        return self.lx / self.nx

    @property
    def hy(self) -> float:
        return self.ly / self.ny

    @property
    def h(self) -> float:
        """Coarsest cell size, used for slack budgets."""
        return max(self.hx, self.hy)

    @property
    def cell_area(self) -> float:
        return self.hx * self.hy

    @property
    def area(self) -> float:
        return self.lx * self.ly

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.ny, self.nx)

    def centers(self) -> Tuple[np.ndarray, np.ndarray]:
        """Cell-center coordinates as two ``(ny, nx)`` arrays."""
        x = (np.arange(self.nx) + 0.5) * self.hx
        y = (np.arange(self.ny) + 0.5) * self.hy
        return np.meshgrid(x, y)

    def x_face_centers(self) -> Tuple[np.ndarray, np.ndarray]:
        x = np.arange(self.nx + 1) * self.hx
        y = (np.arange(self.ny) + 0.5) * self.hy
        return np.meshgrid(x, y)

    def y_face_centers(self) -> Tuple[np.ndarray, np.ndarray]:
        x = (np.arange(self.nx) + 0.5) * self.hx
        y = np.arange(self.ny + 1) * self.hy
        return np.meshgrid(x, y)


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Cell-centered values on a grid.

    ``positive``/``nonnegative`` are contracts checked on construction.
    The value array is made read-only so fields behave as values.
    """

    grid: GridSpec
    values: np.ndarray
    positive: bool = False
    nonnegative: bool = False

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64)
        if values.shape != self.grid.shape:
            raise FieldError(
                f"field shape {values.shape} does not match grid {self.grid.shape}"
            )
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if self.positive and not values.min() > 0:
            raise FieldError(f"field flagged positive has min {values.min():.17g}")
        if self.nonnegative and not values.min() >= 0:
            raise FieldError(f"field flagged nonnegative has min {values.min():.17g}")

    @classmethod
    def constant(cls, grid: GridSpec, value: float, **flags: bool) -> "ScalarField":
        return cls(grid, np.full(grid.shape, float(value)), **flags)

    @classmethod
    def from_function(
        cls,
        grid: GridSpec,
        func: Callable[[np.ndarray, np.ndarray], np.ndarray],
        **flags: bool,
    ) -> "ScalarField":
        """Sample ``func(x, y)`` at cell centers."""
        x, y = grid.centers()
        values = np.broadcast_to(np.asarray(func(x, y), dtype=np.float64), grid.shape)
        return cls(grid, values, **flags)

    def with_values(self, values: np.ndarray, **flags: bool) -> "ScalarField":
        return ScalarField(self.grid, values, **flags)

    def min(self) -> float:
        return float(self.values.min())

    def max(self) -> float:
        return float(self.values.max())


@dataclass(frozen=True, eq=False)
class FaceVectorField:
    """Face-normal components: ``fx`` is ``(ny, nx+1)``, ``fy`` is ``(ny+1, nx)``."""

    grid: GridSpec
    fx: np.ndarray
    fy: np.ndarray

    def __post_init__(self) -> None:
        nx, ny = self.grid.nx, self.grid.ny
        fx = np.array(self.fx, dtype=np.float64)
        fy = np.array(self.fy, dtype=np.float64)
        if fx.shape != (ny, nx + 1) or fy.shape != (ny + 1, nx):
            raise FieldError(
                f"face field shapes {fx.shape}/{fy.shape} do not match grid {nx}x{ny}"
            )
        fx.setflags(write=False)
        fy.setflags(write=False)
        object.__setattr__(self, "fx", fx)
        object.__setattr__(self, "fy", fy)

    @classmethod
    def zeros(cls, grid: GridSpec) -> "FaceVectorField":
        return cls(grid, np.zeros((grid.ny, grid.nx + 1)), np.zeros((grid.ny + 1, grid.nx)))

    def max_abs(self) -> float:
        return float(max(np.abs(self.fx).max(), np.abs(self.fy).max()))

    def boundary_is_zero(self) -> bool:
        return bool(
            not self.fx[:, 0].any()
            and not self.fx[:, -1].any()
            and not self.fy[0, :].any()
            and not self.fy[-1, :].any()
        )


def check_finite(f: ScalarField, name: str = "field") -> None:
    """Raise naming the first non-finite cell."""
    bad = ~np.isfinite(f.values)
    if bad.any():
        j, i = (int(k) for k in np.argwhere(bad)[0])
        raise FieldError(f"{name} has non-finite value {f.values[j, i]} at cell ({i},{j})")


def check_same_grid(*fields: Union[ScalarField, FaceVectorField]) -> GridSpec:
    grid = fields[0].grid
    for other in fields[1:]:
        if other.grid != grid:
            raise FieldError(f"fields live on different grids: {grid} vs {other.grid}")
    return grid


def integrate(f: ScalarField) -> float:
    """Midpoint-rule quadrature over the domain."""
    check_finite(f)
    return float(f.grid.cell_area * f.values.sum())


def face_gradient(f: ScalarField) -> FaceVectorField:
    check_finite(f)
    g = f.grid
    fx = np.zeros((g.ny, g.nx + 1))
    fy = np.zeros((g.ny + 1, g.nx))
    fx[:, 1:-1] = np.diff(f.values, axis=1) / g.hx
    fy[1:-1, :] = np.diff(f.values, axis=0) / g.hy
    return FaceVectorField(g, fx, fy)


def divergence(flux: FaceVectorField) -> ScalarField:
    """Cell divergence of a no-flux face field."""
    if not flux.boundary_is_zero():
        raise FieldError("no-flux contract violated: boundary face carries a nonzero value")
    g = flux.grid
    values = np.diff(flux.fx, axis=1) / g.hx + np.diff(flux.fy, axis=0) / g.hy
    return ScalarField(g, values)


def neumann_laplacian(f: ScalarField) -> ScalarField:
    return divergence(face_gradient(f))


def cell_gradient_sq(f: ScalarField) -> ScalarField:
    """Pointwise ``|grad f|^2`` from face-averaged squared components.

    The x and y parts are averaged over the two adjacent faces separately;
    at the boundary the outer face contributes zero.
    """
    return ScalarField(f.grid, cell_gradient_dot(f, f).values, nonnegative=True)


def cell_gradient_dot(f: ScalarField, g: ScalarField) -> ScalarField:
    """Pointwise ``grad f . grad g`` averaged like :func:`cell_gradient_sq`."""
    check_same_grid(f, g)
    a, b = face_gradient(f), face_gradient(g)
    px = a.fx * b.fx
    py = a.fy * b.fy
    values = 0.5 * (px[:, :-1] + px[:, 1:]) + 0.5 * (py[:-1, :] + py[1:, :])
    return ScalarField(f.grid, values)


def face_mean(f: ScalarField) -> FaceVectorField:
    """Arithmetic mean of the two adjacent cells on interior faces, zero on the boundary."""
    g = f.grid
    fx = np.zeros((g.ny, g.nx + 1))
    fy = np.zeros((g.ny + 1, g.nx))
    fx[:, 1:-1] = 0.5 * (f.values[:, :-1] + f.values[:, 1:])
    fy[1:-1, :] = 0.5 * (f.values[:-1, :] + f.values[1:, :])
    return FaceVectorField(g, fx, fy)


def cell_inner(f: ScalarField, g: ScalarField) -> float:
    check_same_grid(f, g)
    return float(f.grid.cell_area * np.sum(f.values * g.values))


def face_inner(a: FaceVectorField, b: FaceVectorField) -> float:
    """Discrete L2 pairing of two face fields (each face weighted by ``hx*hy``)."""
    check_same_grid(a, b)
    return float(a.grid.cell_area * (np.sum(a.fx * b.fx) + np.sum(a.fy * b.fy)))


def _neumann_second_difference(n: int, h: float) -> sp.csr_matrix:
    main = np.full(n, -2.0)
    main[0] = main[-1] = -1.0
    off = np.ones(n - 1)
    return sp.diags([off, main, off], [-1, 0, 1], format="csr") / (h * h)


@lru_cache(maxsize=16)
def laplacian_matrix(grid: GridSpec) -> sp.csr_matrix:
    """Sparse matrix of ``neumann_laplacian`` acting on C-order flattened fields."""
    dxx = _neumann_second_difference(grid.nx, grid.hx)
    dyy = _neumann_second_difference(grid.ny, grid.hy)
    lap = sp.kron(sp.identity(grid.ny), dxx) + sp.kron(dyy, sp.identity(grid.nx))
    return lap.tocsr()


def l2_norm(f: ScalarField) -> float:
    return math.sqrt(cell_inner(f, f))


# Snapshot codec: "DGT1 nx ny lx ly t\n" then nx*ny little-endian float64, j outer.


def encode_snapshot(f: ScalarField, t: float) -> bytes:
    g = f.grid
    header = f"{SNAPSHOT_MAGIC} {g.nx} {g.ny} {g.lx!r} {g.ly!r} {float(t)!r}\n"
    return header.encode("ascii") + f.values.astype("<f8").tobytes(order="C")


def decode_snapshot(data: bytes) -> Tuple[ScalarField, float]:
    newline = data.find(b"\n")
    if newline < 0:
        raise PersistenceError("snapshot has no header line")
    parts = data[:newline].decode("ascii", errors="replace").split()
    if len(parts) != 6 or parts[0] != SNAPSHOT_MAGIC:
        raise PersistenceError(f"bad snapshot header: {data[:newline]!r}")
    try:
        nx, ny = int(parts[1]), int(parts[2])
        lx, ly, t = float(parts[3]), float(parts[4]), float(parts[5])
    except ValueError as e:
        raise PersistenceError(f"bad snapshot header: {e}") from e
    payload = data[newline + 1 :]
    if len(payload) != 8 * nx * ny:
        raise PersistenceError(
            f"snapshot payload has {len(payload)} bytes, expected {8 * nx * ny}"
        )
    values = np.frombuffer(payload, dtype="<f8").reshape(ny, nx)
    try:
        grid = GridSpec(nx, ny, lx, ly)
    except ConfigError as e:
        raise PersistenceError(f"bad snapshot grid: {e}") from e
    return ScalarField(grid, values), t


def write_snapshot(path: Union[str, Path], f: ScalarField, t: float) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_snapshot(f, t))
    except OSError as e:
        raise PersistenceError(f"cannot write snapshot {path}: {e}") from e
    logger.debug(f"Wrote snapshot {path} at t={t:.6g}")
    return path


def read_snapshot(path: Union[str, Path]) -> Tuple[ScalarField, float]:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise PersistenceError(f"cannot read snapshot {path}: {e}") from e
    return decode_snapshot(data)
