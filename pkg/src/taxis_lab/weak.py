"""Weak-formulation residuals and the eps / mesh convergence study."""

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .auditor import AuditVerdict, FunctionalSeries, audit_uniform_in_eps, uniform_functionals
from .config import RunConfig
from .errors import ConfigError, DGTError, PersistenceError
from .grid import FaceVectorField, GridSpec, ScalarField, face_gradient, face_inner, face_mean, integrate
from .model import ModelParams, positive_power
from .services import MemberResult, MemberTask, RunService
from .stepper import Trajectory
from .utils import format_float, trapezoid

logger = logging.getLogger(__name__)

MIN_SUPPORT_SAMPLES = 50
RULES = ("trapezoid", "imex")


@dataclass(frozen=True)
class TestFunction:
    """Space-time test function ``Phi(x, y) * chi(t)``.

    ``r0 is None`` gives the constant spatial profile. ``chi`` is the smooth
    cutoff ``exp(1 - 1/(1 - s^2))`` with ``s = t / t_cut``, zero for ``t >= t_cut``.
    """

    __test__ = False

    t_cut: float
    cx: float = 0.5
    cy: float = 0.5
    r0: Optional[float] = None

    def spatial(self, grid: GridSpec) -> ScalarField:
        if self.r0 is None:
            return ScalarField.constant(grid, 1.0)
        return ScalarField.from_function(grid, self._profile)

    def _profile(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        assert self.r0 is not None
        return np.exp(-((x - self.cx) ** 2 + (y - self.cy) ** 2) / self.r0**2)

    def analytic_face_gradient(self, grid: GridSpec) -> FaceVectorField:
        """Exact gradient at face centers (boundary faces included)."""
        if self.r0 is None:
            return FaceVectorField.zeros(grid)
        x, y = grid.x_face_centers()
        fx = -2 * (x - self.cx) / self.r0**2 * self._profile(x, y)
        x, y = grid.y_face_centers()
        fy = -2 * (y - self.cy) / self.r0**2 * self._profile(x, y)
        return FaceVectorField(grid, fx, fy)

    def chi(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        if self.t_cut <= 0:
            return np.zeros_like(t)
        s = t / self.t_cut
        inside = np.abs(s) < 1
        safe = np.where(inside, s, 0.0)
        return np.where(inside, np.exp(1 - 1 / (1 - safe**2)), 0.0)

    def chi_prime(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        if self.t_cut <= 0:
            return np.zeros_like(t)
        s = t / self.t_cut
        inside = np.abs(s) < 1
        safe = np.where(inside, s, 0.0)
        return np.where(inside, self.chi(t) * (-2 * safe / (self.t_cut * (1 - safe**2) ** 2)), 0.0)


def make_bank(seed: int, size: int, T: float, grid: GridSpec) -> List[TestFunction]:
    """Constant-profile member plus ``size - 1`` seeded bumps, all cut off at ``T``."""
    if size < 5:
        raise ConfigError(f"test bank needs at least 5 members, got {size}")
    rng = np.random.default_rng(seed)
    bank = [TestFunction(t_cut=T)]
    for _ in range(size - 1):
        cx, cy = rng.uniform(0.2, 0.8, size=2) * (grid.lx, grid.ly)
        r0 = rng.uniform(0.1, 0.3) * min(grid.lx, grid.ly)
        bank.append(TestFunction(t_cut=T, cx=float(cx), cy=float(cy), r0=float(r0)))
    return bank


def _support(times: Sequence[float], tf: TestFunction) -> np.ndarray:
    times = np.asarray(times, dtype=np.float64)
    if not len(times):
        raise ConfigError("weak residuals need at least one sampled state")
    if tf.t_cut > times[-1] + 1e-12 * max(1.0, times[-1]):
        raise ConfigError(f"test function support [0, {tf.t_cut:g}) exceeds the trajectory's [0, {times[-1]:g}]")
    if times[0] != 0:
        raise ConfigError("weak residuals need the initial state sampled at t = 0")
    count = int(np.count_nonzero(times < tf.t_cut))
    if count < MIN_SUPPORT_SAMPLES:
        raise ConfigError(f"weak residuals need >= {MIN_SUPPORT_SAMPLES} samples in the support, got {count}")
    return times


def _check_rule(rule: str) -> None:
    if rule not in RULES:
        raise ConfigError(f"unknown quadrature rule '{rule}', expected one of {', '.join(RULES)}")


def _imex_u(times: np.ndarray, chi: np.ndarray, mass_phi: np.ndarray, source: np.ndarray) -> float:
    """Summation by parts matching an explicit step: source at the left end of each interval."""
    lhs = -float(np.sum(np.diff(chi) * mass_phi[1:])) - chi[0] * mass_phi[0]
    rhs = float(np.sum(chi[:-1] * np.diff(times) * source[:-1]))
    return abs(lhs - rhs)


def _imex_v(chi: np.ndarray, mass_phi: np.ndarray, increments: np.ndarray) -> float:
    """Implicit counterpart: ``increments[n]`` is the sink integrated over ``[t_n, t_n+1]`` at the right end."""
    lhs = float(np.sum(np.diff(chi) * mass_phi[:-1])) + chi[0] * mass_phi[0]
    rhs = float(np.sum(chi[1:] * increments))
    return abs(lhs - rhs)


def residual_u(trajectory: Trajectory, params: ModelParams, tf: TestFunction, rule: str = "trapezoid") -> float:
    """Mismatch of the population equation tested against ``tf``.

    ``rule="imex"`` sums by parts the way the stepper advances ``u``, so
    with the constant profile it vanishes on a trajectory sampled at every
    step.
    """
    _check_rule(rule)
    if tf.t_cut == 0:
        return 0.0
    times = _support(trajectory.times, tf)
    grid = trajectory.states[0].u.grid
    phi = tf.spatial(grid)
    grad_phi = face_gradient(phi)
    chi = tf.chi(times)

    mass_phi = np.empty(len(times))
    source = np.empty(len(times))
    for n, s in enumerate(trajectory.states):
        u, v = s.u.values, s.v.values
        ul = positive_power(u, params.l)
        grad_ul = face_gradient(ScalarField(grid, ul))
        v_face = face_mean(s.v)
        diffusion = face_inner(
            FaceVectorField(grid, v_face.fx * grad_ul.fx, v_face.fy * grad_ul.fy), grad_phi
        ) / params.l
        taxis_coeff = face_mean(ScalarField(grid, ul * v))
        grad_v = face_gradient(s.v)
        taxis = face_inner(
            FaceVectorField(grid, taxis_coeff.fx * grad_v.fx, taxis_coeff.fy * grad_v.fy), grad_phi
        )
        mass_phi[n] = integrate(ScalarField(grid, u * phi.values))
        source[n] = -diffusion + taxis + integrate(ScalarField(grid, (u - u**2) * phi.values))

    if rule == "imex":
        return _imex_u(times, chi, mass_phi, source)
    lhs = -trapezoid(times, tf.chi_prime(times) * mass_phi) - chi[0] * mass_phi[0]
    rhs = trapezoid(times, chi * source)
    return abs(lhs - rhs)


def residual_v(trajectory: Trajectory, tf: TestFunction, rule: str = "trapezoid") -> float:
    """Mismatch of the nutrient equation tested against ``tf``.

    With ``rule="imex"`` the residual is zero, up to the linear solver
    tolerance, for every profile on a trajectory sampled at every step.
    """
    _check_rule(rule)
    if tf.t_cut == 0:
        return 0.0
    times = _support(trajectory.times, tf)
    grid = trajectory.states[0].v.grid
    phi = tf.spatial(grid)
    grad_phi = face_gradient(phi)
    chi = tf.chi(times)

    mass_phi = np.empty(len(times))
    sink = np.empty(len(times))
    for n, s in enumerate(trajectory.states):
        mass_phi[n] = integrate(ScalarField(grid, s.v.values * phi.values))
        sink[n] = face_inner(face_gradient(s.v), grad_phi) + integrate(
            ScalarField(grid, s.u.values * s.v.values * phi.values)
        )

    if rule == "imex":
        return _imex_v(chi, mass_phi, np.diff(times) * sink[1:])
    lhs = trapezoid(times, tf.chi_prime(times) * mass_phi) + chi[0] * mass_phi[0]
    rhs = trapezoid(times, chi * sink)
    return abs(lhs - rhs)


def budget_residuals(series: FunctionalSeries, tf: TestFunction) -> Tuple[float, float]:
    """Constant-profile residuals rebuilt from the recorded budgets.

    Uses ``mass``, ``l2u``, ``v_mass`` and the cumulative ``uv_budget``; the
    nutrient sink comes from budget increments, so only the population side
    depends on how densely the run was sampled.
    """
    if tf.r0 is not None:
        raise ConfigError("budget residuals need the constant test profile")
    if tf.t_cut == 0:
        return 0.0, 0.0
    times = _support(series.times, tf)
    chi = tf.chi(times)
    mass = series.column("mass")
    source = mass - series.column("l2u")
    r_u = _imex_u(times, chi, mass, source)
    r_v = _imex_v(chi, series.column("v_mass"), np.diff(series.column("uv_budget")))
    return r_u, r_v


def evaluate_bank(
    trajectory: Trajectory, params: ModelParams, bank: Sequence[TestFunction], workers: int = 4
) -> List[Tuple[float, float]]:
    """``(residual_u, residual_v)`` per bank member, in bank order."""

    def one(tf: TestFunction) -> Tuple[float, float]:
        return residual_u(trajectory, params, tf), residual_v(trajectory, tf)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return list(pool.map(one, bank))


@dataclass
class ResidualLevel:
    level: int
    label: str
    eps: float
    nx: int
    ny: int
    residual_u: float
    residual_v: float
    budget_u: float = math.nan
    budget_v: float = math.nan


@dataclass
class ConvergenceReport:
    eps_list: List[float]
    grid_list: List[Tuple[int, int]]
    band: float
    floor: float
    residual_factor: float = 2.0
    cells: List[MemberResult] = field(default_factory=list)
    cauchy: List[float] = field(default_factory=list)
    residuals: List[ResidualLevel] = field(default_factory=list)
    uniform: Optional[AuditVerdict] = None

    @staticmethod
    def decreasing(values: Sequence[float], band: float, floor: float) -> bool:
        """Each value at most ``(1 + band)`` times its predecessor, or below ``floor``."""
        if any(not math.isfinite(v) for v in values):
            return False
        return all(b <= a * (1 + band) or b <= floor for a, b in zip(values, values[1:]))

    @staticmethod
    def shrinking(values: Sequence[float], factor: float, floor: float) -> bool:
        """Each value at most its predecessor divided by ``factor``, or below ``floor``."""
        if any(not math.isfinite(v) for v in values):
            return False
        return all(b <= a / factor or b <= floor for a, b in zip(values, values[1:]))

    @property
    def failed_cells(self) -> List[MemberResult]:
        return [c for c in self.cells if not c.ok]

    @property
    def cauchy_monotone(self) -> bool:
        return self.decreasing(self.cauchy, self.band, self.floor)

    @property
    def residuals_monotone(self) -> bool:
        if not self.residuals:
            return False
        factor, floor = self.residual_factor, self.floor
        return self.shrinking([r.residual_u for r in self.residuals], factor, floor) and self.shrinking(
            [r.residual_v for r in self.residuals], factor, floor
        )

    @property
    def passed(self) -> bool:
        return self.cauchy_monotone and self.residuals_monotone

    def cells_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["member", "eps", "nx", "ny", "status", "diagnostic"])
        for c in self.cells:
            writer.writerow([c.label, format_float(c.eps), c.nx, c.ny, c.status, c.diagnostic])
        return buffer.getvalue()

    def cauchy_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["eps_a", "eps_b", "sup_diff"])
        for k, value in enumerate(self.cauchy):
            writer.writerow([format_float(self.eps_list[k]), format_float(self.eps_list[k + 1]), format_float(value)])
        return buffer.getvalue()

    def residuals_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["level", "member", "eps", "nx", "ny", "residual_u", "residual_v", "budget_u", "budget_v"])
        for r in self.residuals:
            residuals = (r.residual_u, r.residual_v, r.budget_u, r.budget_v)
            writer.writerow([r.level, r.label, format_float(r.eps), r.nx, r.ny, *(format_float(x) for x in residuals)])
        return buffer.getvalue()

    def summary(self) -> str:
        lines = [
            f"cells.total = {len(self.cells)}",
            f"cells.failed = {len(self.failed_cells)}",
            f"cauchy.monotone = {self.cauchy_monotone}",
            f"residuals.monotone = {self.residuals_monotone}",
            f"band = {format_float(self.band)}",
            f"floor = {format_float(self.floor)}",
            f"residual_factor = {format_float(self.residual_factor)}",
        ]
        if self.uniform is not None:
            lines.append(f"uniform_in_eps = {'PASS' if self.uniform.passed else 'FAIL'}")
        lines.append(f"verdict = {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines) + "\n"

    def write(self, directory: Union[str, Path]) -> Path:
        directory = Path(directory)
        try:
            directory.mkdir(parents=True, exist_ok=True)
            (directory / "cells.csv").write_text(self.cells_csv(), encoding="utf-8", newline="\n")
            (directory / "cauchy.csv").write_text(self.cauchy_csv(), encoding="utf-8", newline="\n")
            (directory / "residuals.csv").write_text(self.residuals_csv(), encoding="utf-8", newline="\n")
            if self.uniform is not None:
                (directory / "uniform_report.txt").write_text(self.uniform.render(), encoding="utf-8", newline="\n")
            (directory / "summary.txt").write_text(self.summary(), encoding="utf-8", newline="\n")
        except OSError as e:
            raise PersistenceError(f"cannot write convergence report to {directory}: {e}") from e
        return directory


def sup_difference(a: Trajectory, b: Trajectory, tau: float) -> float:
    """Largest ``max |u_a - u_b|`` over shared sample times ``t >= tau``."""
    worst = 0.0
    for ta, sa, sb in zip(a.times, a.states, b.states):
        if ta >= tau:
            worst = max(worst, float(np.max(np.abs(sa.u.values - sb.u.values))))
    return worst


def _check_matrix(eps_list: Sequence[float], grid_list: Sequence[int]) -> None:
    if len(eps_list) < 3:
        raise ConfigError(f"convergence study needs at least 3 eps values, got {len(eps_list)}")
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ConfigError("eps_list must be strictly decreasing")
    if len(grid_list) < 3:
        raise ConfigError(f"convergence study needs at least 3 grids, got {len(grid_list)}")
    if any(b <= a for a, b in zip(grid_list, grid_list[1:])):
        raise ConfigError("grid_list must be strictly refining")


def run_convergence_study(
    cfg: RunConfig,
    eps_list: Sequence[float],
    grid_list: Sequence[int],
    T: float,
    out_dir: Optional[Union[str, Path]] = None,
    service: Optional[RunService] = None,
) -> ConvergenceReport:
    """Run the full ``eps x grid`` matrix and summarize it.

    Cell ``eps<k>_grid<m>`` uses ``eps_list[k]`` on an ``n x n`` grid with
    ``n = grid_list[m]``. Cauchy differences compare consecutive eps on the
    finest grid; residual levels walk the diagonal.
    """
    _check_matrix(eps_list, grid_list)
    if cfg.run.samples <= MIN_SUPPORT_SAMPLES:
        raise ConfigError(f"convergence study needs run.samples > {MIN_SUPPORT_SAMPLES}, got {cfg.run.samples}")
    cfg = cfg.model_copy(update={"run": cfg.run.model_copy(update={"T": T})})
    service = service or RunService(jobs=1)
    grids = [GridSpec(n, n, cfg.grid.lx, cfg.grid.ly) for n in grid_list]

    tasks = []
    for k, eps in enumerate(eps_list):
        for m, grid in enumerate(grids):
            label = f"eps{k}_grid{m}"
            member_dir = str(Path(out_dir) / label) if out_dir is not None else None
            tasks.append(MemberTask(label, cfg, float(eps), grid, member_dir))
    results = service.run_members(tasks)
    by_label = {r.label: r for r in results}

    report = ConvergenceReport(
        eps_list=[float(e) for e in eps_list],
        grid_list=[(g.nx, g.ny) for g in grids],
        band=cfg.converge.band,
        floor=cfg.converge.floor,
        residual_factor=cfg.converge.residual_factor,
        cells=results,
    )

    tau = cfg.converge.tau if cfg.converge.tau is not None else T / 10
    finest = len(grids) - 1
    for k in range(len(eps_list) - 1):
        a, b = by_label[f"eps{k}_grid{finest}"], by_label[f"eps{k + 1}_grid{finest}"]
        if a.ok and b.ok and a.trajectory is not None and b.trajectory is not None:
            report.cauchy.append(sup_difference(a.trajectory, b.trajectory, tau))
        else:
            report.cauchy.append(math.nan)

    for m, grid in enumerate(grids):
        k = min(m, len(eps_list) - 1)
        cell = by_label[f"eps{k}_grid{m}"]
        if not cell.ok or cell.trajectory is None:
            report.residuals.append(ResidualLevel(m, cell.label, cell.eps, grid.nx, grid.ny, math.nan, math.nan))
            continue
        bank = make_bank(cfg.seed, cfg.converge.bank_size, T, grid)
        try:
            values = evaluate_bank(cell.trajectory, cfg.model.params(cell.eps), bank)
        except DGTError as e:
            logger.warning(f"Residuals for {cell.label} failed: {e}")
            values = [(math.nan, math.nan)]
        level = ResidualLevel(
            m, cell.label, cell.eps, grid.nx, grid.ny, max(v[0] for v in values), max(v[1] for v in values)
        )
        if cell.series is not None:
            try:
                level.budget_u, level.budget_v = budget_residuals(cell.series, TestFunction(t_cut=T))
            except DGTError as e:
                logger.warning(f"Budget residuals for {cell.label} failed: {e}")
        report.residuals.append(level)

    series: Dict[float, FunctionalSeries] = {}
    for k, eps in enumerate(eps_list):
        cell = by_label[f"eps{k}_grid{finest}"]
        if cell.ok and cell.series is not None:
            series[float(eps)] = cell.series
    if len(series) >= 3:
        try:
            report.uniform = audit_uniform_in_eps(
                series, band=cfg.audit.band, functionals=uniform_functionals(cfg.audit.p_list)
            )
        except DGTError as e:
            logger.warning(f"Uniform-in-eps audit skipped: {e}")

    logger.info(
        f"Convergence study finished: {len(report.failed_cells)} failed cells, "
        f"cauchy monotone={report.cauchy_monotone}, residuals monotone={report.residuals_monotone}"
    )
    return report
