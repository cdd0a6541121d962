"""Positivity-preserving IMEX time stepping.

The population equation is advanced explicitly under a stability-limited
step; the nutrient equation is linear in ``v`` and solved implicitly with
an M-matrix, so ``0 < v_new <= max v`` holds without clipping.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.sparse.linalg import LinearOperator, cg

from .errors import ConfigError, FieldError, PositivityViolation, SolverStagnation
from .grid import ScalarField, face_gradient, face_mean, integrate, laplacian_matrix, write_snapshot
from .model import InitialData, ModelParams, positive_power, rhs_u, upwind_faces

logger = logging.getLogger(__name__)

SOLVER_RTOL = 1e-10

Observer = Callable[["SimState", int], None]
# Test hook: extra source arrays (su, sv) evaluated at the start of a step.
Forcing = Callable[[float], Tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class SimState:
    """Discrete ``(u, v)`` at time ``t`` plus cumulative budgets.

    ``uv_budget`` accumulates ``dt * int(u v)`` and ``vt_l2`` accumulates
    ``dt * int(((v_new - v) / dt)^2)`` over all accepted steps.
    """

    u: ScalarField
    v: ScalarField
    t: float = 0.0
    uv_budget: float = 0.0
    vt_l2: float = 0.0

    def __post_init__(self) -> None:
        if not self.u.min() > 0:
            raise FieldError(f"state requires u > 0, got min u = {self.u.min():.17g}")
        if not self.v.min() > 0:
            raise FieldError(f"state requires v > 0, got min v = {self.v.min():.17g}")
        if not math.isfinite(self.t):
            raise FieldError(f"state time must be finite, got {self.t}")


class StepControl(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    cfl_safety: float = Field(default=0.4, gt=0, le=1)
    dt_min: float = Field(default=1e-12, gt=0)
    dt_max: float = Field(default=1e-2, gt=0)
    blowup_threshold: float = Field(default=1e8, gt=0)

    @model_validator(mode="after")
    def _check_range(self) -> "StepControl":
        if self.dt_min > self.dt_max:
            raise ValueError("dt_min must not exceed dt_max")
        return self


def stable_dt(s: SimState, p: ModelParams, c: StepControl) -> float:
    """Explicit step limit from diffusion, taxis and reaction constraints."""
    g = s.u.grid
    u, v = s.u.values, s.v.values
    u_l1 = positive_power(u, p.l - 1)

    a_max = float((u_l1 * v).max())
    inv_h2 = 1.0 / g.hx**2 + 1.0 / g.hy**2
    dt_diffusion = 1.0 / (2.0 * a_max * inv_h2) if a_max > 0 else math.inf

    grad_v = face_gradient(s.v)
    v_face = face_mean(s.v)
    upwind = upwind_faces(u_l1, grad_v)
    speed_x = float(np.max(upwind.fx * v_face.fx * np.abs(grad_v.fx)))
    speed_y = float(np.max(upwind.fy * v_face.fy * np.abs(grad_v.fy)))
    rate = speed_x / g.hx + speed_y / g.hy
    dt_taxis = 1.0 / (2.0 * rate) if rate > 0 else math.inf

    dt_reaction = 1.0 / (2.0 * max(1.0, float(u.max())))

    dt = c.cfl_safety * min(dt_diffusion, dt_taxis, dt_reaction)
    return min(max(dt, c.dt_min), c.dt_max)


def _solve_nutrient(
    v: np.ndarray, u_new: np.ndarray, dt: float, s: SimState, source: Optional[np.ndarray]
) -> np.ndarray:
    g = s.v.grid
    n = g.nx * g.ny
    lap = laplacian_matrix(g)
    system = sp.identity(n, format="csr") - dt * lap + dt * sp.diags(u_new.ravel())
    rhs = v.ravel() if source is None else v.ravel() + dt * source.ravel()
    inv_diag = 1.0 / system.diagonal()
    jacobi = LinearOperator((n, n), matvec=lambda x: inv_diag * x)
    max_iter = 10 * math.ceil(math.sqrt(n))
    solution, info = cg(system, rhs, x0=v.ravel(), rtol=SOLVER_RTOL, atol=0.0, maxiter=max_iter, M=jacobi)
    if info != 0:
        raise SolverStagnation(
            f"solver stagnation: nutrient solve did not reach rtol {SOLVER_RTOL} "
            f"in {max_iter} iterations (t={s.t:.6g}, dt={dt:.3g})"
        )
    return solution.reshape(g.shape)


def step(
    s: SimState, dt: float, p: ModelParams, forcing: Optional[Forcing] = None
) -> SimState:
    """One IMEX step; never clips."""
    su, sv = forcing(s.t) if forcing is not None else (None, None)
    increment = rhs_u(s.u, s.v, p).values
    if su is not None:
        increment = increment + su
    u_new = s.u.values + dt * increment

    bad = ~(u_new > 0)
    if bad.any():
        j, i = (int(k) for k in np.argwhere(bad)[0])
        raise PositivityViolation(
            f"positivity violation (reduce dt): u={u_new[j, i]:.6g} at cell ({i},{j}), "
            f"t={s.t:.6g}, dt={dt:.3g}"
        )

    v_new = _solve_nutrient(s.v.values, u_new, dt, s, sv)
    grid = s.u.grid
    uv = integrate(ScalarField(grid, u_new * v_new))
    vt2 = integrate(ScalarField(grid, ((v_new - s.v.values) / dt) ** 2))
    return SimState(
        u=ScalarField(grid, u_new, positive=True),
        v=ScalarField(grid, v_new, positive=True),
        t=s.t + dt,
        uv_budget=s.uv_budget + dt * uv,
        vt_l2=s.vt_l2 + dt * vt2,
    )


@dataclass
class Trajectory:
    """Sampled states of one run plus how it ended."""

    params: ModelParams
    times: List[float] = field(default_factory=list)
    states: List[SimState] = field(default_factory=list)
    steps: int = 0
    max_dt: float = 0.0
    status: str = "completed"
    t_max: Optional[float] = None

    @property
    def final(self) -> SimState:
        return self.states[-1]

    @property
    def blew_up(self) -> bool:
        return self.status == "blowup"


def _check_sample_times(sample_times: Sequence[float], T: float) -> List[float]:
    times = [float(t) for t in sample_times]
    for a, b in zip(times, times[1:]):
        if not b > a:
            raise ConfigError(f"sample times must be strictly increasing: {a} then {b}")
    if times and (times[0] < 0 or times[-1] > T):
        raise ConfigError(f"sample times must lie in [0, {T}]")
    return times


def sample_grid(T: float, count: int) -> List[float]:
    """``count`` equispaced sample times covering ``[0, T]``."""
    if T == 0 or count <= 1:
        return [0.0]
    return [T * k / (count - 1) for k in range(count)]


def run(
    p: ModelParams,
    init: InitialData,
    T: float,
    sample_times: Sequence[float],
    observers: Sequence[Observer] = (),
    control: Optional[StepControl] = None,
    forcing: Optional[Forcing] = None,
) -> Trajectory:
    """Integrate the regularized system on ``[0, T]``.

    Steps are shortened to land exactly on sample times, where the state is
    recorded and every observer is called with ``(state, step_index)``.
    A blow-up threshold trip halts the run with ``status="blowup"``.
    """
    control = control or StepControl()
    times = _check_sample_times(sample_times, T)
    wanted = set(times)
    u0, v0 = init.regularized(p.eps)
    state = SimState(u0, v0, 0.0)
    trajectory = Trajectory(params=p)
    logger.info(f"Run started: l={p.l}, eps={p.eps}, T={T}, grid={u0.grid.nx}x{u0.grid.ny}")

    def record(s: SimState) -> None:
        trajectory.times.append(s.t)
        trajectory.states.append(s)
        for observer in observers:
            observer(s, trajectory.steps)

    if 0.0 in wanted:
        record(state)

    targets = sorted(t for t in wanted | {float(T)} if t > 0)
    for target in targets:
        while state.t < target:
            dt = stable_dt(state, p, control)
            remaining = target - state.t
            arrive = dt >= remaining * (1 - 1e-12)
            if arrive:
                dt = remaining
            state = step(state, dt, p, forcing)
            if arrive:
                state = replace(state, t=target)
            trajectory.steps += 1
            trajectory.max_dt = max(trajectory.max_dt, dt)
            if state.u.max() > control.blowup_threshold:
                trajectory.status = "blowup"
                trajectory.t_max = state.t
                logger.error(
                    f"Blow-up threshold {control.blowup_threshold:.3g} exceeded: "
                    f"max u = {state.u.max():.6g} at t = {state.t:.6g}"
                )
                if not trajectory.states or trajectory.states[-1] is not state:
                    trajectory.times.append(state.t)
                    trajectory.states.append(state)
                return trajectory
        if target in wanted:
            record(state)

    if not trajectory.states:
        trajectory.times.append(state.t)
        trajectory.states.append(state)
    logger.info(f"Run finished: {trajectory.steps} steps, t={state.t:.6g}")
    return trajectory


class SnapshotWriter:
    """Observer writing ``u_%06d.dgt`` / ``v_%06d.dgt`` per sample."""

    def __init__(self, directory: Union[str, Path]) -> None:
        self.directory = Path(directory)

    def __call__(self, state: SimState, step_index: int) -> None:
        write_snapshot(self.directory / f"u_{step_index:06d}.dgt", state.u, state.t)
        write_snapshot(self.directory / f"v_{step_index:06d}.dgt", state.v, state.t)
