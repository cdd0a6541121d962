"""Application services for the taxis lab."""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, TypeVar

import psutil

from .auditor import FunctionalRecorder, FunctionalSeries, audit_constants
from .config import RunConfig, build_initial_data, get_config
from .errors import DGTError
from .grid import GridSpec, write_snapshot
from .stepper import Trajectory, run, sample_grid

logger = logging.getLogger(__name__)

R = TypeVar("R")


@dataclass(frozen=True)
class MemberTask:
    """One ``(eps, grid)`` cell of a study."""

    label: str
    cfg: RunConfig
    eps: float
    grid: GridSpec
    out_dir: Optional[str] = None


@dataclass
class MemberResult:
    label: str
    eps: float
    nx: int
    ny: int
    status: str = "ok"
    diagnostic: str = ""
    output_dir: Optional[str] = None
    trajectory: Optional[Trajectory] = None
    series: Optional[FunctionalSeries] = None
    constants: Dict[str, float] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def run_member(task: MemberTask) -> MemberResult:
    """Simulate one cell; failures become a ``failed`` result instead of propagating."""
    cfg = task.cfg
    result = MemberResult(task.label, task.eps, task.grid.nx, task.grid.ny, output_dir=task.out_dir)
    try:
        params = cfg.model.params(task.eps)
        init = build_initial_data(cfg, task.grid)
        recorder = FunctionalRecorder(params, cfg.audit.p_list, cfg.audit.b)
        trajectory = run(
            params,
            init,
            cfg.run.T,
            sample_grid(cfg.run.T, cfg.run.samples),
            observers=[recorder],
            control=cfg.stepper,
        )
        result.trajectory = trajectory
        result.series = recorder.series
        result.constants = audit_constants(init, params, cfg.run.T, trajectory.max_dt)
        if task.out_dir is not None:
            out = Path(task.out_dir)
            recorder.series.write(out / "series.csv")
            final = trajectory.final
            write_snapshot(out / "u_final.dgt", final.u, final.t)
            write_snapshot(out / "v_final.dgt", final.v, final.t)
        if trajectory.blew_up:
            result.status = "failed"
            result.diagnostic = f"blow-up threshold exceeded at t={trajectory.t_max:.6g}"
    except DGTError as e:
        result.status = "failed"
        result.diagnostic = str(e)
    if result.ok:
        logger.info(f"Member {task.label} finished")
    else:
        logger.warning(f"Member {task.label} failed: {result.diagnostic}")
    return result


def resolve_jobs(jobs: Optional[int] = None) -> int:
    """``--jobs`` if given, else ``DGT_JOBS``, else the physical core count."""
    if jobs is None:
        jobs = get_config().dgt_jobs
    if jobs is None:
        jobs = psutil.cpu_count(logical=False) or 1
    return max(1, int(jobs))


class RunService:
    """Executes independent work items with a bounded process pool.

    Results always come back in submission order; ``jobs == 1`` runs inline.
    """

    def __init__(self, jobs: Optional[int] = None) -> None:
        self.jobs = resolve_jobs(jobs)

    def map(self, fn: Callable[[Any], R], items: Iterable[Any]) -> List[R]:
        work = list(items)
        if self.jobs == 1 or len(work) <= 1:
            return [fn(item) for item in work]
        with ProcessPoolExecutor(max_workers=min(self.jobs, len(work))) as pool:
            return list(pool.map(fn, work))

    def run_members(self, tasks: Sequence[MemberTask]) -> List[MemberResult]:
        logger.info(f"Running {len(tasks)} member runs with {self.jobs} worker(s)")
        return self.map(run_member, tasks)


__all__ = ["MemberTask", "MemberResult", "RunService", "resolve_jobs", "run_member"]
