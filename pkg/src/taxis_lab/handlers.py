"""Command handlers behind the ``taxis-lab`` subcommands.

Each handler returns the process exit status; library errors are caught
here, logged, and their diagnostic printed verbatim to stderr.
"""

import argparse
import logging
import sys
from datetime import datetime
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from pydantic import ValidationError

from .auditor import (
    FunctionalRecorder,
    FunctionalSeries,
    audit_constants,
    expected_columns,
    render_report,
    run_audits,
)
from .config import RunConfig, build_initial_data, get_config, load_config_file
from .database import DatabaseManager, get_db_manager
from .errors import AuditFailure, BlowupDetected, ConfigError, DGTError, PersistenceError
from .grid import read_snapshot
from .lab import LabSettings, check_elementary, check_psi_bound, run_lab
from .model import ModelParams
from .services import RunService
from .stepper import Observer, SnapshotWriter, run, sample_grid
from .utils import dump_key_values, format_datetime, format_float, load_key_values, run_id
from .weak import run_convergence_study

logger = logging.getLogger(__name__)

KNOBS = ("b", "c_aux", "c_slack", "rel_tol")


def _guard(command: Callable[[argparse.Namespace], int]) -> Callable[[argparse.Namespace], int]:
    """Map package errors to their exit codes."""

    def wrapper(args: argparse.Namespace) -> int:
        try:
            return command(args)
        except DGTError as e:
            logger.error(f"{command.__name__} failed: {e}")
            print(str(e), file=sys.stderr)
            return e.exit_code

    wrapper.__name__ = command.__name__
    wrapper.__doc__ = command.__doc__
    return wrapper


def resolve_out_dir(args: argparse.Namespace, cfg: Optional[RunConfig] = None) -> Path:
    """``DGT_OUT`` wins over ``--out``, which wins over ``output.dir``."""
    env_out = get_config().dgt_out
    if env_out:
        return Path(env_out)
    if getattr(args, "out", None):
        return Path(args.out)
    return Path(cfg.output.dir if cfg is not None else "out")


def _load(args: argparse.Namespace) -> Tuple[RunConfig, str]:
    if not getattr(args, "config", None):
        raise ConfigError("--config is required for this command")
    cfg, text = load_config_file(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.model_copy(update={"seed": args.seed})
    return cfg, text


def _write_text(path: Path, text: str) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8", newline="\n")
    except OSError as e:
        raise PersistenceError(f"cannot write {path}: {e}") from e
    return path


def _registry(out_dir: Path) -> DatabaseManager:
    return get_db_manager(get_config().database_path or str(out_dir / "runs.db"))


def _service(args: argparse.Namespace) -> RunService:
    return RunService(getattr(args, "jobs", None))


@_guard
def cmd_simulate(args: argparse.Namespace) -> int:
    """Run one ``(l, eps)`` simulation, persist its series and audit it."""
    cfg, text = _load(args)
    out_dir = resolve_out_dir(args, cfg)
    rid = run_id(text, cfg.seed)
    run_dir = out_dir / "runs" / rid
    started = datetime.now()
    grid = cfg.grid.spec()
    registry = _registry(out_dir)
    record_id = registry.create_run(
        {"run_id": rid, "eps": cfg.model.eps, "nx": grid.nx, "ny": grid.ny, "output_dir": str(run_dir)}
    )
    try:
        params = cfg.model.params()
        init = build_initial_data(cfg, grid)
        recorder = FunctionalRecorder(params, cfg.audit.p_list, cfg.audit.b)
        observers: List[Observer] = [recorder]
        if cfg.run.dump_snapshots:
            observers.append(SnapshotWriter(run_dir / "snapshots"))
        trajectory = run(
            params, init, cfg.run.T, sample_grid(cfg.run.T, cfg.run.samples), observers, control=cfg.stepper
        )
        recorder.series.write(run_dir / "series.csv")
        consts = audit_constants(init, params, cfg.run.T, trajectory.max_dt)
        knobs = {k: float(getattr(cfg.audit, k)) for k in KNOBS}
        _write_text(run_dir / "constants.txt", dump_key_values({**consts, **knobs}))
        _write_text(
            run_dir / "metadata.txt",
            f"run_id = {rid}\nstarted = {format_datetime(started)}\nfinished = {format_datetime(datetime.now())}\n"
            f"steps = {trajectory.steps}\nstatus = {trajectory.status}\n",
        )
        if trajectory.blew_up:
            raise BlowupDetected(
                f"blow-up threshold {format_float(cfg.stepper.blowup_threshold)} exceeded at "
                f"t = {format_float(trajectory.t_max or 0.0)}"
            )

        passed = True
        if cfg.audit.enabled:
            verdicts = run_audits(
                recorder.series, params, consts, cfg.audit.p_list, cfg.audit.b, cfg.audit.c_aux,
                cfg.audit.c_slack, cfg.audit.rel_tol,
            )
            report = render_report(verdicts)
            _write_text(run_dir / "audit_report.txt", report)
            print(report, end="")
            passed = all(v.passed for v in verdicts)
        print(f"run {rid}: {trajectory.steps} steps, outputs in {run_dir}")
        if not passed:
            raise AuditFailure(f"audit failed for run {rid}; see {run_dir / 'audit_report.txt'}")
    except DGTError as e:
        registry.finish_run(record_id, "failed", str(e))
        raise
    registry.finish_run(record_id, "ok")
    return 0


def _plist_from_columns(names: List[str]) -> List[float]:
    return [float(n[len("lp_"):]) for n in names if n.startswith("lp_") and not n.startswith("lp_diss_")]


@_guard
def cmd_audit(args: argparse.Namespace) -> int:
    """Re-run the audits offline on a persisted series and constants file."""
    if not args.series or not args.consts:
        raise ConfigError("audit needs --series CSV and --consts FILE")
    try:
        consts = load_key_values(Path(args.consts).read_text(encoding="utf-8"))
    except OSError as e:
        raise PersistenceError(f"cannot read constants {args.consts}: {e}") from e
    for key in ("l", "eps", *KNOBS):
        if key not in consts:
            raise ConfigError(f"constants file lacks '{key}'")

    header = FunctionalSeries.read(args.series)
    plist = _plist_from_columns(header.names)
    series = FunctionalSeries.read(args.series, expected_columns(plist, with_G="G" in header.names))
    try:
        params = ModelParams(l=consts["l"], eps=consts["eps"])
    except ValidationError as e:
        raise ConfigError(f"constants file: {e.errors()[0]['msg']}") from e
    verdicts = run_audits(
        series, params, consts, plist, consts["b"], consts["c_aux"], consts["c_slack"], consts["rel_tol"]
    )
    report = render_report(verdicts)
    _write_text(resolve_out_dir(args) / "audit_report.txt", report)
    print(report, end="")
    if not all(v.passed for v in verdicts):
        raise AuditFailure("offline audit failed")
    return 0


@_guard
def cmd_lab(args: argparse.Namespace) -> int:
    """Fit the appendix constant and validate it on disjoint seeds."""
    cfg, text = _load(args)
    run_dir = resolve_out_dir(args, cfg) / "runs" / run_id(text, cfg.seed)
    lab = cfg.lab
    settings = LabSettings(lab.p, lab.eta, lab.samples, lab.modes, lab.amplitude, lab.floor)
    result = run_lab(cfg.grid.spec(), settings, mapper=_service(args).map)

    elementary = check_elementary(seed=cfg.seed)
    xi = np.sort(np.random.default_rng(cfg.seed).uniform(0.0, 1e6, size=elementary.samples))
    psi_margins = np.asarray(check_psi_bound(xi))
    psi_violations = int(np.count_nonzero(psi_margins < 0))

    summary = (
        result.summary()
        + elementary.render()
        + f"psi.samples = {len(xi)}\npsi.min_margin = {format_float(psi_margins.min())}\n"
        + f"psi.violations = {psi_violations}\n"
    )
    _write_text(run_dir / "lab_samples.csv", result.to_csv())
    _write_text(run_dir / "lab_summary.txt", summary)
    print(summary, end="")
    if result.violations or elementary.violations or psi_violations:
        raise AuditFailure(
            f"lab validation failed: {result.violations} appendix, {elementary.violations} elementary, "
            f"{psi_violations} psi violations"
        )
    return 0


@_guard
def cmd_converge(args: argparse.Namespace) -> int:
    """Run the eps x grid matrix and report Cauchy differences and weak residuals."""
    cfg, text = _load(args)
    out_dir = resolve_out_dir(args, cfg)
    rid = run_id(text, cfg.seed)
    run_dir = out_dir / "runs" / rid
    report = run_convergence_study(
        cfg, cfg.model.eps_list, cfg.converge.grid_list, cfg.run.T, run_dir, _service(args)
    )
    registry = _registry(out_dir)
    for cell in report.cells:
        record_id = registry.create_run(
            {
                "run_id": rid,
                "member": cell.label,
                "eps": cell.eps,
                "nx": cell.nx,
                "ny": cell.ny,
                "output_dir": cell.output_dir,
            }
        )
        registry.finish_run(record_id, cell.status, cell.diagnostic or None)
    report.write(run_dir)
    print(report.summary(), end="")
    if not report.passed:
        raise AuditFailure(f"convergence study {rid} is not monotone; see {run_dir / 'summary.txt'}")
    return 0


def format_snapshot(values: np.ndarray) -> List[str]:
    return [" ".join(format_float(x) for x in row) for row in values]


@_guard
def cmd_snapshot_dump(args: argparse.Namespace) -> int:
    """Pretty-print a ``.dgt`` snapshot."""
    field, t = read_snapshot(args.path)
    g = field.grid
    header: Dict[str, str] = {
        "nx": str(g.nx),
        "ny": str(g.ny),
        "lx": format_float(g.lx),
        "ly": format_float(g.ly),
        "t": format_float(t),
        "min": format_float(field.min()),
        "max": format_float(field.max()),
    }
    lines = [f"{k} = {v}" for k, v in header.items()]
    print("\n".join(lines + format_snapshot(field.values)))
    return 0


COMMANDS: Dict[str, Callable[[argparse.Namespace], int]] = {
    "simulate": cmd_simulate,
    "audit": cmd_audit,
    "lab": cmd_lab,
    "converge": cmd_converge,
    "snapshot-dump": cmd_snapshot_dump,
}
