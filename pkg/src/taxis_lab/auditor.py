"""Functionals along trajectories and discrete audits of the a-priori bounds."""

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np

from .errors import AmbiguousCaseError, ConfigError, FieldError, PersistenceError
from .grid import ScalarField, cell_gradient_dot, cell_gradient_sq, face_gradient, integrate, neumann_laplacian
from .model import InitialData, ModelParams, positive_power, rhs_u, rhs_v
from .stepper import SimState
from .utils import format_float, trapezoid

logger = logging.getLogger(__name__)

E = math.e
CASE_TOLERANCE = 1e-9
DEFAULT_PLIST = (2.0, 4.0)
NONNEGATIVE = ("mass", "l2u", "grad4", "dirichlet_entropy", "ulog", "up_grad2_", "lp_")


def p_key(p: float) -> str:
    return f"{p:g}"


def uniform_functionals(plist: Sequence[float]) -> List[str]:
    """Functionals whose sup over time must stay bounded as eps shrinks."""
    moments = [f"lp_{p_key(p)}" for p in plist if p != 2]
    return ["grad4", "l2u", *moments, "ulog", "inv_v"]


UNIFORM_FUNCTIONALS = tuple(uniform_functionals(DEFAULT_PLIST))


def psi(xi: np.ndarray) -> np.ndarray:
    """``(xi+e) ln^2(xi+e) - 2 (xi+e) ln(xi+e) + 2 (xi+e)``."""
    s = np.asarray(xi, dtype=np.float64) + E
    log_s = np.log(s)
    return s * log_s**2 - 2 * s * log_s + 2 * s


def psi_prime(xi: np.ndarray) -> np.ndarray:
    return np.log(np.asarray(xi, dtype=np.float64) + E) ** 2


@dataclass
class FunctionalSeries:
    """Time-stamped functional values, one column per functional id."""

    times: List[float] = field(default_factory=list)
    columns: Dict[str, List[float]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.times)

    @property
    def names(self) -> List[str]:
        return list(self.columns)

    def append(self, t: float, row: Mapping[str, float]) -> None:
        if self.times and not t > self.times[-1]:
            raise FieldError(f"series times must increase: {t} after {self.times[-1]}")
        if self.times and list(row) != self.names:
            raise FieldError("row columns differ from the series columns")
        for name, value in row.items():
            if name.startswith(NONNEGATIVE) and value < 0:
                raise FieldError(f"functional {name} must be nonnegative, got {value:.17g}")
        self.times.append(float(t))
        for name, value in row.items():
            self.columns.setdefault(name, []).append(float(value))

    def column(self, name: str) -> np.ndarray:
        if name not in self.columns:
            raise ConfigError(f"series lacks column '{name}'")
        return np.asarray(self.columns[name], dtype=np.float64)

    def has(self, *names: str) -> bool:
        return all(name in self.columns for name in names)

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["t", *self.names])
        for k, t in enumerate(self.times):
            writer.writerow([format_float(t), *(format_float(self.columns[n][k]) for n in self.names)])
        return buffer.getvalue()

    @classmethod
    def from_csv(cls, text: str, expected: Optional[Sequence[str]] = None) -> "FunctionalSeries":
        """Parse a series CSV; with ``expected`` the header must match exactly."""
        if not text:
            raise PersistenceError("empty series CSV")
        if not text.endswith("\n"):
            raise PersistenceError("truncated CSV: missing final line ending")
        rows = list(csv.reader(io.StringIO(text)))
        header = rows[0]
        if not header or header[0] != "t":
            raise PersistenceError(f"series CSV must start with a 't' column, got {header[:1]}")
        names = header[1:]
        if expected is not None and list(expected) != names:
            missing = [n for n in expected if n not in names]
            unexpected = [n for n in names if n not in expected]
            raise PersistenceError(
                f"series schema drift: missing columns {missing}, unexpected columns {unexpected}"
            )
        series = cls(columns={n: [] for n in names})
        for number, row in enumerate(rows[1:], start=2):
            if len(row) != len(header):
                raise PersistenceError(
                    f"truncated CSV: line {number} has {len(row)} fields, expected {len(header)}"
                )
            try:
                values = [float(x) for x in row]
            except ValueError as e:
                raise PersistenceError(f"line {number}: {e}") from e
            if series.times and not values[0] > series.times[-1]:
                raise PersistenceError(f"line {number}: times must increase")
            series.times.append(values[0])
            for name, value in zip(names, values[1:]):
                series.columns[name].append(value)
        return series

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(self.to_csv(), encoding="utf-8", newline="\n")
        except OSError as e:
            raise PersistenceError(f"cannot write series {path}: {e}") from e
        return path

    @classmethod
    def read(cls, path: Union[str, Path], expected: Optional[Sequence[str]] = None) -> "FunctionalSeries":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise PersistenceError(f"cannot read series {path}: {e}") from e
        return cls.from_csv(text, expected)


@dataclass
class AuditVerdict:
    """Outcome of one bound check; ``margin`` is measured minus bound."""

    bound_id: str
    margin: float
    tolerance: float
    constants: Dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.margin <= self.tolerance)

    def render(self) -> str:
        lines = [
            f"[{self.bound_id}]",
            f"margin = {format_float(self.margin)}",
            f"tolerance = {format_float(self.tolerance)}",
        ]
        lines += [f"const.{k} = {format_float(self.constants[k])}" for k in sorted(self.constants)]
        lines.append(f"verdict = {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines) + "\n"


def render_report(verdicts: Iterable[AuditVerdict]) -> str:
    return "\n".join(v.render() for v in verdicts)


# Functional evaluation


def expected_columns(plist: Sequence[float], with_G: bool = True) -> List[str]:
    names = [
        "mass", "v_mass", "l2u", "grad4", "grad4_v4", "dirichlet_entropy", "grad_v_l2", "lap_v_l2",
        "ulog", "psi_energy", "exp_v", "inf_v", "inv_v", "sup_u", "sup_v", "sup_gradv",
        "uv_budget", "vt_l2", "v_gradu2", "u_grad4_v3", "u2v_gradv2", "m3l", "m4l", "ulnu", "lnu",
    ]
    for p in plist:
        k = p_key(p)
        names += [f"lp_{k}", f"lp1_{k}", f"lp_diss_{k}", f"aux_{k}", f"up_grad2_{k}", f"dlp_{k}"]
    if with_G:
        names += ["G", "dG"]
    return names


def eval_functionals(
    s: SimState, p: ModelParams, plist: Sequence[float] = DEFAULT_PLIST, b: Optional[float] = None
) -> Dict[str, float]:
    """One series row; ``G`` and its rate ``dG`` are included when ``b`` is given.

    ``dlp_<p>`` and ``dG`` are exact time derivatives along the semi-discrete
    flow, i.e. the limit of the stepper's forward difference as dt -> 0.
    """
    grid = s.u.grid
    u, v = s.u.values, s.v.values
    u_t, v_t = rhs_u(s.u, s.v, p).values, rhs_v(s.u, s.v).values
    gv2 = cell_gradient_sq(s.v).values
    gu2 = cell_gradient_sq(s.u).values
    lap_v = neumann_laplacian(s.v).values

    def q(values: np.ndarray) -> float:
        return integrate(ScalarField(grid, values))

    row: Dict[str, float] = {
        "mass": q(u),
        "v_mass": q(v),
        "l2u": q(u**2),
        "grad4": q(gv2**2 / v**3),
        "grad4_v4": q(gv2**2 / v**4),
        "dirichlet_entropy": q(gv2 / v),
        "grad_v_l2": q(gv2),
        "lap_v_l2": q(lap_v**2),
        "ulog": q(u**2 * np.log(u + E) ** 2),
        "psi_energy": q(np.exp(v) * psi(u * np.exp(-v))),
        "exp_v": q(np.exp(v)),
        "inf_v": float(v.min()),
        "inv_v": float(1.0 / v.min()),
        "sup_u": float(u.max()),
        "sup_v": float(v.max()),
        "sup_gradv": face_gradient(s.v).max_abs(),
        "uv_budget": s.uv_budget,
        "vt_l2": s.vt_l2,
        "v_gradu2": q(v * gu2),
        "u_grad4_v3": q(u * gv2**2 / v**3),
        "u2v_gradv2": q(u**2 * v * gv2),
        "m3l": q(positive_power(u, 3 - p.l)),
        "m4l": q(positive_power(u, 4 - p.l)),
        "ulnu": q(u * np.log(u)),
        "lnu": q(np.log(u)),
    }
    for exponent in plist:
        k = p_key(exponent)
        w = positive_power(u, (p.l + exponent - 1) / 2) * np.sqrt(v)
        row[f"lp_{k}"] = q(positive_power(u, exponent))
        row[f"lp1_{k}"] = q(positive_power(u, exponent + 1))
        row[f"lp_diss_{k}"] = integrate(cell_gradient_sq(ScalarField(grid, w)))
        row[f"aux_{k}"] = q(positive_power(u, 2 * (p.l + exponent - 1)) * v**2)
        row[f"up_grad2_{k}"] = q(positive_power(u, exponent + p.l - 3) * gu2)
        row[f"dlp_{k}"] = q(exponent * positive_power(u, exponent - 1) * u_t)
    if b is not None:
        row["G"] = eval_G(s, p, b)
        row["dG"] = eval_G_rate(s, p, b, u_t, v_t)
    return row


def g_case(l: float) -> str:
    """Case label of the energy functional; rejects exponents hugging 2 or 3."""
    for edge in (2.0, 3.0):
        if l != edge and abs(l - edge) < CASE_TOLERANCE:
            raise AmbiguousCaseError(f"ambiguous case selection: l = {l!r} is within 1e-9 of {edge:g}")
    if l == 2:
        return "l=2"
    if l == 3:
        return "l=3"
    if 2 < l < 3:
        return "2<l<3"
    return "l<2|l>3"


def g_from_moments(l: float, b: float, grad4: float, m3l: float, ulnu: float, lnu: float) -> float:
    case = g_case(l)
    if case == "l=2":
        return 4 * b * ulnu + grad4
    if case == "l=3":
        return -4 * b * lnu + grad4
    if case == "2<l<3":
        return -(4 * b / ((3 - l) * (l - 2))) * m3l + grad4
    return (4 * b / ((l - 3) * (l - 2))) * m3l + grad4


def eval_G(s: SimState, p: ModelParams, b: float) -> float:
    if not b > 0:
        raise ConfigError(f"b must be positive, got {b}")
    g_case(p.l)
    grid = s.u.grid
    u, v = s.u.values, s.v.values
    gv2 = cell_gradient_sq(s.v).values
    grad4 = integrate(ScalarField(grid, gv2**2 / v**3))
    m3l = integrate(ScalarField(grid, positive_power(u, 3 - p.l)))
    ulnu = integrate(ScalarField(grid, u * np.log(u)))
    lnu = integrate(ScalarField(grid, np.log(u)))
    return g_from_moments(p.l, b, grad4, m3l, ulnu, lnu)


def eval_G_rate(
    s: SimState,
    p: ModelParams,
    b: float,
    u_t: Optional[np.ndarray] = None,
    v_t: Optional[np.ndarray] = None,
) -> float:
    """``d/dt G`` along the semi-discrete flow ``(u_t, v_t) = (rhs_u, rhs_v)``.

    ``G`` is linear in its moments, so the rate is the case formula applied
    to the moment rates. The grad4 rate uses the bilinear face average, which
    differentiates :func:`cell_gradient_sq` exactly.
    """
    if not b > 0:
        raise ConfigError(f"b must be positive, got {b}")
    g_case(p.l)
    grid = s.u.grid
    u, v = s.u.values, s.v.values
    if u_t is None:
        u_t = rhs_u(s.u, s.v, p).values
    if v_t is None:
        v_t = rhs_v(s.u, s.v).values

    def q(values: np.ndarray) -> float:
        return integrate(ScalarField(grid, values))

    gv2 = cell_gradient_sq(s.v).values
    gv2_t = 2 * cell_gradient_dot(s.v, ScalarField(grid, v_t)).values
    grad4_t = q(2 * gv2 * gv2_t / v**3 - 3 * gv2**2 * v_t / v**4)
    m3l_t = q((3 - p.l) * positive_power(u, 2 - p.l) * u_t)
    ulnu_t = q((np.log(u) + 1) * u_t)
    lnu_t = q(u_t / u)
    return g_from_moments(p.l, b, grad4_t, m3l_t, ulnu_t, lnu_t)


class FunctionalRecorder:
    """Observer appending one functional row per sampled state."""

    def __init__(self, params: ModelParams, plist: Sequence[float] = DEFAULT_PLIST, b: Optional[float] = None):
        self.params = params
        self.plist = list(plist)
        self.b = b
        self.series = FunctionalSeries()

    def __call__(self, state: SimState, step_index: int) -> None:
        self.series.append(state.t, eval_functionals(state, self.params, self.plist, self.b))


def audit_constants(init: InitialData, p: ModelParams, T: float, dt: float = 0.0) -> Dict[str, float]:
    """Data-derived constants every bound refers to; ``dt`` is the run's largest step."""
    u0, v0 = init.u0, init.v0
    grid = u0.grid
    return {
        "m_star": integrate(u0.with_values(u0.values + 1.0)),
        "v0_sup": v0.max(),
        "v0_integral": integrate(v0),
        "grad_v0_l2": integrate(cell_gradient_sq(v0)),
        "T": float(T),
        "h": grid.h,
        "dt_max": float(dt),
        "area": grid.area,
        "l": p.l,
        "eps": p.eps,
    }


REQUIRED_CONSTANTS = ("m_star", "v0_sup", "v0_integral", "T")


def _require(consts: Mapping[str, float], *keys: str) -> None:
    missing = [k for k in keys if k not in consts]
    if missing:
        raise ConfigError(f"missing audit constants: {', '.join(missing)}")


def audit_static_bounds(
    series: FunctionalSeries,
    consts: Mapping[str, float],
    rel_tol: float = 1e-6,
    c_slack: float = 10.0,
) -> List[AuditVerdict]:
    _require(consts, *REQUIRED_CONSTANTS)
    h = float(consts.get("h", 0.0))
    m_star, v0_sup, v0_int, T = (float(consts[k]) for k in REQUIRED_CONSTANTS)
    empty = len(series) == 0

    def verdict(bound_id: str, measured: float, bound: float, **extra: float) -> AuditVerdict:
        tol = rel_tol * abs(bound) + c_slack * h**2
        margin = 0.0 if empty else measured - bound
        return AuditVerdict(bound_id, margin, tol, {"bound": bound, **extra})

    def sup(name: str) -> float:
        return float(series.column(name).max()) if not empty else 0.0

    def last(name: str) -> float:
        return float(series.column(name)[-1]) if not empty else 0.0

    def time_integral(name: str) -> float:
        return trapezoid(series.times, series.columns[name]) if not empty else 0.0

    verdicts = [
        verdict("vmax_principle", sup("sup_v"), v0_sup, v0_sup=v0_sup),
        verdict("mass_bound", sup("mass"), m_star, m_star=m_star),
        verdict("l2u_spacetime", time_integral("l2u"), (T + 1) * m_star, m_star=m_star, T=T),
        verdict("uv_budget", last("uv_budget"), v0_int, v0_integral=v0_int),
    ]
    if "grad_v0_l2" in consts and series.has("grad_v_l2", "lap_v_l2", "vt_l2"):
        g0 = float(consts["grad_v0_l2"])
        u2 = time_integral("l2u")
        verdicts.append(
            verdict(
                "gradv_energy",
                last("grad_v_l2") + time_integral("lap_v_l2"),
                g0 + v0_sup**2 * u2,
                grad_v0_l2=g0,
            )
        )
        verdicts.append(verdict("vt_l2_bound", last("vt_l2"), 2 * g0 + 4 * v0_sup**2 * u2, grad_v0_l2=g0))
    if series.has("psi_energy", "exp_v"):
        floor_gap = 0.0 if empty else float(np.max(E * series.column("exp_v") - series.column("psi_energy")))
        verdicts.append(AuditVerdict("psi_floor", floor_gap, rel_tol * E * sup("exp_v"), {"psi_zero": E}))
    for v in verdicts:
        logger.info(f"Audit {v.bound_id}: margin={v.margin:.6g} tol={v.tolerance:.3g} pass={v.passed}")
    return verdicts


def _time_slack(consts: Mapping[str, float], c_slack: float, scale: float) -> float:
    """``c_slack * (h^2 + dt) * max(1, scale)`` with ``dt`` the run's largest step."""
    h = float(consts.get("h", 0.0))
    dt = float(consts.get("dt_max", 0.0))
    return c_slack * (h**2 + dt) * max(1.0, scale)


def lp_constant_a(p_exp: float, l: float, v0_sup: float) -> float:
    return max(0.5 * (p_exp - 1) * p_exp / (l + p_exp - 1) ** 2, (p_exp - 1) * p_exp / 2 * v0_sup**1.5)


def check_Lp_differential_inequality(
    series: FunctionalSeries,
    p_exp: float,
    params: ModelParams,
    consts: Mapping[str, float],
    c_slack: float = 10.0,
) -> AuditVerdict:
    """L^p growth inequality at every sample.

    The derivative is the recorded ``dlp_<p>`` rate of the discrete flow, so
    no sampling error enters the margin.
    """
    if p_exp < 2:
        raise ConfigError(f"L^p inequality needs p >= 2, got {p_exp:g}")
    _require(consts, "v0_sup")
    k = p_key(p_exp)
    names = [f"lp_{k}", f"dlp_{k}", f"lp1_{k}", f"lp_diss_{k}", f"aux_{k}", "grad4", "grad4_v4"]
    for name in names:
        series.column(name)
    a = lp_constant_a(p_exp, params.l, float(consts["v0_sup"]))
    constants = {
        "A": a,
        "v0_sup": float(consts["v0_sup"]),
        "p": p_exp,
        "h": float(consts.get("h", 0.0)),
        "dt": float(consts.get("dt_max", 0.0)),
    }
    bound_id = f"lp_differential_{k}"
    if len(series) == 0:
        return AuditVerdict(bound_id, 0.0, 0.0, constants)

    lp = series.column(f"lp_{k}")
    lhs = series.column(f"dlp_{k}") + (
        p_exp * (p_exp - 1) / (params.l + p_exp - 1) ** 2 * series.column(f"lp_diss_{k}")
    )
    aux = np.sqrt(series.column(f"aux_{k}"))
    rhs = (
        a * aux * (np.sqrt(series.column("grad4_v4")) + np.sqrt(series.column("grad4")))
        + p_exp * lp
        - p_exp * series.column(f"lp1_{k}")
    )
    margin = float(np.max(lhs - rhs))
    tol = _time_slack(consts, c_slack, float(np.max(np.abs(lp))))
    v = AuditVerdict(bound_id, margin, tol, constants)
    logger.info(f"Audit {bound_id}: margin={margin:.6g} tol={tol:.3g} pass={v.passed}")
    return v


def g_dissipation_rhs(series: FunctionalSeries, l: float, b: float) -> np.ndarray:
    """Case-matched right-hand side of the energy inequality, without the constant term."""
    case = g_case(l)
    coupling = 4 * b * series.column("u2v_gradv2")
    if case == "l=2":
        return 4 * b * (E + 1) / E * series.column("mass") + 4 * b * series.column("ulnu") + coupling
    if case == "l=3":
        return coupling + 4 * b * series.column("mass")
    if case == "2<l<3":
        return coupling + 4 * b / (l - 2) * series.column("m4l")
    return coupling - 4 * b / (l - 2) * series.column("m3l") + 4 * b / (l - 2) * series.column("m4l")


def check_G_dissipation(
    series: FunctionalSeries,
    params: ModelParams,
    b: float,
    c_aux: float,
    consts: Mapping[str, float],
    c_slack: float = 10.0,
) -> AuditVerdict:
    """Energy dissipation check; reports the smallest constant that makes it hold.

    ``c_fit`` is the least ``c_aux`` for which the excess stays below
    ``c_aux * |Omega| * sup v0`` at every sample.
    """
    _require(consts, "v0_sup", "area")
    case = g_case(params.l)
    for name in ("G", "dG", "v_gradu2", "u_grad4_v3", "u2v_gradv2", "mass", "m3l", "m4l", "ulnu"):
        series.column(name)
    scale = float(consts["area"]) * float(consts["v0_sup"])
    constants = {
        "b": b,
        "c_aux": c_aux,
        "v0_sup": float(consts["v0_sup"]),
        "c_fit": 0.0,
        "h": float(consts.get("h", 0.0)),
        "dt": float(consts.get("dt_max", 0.0)),
    }
    if len(series) == 0:
        return AuditVerdict("g_dissipation", 0.0, 0.0, constants)

    lhs = series.column("dG") + b * series.column("v_gradu2") + series.column("u_grad4_v3")
    if case == "l=2":
        lhs = lhs + 4 * b * series.column("l2u")
    excess = lhs - g_dissipation_rhs(series, params.l, b)
    constants["c_fit"] = max(0.0, float(np.max(excess))) / scale
    margin = float(np.max(excess - c_aux * scale))
    tol = _time_slack(consts, c_slack, float(np.max(np.abs(series.column("G")))))
    v = AuditVerdict("g_dissipation", margin, tol, constants)
    logger.info(f"Audit g_dissipation: margin={margin:.6g} c_fit={constants['c_fit']:.6g} pass={v.passed}")
    return v


def audit_uniform_in_eps(
    multi: Mapping[float, FunctionalSeries],
    band: float = 0.25,
    functionals: Sequence[str] = UNIFORM_FUNCTIONALS,
) -> AuditVerdict:
    """Finite sup over time and eps, with the cross-eps spread of the sups below ``band``."""
    if len(multi) < 3:
        raise ConfigError(f"uniform-in-eps audit needs at least 3 eps values, got {len(multi)}")
    eps_values = sorted(multi, reverse=True)
    reference = np.asarray(multi[eps_values[0]].times)
    for eps in eps_values[1:]:
        if not np.array_equal(reference, np.asarray(multi[eps].times)):
            raise ConfigError(f"mismatched sampling grids: eps={eps:g} differs from eps={eps_values[0]:g}")

    constants: Dict[str, float] = {}
    worst = -math.inf
    for name in functionals:
        sups = np.array([float(np.max(multi[eps].column(name))) if len(reference) else 0.0 for eps in eps_values])
        if not np.all(np.isfinite(sups)):
            spread = math.inf
        else:
            top = float(np.max(np.abs(sups)))
            spread = float((sups.max() - sups.min()) / top) if top > 0 else 0.0
        constants[f"{name}.sup"] = float(np.max(sups))
        constants[f"{name}.spread"] = spread
        worst = max(worst, spread - band)
    constants["band"] = band
    v = AuditVerdict("uniform_in_eps", worst, 0.0, constants)
    logger.info(f"Audit uniform_in_eps: worst spread excess={worst:.6g} pass={v.passed}")
    return v


def run_audits(
    series: FunctionalSeries,
    params: ModelParams,
    consts: Mapping[str, float],
    plist: Sequence[float],
    b: float,
    c_aux: float,
    c_slack: float = 10.0,
    rel_tol: float = 1e-6,
) -> List[AuditVerdict]:
    """Every single-run audit in report order."""
    verdicts = audit_static_bounds(series, consts, rel_tol=rel_tol, c_slack=c_slack)
    for p_exp in plist:
        if p_exp >= 2:
            verdicts.append(check_Lp_differential_inequality(series, p_exp, params, consts, c_slack))
    if series.has("G"):
        verdicts.append(check_G_dissipation(series, params, b, c_aux, consts, c_slack))
    return verdicts
