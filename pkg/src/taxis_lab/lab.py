"""Randomized stress tests of the standalone functional inequalities.

Constants that the analysis only proves to exist are fitted on a
calibration set of random positive fields and then checked on a disjoint
validation set drawn from other seeds.
"""

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .auditor import psi, psi_prime
from .errors import ConfigError, FieldError, UnsatisfiableInequality
from .grid import GridSpec, ScalarField, cell_gradient_sq, integrate
from .model import positive_power, random_fourier
from .utils import format_float

logger = logging.getLogger(__name__)

MIN_FIT_SAMPLES = 100
ROUNDOFF = 1e-12

Mapper = Callable[[Callable, Iterable], Iterable]


@dataclass(frozen=True)
class FieldSampler:
    """Band-limited random positive fields in ``[floor, floor + amplitude]``."""

    seed: int
    mode_count: int = 4
    amplitude: float = 1.0
    floor: float = 0.1

    def __post_init__(self) -> None:
        if not self.floor > 0:
            raise ConfigError(f"sampler floor must be positive, got {self.floor}")
        if self.amplitude < 0:
            raise ConfigError(f"sampler amplitude must be nonnegative, got {self.amplitude}")
        if self.mode_count < 1:
            raise ConfigError(f"sampler needs at least one mode, got {self.mode_count}")


def sample_field(s: FieldSampler, g: GridSpec) -> ScalarField:
    modes = min(s.mode_count, max(1, g.nx // 8))
    f = random_fourier(g, s.seed, modes, s.floor, s.floor + s.amplitude)
    return ScalarField(g, f.values, positive=True)


@dataclass
class InequalitySample:
    """Both sides of the weighted gradient inequality for one field pair.

    ``t1``..``t3`` are the coefficients multiplying ``c``; ``eta_term`` is
    independent of ``c``.
    """

    lhs: float
    eta_term: float
    t1: float
    t2: float
    t3: float
    c: float
    p: float
    eta: float
    sample_id: int = 0

    @property
    def c_slope(self) -> float:
        return self.t1 + self.t2 + self.t3

    @property
    def terms(self) -> Dict[str, float]:
        return {
            "eta_term": self.eta_term,
            "c_t1": self.c * self.t1,
            "c_t2": self.c * self.t2,
            "c_t3": self.c * self.t3,
        }

    @property
    def rhs(self) -> float:
        return math.fsum(self.terms.values())

    @property
    def margin(self) -> float:
        return self.rhs - self.lhs

    def with_c(self, c: float) -> "InequalitySample":
        return InequalitySample(self.lhs, self.eta_term, self.t1, self.t2, self.t3, c, self.p, self.eta, self.sample_id)


def check_appendix_inequality(
    phi: ScalarField, psi_field: ScalarField, p: float, eta: float, c: float, sample_id: int = 0
) -> InequalitySample:
    if p < 1:
        raise ConfigError(f"p must be >= 1, got {p:g}")
    if not eta > 0:
        raise ConfigError(f"eta must be positive, got {eta:g}")
    for name, f in (("phi", phi), ("psi", psi_field)):
        if not f.min() > 0:
            raise FieldError(f"{name} must be positive, got min {f.min():.17g}")
    grid = phi.grid
    ph, ps = phi.values, psi_field.values
    grad_phi2 = cell_gradient_sq(phi).values
    grad_psi2 = cell_gradient_sq(psi_field).values

    def q(values: np.ndarray) -> float:
        return integrate(ScalarField(grid, values))

    sup2 = float(ps.max()) ** 2
    grad4 = q(grad_psi2**2 / ps**3)
    return InequalitySample(
        lhs=q(positive_power(ph, p + 1) * ps * grad_psi2),
        eta_term=eta * q(positive_power(ph, p - 1) * ps * grad_phi2),
        t1=(sup2 + sup2**2 / eta) * q(positive_power(ph, p + 1)) * grad4,
        t2=sup2 * q(ph) ** (2 * p + 1) * grad4,
        t3=sup2 * q(ph * ps),
        c=c,
        p=p,
        eta=eta,
        sample_id=sample_id,
    )


@dataclass(frozen=True)
class ConstantFit:
    value: float
    sample_id: int


def fit_from_samples(samples: Sequence[InequalitySample]) -> ConstantFit:
    """Smallest ``c`` with nonnegative margin on every sample (RHS is affine in ``c``)."""
    best = ConstantFit(0.0, samples[0].sample_id if samples else 0)
    for s in samples:
        gap = s.lhs - s.eta_term
        if s.c_slope == 0:
            if gap > 0:
                raise UnsatisfiableInequality(
                    f"inequality unsatisfiable in c: sample {s.sample_id} has lhs {s.lhs:.17g} "
                    "with every c-term zero"
                )
            continue
        needed = gap / s.c_slope
        if needed > best.value:
            best = ConstantFit(needed, s.sample_id)
    return best


def fit_constant(samples: Sequence[Tuple[ScalarField, ScalarField]], p: float, eta: float) -> ConstantFit:
    if len(samples) < MIN_FIT_SAMPLES:
        raise ConfigError(f"fitting needs at least {MIN_FIT_SAMPLES} samples, got {len(samples)}")
    evaluated = [check_appendix_inequality(phi, ps, p, eta, 0.0, k) for k, (phi, ps) in enumerate(samples)]
    return fit_from_samples(evaluated)


@dataclass
class SobolevSample:
    """Measured sides of the L1-gradient embeddings with the fitted constants."""

    l2_sq: float
    grad_l1: float
    l1: float
    c_embedding: float
    frac_norm: Optional[float] = None
    c_fractional: Optional[float] = None

    def embedding_margin(self, c: float) -> float:
        return c * (self.grad_l1**2 + self.l1**2) - self.l2_sq

    def fractional_margin(self, c: float) -> float:
        if self.frac_norm is None:
            raise ConfigError("fractional embedding was not evaluated")
        return c * (self.grad_l1 + self.frac_norm) - math.sqrt(self.l2_sq)


def check_sobolev(rho: ScalarField, p: Optional[float] = None) -> SobolevSample:
    """Fit ``C`` in ``int rho^2 <= C |grad rho|_1^2 + C |rho|_1^2`` and, with ``p``, the quasi-norm form."""
    grid = rho.grid
    l2_sq = integrate(ScalarField(grid, rho.values**2))
    grad_l1 = integrate(ScalarField(grid, np.sqrt(cell_gradient_sq(rho).values)))
    l1 = integrate(ScalarField(grid, np.abs(rho.values)))
    denom = grad_l1**2 + l1**2
    sample = SobolevSample(l2_sq, grad_l1, l1, l2_sq / denom if denom > 0 else 0.0)
    if p is not None:
        if not rho.min() > 0:
            raise FieldError(f"quasi-norm embedding needs rho > 0, got min {rho.min():.17g}")
        frac = integrate(ScalarField(grid, positive_power(rho.values, 1.0 / (p + 1)))) ** (p + 1)
        sample.frac_norm = frac
        sample.c_fractional = math.sqrt(l2_sq) / (grad_l1 + frac)
    return sample


def check_psi_bound(xi: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """``e (xi+e) ln(xi+e) - (Psi(xi) - xi Psi'(xi))``; nonnegative for ``xi >= 0``."""
    x = np.asarray(xi, dtype=np.float64)
    if np.any(x < 0):
        raise ConfigError("xi must be nonnegative")
    s = x + math.e
    margin = math.e * s * np.log(s) - (psi(x) - x * psi_prime(x))
    return float(margin) if margin.ndim == 0 else margin


@dataclass
class ElementaryReport:
    samples: int
    max_square_split: float
    max_sum_square: float
    violations: int

    def render(self) -> str:
        return (
            f"elementary.samples = {self.samples}\n"
            f"elementary.square_split.max_violation = {format_float(self.max_square_split)}\n"
            f"elementary.sum_square.max_violation = {format_float(self.max_sum_square)}\n"
            f"elementary.violations = {self.violations}\n"
        )


def check_elementary(n: int = 100_000, seed: int = 0) -> ElementaryReport:
    """Sweep ``(a-b)^2 >= a^2/2 - b^2`` and ``(a+b)^2 <= 2(a^2+b^2)`` over random pairs.

    Violations are reported relative to ``a^2 + b^2``.
    """
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-1e3, 1e3, size=(2, n))
    scale = np.maximum(a**2 + b**2, np.finfo(float).tiny)
    split = (0.5 * a**2 - b**2 - (a - b) ** 2) / scale
    sum_sq = ((a + b) ** 2 - 2 * (a**2 + b**2)) / scale
    violations = int(np.count_nonzero(split > ROUNDOFF) + np.count_nonzero(sum_sq > ROUNDOFF))
    return ElementaryReport(n, float(split.max()), float(sum_sq.max()), violations)


# Calibration / validation protocol


@dataclass(frozen=True)
class LabSettings:
    p: float = 1.0
    eta: float = 0.125
    samples: int = 500
    modes: int = 4
    amplitude: float = 1.0
    floor: float = 0.1


def _pair_task(args: Tuple[int, GridSpec, LabSettings]) -> InequalitySample:
    seed, grid, st = args
    phi = sample_field(FieldSampler(2 * seed, st.modes, st.amplitude, st.floor), grid)
    ps = sample_field(FieldSampler(2 * seed + 1, st.modes, st.amplitude, st.floor), grid)
    return check_appendix_inequality(phi, ps, st.p, st.eta, 0.0, sample_id=seed)


@dataclass
class LabResult:
    settings: LabSettings
    fit: ConstantFit
    calibration: List[InequalitySample] = field(default_factory=list)
    validation: List[InequalitySample] = field(default_factory=list)

    @property
    def violations(self) -> int:
        return sum(1 for s in self.validation if s.margin < -ROUNDOFF * max(1.0, abs(s.lhs)))

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["split", "seed", "p", "eta", "lhs", "eta_term", "c_t1", "c_t2", "c_t3", "rhs", "margin"])
        for split, samples in (("calibration", self.calibration), ("validation", self.validation)):
            for s in samples:
                terms = s.terms
                writer.writerow(
                    [split, s.sample_id]
                    + [format_float(x) for x in (s.p, s.eta, s.lhs, terms["eta_term"], terms["c_t1"],
                                                 terms["c_t2"], terms["c_t3"], s.rhs, s.margin)]
                )
        return buffer.getvalue()

    def summary(self) -> str:
        return (
            f"lab.p = {format_float(self.settings.p)}\n"
            f"lab.eta = {format_float(self.settings.eta)}\n"
            f"calibration.samples = {len(self.calibration)}\n"
            f"calibration.c_fit = {format_float(self.fit.value)}\n"
            f"calibration.argmax_seed = {self.fit.sample_id}\n"
            f"validation.samples = {len(self.validation)}\n"
            f"validation.violations = {self.violations}\n"
        )


def run_lab(grid: GridSpec, settings: LabSettings, mapper: Mapper = map) -> LabResult:
    """Fit on seeds ``1..N`` and validate on ``N+1..2N``."""
    n = settings.samples
    if n < MIN_FIT_SAMPLES:
        raise ConfigError(f"lab needs at least {MIN_FIT_SAMPLES} samples per split, got {n}")
    if settings.p < 1:
        raise ConfigError(f"p must be >= 1, got {settings.p:g}")
    logger.info(f"Lab started: p={settings.p:g}, eta={settings.eta:g}, {n} calibration + {n} validation samples")
    tasks = [(seed, grid, settings) for seed in range(1, 2 * n + 1)]
    evaluated = list(mapper(_pair_task, tasks))
    calibration, validation = evaluated[:n], evaluated[n:]
    fit = fit_from_samples(calibration)
    result = LabResult(
        settings=settings,
        fit=fit,
        calibration=[s.with_c(fit.value) for s in calibration],
        validation=[s.with_c(fit.value) for s in validation],
    )
    logger.info(f"Lab finished: c_fit={fit.value:.6g}, validation violations={result.violations}")
    return result
