"""Configuration management for the taxis lab.

Two layers: process settings from the environment (``Config``) and the
line-oriented ``key = value`` run configuration parsed by ``parse_config``.
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .errors import ConfigError
from .grid import GridSpec, ScalarField, read_snapshot
from .model import InitialData, ModelParams, gaussian_bump, prepare_initial_data, random_fourier
from .stepper import StepControl

logger = logging.getLogger(__name__)


class Config(BaseSettings):
    """Process-level settings read from the environment or ``.env``."""

    dgt_out: Optional[str] = Field(default=None, alias="DGT_OUT")
    database_path: Optional[str] = Field(default=None, alias="DATABASE_PATH")
    dgt_jobs: Optional[int] = Field(default=None, alias="DGT_JOBS")

    # Optional settings
    log_level: str = Field(default="INFO", alias="LOG_LEVEL")
    log_file: Optional[str] = Field(default=None, alias="LOG_FILE")

    model_config = SettingsConfigDict(env_file=".env", env_file_encoding="utf-8", extra="ignore")


def get_config() -> Config:
    """Fresh settings instance; use it where environment changes must be seen."""
    return Config()


# Global config instance
config = get_config()


# Run configuration file


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GridSection(Section):
    nx: int = Field(ge=4)
    ny: int = Field(ge=4)
    lx: float = Field(default=1.0, gt=0)
    ly: float = Field(default=1.0, gt=0)

    def spec(self) -> GridSpec:
        return GridSpec(self.nx, self.ny, self.lx, self.ly)


class ModelSection(Section):
    l: float
    eps: float = 0.01
    eps_list: List[float] = Field(default_factory=list)

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

    @field_validator("eps_list")
    @classmethod
    def _check_eps_list(cls, value: List[float]) -> List[float]:
        if any(not 0 < e <= 1 for e in value):
            raise ValueError("every eps must be in (0, 1]")
        return value

    def params(self, eps: Optional[float] = None) -> ModelParams:
        return ModelParams(l=self.l, eps=self.eps if eps is None else eps)


class ProfileSection(Section):
    kind: Literal["constant", "gaussian-bump", "random-fourier", "snapshot"] = "constant"
    value: float = 1.0
    cx: float = 0.5
    cy: float = 0.5
    sigma: float = Field(default=0.1, gt=0)
    amplitude: float = 1.0
    floor: float = 0.0
    seed: Optional[int] = None
    modes: int = Field(default=4, ge=1)
    min: float = 0.1
    max: float = 1.0
    path: Optional[str] = None

    @model_validator(mode="after")
    def _check_kind(self) -> "ProfileSection":
        if self.kind == "snapshot":
            if not self.path:
                raise ValueError("snapshot profile needs a path")
            if not Path(self.path).is_file():
                raise ValueError(f"snapshot file not found: {self.path}")
        if self.kind == "random-fourier" and self.max < self.min:
            raise ValueError("random-fourier profile needs min <= max")
        return self


class InitSection(Section):
    u: ProfileSection = Field(default_factory=ProfileSection)
    v: ProfileSection = Field(default_factory=ProfileSection)


class RunSection(Section):
    T: float = Field(ge=0)
    samples: int = Field(default=11, ge=1)
    dump_snapshots: bool = False


class AuditSection(Section):
    enabled: bool = True
    b: float = Field(default=1.0, gt=0)
    c_aux: float = Field(default=0.0, ge=0)
    c_slack: float = Field(default=10.0, ge=0)
    rel_tol: float = Field(default=1e-6, ge=0)
    p_list: List[float] = Field(default_factory=lambda: [2.0, 4.0])
    band: float = Field(default=0.25, gt=0)


class LabSection(Section):
    p: float = 1.0
    eta: float = Field(default=0.125, gt=0)
    samples: int = Field(default=500, ge=1)
    modes: int = Field(default=4, ge=1)
    amplitude: float = Field(default=1.0, ge=0)
    floor: float = Field(default=0.1, gt=0)

    @field_validator("p")
    @classmethod
    def _check_p(cls, value: float) -> float:
        if value < 1:
            raise ValueError("p must be ≥ 1")
        return value


class ConvergeSection(Section):
    grid_list: List[int] = Field(default_factory=lambda: [32, 64, 128])
    tau: Optional[float] = None
    band: float = Field(default=0.25, ge=0)
    floor: float = Field(default=1e-4, ge=0)
    residual_factor: float = Field(default=2.0, ge=1)
    bank_size: int = Field(default=5, ge=5)


class OutputSection(Section):
    dir: str = "out"


class RunConfig(Section):
    grid: GridSection
    model: ModelSection
    init: InitSection = Field(default_factory=InitSection)
    run: RunSection
    stepper: StepControl = Field(default_factory=StepControl)
    audit: AuditSection = Field(default_factory=AuditSection)
    lab: LabSection = Field(default_factory=LabSection)
    converge: ConvergeSection = Field(default_factory=ConvergeSection)
    output: OutputSection = Field(default_factory=OutputSection)
    seed: int = 0


LIST_KEYS = {"model.eps_list", "audit.p_list", "converge.grid_list"}


def _split_lines(text: str) -> Tuple[Dict[str, Any], Dict[str, int]]:
    tree: Dict[str, Any] = {}
    lines: Dict[str, int] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {number}: expected 'key = value', got {raw.strip()!r}")
        if key in lines:
            raise ConfigError(f"{key} (line {number}): duplicate key, first set on line {lines[key]}")
        lines[key] = number
        node = tree
        parts = key.split(".")
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"{key} (line {number}): '{part}' is a value, not a section")
            node = child
        if parts[-1] in node and isinstance(node[parts[-1]], dict):
            raise ConfigError(f"{key} (line {number}): '{parts[-1]}' is a section, not a value")
        node[parts[-1]] = [item.strip() for item in value.split(",") if item.strip()] if key in LIST_KEYS else value
    return tree, lines


def _describe(error: Dict[str, Any], lines: Dict[str, int]) -> str:
    loc = [str(part) for part in error["loc"]]
    # List items report an index after the key.
    while loc and loc[-1].isdigit():
        loc.pop()
    key = ".".join(loc)
    message = str(error["msg"]).removeprefix("Value error, ")
    if error["type"] == "extra_forbidden":
        message = "unknown key"
    number = lines.get(key)
    if number is None:
        # Section-level errors point at the first line inside the section.
        inside = [n for k, n in lines.items() if k.startswith(key + ".")]
        number = min(inside) if inside else None
    return f"{key} (line {number}): {message}" if number is not None else f"{key}: {message}"


def parse_config(text: str) -> RunConfig:
    """Parse and validate a run configuration; every problem names its key and line."""
    tree, lines = _split_lines(text)
    try:
        return RunConfig.model_validate(tree)
    except ValidationError as e:
        raise ConfigError("; ".join(_describe(err, lines) for err in e.errors())) from e


def load_config_file(path: str) -> Tuple[RunConfig, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text), text


def build_profile(grid: GridSpec, section: ProfileSection, seed: int) -> ScalarField:
    if section.kind == "constant":
        return ScalarField.constant(grid, section.value)
    if section.kind == "gaussian-bump":
        return gaussian_bump(grid, section.cx, section.cy, section.sigma, section.amplitude, section.floor)
    if section.kind == "random-fourier":
        return random_fourier(
            grid, section.seed if section.seed is not None else seed, section.modes, section.min, section.max
        )
    field, _ = read_snapshot(str(section.path))
    if field.grid != grid:
        raise ConfigError(
            f"snapshot {section.path} is on a {field.grid.nx}x{field.grid.ny} grid, expected {grid.nx}x{grid.ny}"
        )
    return field


def build_initial_data(cfg: RunConfig, grid: Optional[GridSpec] = None) -> InitialData:
    """Initial data of a run, validated against the admissible classes."""
    grid = grid or cfg.grid.spec()
    u0 = build_profile(grid, cfg.init.u, cfg.seed)
    v0 = build_profile(grid, cfg.init.v, cfg.seed + 1)
    return prepare_initial_data(u0, v0, cfg.model.l)
