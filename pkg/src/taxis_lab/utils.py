"""Utility functions for the taxis lab."""

import hashlib
import logging
import math
from datetime import datetime
from typing import Dict, Iterable, Mapping

from .errors import PersistenceError

logger = logging.getLogger(__name__)


def format_float(value: float) -> str:
    """Format a float with 17 significant digits so it round-trips."""
    return format(float(value), ".17g")


def dump_key_values(values: Mapping[str, float]) -> str:
    """Render ``key = value`` lines in key order."""
    return "".join(f"{key} = {format_float(values[key])}\n" for key in sorted(values))


def load_key_values(text: str) -> Dict[str, float]:
    """Parse ``key = value`` lines; ``#`` comments and blank lines are ignored."""
    values: Dict[str, float] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise PersistenceError(f"line {number}: expected 'key = value', got {raw!r}")
        try:
            values[key.strip()] = float(value)
        except ValueError as e:
            raise PersistenceError(f"line {number}: {key.strip()} is not a number") from e
    return values


def run_id(config_text: str, seed: int) -> str:
    """Deterministic 12-hex-digit id of a normalized config and seed."""
    normalized = "\n".join(line.strip() for line in config_text.strip().splitlines())
    digest = hashlib.sha256(f"{normalized}\nseed={seed}".encode("utf-8"))
    return digest.hexdigest()[:12]


def trapezoid(times: Iterable[float], values: Iterable[float]) -> float:
    """Trapezoidal time integral; zero for fewer than two samples."""
    t = list(times)
    y = list(values)
    return math.fsum(0.5 * (t[k + 1] - t[k]) * (y[k + 1] + y[k]) for k in range(len(t) - 1))


def format_datetime(dt: object) -> str:
    """Format datetime object or string for display (YYYY-MM-DD HH:MM:SS)."""
    if isinstance(dt, datetime):
        return dt.strftime("%Y-%m-%d %H:%M:%S")
    return str(dt)[:19] if dt else "Unknown"
