"""Smoke tests for utility functions."""

from datetime import datetime

import pytest

from taxis_lab.errors import PersistenceError
from taxis_lab.utils import (
    dump_key_values,
    format_datetime,
    format_float,
    load_key_values,
    run_id,
    trapezoid,
)


class TestUtilsSmoke:
    """Smoke tests for utility functions."""

    def test_format_float_round_trips(self):
        for value in (0.1, 1 / 3, 1e-300, 2.0):
            assert float(format_float(value)) == value

    def test_format_float_integral(self):
        assert format_float(2.0) == "2"

    def test_key_values_round_trip(self):
        values = {"v0_sup": 1.5, "T": 0.1, "m_star": 2 / 3}
        text = dump_key_values(values)
        assert text.splitlines()[0] == "T = 0.10000000000000001"
        assert load_key_values(text) == values

    def test_load_key_values_skips_comments(self):
        assert load_key_values("# constants\n\nb = 1  # knob\n") == {"b": 1.0}

    def test_load_key_values_errors(self):
        with pytest.raises(PersistenceError, match="line 1: expected"):
            load_key_values("no separator\n")
        with pytest.raises(PersistenceError, match="line 2: b is not a number"):
            load_key_values("a = 1\nb = one\n")

    def test_run_id_deterministic(self):
        a = run_id("grid.nx = 8\nmodel.l = 2\n", 0)
        assert a == run_id("  grid.nx = 8\n  model.l = 2  \n\n", 0)
        assert len(a) == 12
        assert a != run_id("grid.nx = 8\nmodel.l = 2\n", 1)
        assert a != run_id("grid.nx = 16\nmodel.l = 2\n", 0)

    def test_trapezoid(self):
        assert trapezoid([0.0, 1.0, 2.0], [0.0, 1.0, 2.0]) == 2.0
        assert trapezoid([0.0], [5.0]) == 0.0

    def test_format_datetime(self):
        assert format_datetime(datetime(2024, 1, 2, 3, 4, 5)) == "2024-01-02 03:04:05"
        assert format_datetime("2024-01-02 03:04:05.123456") == "2024-01-02 03:04:05"
        assert format_datetime(None) == "Unknown"
