"""Tests for member runs and the worker pool."""

import math

import pytest

from taxis_lab.config import parse_config
from taxis_lab.grid import GridSpec
from taxis_lab.services import MemberTask, RunService, resolve_jobs, run_member


class TestResolveJobs:
    """Worker count resolution."""

    def test_explicit_wins(self, monkeypatch):
        monkeypatch.setenv("DGT_JOBS", "5")
        assert resolve_jobs(2) == 2

    def test_environment(self, monkeypatch):
        monkeypatch.setenv("DGT_JOBS", "3")
        assert resolve_jobs() == 3

    def test_physical_cores(self, mocker):
        mocker.patch("taxis_lab.services.psutil.cpu_count", return_value=6)
        assert resolve_jobs() == 6

    def test_unknown_core_count(self, mocker):
        mocker.patch("taxis_lab.services.psutil.cpu_count", return_value=None)
        assert resolve_jobs() == 1

    def test_at_least_one(self):
        assert resolve_jobs(0) == 1


class TestRunService:
    """Ordered mapping over work items."""

    def test_inline_map(self):
        assert RunService(jobs=1).map(math.sqrt, [1.0, 4.0, 9.0]) == [1.0, 2.0, 3.0]

    def test_pool_preserves_order(self):
        items = [float(k * k) for k in range(8)]
        assert RunService(jobs=2).map(math.sqrt, items) == [float(k) for k in range(8)]


class TestRunMember:
    """One matrix cell."""

    def test_successful_member(self, tmp_path, write_config):
        cfg = parse_config(write_config().read_text())
        result = run_member(MemberTask("eps0_grid0", cfg, 0.05, GridSpec(4, 4), str(tmp_path / "m")))
        assert result.ok
        assert result.trajectory is not None and result.series is not None
        assert len(result.series) == 11
        assert result.constants["eps"] == 0.05
        assert result.constants["dt_max"] == result.trajectory.max_dt > 0
        for name in ("series.csv", "u_final.dgt", "v_final.dgt"):
            assert (tmp_path / "m" / name).is_file()

    def test_blowup_becomes_failed(self, write_config):
        cfg = parse_config(write_config("stepper.blowup_threshold = 0.1\n").read_text())
        result = run_member(MemberTask("eps0_grid0", cfg, 0.05, GridSpec(4, 4)))
        assert result.status == "failed"
        assert "blow-up threshold exceeded" in result.diagnostic

    def test_package_error_becomes_failed(self, write_config):
        text = write_config().read_text().replace("init.v.value = 1", "init.v.value = 0")
        result = run_member(MemberTask("eps0_grid0", parse_config(text), 0.05, GridSpec(4, 4)))
        assert result.status == "failed"
        assert "v0 must be positive" in result.diagnostic
        assert result.trajectory is None

    @pytest.mark.parametrize("jobs", [1, 2])
    def test_run_members_order(self, write_config, jobs):
        cfg = parse_config(write_config().read_text())
        tasks = [MemberTask(f"eps{k}_grid0", cfg, eps, GridSpec(4, 4)) for k, eps in enumerate((0.1, 0.05))]
        results = RunService(jobs=jobs).run_members(tasks)
        assert [r.label for r in results] == ["eps0_grid0", "eps1_grid0"]
        assert all(r.ok for r in results)


class TestPublicSurface:
    """Package-level exports."""

    def test_exports(self):
        import taxis_lab

        assert taxis_lab.__all__ == [
            "config", "GridSpec", "ScalarField", "ModelParams", "SimState", "StepControl", "run",
        ]
        assert not hasattr(taxis_lab, "run_service")
