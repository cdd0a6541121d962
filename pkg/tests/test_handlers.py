"""Tests for the command handlers and their exit codes."""

from pathlib import Path

import pytest

from taxis_lab import database
from taxis_lab.auditor import FunctionalSeries
from taxis_lab.grid import GridSpec, ScalarField, write_snapshot
from taxis_lab.main import main
from taxis_lab.utils import run_id


def invoke(*argv: str) -> int:
    with pytest.raises(SystemExit) as exc:
        main(list(argv))
    return int(exc.value.code)


def run_dir_for(out: Path, config_path: Path, seed: int = 0) -> Path:
    return out / "runs" / run_id(config_path.read_text(), seed)


@pytest.fixture
def simulated(tmp_path, write_config):
    """A finished smoke simulation: ``(config path, out dir, run dir)``."""
    path = write_config()
    out = tmp_path / "out"
    assert invoke("simulate", "--config", str(path), "--out", str(out)) == 0
    return path, out, run_dir_for(out, path)


class TestSimulate:
    """The simulate subcommand."""

    def test_writes_artifacts(self, simulated):
        _, _, run_dir = simulated
        for name in ("series.csv", "constants.txt", "metadata.txt", "audit_report.txt"):
            assert (run_dir / name).is_file()
        assert "status = completed" in (run_dir / "metadata.txt").read_text()
        assert "b = 1" in (run_dir / "constants.txt").read_text()
        assert "verdict = FAIL" not in (run_dir / "audit_report.txt").read_text()
        assert "[g_dissipation]" in (run_dir / "audit_report.txt").read_text()

    def test_registry_record(self, simulated):
        path, _, run_dir = simulated
        members = database.get_db_manager().get_members(run_dir.name)
        assert [(m.member, m.status) for m in members] == [("main", "ok")]

    def test_missing_config_flag(self, capsys):
        assert invoke("simulate") == 1
        assert "--config is required" in capsys.readouterr().err

    def test_unknown_key(self, tmp_path, write_config, capsys):
        path = write_config("grid.nz = 4\n")
        assert invoke("simulate", "--config", str(path), "--out", str(tmp_path / "out")) == 1
        assert "grid.nz (line 12): unknown key" in capsys.readouterr().err

    def test_blowup_exit_code(self, tmp_path, write_config, capsys):
        path = write_config("stepper.blowup_threshold = 0.1\n")
        out = tmp_path / "out"
        assert invoke("simulate", "--config", str(path), "--out", str(out)) == 2
        assert "blow-up threshold 0.10000000000000001 exceeded" in capsys.readouterr().err
        record = database.get_db_manager().get_members(run_dir_for(out, path).name)[0]
        assert record.status == "failed"
        assert "blow-up" in record.diagnostic

    def test_seed_override_changes_run_id(self, tmp_path, write_config):
        path = write_config()
        out = tmp_path / "out"
        assert invoke("simulate", "--config", str(path), "--out", str(out), "--seed", "5") == 0
        assert (run_dir_for(out, path, seed=5) / "series.csv").is_file()

    def test_environment_out_wins(self, tmp_path, write_config, monkeypatch):
        path = write_config()
        monkeypatch.setenv("DGT_OUT", str(tmp_path / "env"))
        assert invoke("simulate", "--config", str(path), "--out", str(tmp_path / "cli")) == 0
        assert (run_dir_for(tmp_path / "env", path) / "series.csv").is_file()
        assert not (tmp_path / "cli").exists()

    def test_snapshots_dumped(self, tmp_path, write_config):
        path = write_config("run.dump_snapshots = true\n")
        out = tmp_path / "out"
        assert invoke("simulate", "--config", str(path), "--out", str(out)) == 0
        assert len(list((run_dir_for(out, path) / "snapshots").glob("u_*.dgt"))) == 11


class TestAudit:
    """Offline audits of persisted series."""

    def audit(self, run_dir: Path, series: Path, out: Path) -> int:
        return invoke("audit", "--series", str(series), "--consts", str(run_dir / "constants.txt"), "--out", str(out))

    def test_offline_matches_online(self, simulated, tmp_path):
        _, _, run_dir = simulated
        assert self.audit(run_dir, run_dir / "series.csv", tmp_path / "offline") == 0
        offline = (tmp_path / "offline" / "audit_report.txt").read_text()
        assert offline == (run_dir / "audit_report.txt").read_text()

    def test_truncated_series(self, simulated, tmp_path, capsys):
        _, _, run_dir = simulated
        broken = tmp_path / "broken.csv"
        broken.write_text((run_dir / "series.csv").read_text()[:-20])
        assert self.audit(run_dir, broken, tmp_path / "offline") == 4
        assert "truncated CSV" in capsys.readouterr().err

    def test_forced_mass_violation(self, simulated, tmp_path):
        _, _, run_dir = simulated
        series = FunctionalSeries.read(run_dir / "series.csv")
        series.columns["mass"][-1] = 10.0
        tampered = series.write(tmp_path / "tampered.csv")
        assert self.audit(run_dir, tampered, tmp_path / "offline") == 3
        report = (tmp_path / "offline" / "audit_report.txt").read_text()
        block = report.split("[mass_bound]")[1].split("\n\n")[0]
        assert "verdict = FAIL" in block

    def test_missing_arguments(self):
        assert invoke("audit") == 1

    def test_constants_missing_knob(self, simulated, tmp_path, capsys):
        _, _, run_dir = simulated
        consts = tmp_path / "consts.txt"
        consts.write_text("l = 2\neps = 0.01\n")
        code = invoke("audit", "--series", str(run_dir / "series.csv"), "--consts", str(consts))
        assert code == 1
        assert "constants file lacks 'b'" in capsys.readouterr().err


class TestLab:
    """The lab subcommand."""

    def test_lab_outputs(self, tmp_path, write_config):
        path = write_config("lab.samples = 100\n")
        out = tmp_path / "out"
        assert invoke("lab", "--config", str(path), "--out", str(out), "--jobs", "1") in (0, 3)
        run_dir = run_dir_for(out, path)
        summary = (run_dir / "lab_summary.txt").read_text()
        assert "calibration.samples = 100" in summary
        assert "elementary.violations = 0" in summary
        assert "psi.violations = 0" in summary
        assert len((run_dir / "lab_samples.csv").read_text().splitlines()) == 201


class TestSnapshotDump:
    """Pretty-printing snapshots."""

    def test_dump(self, tmp_path, capsys):
        path = write_snapshot(tmp_path / "u.dgt", ScalarField.constant(GridSpec(4, 4), 0.5), 0.25)
        assert invoke("snapshot-dump", str(path)) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[:2] == ["nx = 4", "ny = 4"]
        assert "t = 0.25" in lines
        assert lines[-1] == "0.5 0.5 0.5 0.5"

    def test_missing_snapshot(self, tmp_path):
        assert invoke("snapshot-dump", str(tmp_path / "none.dgt")) == 4
