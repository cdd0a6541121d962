"""Tests for weak residuals and the convergence study."""

import math

import numpy as np
import pytest

from taxis_lab.auditor import FunctionalRecorder
from taxis_lab.config import parse_config
from taxis_lab.errors import ConfigError
from taxis_lab.grid import GridSpec, ScalarField, face_gradient, integrate
from taxis_lab.model import ModelParams, gaussian_bump, prepare_initial_data
from taxis_lab.services import RunService
from taxis_lab.stepper import StepControl, run, sample_grid
from taxis_lab.weak import (
    ConvergenceReport,
    ResidualLevel,
    TestFunction,
    budget_residuals,
    evaluate_bank,
    make_bank,
    residual_u,
    residual_v,
    run_convergence_study,
    sup_difference,
)

STUDY_CONFIG = """\
grid.nx = 4
grid.ny = 4
model.l = 2
model.eps_list = 0.1, 0.05, 0.025
init.u.kind = constant
init.u.value = 0.5
init.v.kind = constant
init.v.value = 1
run.T = 0.1
run.samples = 101
converge.grid_list = 4, 8, 16
"""

FAST_STUDY_CONFIG = STUDY_CONFIG.replace("run.samples = 101", "run.samples = 51")

# Nonconstant data; eps stays small enough that the sups agree within the band.
BUMP_STUDY_CONFIG = """\
grid.nx = 8
grid.ny = 8
model.l = 2
model.eps_list = 0.01, 0.001, 0.0001
init.u.kind = gaussian-bump
init.u.cx = 0.4
init.u.sigma = 0.15
init.u.amplitude = 1
init.u.floor = 0.5
init.v.kind = gaussian-bump
init.v.cx = 0.6
init.v.sigma = 0.25
init.v.amplitude = 0.3
init.v.floor = 0.7
run.T = 0.05
run.samples = 101
converge.grid_list = 8, 16, 32
"""


@pytest.fixture(scope="module")
def dense_logistic():
    """Homogeneous trajectory sampled densely enough for weak residuals."""
    grid = GridSpec(4, 4)
    params = ModelParams(l=2.0, eps=0.01)
    init = prepare_initial_data(ScalarField.constant(grid, 0.49), ScalarField.constant(grid, 1.0), 2.0)
    trajectory = run(params, init, 1.0, sample_grid(1.0, 201), control=StepControl(dt_max=2e-4))
    return params, trajectory


@pytest.fixture(scope="module")
def stepwise_bump():
    """Nonconstant trajectory sampled after every step, with its functional series."""
    grid = GridSpec(8, 8)
    params = ModelParams(l=2.0, eps=0.01)
    u0 = gaussian_bump(grid, 0.4, 0.5, 0.2, 0.5, 0.5)
    v0 = gaussian_bump(grid, 0.6, 0.5, 0.25, 0.3, 0.7)
    recorder = FunctionalRecorder(params, [2.0])
    init = prepare_initial_data(u0, v0, 2.0)
    trajectory = run(params, init, 0.03125, sample_grid(0.03125, 61), observers=[recorder])
    return params, trajectory, recorder.series


class TestTestFunction:
    """Temporal cutoff and spatial profiles."""

    def test_cutoff_values(self):
        tf = TestFunction(t_cut=2.0)
        chi = tf.chi(np.array([0.0, 1.0, 2.0, 3.0]))
        assert chi[0] == 1.0
        assert 0 < chi[1] < 1
        assert chi[2] == 0.0 and chi[3] == 0.0

    def test_cutoff_derivative(self):
        tf = TestFunction(t_cut=1.0)
        t = np.linspace(0.05, 0.9, 18)
        numeric = (tf.chi(t + 1e-7) - tf.chi(t - 1e-7)) / 2e-7
        np.testing.assert_allclose(tf.chi_prime(t), numeric, rtol=1e-5, atol=1e-8)

    def test_constant_profile(self, small_grid):
        tf = TestFunction(t_cut=1.0)
        assert tf.spatial(small_grid).min() == tf.spatial(small_grid).max() == 1.0
        assert tf.analytic_face_gradient(small_grid).max_abs() == 0.0

    def test_bump_gradient_interior(self):
        g = GridSpec(64, 64)
        tf = TestFunction(t_cut=1.0, cx=0.5, cy=0.5, r0=0.2)
        discrete = face_gradient(tf.spatial(g))
        exact = tf.analytic_face_gradient(g)
        assert np.abs(discrete.fx[:, 1:-1] - exact.fx[:, 1:-1]).max() <= 1e-2 * exact.max_abs()

    def test_bank(self, small_grid):
        bank = make_bank(0, 5, 1.0, small_grid)
        assert len(bank) == 5
        assert bank[0].r0 is None
        assert all(tf.t_cut == 1.0 for tf in bank)
        assert make_bank(0, 5, 1.0, small_grid) == bank

    def test_bank_too_small(self, small_grid):
        with pytest.raises(ConfigError, match="at least 5 members"):
            make_bank(0, 4, 1.0, small_grid)


class TestResiduals:
    """Weak identities on homogeneous trajectories."""

    def test_population_residual_small(self, dense_logistic):
        params, trajectory = dense_logistic
        assert residual_u(trajectory, params, TestFunction(t_cut=1.0)) <= 1e-4

    def test_nutrient_residual_small(self, dense_logistic):
        _, trajectory = dense_logistic
        assert residual_v(trajectory, TestFunction(t_cut=1.0)) <= 1e-4

    def test_bank_residuals(self, dense_logistic):
        params, trajectory = dense_logistic
        bank = make_bank(1, 5, 1.0, trajectory.states[0].u.grid)
        values = evaluate_bank(trajectory, params, bank, workers=2)
        assert len(values) == 5
        assert max(max(pair) for pair in values) <= 1e-4

    def test_zero_cutoff(self, dense_logistic):
        params, trajectory = dense_logistic
        assert residual_u(trajectory, params, TestFunction(t_cut=0.0)) == 0.0
        assert residual_v(trajectory, TestFunction(t_cut=0.0)) == 0.0

    def test_support_beyond_trajectory(self, dense_logistic):
        params, trajectory = dense_logistic
        with pytest.raises(ConfigError, match="exceeds"):
            residual_u(trajectory, params, TestFunction(t_cut=2.0))

    def test_support_too_sparse(self, logistic_setup):
        params, init = logistic_setup
        trajectory = run(params, init, 0.1, sample_grid(0.1, 11))
        with pytest.raises(ConfigError, match="samples in the support"):
            residual_v(trajectory, TestFunction(t_cut=0.1))


class TestStepConsistency:
    """Residuals summed the way the stepper advances vanish on step-sampled runs."""

    def test_one_step_per_sample(self, stepwise_bump):
        _, trajectory, _ = stepwise_bump
        assert trajectory.steps == len(trajectory.times) - 1

    def test_nutrient_residual_vanishes_for_every_profile(self, stepwise_bump):
        _, trajectory, _ = stepwise_bump
        scale = max(1.0, max(integrate(s.v) for s in trajectory.states))
        for tf in make_bank(3, 6, 0.03125, trajectory.states[0].v.grid):
            assert residual_v(trajectory, tf, rule="imex") <= 1e-8 * scale

    def test_population_residual_vanishes_for_constant_profile(self, stepwise_bump):
        params, trajectory, _ = stepwise_bump
        tf = TestFunction(t_cut=0.03125)
        scale = max(1.0, max(integrate(s.u) for s in trajectory.states))
        exact = residual_u(trajectory, params, tf, rule="imex")
        assert exact <= 1e-8 * scale
        assert residual_u(trajectory, params, tf) > 10 * exact

    def test_budgets_match_weak_residuals(self, stepwise_bump):
        params, trajectory, series = stepwise_bump
        tf = TestFunction(t_cut=0.03125)
        r_u, r_v = budget_residuals(series, tf)
        scale = max(1.0, float(series.column("mass").max()), float(series.column("v_mass").max()))
        assert r_u <= 1e-8 * scale and r_v <= 1e-8 * scale
        assert abs(r_u - residual_u(trajectory, params, tf, rule="imex")) <= 1e-8 * scale
        assert abs(r_v - residual_v(trajectory, tf, rule="imex")) <= 1e-8 * scale

    def test_population_budget_on_sparse_samples(self, logistic_setup):
        params, init = logistic_setup
        recorder = FunctionalRecorder(params, [2.0])
        trajectory = run(
            params, init, 0.5, sample_grid(0.5, 101), observers=[recorder], control=StepControl(dt_max=1e-3)
        )
        tf = TestFunction(t_cut=0.5)
        r_u, _ = budget_residuals(recorder.series, tf)
        assert trajectory.steps > 100
        assert r_u == pytest.approx(residual_u(trajectory, params, tf, rule="imex"), abs=1e-10)

    def test_unknown_rule(self, dense_logistic):
        params, trajectory = dense_logistic
        with pytest.raises(ConfigError, match="unknown quadrature rule 'simpson'"):
            residual_u(trajectory, params, TestFunction(t_cut=1.0), rule="simpson")
        with pytest.raises(ConfigError, match="unknown quadrature rule"):
            residual_v(trajectory, TestFunction(t_cut=1.0), rule="midpoint")

    def test_budgets_need_constant_profile(self, stepwise_bump):
        _, _, series = stepwise_bump
        with pytest.raises(ConfigError, match="constant test profile"):
            budget_residuals(series, TestFunction(t_cut=0.03125, r0=0.2))


class TestConvergenceReport:
    """Monotonicity rules."""

    @pytest.mark.parametrize(
        "values,expected",
        [
            ([1.0, 0.5, 0.25], True),
            ([1.0, 1.2, 1.4], True),
            ([1.0, 2.0], False),
            ([1e-5, 5e-5], True),
            ([1.0, math.nan], False),
            ([], True),
        ],
    )
    def test_decreasing(self, values, expected):
        assert ConvergenceReport.decreasing(values, band=0.25, floor=1e-4) is expected

    @pytest.mark.parametrize(
        "values,expected",
        [
            ([1.0, 0.5, 0.25], True),
            ([1.0, 0.8, 0.6], False),
            ([1e-3, 9e-4], False),
            ([1e-5, 5e-5], True),
            ([1.0, math.nan], False),
            ([], True),
        ],
    )
    def test_shrinking(self, values, expected):
        assert ConvergenceReport.shrinking(values, factor=2.0, floor=1e-4) is expected

    def test_residuals_need_factor(self):
        levels = [ResidualLevel(m, f"eps{m}_grid{m}", 0.1, 4, 4, r, r) for m, r in enumerate([1.0, 0.8, 0.6])]
        report = ConvergenceReport(
            [0.1, 0.05, 0.025], [(4, 4)] * 3, 0.25, 1e-4, cauchy=[0.1, 0.05], residuals=levels
        )
        assert report.decreasing([r.residual_u for r in levels], report.band, report.floor)
        assert not report.residuals_monotone
        assert "residual_factor = 2" in report.summary()
        report.residual_factor = 1.25
        assert report.residuals_monotone and report.passed

    def test_residuals_csv_carries_budgets(self):
        level = ResidualLevel(0, "eps0_grid0", 0.1, 4, 4, 0.5, 0.25, budget_u=0.125)
        report = ConvergenceReport([0.1, 0.05, 0.025], [(4, 4)] * 3, 0.25, 1e-4, residuals=[level])
        lines = report.residuals_csv().splitlines()
        assert lines[0] == "level,member,eps,nx,ny,residual_u,residual_v,budget_u,budget_v"
        assert lines[1] == "0,eps0_grid0,0.10000000000000001,4,4,0.5,0.25,0.125,nan"

    def test_no_residuals_fails(self):
        report = ConvergenceReport([0.1, 0.05, 0.025], [(4, 4)] * 3, 0.25, 1e-4, cauchy=[0.1, 0.05])
        assert report.cauchy_monotone
        assert not report.passed


class TestConvergenceStudy:
    """Full eps x grid matrix on homogeneous data."""

    def test_matrix_validation(self):
        cfg = parse_config(STUDY_CONFIG)
        with pytest.raises(ConfigError, match="at least 3 eps"):
            run_convergence_study(cfg, [0.1, 0.05], [4, 8, 16], 0.1)
        with pytest.raises(ConfigError, match="strictly decreasing"):
            run_convergence_study(cfg, [0.1, 0.1, 0.05], [4, 8, 16], 0.1)
        with pytest.raises(ConfigError, match="strictly refining"):
            run_convergence_study(cfg, [0.1, 0.05, 0.025], [4, 16, 8], 0.1)

    def test_needs_dense_samples(self):
        cfg = parse_config(STUDY_CONFIG.replace("run.samples = 101", "run.samples = 20"))
        with pytest.raises(ConfigError, match="run.samples > 50"):
            run_convergence_study(cfg, [0.1, 0.05, 0.025], [4, 8, 16], 0.1)

    @pytest.mark.slow
    def test_homogeneous_study(self, tmp_path):
        cfg = parse_config(STUDY_CONFIG)
        report = run_convergence_study(
            cfg, cfg.model.eps_list, cfg.converge.grid_list, cfg.run.T, tmp_path, RunService(jobs=1)
        )
        assert [c.label for c in report.cells][:4] == ["eps0_grid0", "eps0_grid1", "eps0_grid2", "eps1_grid0"]
        assert not report.failed_cells
        assert len(report.cauchy) == 2
        assert report.cauchy[1] < report.cauchy[0]
        assert [r.label for r in report.residuals] == ["eps0_grid0", "eps1_grid1", "eps2_grid2"]
        assert report.passed
        assert report.uniform is not None
        report.write(tmp_path)
        for name in ("cells.csv", "cauchy.csv", "residuals.csv", "uniform_report.txt", "summary.txt"):
            assert (tmp_path / name).is_file()
        assert (tmp_path / "eps2_grid2" / "series.csv").is_file()
        assert "verdict = PASS" in (tmp_path / "summary.txt").read_text()

    def test_sup_difference_respects_tau(self, logistic_setup):
        params, init = logistic_setup
        a = run(params, init, 0.1, sample_grid(0.1, 3))
        b = run(params.model_copy(update={"eps": 0.02}), init, 0.1, sample_grid(0.1, 3))
        assert sup_difference(a, b, 0.0) >= sup_difference(a, b, 0.06) > 0

    def test_uniform_audit_follows_p_list(self, tmp_path):
        cfg = parse_config(FAST_STUDY_CONFIG + "audit.p_list = 2\n")
        report = run_convergence_study(cfg, cfg.model.eps_list, [4, 6, 8], 0.05, tmp_path)
        assert report.uniform is not None
        assert "lp_4.spread" not in report.uniform.constants
        assert "l2u.spread" in report.uniform.constants
        report.write(tmp_path)
        assert (tmp_path / "uniform_report.txt").is_file()

    def test_uniform_audit_failure_still_writes_report(self, tmp_path, mocker, caplog):
        mocker.patch("taxis_lab.weak.audit_uniform_in_eps", side_effect=ConfigError("series lacks column 'lp_4'"))
        cfg = parse_config(FAST_STUDY_CONFIG)
        report = run_convergence_study(cfg, cfg.model.eps_list, [4, 6, 8], 0.05, tmp_path)
        assert report.uniform is None
        assert "Uniform-in-eps audit skipped" in caplog.text
        report.write(tmp_path)
        assert (tmp_path / "summary.txt").is_file()
        assert not (tmp_path / "uniform_report.txt").exists()

    def test_budget_columns_in_study(self, tmp_path):
        cfg = parse_config(FAST_STUDY_CONFIG)
        report = run_convergence_study(cfg, cfg.model.eps_list, [4, 6, 8], 0.05, tmp_path)
        assert all(math.isfinite(r.budget_u) and math.isfinite(r.budget_v) for r in report.residuals)
        assert all(r.budget_v <= 1e-8 for r in report.residuals)

    @pytest.mark.slow
    def test_bump_study(self, tmp_path):
        """Residuals shrink under joint (h, dt, eps) refinement and the sups agree across eps."""
        cfg = parse_config(BUMP_STUDY_CONFIG)
        report = run_convergence_study(cfg, cfg.model.eps_list, cfg.converge.grid_list, cfg.run.T, tmp_path)
        assert not report.failed_cells
        r_u = [r.residual_u for r in report.residuals]
        r_v = [r.residual_v for r in report.residuals]
        assert r_u[0] > r_u[1] > r_u[2]
        assert r_u[2] <= r_u[0] / 2
        assert r_v[2] <= max(r_v[0] / 2, report.floor)
        assert report.uniform is not None and report.uniform.passed, report.uniform.render()
