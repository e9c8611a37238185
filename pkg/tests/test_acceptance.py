"""Closed-loop runs; deselect with ``-m "not slow"``."""
import csv
import json
import time

import numpy as np
import pytest

from models.scenario_models import parse_scenario
from services.storage import write_run
from src.config import find_preset
from src.metrics import rmse
from src.sim import run

from tests.conftest import scenario_dict

pytestmark = pytest.mark.slow

TIGHT_SOLVER = {"eps_abs": 1e-8, "eps_rel": 1e-8, "max_iters": 50000}
PF_OFFSETS = [2.0, 1.0, -1.0, -2.0, 0.0]
TWO_PRED_OFFSETS = [1.0, -1.0, 0.5, -0.5, 1.0, 0.0]


def perturbed(n_followers, kind, offsets, duration, **overrides):
    return parse_scenario(scenario_dict(
        n_followers=n_followers, horizon=20, duration=duration, tau={"low": 0.3, "high": 0.4},
        topology={"kind": kind}, initial={"position_offsets": offsets}, solver=TIGHT_SOLVER, **overrides,
    ))


@pytest.fixture(scope="module")
def pf_run():
    return run(perturbed(5, "pf", PF_OFFSETS, duration=40.0, lyapunov_monitor=True))


@pytest.fixture(scope="module")
def two_pred_run():
    # split weights meet the weight condition with two predecessors
    weights = {"q_self": 1.0, "q_neighbor": 1.0, "scheme": "split", "r": 1.0}
    return run(perturbed(6, "two-pred", TWO_PRED_OFFSETS, duration=40.0, lyapunov_monitor=True, weights=weights))


def test_terminal_outputs_settle_within_the_time_budget():
    started = time.perf_counter()
    result = run(perturbed(5, "pf", PF_OFFSETS, duration=2.0))
    elapsed = time.perf_counter() - started
    assert np.max(result.history.terminal_deviation[5:]) <= 1e-5
    assert elapsed <= 30.0


def test_terminal_outputs_settle_after_n_steps(pf_run):
    assert np.max(pf_run.history.terminal_deviation[5:]) <= 1e-5


def test_terminal_outputs_settle_with_two_predecessors(two_pred_run):
    assert np.max(two_pred_run.history.terminal_deviation[6:]) <= 1e-5


def assert_lyapunov_decrease(result, n_followers):
    steps = result.lyapunov_steps
    assert len(steps) == 400 - 1 - n_followers
    assert result.weight_report.passed
    for step in steps:
        assert step.delta <= 1e-6 * (1 + step.total)
        assert step.decrease_ok
        assert step.vehicle_bound_ok
        assert step.triangle_bound_ok
        assert step.sum_bound_ok
        # the shifted optimum is a feasible plan for the next problem
        assert step.shifted_residual <= 1e-8
        assert step.shifted_cost_ok
    assert result.lyapunov[-1].total <= 1e-4


def test_lyapunov_function_decreases(pf_run):
    assert_lyapunov_decrease(pf_run, 5)


def test_lyapunov_function_decreases_with_two_predecessors(two_pred_run):
    assert_lyapunov_decrease(two_pred_run, 6)


def desk_config(preset, duration):
    document = json.loads(find_preset(preset).read_text())
    document.update(n_followers=10, duration=duration)
    return parse_scenario(document)


@pytest.fixture(scope="module")
def desk_run():
    return run(desk_config("paper-pf-cth", 40.0))


def test_desk_scale_run_converges(desk_run):
    inputs = desk_run.history.inputs
    assert np.all(inputs >= -3.0) and np.all(inputs <= 3.0)
    errors = desk_run.metrics.spacing_errors
    assert np.all(np.isfinite(errors))
    assert np.max(np.abs(errors)) > 1e-3
    assert np.max(np.abs(errors[-1])) <= 1e-2


def test_csv_aggregates_match_per_step_errors(desk_run, tmp_path):
    write_run(desk_run, tmp_path)
    with open(tmp_path / "errors.csv") as f:
        rows = list(csv.DictReader(f))
    with open(tmp_path / "summary.csv") as f:
        summary = {row["vehicle"]: row for row in csv.DictReader(f)}
    for i in range(1, 11):
        spacing = np.array([float(row[f"spacing_error_{i}"]) for row in rows])
        velocity = np.array([float(row[f"velocity_error_{i}"]) for row in rows])
        assert rmse(spacing) == pytest.approx(float(summary[str(i)]["spacing_rmse"]), abs=1e-12)
        assert rmse(velocity) == pytest.approx(float(summary[str(i)]["velocity_rmse"]), abs=1e-12)


def test_constant_distance_headway_does_worse_at_the_tail(desk_run):
    cdh = run(desk_config("paper-pf-cdh", 10.0))
    steps = cdh.metrics.spacing_errors.shape[0]
    tail_cth = np.max(np.abs(desk_run.metrics.spacing_errors[:steps, -1]))
    tail_cdh = np.max(np.abs(cdh.metrics.spacing_errors[:, -1]))
    assert tail_cdh >= tail_cth
