import json

import numpy as np
import pytest

from models.scenario_models import LeaderProfile, parse_scenario
from services.tasks import SolvePool
from src.config import find_preset, get_thread_count, list_presets
from src.errors import ScenarioError, TopologyError
from src.metrics import compute_metrics, max_abs, rmse
from src.sim import (build_graph, build_spacing, build_weights, initial_states, leader_acceleration,
                     leader_position, leader_velocity, run, sample_taus)
from src.spacing import PlatoonSpacing

from tests.conftest import scenario_dict

RAMP = LeaderProfile(initial_position=0.0, segments=[{"duration": 2.0, "start_velocity": 20.0, "end_velocity": 22.0}])


def test_leader_profile():
    assert leader_velocity(RAMP, 0.0) == 20.0
    assert leader_velocity(RAMP, 1.0) == pytest.approx(21.0)
    assert leader_velocity(RAMP, 3.0) == 22.0
    assert leader_acceleration(RAMP, 1.0) == pytest.approx(1.0)
    assert leader_acceleration(RAMP, 3.0) == 0.0
    assert leader_position(RAMP, 1.0) == pytest.approx(20.5)
    assert leader_position(RAMP, 3.0) == pytest.approx(42.0 + 22.0)


def test_leader_position_matches_numeric_integral():
    profile = LeaderProfile(initial_position=5.0, segments=[
        {"duration": 1.5, "start_velocity": 10.0},
        {"duration": 2.0, "start_velocity": 10.0, "end_velocity": 14.0},
        {"duration": 1.0, "start_velocity": 14.0, "end_velocity": 12.0},
    ])
    grid = np.linspace(0.0, 6.0, 60001)
    velocities = np.array([leader_velocity(profile, t) for t in grid])
    numeric = 5.0 + np.concatenate([[0.0], np.cumsum(0.5 * (velocities[1:] + velocities[:-1]) * np.diff(grid))])
    for idx in (0, 12345, 30000, 45000, 60000):
        assert leader_position(profile, grid[idx]) == pytest.approx(numeric[idx], abs=1e-6)


def test_metrics_on_hand_built_history():
    spacing = PlatoonSpacing.uniform(1, 0.0, 5.0)
    states = np.zeros((3, 2, 3))
    states[:, 0, 1] = states[:, 1, 1] = 20.0
    states[:, 1, 0] = -5.0 + np.array([-1.0, 1.0, -1.0])
    table = compute_metrics(np.arange(3) * 0.1, states, np.zeros((2, 1)), spacing)
    np.testing.assert_allclose(table.spacing_errors[:, 0], [1.0, -1.0, 1.0])
    assert rmse(table.spacing_errors)[0] == pytest.approx(1.0)
    assert max_abs(table.velocity_errors)[0] == 0.0
    summary = table.summaries()[0]
    assert summary.vehicle == 1
    assert summary.spacing_rmse == pytest.approx(1.0)
    assert summary.spacing_max_abs == pytest.approx(1.0)


def test_quartiles():
    spacing = PlatoonSpacing.uniform(1, 0.0, 5.0)
    table = compute_metrics(np.zeros(1), np.zeros((1, 2, 3)), np.zeros((0, 1)), spacing)
    assert table.quartiles(np.array([1.0, 2.0, 3.0, 4.0, 5.0])) == (1.0, 2.0, 3.0, 4.0, 5.0)
    # vehicle 1 is left out of the box statistics
    assert table.trailing_quartiles([100.0, 1.0, 2.0, 3.0, 4.0, 5.0]) == (1.0, 2.0, 3.0, 4.0, 5.0)
    assert table.trailing_quartiles([100.0]) is None


def test_taus_are_seeded():
    config = parse_scenario(scenario_dict(tau={"low": 0.25, "high": 0.9}))
    taus = sample_taus(config)
    assert taus.shape == (3,)
    assert np.all((taus >= 0.25) & (taus <= 0.9))
    np.testing.assert_array_equal(taus, sample_taus(config))
    other = parse_scenario(scenario_dict(tau={"low": 0.25, "high": 0.9}, seed=8))
    assert not np.array_equal(taus, sample_taus(other))
    pinned = parse_scenario(scenario_dict(tau={"low": 0.25, "high": 0.9, "seed": 7}, seed=8))
    np.testing.assert_array_equal(taus, sample_taus(pinned))


def test_split_and_per_edge_weights():
    config = parse_scenario(scenario_dict(
        topology={"kind": "bd"},
        weights={"scheme": "split", "per_edge": [{"sender": 2, "receiver": 3, "q": 0.25}],
                 "per_vehicle_q_self": {"2": 3.0}},
    ))
    weights = build_weights(config, build_graph(config))
    assert weights[1].q_neighbor == {0: 0.5, 2: 0.5}
    assert weights[2].q_self == 3.0
    assert weights[3].q_neighbor == {2: 0.25}


def test_initial_states_sit_on_the_desired_spacing():
    config = parse_scenario(scenario_dict(initial={"position_offsets": [0.5, 0.0, -0.5]}))
    states = initial_states(config, build_spacing(config))
    assert [s.position for s in states] == pytest.approx([0.0, -4.5, -10.0, -15.5])
    assert all(s.velocity == 20.0 for s in states)


def test_jitter_is_reproducible():
    config = parse_scenario(scenario_dict(initial={"position_jitter": 0.3}))
    first = [s.position for s in initial_states(config, build_spacing(config))]
    second = [s.position for s in initial_states(config, build_spacing(config))]
    assert first == second
    assert all(abs(p + 5.0 * i) <= 0.3 for i, p in enumerate(first))


def test_equilibrium_run_stays_put():
    result = run(parse_scenario(scenario_dict()))
    metrics = result.metrics
    assert metrics.spacing_errors.shape == (11, 3)
    assert metrics.inputs.shape == (10, 3)
    assert np.max(np.abs(metrics.spacing_errors)) <= 1e-5
    assert np.max(np.abs(metrics.velocity_errors)) <= 1e-5
    assert np.max(result.history.terminal_deviation) <= 1e-5
    assert result.weight_report.passed


def test_runs_are_deterministic():
    document = scenario_dict(initial={"position_offsets": [0.2, -0.1, 0.1]})
    first = run(parse_scenario(document))
    second = run(parse_scenario(document))
    np.testing.assert_array_equal(first.history.states, second.history.states)
    np.testing.assert_array_equal(first.history.inputs, second.history.inputs)


def test_thread_pool_matches_inline_run():
    document = scenario_dict(initial={"position_offsets": [0.2, -0.1, 0.1]})
    inline = run(parse_scenario(document))
    with SolvePool(workers=3) as pool:
        threaded = run(parse_scenario(document), pool=pool)
    np.testing.assert_array_equal(inline.history.states, threaded.history.states)


def test_inputs_respect_bounds():
    document = scenario_dict(initial={"position_offsets": [0.3, -0.2, 0.1]},
                             input_bounds={"u_min": -2.0, "u_max": 2.0}, horizon=15)
    result = run(parse_scenario(document))
    assert np.all(result.history.inputs >= -2.0 - 1e-12)
    assert np.all(result.history.inputs <= 2.0 + 1e-12)


def test_inadmissible_topology_is_refused():
    config = parse_scenario(scenario_dict(topology={"kind": "custom", "edges": [[0, 1], [2, 3]]}))
    with pytest.raises(TopologyError):
        run(config)


def test_pool_raises_lowest_vehicle_error():
    def fail(i):
        def job():
            raise ValueError(f"vehicle {i}")
        return job

    with SolvePool(workers=2) as pool:
        assert pool.run({2: lambda: "b", 1: lambda: "a"}) == {1: "a", 2: "b"}
        with pytest.raises(ValueError, match="vehicle 2"):
            pool.run({3: fail(3), 1: lambda: "a", 2: fail(2)})


@pytest.mark.parametrize("overrides, key", [
    ({"bogus": 1}, "bogus"),
    ({"horizon": 0}, "horizon"),
    ({"tau": {"values": [0.3]}}, "tau.values"),
    ({"weights": {"per_edge": [{"sender": 2, "receiver": 1, "q": 1.0}]}}, "weights.per_edge"),
    ({"leader": {"segments": [{"duration": 1.0, "start_velocity": 20.0, "end_velocity": 21.0},
                              {"duration": 1.0, "start_velocity": 20.0}]}}, "leader velocity jumps"),
    ({"norm_kind": "l2", "weights": {"q_self": [1.0, 2.0]}}, "per-component"),
])
def test_scenario_errors_name_the_problem(overrides, key):
    with pytest.raises(ScenarioError) as excinfo:
        parse_scenario(scenario_dict(**overrides))
    assert key in str(excinfo.value)
    assert excinfo.value.exit_code == 2


def test_scenario_json_and_run_echo():
    document = scenario_dict()
    from_text = parse_scenario(json.dumps(document))
    echoed = parse_scenario({"scenario": document, "fingerprint": "0" * 16})
    assert from_text == echoed
    with pytest.raises(ScenarioError):
        parse_scenario("{not json")


def test_presets_parse(monkeypatch):
    monkeypatch.delenv("DMPC_PRESET_DIR", raising=False)
    names = list_presets()
    assert {"paper-pf-cth", "paper-pf-cdh", "paper-bd-cth", "paper-bd-cdh"} <= set(names)
    for name in names:
        config = parse_scenario(find_preset(name).read_text())
        assert config.n_followers == 50
        assert config.horizon == 60


def test_preset_dir_from_environment(tmp_path, monkeypatch):
    (tmp_path / "mine.json").write_text(json.dumps(scenario_dict()))
    monkeypatch.setenv("DMPC_PRESET_DIR", str(tmp_path))
    assert find_preset("mine") == tmp_path / "mine.json"
    assert "mine" in list_presets()
    monkeypatch.setenv("DMPC_THREADS", "0")
    assert get_thread_count() == 1


def test_soft_terminal_run_handles_unreachable_target():
    document = scenario_dict(initial={"position_offsets": [0.5, -0.3, 0.2]}, soft_terminal=True)
    result = run(parse_scenario(document))
    inputs = result.history.inputs
    assert inputs.shape == (10, 3)
    assert np.all(np.abs(inputs) <= 6.0 + 1e-12)
    assert np.all(np.isfinite(result.history.states))
    # the penalty still pulls every follower towards its desired spacing
    errors = np.abs(result.metrics.spacing_errors)
    assert errors[-1].sum() < errors[0].sum()
