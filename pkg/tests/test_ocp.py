import numpy as np
import pytest
from pydantic import ValidationError
from scipy.optimize import minimize_scalar

from src.errors import ContractViolation
from src.model import VehicleParams, VehicleState, rollout, system_matrices
from src.ocp import (
    CostWeights,
    OcpSpec,
    Trajectory,
    VehicleController,
    advance_assumed,
    build_ocp,
    init_assumed,
    leader_assumed,
    soft_terminal_penalty,
    stage_cost,
    trajectory_cost,
)
from src.solver import OPTIMAL, ZERO
from src.spacing import PlatoonSpacing

DT = 0.1
SPACING = PlatoonSpacing.uniform(2, 0.2, 1.0)


def follower_spec(state: VehicleState, horizon: int = 10, norm_kind: str = "l1", tau: float = 0.4,
                  soft_terminal: bool = False, r: float = 1.0) -> OcpSpec:
    """Vehicle 1 behind a leader at (0, 20) with a CTH gap of 5 m."""
    params = VehicleParams(tau=tau, u_min=-6.0, u_max=6.0)
    return OcpSpec(
        vehicle=1, params=params, weights=CostWeights(q_self=1.0, q_neighbor={0: 1.0}, r=r, norm_kind=norm_kind),
        horizon=horizon, dt=DT, state=state, own_assumed=init_assumed(state, params, horizon, DT),
        neighbor_assumed={0: leader_assumed(0.0, 20.0, horizon, DT)}, spacing=SPACING,
        info_pre=frozenset({0}), soft_terminal=soft_terminal,
    )


def test_stage_cost_norms():
    w = CostWeights(q_self=1.0, r=1.0, norm_kind="l1")
    assert stage_cost([0.3, -0.4], 0.0, [0.0, 0.0], {}, w, SPACING, 1) == pytest.approx(0.7)
    w2 = CostWeights(q_self=1.0, r=1.0, norm_kind="l2")
    assert stage_cost([0.3, -0.4], 0.0, [0.0, 0.0], {}, w2, SPACING, 1) == pytest.approx(0.5)
    wq = CostWeights(q_self=2.0, r=0.5, norm_kind="quadratic")
    assert stage_cost([0.3, -0.4], 2.0, [0.0, 0.0], {}, wq, SPACING, 1) == pytest.approx(2 * 0.25 + 0.5 * 4)


def test_stage_cost_at_equilibrium_is_zero():
    w = CostWeights(q_self=1.0, q_neighbor={0: 1.0}, r=1.0)
    assert stage_cost([-5.0, 20.0], 0.0, [-5.0, 20.0], {0: np.array([0.0, 20.0])}, w, SPACING, 1) == 0.0


def test_diagonal_l1_weights():
    w = CostWeights(q_self=(2.0, 0.5), r=1.0, norm_kind="l1")
    assert stage_cost([1.0, 1.0], 0.0, [0.0, 0.0], {}, w, SPACING, 1) == pytest.approx(2.5)
    with pytest.raises(ValidationError):
        CostWeights(q_self=(2.0, 0.5), norm_kind="l2")
    with pytest.raises(ValidationError):
        CostWeights(q_self=0.0)


def test_init_assumed_constant_velocity():
    traj = init_assumed(VehicleState(velocity=20.0), VehicleParams(tau=0.5), 5, DT)
    np.testing.assert_allclose(traj.outputs[:, 0], 20.0 * DT * np.arange(6))
    np.testing.assert_allclose(traj.outputs[:, 1], 20.0)
    assert traj.is_consistent(VehicleParams(tau=0.5), DT)
    zero = init_assumed(VehicleState(), VehicleParams(tau=0.5), 5, DT)
    assert not np.any(zero.outputs)


def test_advance_assumed_shifts_inputs_and_extends_state():
    params = VehicleParams(tau=0.5)
    A, B, _ = system_matrices(params, DT)
    inputs = np.array([0.5, -0.25, 0.0])
    states = rollout(np.array([0.0, 20.0, 0.0]), inputs, A, B)
    # force a zero terminal acceleration for the check below
    states[-1, 2] = 0.0
    optimal = Trajectory.from_states(states, inputs)
    advanced = advance_assumed(optimal, params, DT)
    np.testing.assert_array_equal(advanced.inputs, [-0.25, 0.0, 0.0])
    np.testing.assert_array_equal(advanced.states[:-1], states[1:])
    np.testing.assert_allclose(advanced.states[-1], states[-1] + [DT * states[-1, 1], 0.0, 0.0])


def test_advance_assumed_twice_on_equilibrium():
    params = VehicleParams(tau=0.5)
    base = init_assumed(VehicleState(position=0.0, velocity=20.0), params, 6, DT)
    twice = advance_assumed(advance_assumed(base, params, DT), params, DT)
    expected = init_assumed(VehicleState(position=2 * DT * 20.0, velocity=20.0), params, 6, DT)
    np.testing.assert_allclose(twice.states, expected.states, atol=1e-12)


def test_leader_assumed():
    traj = leader_assumed(0.0, 22.0, 10, DT)
    np.testing.assert_allclose(traj.outputs[10], [22.0, 22.0])
    still = leader_assumed(5.0, 0.0, 4, DT)
    np.testing.assert_array_equal(still.outputs[:, 0], 5.0)
    later = leader_assumed(DT * 22.0, 22.0, 10, DT)
    np.testing.assert_allclose(later.outputs[:-1], traj.outputs[1:], atol=1e-12)


def test_trajectory_shape_validation():
    with pytest.raises(ValidationError):
        Trajectory(outputs=np.zeros((3, 3)))
    with pytest.raises(ValidationError):
        Trajectory(outputs=np.zeros((3, 2)), inputs=np.zeros(3))


def test_decision_vector_bookkeeping():
    problem = build_ocp(follower_spec(VehicleState(position=-5.0, velocity=20.0), horizon=60))
    assert problem.n_core == 3 * 61 + 60
    terminal_rows = [tag for tag in problem.conic.row_tags if tag[0][0] == "terminal"]
    assert len(terminal_rows) == 3
    assert problem.conic.cones[0].kind == ZERO


def test_missing_preceding_neighbor_is_an_error():
    spec = follower_spec(VehicleState(position=-5.0, velocity=20.0))
    with pytest.raises(ContractViolation):
        build_ocp(spec.model_copy(update={"info_pre": frozenset()}))


def test_horizon_mismatch_is_an_error():
    state = VehicleState(position=-5.0, velocity=20.0)
    spec = follower_spec(state)
    with pytest.raises(ValidationError):
        OcpSpec(**{**dict(spec), "own_assumed": init_assumed(state, spec.params, 5, DT)})


def test_missing_neighbor_trajectory_is_an_error():
    spec = follower_spec(VehicleState(position=-5.0, velocity=20.0))
    with pytest.raises(ValidationError):
        OcpSpec(**{**dict(spec), "neighbor_assumed": {}})


def test_encoded_assumed_trajectory_satisfies_dynamics():
    spec = follower_spec(VehicleState(position=-6.0, velocity=19.0, acceleration=0.3))
    problem = build_ocp(spec)
    x = problem.encode(spec.own_assumed)
    conic = problem.conic
    n_zero = conic.cones[0].dim
    residual = (conic.A @ x - conic.b)[:n_zero]
    tags = conic.row_tags[:n_zero]
    dyn = [abs(r) for r, tag in zip(residual, tags) if tag[0][0] in ("init", "dyn")]
    assert max(dyn) < 1e-9


def test_equilibrium_gives_zero_input():
    controller = VehicleController(1)
    spec = follower_spec(VehicleState(position=-5.0, velocity=20.0))
    optimal = controller.solve(spec)
    np.testing.assert_allclose(optimal.inputs, 0.0, atol=1e-5)
    assert trajectory_cost(spec, optimal) == pytest.approx(0.0, abs=1e-6)


@pytest.mark.parametrize("norm_kind", ["l1", "quadratic"])
def test_solver_objective_matches_stage_costs(norm_kind):
    controller = VehicleController(1)
    spec = follower_spec(VehicleState(position=-5.5, velocity=20.3), horizon=20, norm_kind=norm_kind)
    optimal = controller.solve(spec)
    assert controller.last_result.status == OPTIMAL
    value = trajectory_cost(spec, optimal)
    assert controller.last_result.objective == pytest.approx(value, abs=1e-5 * (1 + value))
    assert optimal.is_consistent(spec.params, DT)
    # terminal constraint pins the output to the leader minus the gap
    np.testing.assert_allclose(optimal.outputs[-1], spec.neighbor_assumed[0].outputs[-1] - [5.0, 0.0], atol=1e-5)
    assert abs(optimal.states[-1, 2]) < 1e-5


def test_l2_cost_solves():
    controller = VehicleController(1)
    spec = follower_spec(VehicleState(position=-5.5, velocity=20.3), horizon=20, norm_kind="l2")
    optimal = controller.solve(spec)
    assert controller.last_result.status == OPTIMAL
    value = trajectory_cost(spec, optimal)
    assert controller.last_result.objective == pytest.approx(value, abs=1e-3 * (1 + value))


def test_two_step_problem_matches_search():
    tau, r = 0.4, 1.0
    state = VehicleState(position=-5.02, velocity=20.1)
    spec = follower_spec(state, horizon=2, tau=tau, soft_terminal=True, r=r)
    A, B, _ = system_matrices(spec.params, DT)
    ratio = DT / tau

    def value(u0: float) -> float:
        # zero terminal acceleration fixes the second input
        inputs = np.array([u0, -(1.0 - ratio) * u0])
        traj = Trajectory.from_states(rollout(state.as_array(), inputs, A, B), inputs)
        return trajectory_cost(spec, traj) + soft_terminal_penalty(spec, traj)

    grid = np.round(np.arange(-6.0, 6.0001, 0.1), 10)
    values = np.array([value(u) for u in grid])
    best = int(np.argmin(values))
    lo, hi = grid[max(best - 1, 0)], grid[min(best + 1, len(grid) - 1)]
    refined = minimize_scalar(value, bounds=(lo, hi), method="bounded", options={"xatol": 1e-10})
    oracle = min(float(refined.fun), float(values[best]))

    optimal = VehicleController(1).solve(spec)
    solved = trajectory_cost(spec, optimal) + soft_terminal_penalty(spec, optimal)
    assert solved == pytest.approx(oracle, rel=1e-5, abs=1e-5)
