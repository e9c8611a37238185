"""
Synchronous platoon simulation.

Each timestep every follower solves its problem against the assumed
trajectories received at the end of the previous step, shifts its optimum
into next step's assumed trajectory, applies the first optimal input, and
the bus exchanges the new assumed trajectories. The virtual leader follows
its velocity profile exactly and publishes a constant-velocity extrapolation.
"""

import logging
from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict

from models.report_models import LyapunovRow, LyapunovStep, WeightReport
from models.scenario_models import LeaderProfile, ScenarioConfig

from .comm import SynchronousBus, TrajectoryMessage
from .errors import ContractViolation
from .metrics import MetricsTable, compute_metrics
from .model import VehicleParams, VehicleState, step
from .ocp import CostWeights, OcpSpec, Trajectory, VehicleController, advance_assumed, init_assumed, \
    leader_assumed, weight_vector
from .spacing import PlatoonSpacing, desired_output
from .stability import FEASIBILITY_TOL, LyapunovMonitor, VehicleSnapshot, check_weight_condition
from .topology import TopologyGraph, all_vehicle_sets, generate, require_admissible

logger = logging.getLogger(__name__)


# -- leader profile -------------------------------------------------------------

def leader_velocity(profile: LeaderProfile, t: float) -> float:
    if t < 0:
        raise ContractViolation(f"leader profile is not defined for t = {t}")
    elapsed = 0.0
    for seg in profile.segments:
        if t <= elapsed + seg.duration:
            frac = (t - elapsed) / seg.duration
            return seg.start_velocity + frac * (seg.final_velocity - seg.start_velocity)
        elapsed += seg.duration
    return profile.segments[-1].final_velocity


def leader_acceleration(profile: LeaderProfile, t: float) -> float:
    elapsed = 0.0
    for seg in profile.segments:
        if t < elapsed + seg.duration:
            return (seg.final_velocity - seg.start_velocity) / seg.duration
        elapsed += seg.duration
    return 0.0


def leader_position(profile: LeaderProfile, t: float) -> float:
    """Exact integral of the piecewise-linear velocity."""
    position = profile.initial_position
    elapsed = 0.0
    for seg in profile.segments:
        span = min(seg.duration, t - elapsed)
        if span <= 0:
            return position
        v_end = leader_velocity(profile, elapsed + span)
        position += 0.5 * (seg.start_velocity + v_end) * span
        elapsed += seg.duration
    if t > elapsed:
        position += profile.segments[-1].final_velocity * (t - elapsed)
    return position


def leader_state(profile: LeaderProfile, t: float) -> VehicleState:
    return VehicleState(position=leader_position(profile, t), velocity=leader_velocity(profile, t),
                        acceleration=leader_acceleration(profile, t))


# -- scenario assembly ----------------------------------------------------------

def build_graph(config: ScenarioConfig) -> TopologyGraph:
    return generate(config.topology.kind, config.n_followers, config.topology.edges)


def sample_taus(config: ScenarioConfig) -> np.ndarray:
    if config.tau.values is not None:
        return np.array(config.tau.values, dtype=float)
    seed = config.seed if config.tau.seed is None else config.tau.seed
    rng = np.random.default_rng(seed)
    return rng.uniform(config.tau.low, config.tau.high, config.n_followers)


def build_spacing(config: ScenarioConfig) -> PlatoonSpacing:
    s = config.spacing
    return PlatoonSpacing.uniform(config.n_followers, s.delta_h, s.delta_safe, zero_first=s.zero_first,
                                  overrides=s.overrides)


def _as_weight(w: np.ndarray):
    return float(w[0]) if w[0] == w[1] else (float(w[0]), float(w[1]))


def build_weights(config: ScenarioConfig, graph: TopologyGraph) -> Dict[int, CostWeights]:
    ws = config.weights
    sets = all_vehicle_sets(graph)
    per_edge = {(e.sender, e.receiver): e.q for e in ws.per_edge}
    weights = {}
    for i in graph.followers():
        info = sorted(sets[i].info)
        base = weight_vector(ws.q_neighbor)
        if ws.scheme == "split" and info:
            base = base / len(info)
        q_neighbor = {j: per_edge.get((j, i), _as_weight(base)) for j in info}
        weights[i] = CostWeights(q_self=ws.per_vehicle_q_self.get(i, ws.q_self), q_neighbor=q_neighbor,
                                 r=ws.r, norm_kind=config.norm_kind)
    return weights


def initial_states(config: ScenarioConfig, spacing: PlatoonSpacing) -> List[VehicleState]:
    """Desired states relative to the leader at t = 0 plus the configured offsets; index 0 is the leader."""
    leader = leader_state(config.leader, 0.0)
    y0 = np.array([leader.position, leader.velocity])
    n = config.n_followers
    init = config.initial
    dp = np.array(init.position_offsets) if init.position_offsets else np.zeros(n)
    dv = np.array(init.velocity_offsets) if init.velocity_offsets else np.zeros(n)
    if init.position_jitter > 0:
        rng = np.random.default_rng([config.seed, 1])
        dp = dp + rng.uniform(-init.position_jitter, init.position_jitter, n)
    states = [leader]
    for i in range(1, n + 1):
        y = desired_output(i, y0, leader.velocity, spacing)
        states.append(VehicleState(position=y[0] + dp[i - 1], velocity=y[1] + dv[i - 1], acceleration=0.0))
    return states


# -- run ------------------------------------------------------------------------

class History(BaseModel):
    """States (T+1, N+1, 3) with column 0 the leader, follower inputs (T, N)."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    terminal_deviation: np.ndarray


class RunResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    config: ScenarioConfig
    taus: np.ndarray
    history: History
    metrics: MetricsTable
    weight_report: WeightReport
    lyapunov: List[LyapunovRow] = []
    lyapunov_steps: List[LyapunovStep] = []


def run(config: ScenarioConfig, pool=None) -> RunResult:
    """
    Execute the scenario. ``pool`` is any object with ``run(jobs) -> results``
    (see services.tasks.SolvePool); without one the solves run inline.
    """
    n, H, dt = config.n_followers, config.horizon, config.dt
    steps = int(round(config.duration / dt))
    graph = build_graph(config)
    require_admissible(graph)
    sets = all_vehicle_sets(graph)
    taus = sample_taus(config)
    params = {i: VehicleParams(tau=float(taus[i - 1]), u_min=config.input_bounds.u_min,
                               u_max=config.input_bounds.u_max) for i in graph.followers()}
    spacing = build_spacing(config)
    weights = build_weights(config, graph)
    weight_report = check_weight_condition(graph, weights)
    if not weight_report.passed:
        logger.warning(f"weight condition fails for vehicles {weight_report.failing()}; "
                       f"running anyway since it is only sufficient")
    if config.soft_terminal:
        logger.warning("soft terminal constraint active: stability guarantees no longer apply")
    logger.info(f"running '{config.name}': N={n} H={H} dt={dt} steps={steps} topology={config.topology.kind} "
                f"norm={config.norm_kind}")

    states = initial_states(config, spacing)
    controllers = {i: VehicleController(i, config.solver) for i in graph.followers()}
    # second-order cone problems are not polished, so their plans are only as exact as the solver tolerance
    feasibility_tol = FEASIBILITY_TOL if config.norm_kind != "l2" else 10.0 * config.solver.eps_abs
    monitor = None
    if config.lyapunov_monitor:
        monitor = LyapunovMonitor(graph, weight_report, feasibility_tol=feasibility_tol)
    bus = SynchronousBus(graph)

    assumed: Dict[int, Trajectory] = {i: init_assumed(states[i], params[i], H, dt) for i in graph.followers()}
    leader_plan = leader_assumed(states[0].position, states[0].velocity, H, dt)

    def publish(timestep: int) -> Dict[int, Dict[int, TrajectoryMessage]]:
        bus.post(TrajectoryMessage.from_trajectory(0, timestep, leader_plan))
        for i in graph.followers():
            bus.post(TrajectoryMessage.from_trajectory(i, timestep, assumed[i]))
        return bus.exchange()

    inboxes = publish(0)

    times = np.arange(steps + 1) * dt
    state_log = np.zeros((steps + 1, n + 1, 3))
    input_log = np.zeros((steps, n))
    terminal_log = np.zeros((steps, n))
    state_log[0] = [s.as_array() for s in states]

    for t in range(steps):
        specs = {}
        for i in graph.followers():
            specs[i] = OcpSpec(
                vehicle=i, params=params[i], weights=weights[i], horizon=H, dt=dt, state=states[i],
                own_assumed=assumed[i],
                neighbor_assumed={j: msg.to_trajectory() for j, msg in inboxes[i].items()},
                spacing=spacing, info_pre=sets[i].info_pre, soft_terminal=config.soft_terminal, timestep=t,
            )
        jobs = {i: (lambda i=i: controllers[i].solve(specs[i])) for i in graph.followers()}
        optimal = pool.run(jobs) if pool is not None else {i: jobs[i]() for i in sorted(jobs)}

        leader_now = leader_plan.outputs
        for i in graph.followers():
            y_des = desired_output(i, leader_now[H], leader_now[H][1], spacing)
            terminal_log[t, i - 1] = np.max(np.abs(optimal[i].outputs[H] - y_des))

        if monitor is not None:
            monitor.observe(t, {i: VehicleSnapshot(specs[i], optimal[i]) for i in graph.followers()},
                            states[0].velocity)

        next_states = [leader_state(config.leader, (t + 1) * dt)]
        for i in graph.followers():
            u = float(optimal[i].inputs[0])
            p = params[i]
            if not p.u_min <= u <= p.u_max:
                raise ContractViolation(f"vehicle {i} input {u} outside [{p.u_min}, {p.u_max}] at timestep {t}")
            input_log[t, i - 1] = u
            next_states.append(step(states[i], u, p, dt))
            assumed[i] = advance_assumed(optimal[i], p, dt)
        states = next_states
        state_log[t + 1] = [s.as_array() for s in states]
        leader_plan = leader_assumed(states[0].position, states[0].velocity, H, dt)
        inboxes = publish(t + 1)

        if t % 50 == 0:
            logger.debug(f"t={t}: max terminal deviation {terminal_log[t].max():.3e}")

    history = History(times=times, states=state_log, inputs=input_log, terminal_deviation=terminal_log)
    metrics = compute_metrics(times, state_log, input_log, spacing)
    logger.info(f"finished '{config.name}': max |spacing error| {np.max(np.abs(metrics.spacing_errors)):.3e} m")
    return RunResult(config=config, taus=taus, history=history, metrics=metrics, weight_report=weight_report,
                     lyapunov=monitor.rows if monitor else [], lyapunov_steps=monitor.steps if monitor else [])
