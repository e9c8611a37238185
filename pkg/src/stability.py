"""
Stability checks for the platoon controller.

Static: every follower's own weight must cover the weights its listeners
put on it.
Runtime: the Lyapunov function V(t), the sum of the optimal local costs,
must not increase once every terminal output has settled (t >= N) and the
leader runs at constant velocity. In the same regime every shifted plan must
stay feasible for the next local problem and its cost must bound the next
optimum from above. The monitor recomputes every stage cost
from raw trajectories through ``ocp.stage_cost``.

The candidate used to bound a vehicle's next optimal cost is its
time-shifted optimum with a zero input appended, and every quantity is
taken at timestep t.
"""

import logging
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from models.report_models import (CounterexampleCase, LyapunovRow, LyapunovStep, VehicleWeightMargin,
                                  WeightReport)

from .errors import ContractViolation
from .ocp import CostWeights, OcpSpec, Trajectory, build_ocp, soft_terminal_penalty, stage_cost, trajectory_cost, \
    weight_vector, weighted_norm
from .solver import project_product
from .topology import TopologyGraph, all_vehicle_sets

logger = logging.getLogger(__name__)

TOLERANCE_SCALE = 1e-6
MARGIN_TOL = 1e-12
FEASIBILITY_TOL = 1e-8


def check_weight_condition(graph: TopologyGraph, weights: Mapping[int, CostWeights]) -> WeightReport:
    for j, i in graph.edges:
        if j not in weights[i].q_neighbor:
            raise ContractViolation(f"vehicle {i} has no weight on the edge from {j}")
    sets = all_vehicle_sets(graph)
    vehicles = []
    for i in graph.followers():
        own = weight_vector(weights[i].q_self)
        share = np.zeros(2)
        for j in sets[i].share:
            share += weight_vector(weights[j].q_neighbor[i])
        margin = own - share
        vehicles.append(VehicleWeightMargin(
            vehicle=i, q_self=tuple(own), share_sum=tuple(share), margin=tuple(margin),
            passed=bool(np.all(margin >= -MARGIN_TOL)),
        ))
    return WeightReport(vehicles=vehicles, passed=all(v.passed for v in vehicles))


class VehicleSnapshot:
    """What vehicle i solved at timestep t: the problem data and its optimum."""

    def __init__(self, spec: OcpSpec, optimal: Trajectory):
        self.spec = spec
        self.optimal = optimal

    @property
    def value(self) -> float:
        """Optimal local cost recomputed from the trajectory."""
        return trajectory_cost(self.spec, self.optimal) + soft_terminal_penalty(self.spec, self.optimal)


def _neighbor_optimum(snapshots: Mapping[int, VehicleSnapshot], spec: OcpSpec, j: int) -> Trajectory:
    # the leader's plan is its own assumed trajectory
    if j == 0:
        return spec.neighbor_assumed[0]
    return snapshots[j].optimal


def _candidate_stage(snapshots: Mapping[int, VehicleSnapshot], i: int, k: int) -> float:
    """Stage cost at step k with every assumed trajectory replaced by the optimum."""
    snap = snapshots[i]
    spec, opt = snap.spec, snap.optimal
    u = opt.inputs[k] if k < spec.horizon else 0.0
    neighbors = {j: _neighbor_optimum(snapshots, spec, j).outputs[k] for j in spec.weights.q_neighbor}
    return stage_cost(opt.outputs[k], u, opt.outputs[k], neighbors, spec.weights, spec.spacing, i)


def _actual_stage(snap: VehicleSnapshot, i: int, k: int) -> float:
    spec, opt = snap.spec, snap.optimal
    neighbors = {j: spec.neighbor_assumed[j].outputs[k] for j in spec.weights.q_neighbor}
    return stage_cost(opt.outputs[k], opt.inputs[k], spec.own_assumed.outputs[k], neighbors, spec.weights,
                      spec.spacing, i)


def vehicle_epsilons(snapshots: Mapping[int, VehicleSnapshot], i: int) -> np.ndarray:
    """Stage cost change when the optima replace the assumed trajectories, k = 1..H-1."""
    H = snapshots[i].spec.horizon
    return np.array([_candidate_stage(snapshots, i, k) - _actual_stage(snapshots[i], i, k) for k in range(1, H)])


def vehicle_epsilon_bounds(snapshots: Mapping[int, VehicleSnapshot], graph: TopologyGraph, i: int) -> np.ndarray:
    """Reverse-triangle bound on vehicle_epsilons: weighted neighbor drift minus own drift."""
    sets = all_vehicle_sets(graph)
    snap = snapshots[i]
    w, kind = snap.spec.weights, snap.spec.weights.norm_kind
    bounds = []
    for k in range(1, snap.spec.horizon):
        own = snap.optimal.outputs[k] - snap.spec.own_assumed.outputs[k]
        value = -weighted_norm(own, w.q_self, kind)
        for j in sets[i].receive:
            drift = snapshots[j].optimal.outputs[k] - snap.spec.neighbor_assumed[j].outputs[k]
            value += weighted_norm(drift, w.q_neighbor[j], kind)
        bounds.append(value)
    return np.array(bounds)


def platoon_epsilons(snapshots: Mapping[int, VehicleSnapshot], graph: TopologyGraph) -> np.ndarray:
    """Per-step platoon bound: each drift weighted by listener weights minus own weight."""
    sets = all_vehicle_sets(graph)
    H = next(iter(snapshots.values())).spec.horizon
    eps = np.zeros(H - 1)
    for i, snap in snapshots.items():
        kind = snap.spec.weights.norm_kind
        for k in range(1, H):
            drift = snap.optimal.outputs[k] - snap.spec.own_assumed.outputs[k]
            term = -weighted_norm(drift, snap.spec.weights.q_self, kind)
            for j in sets[i].share:
                term += weighted_norm(drift, snapshots[j].spec.weights.q_neighbor[i], kind)
            eps[k - 1] += term
    return eps


def lyapunov_step(snapshots: Mapping[int, VehicleSnapshot], next_values: Mapping[int, float],
                  graph: TopologyGraph, timestep: int, weight_report: Optional[WeightReport] = None) -> LyapunovStep:
    """
    Check V(t+1) - V(t) against the per-vehicle and platoon bounds.

    The reverse-triangle and platoon bounds rely on a true norm and are skipped
    for the quadratic cost.
    """
    n = graph.n_followers
    if timestep < n:
        raise ContractViolation(f"Lyapunov bounds need t >= N ({n}), got t = {timestep}")
    values = {i: snap.value for i, snap in snapshots.items()}
    total, next_total = sum(values.values()), sum(next_values.values())
    delta = next_total - total
    tol = TOLERANCE_SCALE * (1.0 + total)
    kind = next(iter(snapshots.values())).spec.weights.norm_kind

    stage_zero = {i: _actual_stage(snap, i, 0) for i, snap in snapshots.items()}
    vehicle_ok = True
    triangle_ok: Optional[bool] = True if kind != "quadratic" else None
    for i, snap in snapshots.items():
        eps_i = vehicle_epsilons(snapshots, i)
        # appended step: optimum at H against itself
        tail = _candidate_stage(snapshots, i, snap.spec.horizon)
        delta_i = next_values[i] - values[i]
        local_tol = TOLERANCE_SCALE * (1.0 + values[i])
        if delta_i > -stage_zero[i] + eps_i.sum() + tail + local_tol:
            vehicle_ok = False
            logger.warning(f"t={timestep} vehicle {i}: dV_i={delta_i:.3e} exceeds "
                           f"-l_i(0)+sum eps={-stage_zero[i] + eps_i.sum():.3e} (tail {tail:.3e})")
        if triangle_ok is not None:
            slack = vehicle_epsilon_bounds(snapshots, graph, i) - eps_i
            if np.any(slack < -local_tol):
                triangle_ok = False
                logger.warning(f"t={timestep} vehicle {i}: eps_i,k above its reverse-triangle bound by "
                               f"{-slack.min():.3e}")

    step = LyapunovStep(timestep=timestep, values=values, total=total, next_values=dict(next_values),
                        next_total=next_total, delta=delta, stage_zero=stage_zero, vehicle_bound_ok=vehicle_ok,
                        triangle_bound_ok=triangle_ok, tolerance=tol)
    if kind != "quadratic":
        eps = platoon_epsilons(snapshots, graph)
        bound = -sum(stage_zero.values()) + float(eps.sum())
        step = step.model_copy(update={"epsilon": eps.tolist(), "sum_bound": bound,
                                       "sum_bound_ok": delta <= bound + tol})
        if not step.sum_bound_ok:
            logger.warning(f"t={timestep}: dV={delta:.3e} exceeds platoon bound {bound:.3e}")
    if weight_report is not None and weight_report.passed:
        step = step.model_copy(update={"decrease_ok": delta <= tol})
        if not step.decrease_ok:
            logger.warning(f"t={timestep}: V increased by {delta:.3e} (V={total:.3e}) with passing weights")
    return step


def shifted_plan_residual(spec: OcpSpec) -> float:
    """
    Largest constraint violation of ``spec.own_assumed`` in the local problem
    built from ``spec``, relative to 1 + the largest right-hand side entry.
    """
    problem = build_ocp(spec)
    conic = problem.conic
    slack = conic.b - conic.A @ problem.encode(spec.own_assumed)
    violation = slack - project_product(slack, conic.cones)
    return float(np.max(np.abs(violation))) / (1.0 + float(np.max(np.abs(conic.b))))


def check_shifted_plans(snapshots: Mapping[int, VehicleSnapshot], timestep: int,
                        feasibility_tol: float = FEASIBILITY_TOL) -> Tuple[float, bool, bool]:
    """
    Recursive feasibility at ``timestep``: each vehicle's own assumed
    trajectory (its shifted previous optimum) must satisfy the constraints
    of the problem it just solved, and its cost must not undercut the optimum.

    Returns (worst relative residual, feasible, cost bound holds).
    """
    worst, cost_ok = 0.0, True
    for i, snap in sorted(snapshots.items()):
        spec, shifted = snap.spec, snap.spec.own_assumed
        residual = shifted_plan_residual(spec)
        if residual > feasibility_tol:
            logger.warning(f"t={timestep} vehicle {i}: shifted plan violates the constraints by {residual:.3e}")
        worst = max(worst, residual)
        candidate = trajectory_cost(spec, shifted) + soft_terminal_penalty(spec, shifted)
        value = snap.value
        if candidate < value - TOLERANCE_SCALE * (1.0 + value):
            cost_ok = False
            logger.warning(f"t={timestep} vehicle {i}: shifted plan cost {candidate:.6e} below optimum {value:.6e}")
    return worst, worst <= feasibility_tol, cost_ok


class LyapunovMonitor:
    """
    Collects per-timestep snapshots and checks each consecutive pair. Idle
    (with one logged notice per idle stretch) while t < N or the leader
    velocity changes between the two timesteps.
    """

    def __init__(self, graph: TopologyGraph, weight_report: Optional[WeightReport] = None,
                 velocity_tol: float = 1e-12, feasibility_tol: float = FEASIBILITY_TOL):
        self.graph = graph
        self.feasibility_tol = feasibility_tol
        self.weight_report = weight_report
        self.velocity_tol = velocity_tol
        self.rows: List[LyapunovRow] = []
        self.steps: List[LyapunovStep] = []
        self._previous: Optional[Dict[int, VehicleSnapshot]] = None
        self._previous_leader: Optional[float] = None
        self._idle_logged = False

    def observe(self, timestep: int, snapshots: Dict[int, VehicleSnapshot], leader_velocity: float) -> None:
        values = {i: snap.value for i, snap in sorted(snapshots.items())}
        row = LyapunovRow(timestep=timestep, values=values, total=sum(values.values()))
        if self._previous is not None:
            prev_t = timestep - 1
            constant = abs(leader_velocity - self._previous_leader) <= self.velocity_tol
            previous_row = self.rows[-1]
            if prev_t >= self.graph.n_followers and constant:
                step = lyapunov_step(self._previous, values, self.graph, prev_t, self.weight_report)
                residual, feasible, cost_ok = check_shifted_plans(snapshots, timestep, self.feasibility_tol)
                step = step.model_copy(update={"shifted_residual": residual, "shifted_feasible_ok": feasible,
                                               "shifted_cost_ok": cost_ok})
                row = row.model_copy(update={"shifted_residual": residual})
                self.steps.append(step)
                self.rows[-1] = previous_row.model_copy(update={
                    "delta": step.delta, "bound": step.sum_bound,
                    "epsilon_sum": float(sum(step.epsilon)) if step.epsilon else None,
                    "monitored": True, "ok": step.ok,
                })
                self._idle_logged = False
            else:
                self.rows[-1] = previous_row.model_copy(update={"delta": row.total - previous_row.total})
                if not self._idle_logged:
                    reason = "t < N" if prev_t < self.graph.n_followers else "leader velocity is changing"
                    logger.info(f"Lyapunov monitor idle from t={prev_t}: {reason}")
                    self._idle_logged = True
        self.rows.append(row)
        self._previous = snapshots
        self._previous_leader = leader_velocity

    @property
    def failures(self) -> List[LyapunovStep]:
        return [s for s in self.steps if not s.ok]


def _q_norm(z: np.ndarray, Q: np.ndarray) -> float:
    return float(np.sqrt(z @ Q @ z))


def quadratic_form_gap(z: Sequence[float], shares: Sequence[np.ndarray], own: np.ndarray) -> float:
    """sum_j ||z||_{Q_j} - ||z||_{Q_own}; the claimed bound says this is <= 0."""
    z = np.asarray(z, dtype=float)
    return sum(_q_norm(z, Q) for Q in shares) - _q_norm(z, own)


def scaled_norm_gap(z: Sequence[float], shares: Sequence[np.ndarray], own: np.ndarray) -> float:
    """sum_j ||Q_j z||_2 - ||Q_own z||_2; the claimed bound says this is <= 0."""
    z = np.asarray(z, dtype=float)
    return sum(float(np.linalg.norm(Q @ z)) for Q in shares) - float(np.linalg.norm(own @ z))


def counterexample_norms(own_override: Optional[np.ndarray] = None) -> List[CounterexampleCase]:
    """
    Two matrix-weighted generalizations of the weight condition that fail
    even though the share matrices sum exactly to the vehicle's own matrix.
    """
    z1 = np.array([1.0, 0.0])
    eye = np.eye(2)
    lhs1 = 2.0 * float(np.linalg.norm(z1))
    rhs1 = _q_norm(z1, 2.0 * eye)
    gap1 = quadratic_form_gap(z1, [eye, eye], 2.0 * eye)
    case1 = CounterexampleCase(
        name="quadratic-form", lhs=lhs1, rhs=rhs1, gap=gap1, claim_violated=gap1 > 0,
        detail=f"Q_j1 = Q_j2 = I, Q_ii = 2I, z = (1, 0): 2||z|| = {lhs1:.5f} vs sqrt(2)||z|| = {rhs1:.5f}",
    )

    z2 = np.array([1.0, 1.0])
    shares = [np.diag([3.0, 2.0]), np.diag([2.0, 1.0])]
    own = np.diag([5.0, 3.0]) if own_override is None else np.asarray(own_override, dtype=float)
    lhs2 = sum(float(np.linalg.norm(Q @ z2)) for Q in shares)
    rhs2 = float(np.linalg.norm(own @ z2))
    gap2 = scaled_norm_gap(z2, shares, own)
    case2 = CounterexampleCase(
        name="scaled-euclidean", lhs=lhs2, rhs=rhs2, gap=gap2, claim_violated=gap2 > 0,
        detail=(f"Q_j1 = diag(3, 2), Q_j2 = diag(2, 1), Q_ii = diag{tuple(np.diag(own))}, z = (1, 1): "
                f"{lhs2:.5f} - {rhs2:.5f} = {gap2:.5f}"),
    )
    return [case1, case2]
