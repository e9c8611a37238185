"""
Per-vehicle optimal control problem and the trajectory bookkeeping around it.

At every timestep a follower minimizes, over its predicted inputs, the sum of
stage costs: the weighted deviation of its predicted output from its own
assumed output, the weighted deviation from each neighbor's assumed output
shifted by the desired offset to that neighbor, and r times the squared input;
subject to its dynamics, input bounds and the terminal constraints that pin
y^p(H) to the average of its predecessors' assumed terminal outputs (minus the
desired offsets) with zero terminal acceleration.

The conic form is built in a frame moving with the vehicle's current velocity
(positions relative to p_i(t) + k*dt*v_i(t), velocities relative to v_i(t)).
The dynamics are invariant under that shift, and it keeps the numbers the
solver sees at the size of the tracking errors rather than of the odometer.
"""

import logging
from typing import Dict, FrozenSet, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as spspa
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .errors import ContractViolation, SolverInfeasibleError
from .model import C, OUTPUT_DIM, STATE_DIM, VehicleParams, VehicleState, rollout, system_matrices
from .solver import INFEASIBLE, MAX_ITERS, NONNEG, SOC, UNBOUNDED, ZERO, AdmmSolver, ConeSpec, ConicProblem, \
    SolveResult, SolverSettings, shift_vector
from .spacing import PlatoonSpacing, pair_offset

logger = logging.getLogger(__name__)

NormKind = Literal["l1", "l2", "quadratic"]
Weight = Union[float, Tuple[float, float]]

SOFT_TERMINAL_WEIGHT = 1e4


class Trajectory(BaseModel):
    """
    Horizon-indexed outputs (H+1, 2), with optional states (H+1, 3) and
    inputs (H,). Plays the predicted, optimal and assumed roles.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    outputs: np.ndarray
    states: Optional[np.ndarray] = None
    inputs: Optional[np.ndarray] = None

    @model_validator(mode="after")
    def check_shapes(self):
        H = self.outputs.shape[0] - 1
        if self.outputs.ndim != 2 or self.outputs.shape[1] != OUTPUT_DIM or H < 1:
            raise ValueError(f"outputs must have shape (H+1, 2), got {self.outputs.shape}")
        if not np.all(np.isfinite(self.outputs)):
            raise ValueError("trajectory outputs must be finite")
        if self.states is not None and self.states.shape != (H + 1, STATE_DIM):
            raise ValueError(f"states must have shape ({H + 1}, 3), got {self.states.shape}")
        if self.inputs is not None and self.inputs.shape != (H,):
            raise ValueError(f"inputs must have shape ({H},), got {self.inputs.shape}")
        return self

    @property
    def horizon(self) -> int:
        return self.outputs.shape[0] - 1

    @classmethod
    def from_states(cls, states: np.ndarray, inputs: Optional[np.ndarray] = None) -> "Trajectory":
        states = np.asarray(states, dtype=float)
        return cls(outputs=states @ C.T, states=states,
                   inputs=None if inputs is None else np.asarray(inputs, dtype=float))

    def is_consistent(self, params: VehicleParams, dt: float, tol: float = 1e-8) -> bool:
        """states[k+1] = A states[k] + B inputs[k] and outputs = C states."""
        if self.states is None or self.inputs is None:
            return True
        A, B, _ = system_matrices(params, dt)
        predicted = self.states[:-1] @ A.T + np.outer(self.inputs, B[:, 0])
        return (np.max(np.abs(predicted - self.states[1:])) <= tol
                and np.max(np.abs(self.states @ C.T - self.outputs)) <= tol)


def weight_vector(w: Weight) -> np.ndarray:
    """Per-component (position, velocity) weight."""
    if np.isscalar(w):
        return np.array([float(w), float(w)])
    return np.asarray(w, dtype=float).reshape(OUTPUT_DIM)


class CostWeights(BaseModel):
    model_config = ConfigDict(frozen=True)

    q_self: Weight = 1.0
    q_neighbor: Dict[int, Weight] = Field(default_factory=dict)
    r: float = Field(1.0, gt=0)
    norm_kind: NormKind = "l1"

    @model_validator(mode="after")
    def check_weights(self):
        for name, w in [("q_self", self.q_self)] + [(f"q_neighbor[{j}]", w) for j, w in self.q_neighbor.items()]:
            if np.any(weight_vector(w) <= 0):
                raise ValueError(f"{name} must be positive, got {w}")
            if not np.isscalar(w) and self.norm_kind != "l1":
                raise ValueError(f"{name}: per-component weights are only defined for the l1 norm")
        return self


def weighted_norm(residual: np.ndarray, w: Weight, kind: str) -> float:
    residual = np.asarray(residual, dtype=float)
    if kind == "l1":
        return float(weight_vector(w) @ np.abs(residual))
    if kind == "l2":
        return float(w) * float(np.linalg.norm(residual))
    if kind == "quadratic":
        return float(w) * float(residual @ residual)
    raise ValueError(f"unknown norm kind '{kind}'")


def stage_cost(y_p: np.ndarray, u_p: float, y_a_self: np.ndarray, neighbor_outputs: Dict[int, np.ndarray],
               weights: CostWeights, spacing: PlatoonSpacing, vehicle: int) -> float:
    """Stage cost of one vehicle at one prediction step."""
    y_p = np.asarray(y_p, dtype=float)
    cost = weighted_norm(y_p - np.asarray(y_a_self), weights.q_self, weights.norm_kind)
    for j, y_j in neighbor_outputs.items():
        residual = y_p - np.asarray(y_j) + pair_offset(vehicle, j, spacing, y_p[1])
        cost += weighted_norm(residual, weights.q_neighbor[j], weights.norm_kind)
    return cost + weights.r * float(u_p) ** 2


class OcpSpec(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    vehicle: int = Field(..., ge=1)
    params: VehicleParams
    weights: CostWeights
    horizon: int = Field(..., ge=1)
    dt: float = Field(..., gt=0)
    state: VehicleState
    own_assumed: Trajectory
    neighbor_assumed: Dict[int, Trajectory]
    spacing: PlatoonSpacing
    info_pre: FrozenSet[int]
    soft_terminal: bool = False
    timestep: int = 0

    @model_validator(mode="after")
    def check_data(self):
        H = self.horizon
        if self.own_assumed.horizon != H:
            raise ValueError(f"own assumed trajectory has horizon {self.own_assumed.horizon}, expected {H}")
        for j in self.weights.q_neighbor:
            if j not in self.neighbor_assumed:
                raise ValueError(f"no assumed trajectory received from neighbor {j}")
            if self.neighbor_assumed[j].horizon != H:
                raise ValueError(f"neighbor {j} trajectory has horizon {self.neighbor_assumed[j].horizon}, expected {H}")
        for j in self.info_pre:
            if j not in self.neighbor_assumed:
                raise ValueError(f"no assumed trajectory from preceding neighbor {j}")
        return self


def terminal_target(spec: OcpSpec) -> np.ndarray:
    """Mean over the preceding neighbors of their assumed terminal output minus the desired offset."""
    if not spec.info_pre:
        raise ContractViolation(f"vehicle {spec.vehicle} has no preceding neighbor to anchor its terminal output")
    targets = []
    for j in sorted(spec.info_pre):
        y_j = spec.neighbor_assumed[j].outputs[-1]
        targets.append(y_j - pair_offset(spec.vehicle, j, spec.spacing, y_j[1]))
    return np.mean(targets, axis=0)


class _Term:
    """One norm term r = G [p_k, v_k] + c0 at stage k (or the terminal)."""

    def __init__(self, stage: int, label: tuple, coeffs: np.ndarray, c0: np.ndarray, weight: Weight):
        self.stage = stage
        self.label = label
        self.coeffs = coeffs  # 2x2, columns = (p_k, v_k)
        self.c0 = c0
        self.weight = weight
        self.aux_start = -1

    def residual(self, pv: np.ndarray) -> np.ndarray:
        return self.coeffs @ pv + self.c0


class OcpProblem:
    """A built local problem: the conic program plus the maps to and from trajectories."""

    def __init__(self, spec: OcpSpec, conic: ConicProblem, terms: List[_Term], frame: np.ndarray,
                 target: np.ndarray):
        self.spec = spec
        self.conic = conic
        self.terms = terms
        self.frame = frame  # (H+1, 3) absolute state of the moving frame
        self.target = target
        H = spec.horizon
        self.n_states = STATE_DIM * (H + 1)
        self.n_core = self.n_states + H

    def input_slice(self) -> slice:
        return slice(self.n_states, self.n_core)

    def decode(self, x: np.ndarray) -> Trajectory:
        """
        Optimal trajectory from a solver vector. Inputs are clipped to the
        bounds (solver tolerance) and the states re-rolled from x_i(t) so the
        result satisfies the dynamics exactly.
        """
        p = self.spec.params
        inputs = np.clip(x[self.input_slice()], p.u_min, p.u_max)
        A, B, _ = system_matrices(p, self.spec.dt)
        states = rollout(self.spec.state.as_array(), inputs, A, B)
        return Trajectory.from_states(states, inputs)

    def encode(self, trajectory: Trajectory) -> np.ndarray:
        """Solver vector (including auxiliaries) for an absolute trajectory."""
        H = self.spec.horizon
        x = np.zeros(self.conic.n)
        rel = trajectory.states - self.frame
        x[:self.n_states] = rel.reshape(-1)
        x[self.input_slice()] = trajectory.inputs
        kind = self.spec.weights.norm_kind
        for term in self.terms:
            if term.aux_start < 0:
                continue
            r = term.residual(rel[term.stage, :2])
            if term.label[0] == "soft" or kind == "l1":
                x[term.aux_start:term.aux_start + OUTPUT_DIM] = np.abs(r)
            elif kind == "l2":
                x[term.aux_start] = np.linalg.norm(r)
        assert rel.shape == (H + 1, STATE_DIM)
        return x

    def cost(self, trajectory: Trajectory) -> float:
        """J_i evaluated through stage_cost, independently of the conic form."""
        return trajectory_cost(self.spec, trajectory)


def trajectory_cost(spec: OcpSpec, trajectory: Trajectory) -> float:
    total = 0.0
    for k in range(spec.horizon):
        neighbors = {j: spec.neighbor_assumed[j].outputs[k] for j in spec.weights.q_neighbor}
        total += stage_cost(trajectory.outputs[k], trajectory.inputs[k], spec.own_assumed.outputs[k],
                            neighbors, spec.weights, spec.spacing, spec.vehicle)
    return total


def soft_terminal_penalty(spec: OcpSpec, trajectory: Trajectory) -> float:
    if not spec.soft_terminal:
        return 0.0
    return SOFT_TERMINAL_WEIGHT * float(np.sum(np.abs(trajectory.outputs[-1] - terminal_target(spec))))


def _moving_frame(state: VehicleState, H: int, dt: float) -> np.ndarray:
    k = np.arange(H + 1)
    frame = np.zeros((H + 1, STATE_DIM))
    frame[:, 0] = state.position + k * dt * state.velocity
    frame[:, 1] = state.velocity
    return frame


def build_ocp(spec: OcpSpec) -> OcpProblem:
    """Assemble the local problem of one vehicle as a conic program over predicted states, inputs and norm auxiliaries."""
    H, dt, i = spec.horizon, spec.dt, spec.vehicle
    params, weights = spec.params, spec.weights
    kind = weights.norm_kind
    A_d, B_d, _ = system_matrices(params, dt)

    target = terminal_target(spec)
    frame = _moving_frame(spec.state, H, dt)
    v0 = spec.state.velocity

    def xcol(k: int, c: int) -> int:
        return STATE_DIM * k + c

    n_states = STATE_DIM * (H + 1)
    ucol = lambda k: n_states + k  # noqa: E731

    # -- norm terms in the moving frame --------------------------------------
    terms: List[_Term] = []
    identity = np.eye(OUTPUT_DIM)
    for k in range(H):
        y_self = spec.own_assumed.outputs[k] - frame[k, :2]
        terms.append(_Term(k, ("self",), identity, -y_self, weights.q_self))
        for j in sorted(weights.q_neighbor):
            h, s = spec.spacing.chain_coefficients(i, j)
            y_j = spec.neighbor_assumed[j].outputs[k] - frame[k, :2]
            coeffs = np.array([[1.0, h], [0.0, 1.0]])
            c0 = np.array([h * v0 + s, 0.0]) - y_j
            terms.append(_Term(k, ("neighbor", j), coeffs, c0, weights.q_neighbor[j]))
    target_rel = target - frame[H, :2]
    if spec.soft_terminal:
        terms.append(_Term(H, ("soft",), identity, -target_rel, SOFT_TERMINAL_WEIGHT))

    # -- variables -----------------------------------------------------------
    var_tags: List[tuple] = [(("x", c), k) for k in range(H + 1) for c in range(STATE_DIM)]
    var_tags += [(("u",), k) for k in range(H)]
    n = n_states + H
    for term in terms:
        if term.label[0] == "soft" or kind == "l1":
            term.aux_start = n
            var_tags += [(("aux", term.label, c), term.stage) for c in range(OUTPUT_DIM)]
            n += OUTPUT_DIM
        elif kind == "l2":
            term.aux_start = n
            var_tags.append((("aux", term.label), term.stage))
            n += 1

    P = spspa.lil_matrix((n, n))
    q = np.zeros(n)
    offset = 0.0
    for k in range(H):
        P[ucol(k), ucol(k)] += 2.0 * weights.r

    # -- rows, grouped by cone -----------------------------------------------
    zero_rows: List[Tuple[Dict[int, float], float, tuple]] = []
    nonneg_rows: List[Tuple[Dict[int, float], float, tuple]] = []
    soc_blocks: List[List[Tuple[Dict[int, float], float, tuple]]] = []

    x_init = spec.state.as_array() - frame[0]
    for c in range(STATE_DIM):
        zero_rows.append(({xcol(0, c): 1.0}, x_init[c], (("init", c), None)))
    for k in range(H):
        for c in range(STATE_DIM):
            row = {xcol(k + 1, c): 1.0}
            for cc in range(STATE_DIM):
                if A_d[c, cc] != 0.0:
                    row[xcol(k, cc)] = row.get(xcol(k, cc), 0.0) - A_d[c, cc]
            if B_d[c, 0] != 0.0:
                row[ucol(k)] = -B_d[c, 0]
            zero_rows.append((row, 0.0, (("dyn", c), k)))
    if not spec.soft_terminal:
        for c in range(OUTPUT_DIM):
            zero_rows.append(({xcol(H, c): 1.0}, target_rel[c], (("terminal", c), None)))
    zero_rows.append(({xcol(H, 2): 1.0}, 0.0, (("terminal", 2), None)))

    for k in range(H):
        nonneg_rows.append(({ucol(k): 1.0}, params.u_max, (("u_max",), k)))
        nonneg_rows.append(({ucol(k): -1.0}, -params.u_min, (("u_min",), k)))

    for term in terms:
        cols = (xcol(term.stage, 0), xcol(term.stage, 1))
        w = weight_vector(term.weight)
        if term.label[0] == "soft" or kind == "l1":
            for c in range(OUTPUT_DIM):
                slack = term.aux_start + c
                q[slack] += w[c]
                g = {cols[cc]: term.coeffs[c, cc] for cc in range(OUTPUT_DIM) if term.coeffs[c, cc] != 0.0}
                # g x - s <= -c0  and  -g x - s <= c0
                upper = dict(g)
                upper[slack] = -1.0
                lower = {col: -val for col, val in g.items()}
                lower[slack] = -1.0
                nonneg_rows.append((upper, -term.c0[c], (("l1+", term.label, c), term.stage)))
                nonneg_rows.append((lower, term.c0[c], (("l1-", term.label, c), term.stage)))
        elif kind == "l2":
            q[term.aux_start] += float(term.weight)
            block = [({term.aux_start: -1.0}, 0.0, (("soc", term.label, 0), term.stage))]
            for c in range(OUTPUT_DIM):
                g = {cols[cc]: -term.coeffs[c, cc] for cc in range(OUTPUT_DIM) if term.coeffs[c, cc] != 0.0}
                block.append((g, term.c0[c], (("soc", term.label, c + 1), term.stage)))
            soc_blocks.append(block)
        else:
            wq = float(term.weight)
            G = term.coeffs
            GtG = 2.0 * wq * (G.T @ G)
            Gtc = 2.0 * wq * (G.T @ term.c0)
            for a in range(OUTPUT_DIM):
                q[cols[a]] += Gtc[a]
                for bb in range(OUTPUT_DIM):
                    P[cols[a], cols[bb]] += GtG[a, bb]
            offset += wq * float(term.c0 @ term.c0)

    rows = zero_rows + nonneg_rows + [r for block in soc_blocks for r in block]
    cones = []
    if zero_rows:
        cones.append(ConeSpec(kind=ZERO, dim=len(zero_rows)))
    if nonneg_rows:
        cones.append(ConeSpec(kind=NONNEG, dim=len(nonneg_rows)))
    cones += [ConeSpec(kind=SOC, dim=len(block)) for block in soc_blocks]

    A = spspa.lil_matrix((len(rows), n))
    b = np.zeros(len(rows))
    for r, (coeffs, rhs, _) in enumerate(rows):
        for col, val in coeffs.items():
            A[r, col] = val
        b[r] = rhs

    P = P.tocsc()
    if np.any(P.diagonal() < 0):
        raise ContractViolation("objective matrix has a negative diagonal entry; the cost is not convex")

    conic = ConicProblem(P=P, q=q, A=A.tocsc(), b=b, cones=cones, offset=offset,
                         var_tags=var_tags, row_tags=[r[2] for r in rows])
    conic.validate_dims()
    return OcpProblem(spec, conic, terms, frame, target)


def init_assumed(x0: VehicleState, params: VehicleParams, horizon: int, dt: float) -> Trajectory:
    """Zero-input rollout used as the assumed trajectory at t = 0."""
    A, B, _ = system_matrices(params, dt)
    inputs = np.zeros(horizon)
    return Trajectory.from_states(rollout(x0.as_array(), inputs, A, B), inputs)


def advance_assumed(optimal: Trajectory, params: VehicleParams, dt: float) -> Trajectory:
    """Shift the optimal plan one step and append a zero input at the end."""
    if optimal.states is None or optimal.inputs is None:
        raise ContractViolation("advancing an assumed trajectory needs states and inputs")
    A, _, _ = system_matrices(params, dt)
    inputs = np.append(optimal.inputs[1:], 0.0)
    states = np.vstack([optimal.states[1:], A @ optimal.states[-1]])
    return Trajectory.from_states(states, inputs)


def leader_assumed(position: float, velocity: float, horizon: int, dt: float) -> Trajectory:
    """Constant-velocity extrapolation of the leader's current output."""
    k = np.arange(horizon + 1)
    outputs = np.column_stack([position + k * dt * velocity, np.full(horizon + 1, float(velocity))])
    return Trajectory(outputs=outputs)


class VehicleController:
    """
    Solves the local problem of one vehicle across timesteps. Keeps its own solver (and
    so its own cached factorization) and warm starts each solve from the
    assumed trajectory and the time-shifted dual of the previous solve.
    """

    def __init__(self, vehicle: int, settings: Optional[SolverSettings] = None):
        self.vehicle = vehicle
        self.solver = AdmmSolver(settings)
        self._dual: Optional[np.ndarray] = None
        self.last_result: Optional[SolveResult] = None

    def solve(self, spec: OcpSpec) -> Trajectory:
        problem = build_ocp(spec)
        conic = problem.conic
        warm = None
        if spec.own_assumed.states is not None and spec.own_assumed.inputs is not None:
            dual = self._dual if self._dual is not None and self._dual.shape == (conic.m,) else np.zeros(conic.m)
            warm = (problem.encode(spec.own_assumed), dual)

        result = self.solver.solve(conic, warm_start=warm)
        self.last_result = result
        if result.status in (INFEASIBLE, UNBOUNDED):
            raise SolverInfeasibleError(f"vehicle {self.vehicle} has no feasible plan at timestep {spec.timestep} "
                                        f"(solver status {result.status})", vehicle=self.vehicle,
                                        timestep=spec.timestep)
        if result.status == MAX_ITERS:
            settings = self.solver.settings
            if result.primal_residual > 1e3 * settings.eps_abs:
                raise SolverInfeasibleError(
                    f"vehicle {self.vehicle} could not meet its constraints at timestep {spec.timestep} "
                    f"(primal residual {result.primal_residual:.2e} after {result.iterations} iterations)",
                    vehicle=self.vehicle, timestep=spec.timestep)
            logger.warning(f"vehicle {self.vehicle} t={spec.timestep}: solver hit max_iters "
                           f"(pri={result.primal_residual:.2e} dua={result.dual_residual:.2e})")
        self._dual = shift_vector(result.y, conic.row_tags)
        return problem.decode(result.x)
