import json
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from typing import Dict, List, Literal, Optional, Tuple, Union

from src.errors import ScenarioError
from src.solver import SolverSettings
from src.spacing import SpacingPolicy
from src.topology import generate

Weight = Union[float, Tuple[float, float]]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", allow_inf_nan=False)


class TauSpec(_Strict):
    """Inertial delays: explicit list, or uniform draws in [low, high] from a seeded generator"""
    low: float = Field(0.25, gt=0)
    high: float = Field(0.9, gt=0)
    values: Optional[List[float]] = None
    seed: Optional[int] = Field(None, ge=0)

    @model_validator(mode="after")
    def check_range(self):
        if self.low > self.high:
            raise ValueError(f"tau.low ({self.low}) must not exceed tau.high ({self.high})")
        if self.values is not None and any(v <= 0 for v in self.values):
            raise ValueError("tau.values must all be positive")
        return self


class InputBounds(_Strict):
    u_min: float = -3.0
    u_max: float = 3.0

    @model_validator(mode="after")
    def check_order(self):
        if not self.u_min < self.u_max:
            raise ValueError(f"input_bounds: u_min ({self.u_min}) must be below u_max ({self.u_max})")
        return self


class TopologySpec(_Strict):
    kind: Literal["pf", "bd", "two-pred", "leader-broadcast", "custom"] = "pf"
    edges: List[Tuple[int, int]] = Field(default_factory=list, description="(sender, receiver) pairs")

    @model_validator(mode="after")
    def check_edges(self):
        if self.kind == "custom" and not self.edges:
            raise ValueError("topology.edges is required for a custom topology")
        return self


class SpacingSpec(_Strict):
    delta_h: float = Field(0.0, ge=0)
    delta_safe: float = Field(0.0, ge=0)
    zero_first: bool = True
    overrides: Dict[int, SpacingPolicy] = Field(default_factory=dict)


class EdgeWeight(_Strict):
    sender: int = Field(..., ge=0)
    receiver: int = Field(..., ge=1)
    q: Weight


class WeightsSpec(_Strict):
    """
    Cost weights. ``scheme`` spreads ``q_neighbor`` over each follower's
    information set: "uniform" puts the full value on every edge, "split"
    divides it evenly. ``per_edge`` entries override single edges.
    """
    q_self: Weight = 1.0
    q_neighbor: Weight = 1.0
    scheme: Literal["uniform", "split"] = "uniform"
    r: float = Field(1.0, gt=0)
    per_vehicle_q_self: Dict[int, Weight] = Field(default_factory=dict)
    per_edge: List[EdgeWeight] = Field(default_factory=list)


class LeaderSegment(_Strict):
    duration: float = Field(..., gt=0)
    start_velocity: float = Field(..., ge=0)
    end_velocity: Optional[float] = Field(None, ge=0)

    @property
    def final_velocity(self) -> float:
        return self.start_velocity if self.end_velocity is None else self.end_velocity


class LeaderProfile(_Strict):
    """Piecewise constant/linear leader velocity; the last velocity is held after the final segment"""
    initial_position: float = 0.0
    segments: List[LeaderSegment] = Field(..., min_length=1)

    @field_validator("segments")
    @classmethod
    def check_continuity(cls, v):
        for k in range(1, len(v)):
            if abs(v[k].start_velocity - v[k - 1].final_velocity) > 1e-9:
                raise ValueError(f"leader velocity jumps between segment {k - 1} "
                                 f"({v[k - 1].final_velocity}) and segment {k} ({v[k].start_velocity})")
        return v


class InitialCondition(_Strict):
    """Offsets from the desired state relative to the leader; all zero is the equilibrium start"""
    position_offsets: List[float] = Field(default_factory=list)
    velocity_offsets: List[float] = Field(default_factory=list)
    position_jitter: float = Field(0.0, ge=0, description="uniform +- jitter [m], drawn from the scenario seed")


class ScenarioConfig(_Strict):
    name: str = "scenario"
    n_followers: int = Field(..., ge=1, le=0xFFFF - 1)
    dt: float = Field(0.1, gt=0)
    horizon: int = Field(..., ge=1)
    duration: float = Field(..., gt=0)
    seed: int = Field(0, ge=0)
    tau: TauSpec = Field(default_factory=TauSpec)
    input_bounds: InputBounds = Field(default_factory=InputBounds)
    topology: TopologySpec = Field(default_factory=TopologySpec)
    spacing: SpacingSpec = Field(default_factory=SpacingSpec)
    weights: WeightsSpec = Field(default_factory=WeightsSpec)
    norm_kind: Literal["l1", "l2", "quadratic"] = "l1"
    leader: LeaderProfile
    solver: SolverSettings = Field(default_factory=SolverSettings)
    soft_terminal: bool = False
    lyapunov_monitor: bool = False
    initial: InitialCondition = Field(default_factory=InitialCondition)

    @model_validator(mode="after")
    def check_references(self):
        n = self.n_followers
        if self.tau.values is not None and len(self.tau.values) != n:
            raise ValueError(f"tau.values has {len(self.tau.values)} entries, expected {n}")
        for key, offsets in (("initial.position_offsets", self.initial.position_offsets),
                             ("initial.velocity_offsets", self.initial.velocity_offsets)):
            if offsets and len(offsets) != n:
                raise ValueError(f"{key} has {len(offsets)} entries, expected {n}")
        for i in self.spacing.overrides:
            if not 1 <= i <= n:
                raise ValueError(f"spacing.overrides: vehicle {i} does not exist")
        for i in self.weights.per_vehicle_q_self:
            if not 1 <= i <= n:
                raise ValueError(f"weights.per_vehicle_q_self: vehicle {i} does not exist")
        for j, i in self.topology.edges:
            if not (0 <= j <= n and 1 <= i <= n):
                raise ValueError(f"topology.edges: edge {j}->{i} references a missing vehicle")
        edges = self.edge_set()
        for entry in self.weights.per_edge:
            if (entry.sender, entry.receiver) not in edges:
                raise ValueError(f"weights.per_edge: no edge {entry.sender}->{entry.receiver} in the topology")
        weights = [self.weights.q_self, self.weights.q_neighbor] + list(self.weights.per_vehicle_q_self.values()) \
            + [e.q for e in self.weights.per_edge]
        if self.norm_kind != "l1" and any(not isinstance(w, (int, float)) for w in weights):
            raise ValueError(f"weights: per-component weights need norm_kind 'l1', got '{self.norm_kind}'")
        return self

    def edge_set(self) -> set:
        return set(generate(self.topology.kind, self.n_followers, self.topology.edges).edges)


def parse_scenario(data: Union[str, dict]) -> ScenarioConfig:
    """Validate a scenario document, turning schema errors into ScenarioError"""
    try:
        raw = json.loads(data) if isinstance(data, str) else data
    except json.JSONDecodeError as e:
        raise ScenarioError(f"scenario is not valid JSON: {e}")
    if isinstance(raw, dict) and "scenario" in raw and "fingerprint" in raw:
        # run.json echo
        raw = raw["scenario"]
    try:
        return ScenarioConfig.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        key = ".".join(str(part) for part in first["loc"]) or "<root>"
        raise ScenarioError(f"invalid scenario at '{key}': {first['msg']}")
