from pydantic import BaseModel, Field
from typing import Dict, List, Optional, Tuple


class VehicleWeightMargin(BaseModel):
    """Weight condition for one follower: own weight against what its share set puts on it"""
    vehicle: int = Field(..., ge=1)
    q_self: Tuple[float, float]
    share_sum: Tuple[float, float]
    margin: Tuple[float, float]
    passed: bool


class WeightReport(BaseModel):
    vehicles: List[VehicleWeightMargin]
    passed: bool

    def failing(self) -> List[int]:
        return [v.vehicle for v in self.vehicles if not v.passed]

    def describe(self) -> str:
        lines = []
        for v in self.vehicles:
            status = "ok" if v.passed else "FAIL"
            lines.append(f"  vehicle {v.vehicle}: q_self={_fmt(v.q_self)} share_sum={_fmt(v.share_sum)} "
                         f"margin={_fmt(v.margin)} {status}")
        verdict = "weight condition holds" if self.passed else f"weight condition fails for vehicles {self.failing()}"
        return "\n".join([verdict] + lines)


def _fmt(pair: Tuple[float, float]) -> str:
    if pair[0] == pair[1]:
        return f"{pair[0]:g}"
    return f"({pair[0]:g}, {pair[1]:g})"


class LyapunovStep(BaseModel):
    """Decrease check between timesteps t and t+1"""
    timestep: int = Field(..., ge=0)
    values: Dict[int, float]
    total: float
    next_values: Dict[int, float]
    next_total: float
    delta: float
    stage_zero: Dict[int, float]
    epsilon: List[float] = Field(default_factory=list, description="eps_k for k = 1..H-1")
    vehicle_bound_ok: bool
    triangle_bound_ok: Optional[bool] = None
    sum_bound: Optional[float] = None
    sum_bound_ok: Optional[bool] = None
    decrease_ok: Optional[bool] = None
    shifted_residual: Optional[float] = Field(None, description="worst constraint violation of the shifted plans at t+1")
    shifted_feasible_ok: Optional[bool] = None
    shifted_cost_ok: Optional[bool] = None
    tolerance: float

    @property
    def ok(self) -> bool:
        return all(flag is not False for flag in (self.vehicle_bound_ok, self.triangle_bound_ok,
                                                  self.sum_bound_ok, self.decrease_ok,
                                                  self.shifted_feasible_ok, self.shifted_cost_ok))


class LyapunovRow(BaseModel):
    """One row of the Lyapunov trace; delta and bound are filled once t+1 is known"""
    timestep: int
    values: Dict[int, float]
    total: float
    delta: Optional[float] = None
    bound: Optional[float] = None
    epsilon_sum: Optional[float] = None
    monitored: bool = False
    shifted_residual: Optional[float] = None
    ok: Optional[bool] = None


class CounterexampleCase(BaseModel):
    name: str
    lhs: float
    rhs: float
    gap: float
    claim_violated: bool
    detail: str


class CheckReport(BaseModel):
    topology_ok: bool
    topology_detail: str
    nilpotency_index: Optional[int] = None
    settling_time: Optional[float] = None
    spectral_radius: Optional[float] = None
    weights: WeightReport

    @property
    def passed(self) -> bool:
        return self.topology_ok and self.nilpotency_index is not None and self.weights.passed
