"""
Tracking-error metrics relative to each vehicle's predecessor.

e_i(t) = p_{i-1}(t) - p_i(t) - d_{i,i-1}(v_i(t)) and v_{i-1}(t) - v_i(t), with
vehicle 1 measured against the virtual leader.
"""

import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from .spacing import PlatoonSpacing

logger = logging.getLogger(__name__)


class VehicleSummary(BaseModel):
    vehicle: int
    spacing_rmse: float
    spacing_max_abs: float
    velocity_rmse: float
    velocity_max_abs: float


class MetricsTable(BaseModel):
    """Per-step errors of shape (T+1, N) and inputs of shape (T, N); column i-1 is vehicle i."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    times: np.ndarray
    spacing_errors: np.ndarray
    velocity_errors: np.ndarray
    inputs: np.ndarray

    @property
    def n_followers(self) -> int:
        return self.spacing_errors.shape[1]

    def summaries(self) -> List[VehicleSummary]:
        s_rmse, s_max = rmse(self.spacing_errors), max_abs(self.spacing_errors)
        v_rmse, v_max = rmse(self.velocity_errors), max_abs(self.velocity_errors)
        return [
            VehicleSummary(vehicle=i + 1, spacing_rmse=float(s_rmse[i]), spacing_max_abs=float(s_max[i]),
                           velocity_rmse=float(v_rmse[i]), velocity_max_abs=float(v_max[i]))
            for i in range(self.n_followers)
        ]

    def quartiles(self, values: np.ndarray) -> Tuple[float, float, float, float, float]:
        """(min, q1, median, q3, max) across vehicles, for box plots."""
        q = np.percentile(values, [0, 25, 50, 75, 100])
        return tuple(float(v) for v in q)

    def trailing_quartiles(self, values: Sequence[float]) -> Optional[Tuple[float, float, float, float, float]]:
        """Quartiles over vehicles 2..N, None with a single follower."""
        if len(values) < 2:
            return None
        return self.quartiles(np.asarray(values[1:], dtype=float))


def rmse(errors: np.ndarray, axis: int = 0) -> np.ndarray:
    return np.sqrt(np.mean(np.square(errors), axis=axis))


def max_abs(errors: np.ndarray, axis: int = 0) -> np.ndarray:
    return np.max(np.abs(errors), axis=axis)


def compute_metrics(times: np.ndarray, states: np.ndarray, inputs: np.ndarray,
                    spacing: PlatoonSpacing) -> MetricsTable:
    """
    Args:
        times: (T+1,) seconds
        states: (T+1, N+1, 3) with column 0 the leader
        inputs: (T, N) follower inputs
    """
    positions, velocities = states[:, :, 0], states[:, :, 1]
    n = states.shape[1] - 1
    h = np.array([spacing.policy(i).delta_h for i in range(1, n + 1)])
    s = np.array([spacing.policy(i).delta_safe for i in range(1, n + 1)])
    gaps = h * velocities[:, 1:] + s
    spacing_errors = positions[:, :-1] - positions[:, 1:] - gaps
    velocity_errors = velocities[:, :-1] - velocities[:, 1:]
    return MetricsTable(times=np.asarray(times, dtype=float), spacing_errors=spacing_errors,
                        velocity_errors=velocity_errors, inputs=np.asarray(inputs, dtype=float))
