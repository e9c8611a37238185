"""
Discrete-time third-order longitudinal dynamics of one platoon vehicle.

State x = (position, velocity, acceleration), input u = desired acceleration,
output y = C x = (position, velocity). Acceleration follows the command with
a first-order lag of time constant tau.
"""

import logging
from typing import Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import ContractViolation

logger = logging.getLogger(__name__)

STATE_DIM = 3
INPUT_DIM = 1
OUTPUT_DIM = 2

# y = C x
C = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


class VehicleState(BaseModel):
    """Position [m], velocity [m/s] and acceleration [m/s^2] at one timestep."""
    model_config = ConfigDict(frozen=True, allow_inf_nan=False)

    position: float = 0.0
    velocity: float = 0.0
    acceleration: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.position, self.velocity, self.acceleration])

    @classmethod
    def from_array(cls, x: np.ndarray) -> "VehicleState":
        return cls(position=float(x[0]), velocity=float(x[1]), acceleration=float(x[2]))


class Output(BaseModel):
    """Measured output: position [m] and velocity [m/s]."""
    model_config = ConfigDict(frozen=True, allow_inf_nan=False)

    position: float = 0.0
    velocity: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.position, self.velocity])


class VehicleParams(BaseModel):
    model_config = ConfigDict(frozen=True, allow_inf_nan=False)

    tau: float = Field(..., gt=0, description="inertial delay [s]")
    u_min: float = -3.0
    u_max: float = 3.0

    @model_validator(mode="after")
    def check_bounds(self):
        if not self.u_min < self.u_max:
            raise ValueError(f"u_min ({self.u_min}) must be below u_max ({self.u_max})")
        return self


def system_matrices(params: VehicleParams, dt: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Euler discretization of the lagged double integrator.

    Returns:
        (A, B, C) with A 3x3, B 3x1, C 2x3. B carries the dt/tau factor so
        a positive command raises the acceleration.
    """
    if dt <= 0:
        raise ContractViolation(f"dt must be positive, got {dt}")
    if dt >= params.tau:
        logger.warning(f"dt={dt} is not below tau={params.tau}; the acceleration lag is no longer monotone")
    ratio = dt / params.tau
    A = np.array([
        [1.0, dt, 0.0],
        [0.0, 1.0, dt],
        [0.0, 0.0, 1.0 - ratio],
    ])
    B = np.array([[0.0], [0.0], [ratio]])
    return A, B, C.copy()


def step(state: VehicleState, u: float, params: VehicleParams, dt: float) -> VehicleState:
    """Advance one timestep: x(t+1) = A x(t) + B u(t)."""
    if not params.u_min <= u <= params.u_max:
        raise ContractViolation(f"input {u} outside [{params.u_min}, {params.u_max}]")
    A, B, _ = system_matrices(params, dt)
    return VehicleState.from_array(A @ state.as_array() + B[:, 0] * u)


def output(state: VehicleState) -> Output:
    return Output(position=state.position, velocity=state.velocity)


def rollout(x0: np.ndarray, inputs: np.ndarray, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """States x(0..H) for inputs u(0..H-1); array of shape (H+1, 3)."""
    inputs = np.asarray(inputs, dtype=float)
    states = np.empty((len(inputs) + 1, STATE_DIM))
    states[0] = x0
    for k, u in enumerate(inputs):
        states[k + 1] = A @ states[k] + B[:, 0] * u
    return states
