"""
Affine spacing policies: d_{i,i-1}(v) = delta_h * v + delta_safe.

A constant distance headway is the delta_h = 0 special case. Policies are
held per vehicle so the first follower can track the virtual leader with a
zero gap while the rest keep a headway.
"""

import logging
from typing import Dict, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

logger = logging.getLogger(__name__)


class SpacingPolicy(BaseModel):
    model_config = ConfigDict(frozen=True, allow_inf_nan=False)

    delta_h: float = Field(0.0, ge=0, description="time headway [s]")
    delta_safe: float = Field(0.0, ge=0, description="standstill gap [m]")


class PlatoonSpacing:
    """Spacing policy of every follower 1..N (index 0, the leader, is unused)."""

    def __init__(self, policies: Sequence[SpacingPolicy]):
        self.policies = list(policies)
        for i, policy in enumerate(self.policies[2:], start=2):
            if policy.delta_safe <= 0:
                logger.warning(f"vehicle {i} has a non-positive standstill gap {policy.delta_safe}")

    @classmethod
    def uniform(cls, n_followers: int, delta_h: float, delta_safe: float, zero_first: bool = False,
                overrides: Optional[Dict[int, SpacingPolicy]] = None) -> "PlatoonSpacing":
        base = SpacingPolicy(delta_h=delta_h, delta_safe=delta_safe)
        policies = [SpacingPolicy()] + [base] * n_followers
        if zero_first and n_followers >= 1:
            policies[1] = SpacingPolicy()
        for i, policy in (overrides or {}).items():
            policies[int(i)] = policy
        return cls(policies)

    @property
    def n_followers(self) -> int:
        return len(self.policies) - 1

    def policy(self, i: int) -> SpacingPolicy:
        return self.policies[i]

    def headways(self) -> np.ndarray:
        """delta_h indexed 0..N."""
        return np.array([p.delta_h for p in self.policies])

    def is_uniform(self) -> bool:
        followers = self.policies[1:]
        return all(p == followers[0] for p in followers)

    def chain_coefficients(self, i: int, j: int) -> tuple:
        """
        (headway, standstill) sums such that the offset of i relative to j is
        headway * v + standstill. Summed over vehicles j+1..i and negated when
        i is ahead of j.
        """
        if i == j:
            return 0.0, 0.0
        lo, hi = (j, i) if i > j else (i, j)
        h = sum(self.policies[m].delta_h for m in range(lo + 1, hi + 1))
        s = sum(self.policies[m].delta_safe for m in range(lo + 1, hi + 1))
        sign = 1.0 if i > j else -1.0
        return sign * h, sign * s


def desired_gap(policy: SpacingPolicy, v: float) -> float:
    return policy.delta_h * v + policy.delta_safe


def pair_offset(i: int, j: int, spacing: PlatoonSpacing, v: float) -> np.ndarray:
    """Output-shaped offset (signed gap of i behind j at velocity v, 0)."""
    h, s = spacing.chain_coefficients(i, j)
    return np.array([h * v + s, 0.0])


def desired_output(i: int, y0: np.ndarray, v0: float, spacing: PlatoonSpacing) -> np.ndarray:
    """Leader output shifted back by the cumulative desired gaps of vehicles 1..i."""
    gap = sum(desired_gap(spacing.policy(m), v0) for m in range(1, i + 1))
    return np.asarray(y0, dtype=float) - np.array([gap, 0.0])
