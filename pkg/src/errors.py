"""
Exceptions raised across the package.

Each carries an exit code and a human readable detail, so the CLI can turn
any of them into a process exit status without knowing where it came from.
"""

from typing import Optional


class DmpcError(Exception):
    exit_code: int = 1

    def __init__(self, detail: str, exit_code: Optional[int] = None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code


class ContractViolation(DmpcError, ValueError):
    """A caller broke an operation's precondition."""
    exit_code = 1


class ScenarioError(DmpcError):
    exit_code = 2


class TopologyError(DmpcError):
    exit_code = 2


class SolverInfeasibleError(DmpcError):
    exit_code = 3

    def __init__(self, detail: str, vehicle: Optional[int] = None, timestep: Optional[int] = None):
        super().__init__(detail)
        self.vehicle = vehicle
        self.timestep = timestep


class ProtocolError(DmpcError):
    exit_code = 4

    def __init__(self, detail: str, sender: Optional[int] = None):
        super().__init__(detail)
        self.sender = sender


class DecodeError(DmpcError):
    exit_code = 4

    def __init__(self, detail: str, offset: int):
        super().__init__(f"{detail} (at byte offset {offset})")
        self.offset = offset
