"""
Exception hierarchy. The CLI maps these onto exit codes:
  ConfigError -> 2, everything else derived from BoltzgenError -> 3.
"""

from typing import Optional


class BoltzgenError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(BoltzgenError, ValueError):
    """Invalid configuration or mismatched dimensions.

    `problems` holds every validation failure found, so callers can list
    them all before exiting.
    """

    def __init__(self, message: str, problems: Optional[list[str]] = None):
        self.problems = list(problems) if problems else [message]
        super().__init__(message)


class NumericError(BoltzgenError, ArithmeticError):
    """Non-finite value encountered. `row` / `block` locate it when known."""

    def __init__(self, message: str, row: Optional[int] = None, block: Optional[str] = None):
        self.row = row
        self.block = block
        super().__init__(message)


class StageAbort(NumericError):
    """A training stage could not continue. `params` is the last finite state."""

    def __init__(self, message: str, params: Optional[dict] = None, stage: Optional[int] = None):
        self.params = params
        self.stage = stage
        super().__init__(message)


class ContractError(BoltzgenError, RuntimeError):
    """An API contract was violated, e.g. a stale gradient tape."""


class GeometryError(BoltzgenError, ValueError):
    """Internal coordinates undefined for a particle (coincident or collinear parents)."""

    def __init__(self, message: str, particle: Optional[int] = None):
        self.particle = particle
        super().__init__(message)


class DegenerateDataError(BoltzgenError, ValueError):
    """Data cannot support the requested transform (rank deficiency, too few samples)."""


class EstimatorError(BoltzgenError, ValueError):
    """A statistical estimate is undefined (zero total weight, empty profile)."""


def with_layer_index(err: BoltzgenError, index: int, kind: str) -> BoltzgenError:
    """Return a copy of `err` whose message names the flow layer it came from."""
    msg = f"layer {index} ({kind}): {err}"
    if isinstance(err, StageAbort):
        return StageAbort(msg, params=err.params, stage=err.stage)
    if isinstance(err, NumericError):
        return NumericError(msg, row=err.row, block=err.block)
    if isinstance(err, GeometryError):
        return GeometryError(msg, particle=err.particle)
    if isinstance(err, ConfigError):
        return ConfigError(msg)
    return type(err)(msg)
