"""
Quadrature oracles for the two-dimensional systems.

Exact partition functions, basin free-energy differences and marginal profiles
by composite Simpson integration on rectangular grids. Each grid estimate is
repeated on the grid with half the spacing and the Richardson difference
|A_h - A_h/2| / 15 is reported as its discretization error.

These functions evaluate the energy model they are given; pass a separate
instance if the run's energy-call counter must stay untouched.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.integrate import simpson

from energy_models import DoubleWell, EnergyModel, MuellerPotential, RestrainedModel
from errors import ConfigError

logger = logging.getLogger(__name__)

DEFAULT_POINTS = 401
SUBPOINTS_PER_BIN = 9


@dataclass(frozen=True)
class Region:
    """Axis-aligned rectangle [x_lo, x_hi] × [y_lo, y_hi]."""
    x_lo: float
    x_hi: float
    y_lo: float
    y_hi: float

    def __post_init__(self):
        if not (self.x_lo < self.x_hi and self.y_lo < self.y_hi):
            raise ConfigError(f"degenerate region {self}")

    def split_x(self, at: float) -> tuple["Region", "Region"]:
        return Region(self.x_lo, at, self.y_lo, self.y_hi), Region(at, self.x_hi, self.y_lo, self.y_hi)

    def split_y(self, at: float) -> tuple["Region", "Region"]:
        return Region(self.x_lo, self.x_hi, self.y_lo, at), Region(self.x_lo, self.x_hi, at, self.y_hi)


@dataclass(frozen=True)
class GridEstimate:
    value: float
    richardson_error: float
    points: int


def _odd(n: int) -> int:
    if n < 3:
        raise ConfigError(f"Simpson integration needs at least 3 points, got {n}")
    return n if n % 2 else n + 1


def _reduced_grid(model: EnergyModel, region: Region, tau: float, n: int):
    xs = np.linspace(region.x_lo, region.x_hi, n)
    ys = np.linspace(region.y_lo, region.y_hi, n)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    u = model.energy(np.column_stack([X.ravel(), Y.ravel()])).reshape(n, n) / tau
    return xs, ys, u


def _log_partition(model: EnergyModel, region: Region, tau: float, n: int) -> float:
    xs, ys, u = _reduced_grid(model, region, tau, _odd(n))
    shift = np.min(u)
    inner = simpson(np.exp(-(u - shift)), x=ys, axis=1)
    return float(np.log(simpson(inner, x=xs)) - shift)


def log_partition_2d(model: EnergyModel, region: Region, tau: float = 1.0,
                     points: int = DEFAULT_POINTS) -> GridEstimate:
    """log ∫∫_region exp(-u/τ) with its Richardson error."""
    if model.dim != 2:
        raise ConfigError(f"grid quadrature needs a 2-D model, got dimension {model.dim}")
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    n = _odd(points)
    coarse = _log_partition(model, region, tau, n)
    fine = _log_partition(model, region, tau, 2 * n - 1)
    return GridEstimate(fine, abs(fine - coarse) / 15.0, 2 * n - 1)


def basin_delta_a(model_a: EnergyModel, region_a: Region, model_b: EnergyModel, region_b: Region,
                  tau: float = 1.0, points: int = DEFAULT_POINTS) -> GridEstimate:
    """A_B - A_A = -log(Z_B / Z_A) in units of the thermal energy at τ."""
    za = log_partition_2d(model_a, region_a, tau, points)
    zb = log_partition_2d(model_b, region_b, tau, points)
    delta = za.value - zb.value
    err = float(np.hypot(za.richardson_error, zb.richardson_error))
    logger.debug(f"[quadrature tau {tau}] Delta A = {delta:.6f} (Richardson error {err:.2e})")
    return GridEstimate(delta, err, za.points)


def marginal_profile(model: EnergyModel, index: int, edges: np.ndarray, other_range: tuple[float, float],
                     tau: float = 1.0, points: int = DEFAULT_POINTS,
                     subpoints: int = SUBPOINTS_PER_BIN) -> np.ndarray:
    """Exact bin free energies -log P(bin) along coordinate `index`, anchored at min 0.

    Bin masses integrate the marginal density over each bin, so the result is
    directly comparable to a weighted histogram with the same edges.
    """
    if index not in (0, 1):
        raise ConfigError(f"marginal index must be 0 or 1, got {index}")
    edges = np.asarray(edges, dtype=np.float64)
    sub = _odd(subpoints)
    n_other = _odd(points)
    other = np.linspace(other_range[0], other_range[1], n_other)
    r = np.concatenate([np.linspace(lo, hi, sub) for lo, hi in zip(edges[:-1], edges[1:])])
    R, O = np.meshgrid(r, other, indexing="ij")
    grid = np.column_stack([R.ravel(), O.ravel()] if index == 0 else [O.ravel(), R.ravel()])
    u = model.energy(grid).reshape(len(r), n_other) / tau
    shift = np.min(u)
    density = simpson(np.exp(-(u - shift)), x=other, axis=1).reshape(len(edges) - 1, sub)
    mass = np.array([simpson(density[i], x=r[i * sub:(i + 1) * sub]) for i in range(len(edges) - 1)])
    with np.errstate(divide="ignore"):
        free_energy = -np.log(mass)
    return free_energy - np.min(free_energy)


# ── Default domains ────────────────────────────────────────────────────────────

def integration_region(model: EnergyModel, tau: float = 1.0) -> Region:
    """A rectangle holding essentially all of exp(-u/τ) for the bundled 2-D systems."""
    base = model.model if isinstance(model, RestrainedModel) else model
    if isinstance(base, DoubleWell):
        half_y = 12.0 * np.sqrt(tau / base.d)
        return Region(-4.0 - tau, 4.0 + tau, -half_y, half_y)
    if isinstance(base, MuellerPotential):
        return Region(-2.0, 1.5, -0.75, 2.5)
    raise ConfigError(f"no default integration region for '{model.name}'")


def basins(model: EnergyModel, tau: float = 1.0, split: Optional[float] = None) -> tuple[Region, Region]:
    """The two metastable basins: split at the barrier for the double well, along y for Mueller."""
    base = model.model if isinstance(model, RestrainedModel) else model
    region = integration_region(model, tau)
    if isinstance(base, DoubleWell):
        return region.split_x(base.stationary_points()[1] if split is None else split)
    return region.split_y(1.0 if split is None else split)
