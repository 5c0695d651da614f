"""
Reduced energies u(x) with analytic gradients for the benchmark systems.

Every model counts the configurations it evaluates (one per row, whether energy,
gradient or both were requested). The counter is shared by all threads using the
model and is what run manifests report as `energy_calls`.

Registry names: double_well, mueller, dimer, toy_chain, harmonic.
"""

import logging
import threading
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from errors import ConfigError
from internal_coords import bond_angle_dihedral, chain_zmatrix, ic_jacobian, place_particle

logger = logging.getLogger(__name__)

E_MAX = 1e20
PAIR_DISTANCE_FLOOR = 1e-9
DEFAULT_CHUNK = 2048


def _as_batch(x: np.ndarray, dim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise ConfigError(f"expected configurations of width {dim}, got shape {x.shape}")
    return x, single


# ── Model base ─────────────────────────────────────────────────────────────────

class EnergyModel:
    """Base class. Subclasses implement `_evaluate(x) -> (energy (B,), gradient (B, d))`."""

    name = "model"

    def __init__(self, dim: int, params: dict):
        self.dim = int(dim)
        self.params = dict(params)
        self._calls = 0
        self._lock = threading.Lock()

    @property
    def calls(self) -> int:
        return self._calls

    def _count(self, n: int) -> None:
        with self._lock:
            self._calls += int(n)

    def _evaluate(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def energy_and_gradient(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        batch, single = _as_batch(x, self.dim)
        self._count(len(batch))
        e, g = self._evaluate(batch)
        return (e[0], g[0]) if single else (e, g)

    def energy(self, x: np.ndarray) -> np.ndarray:
        return self.energy_and_gradient(x)[0]

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return self.energy_and_gradient(x)[1]

    def random_points(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Typical finite configurations for gradient batteries."""
        return rng.uniform(-2.0, 2.0, size=(n, self.dim))

    def describe(self) -> dict:
        return {"name": self.name, "dim": self.dim, **self.params}


# ── Two-dimensional systems ────────────────────────────────────────────────────

def double_well_energy(x: np.ndarray, a: float = 1.0, b: float = 6.0, c: float = 1.0, d: float = 1.0):
    """u = ¼a x⁴ - ½b x² + c x + ½d y²; returns (energy (B,), gradient (B, 2))."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    x1, x2 = x[:, 0], x[:, 1]
    e = 0.25 * a * x1 ** 4 - 0.5 * b * x1 ** 2 + c * x1 + 0.5 * d * x2 ** 2
    g = np.stack([a * x1 ** 3 - b * x1 + c, d * x2], axis=1)
    return e, g


class DoubleWell(EnergyModel):
    name = "double_well"

    def __init__(self, a: float = 1.0, b: float = 6.0, c: float = 1.0, d: float = 1.0):
        super().__init__(2, {"a": a, "b": b, "c": c, "d": d})
        self.a, self.b, self.c, self.d = float(a), float(b), float(c), float(d)

    def _evaluate(self, x):
        return double_well_energy(x, self.a, self.b, self.c, self.d)

    def stationary_points(self) -> np.ndarray:
        """Sorted real roots of u'(x) = 0 along x₁."""
        roots = np.roots([self.a, 0.0, -self.b, self.c])
        return np.sort(roots[np.abs(roots.imag) < 1e-9].real)

    def barrier_height(self, well: str = "left") -> float:
        pts = self.stationary_points()
        if len(pts) != 3:
            raise ConfigError(f"double well with a={self.a}, b={self.b}, c={self.c} has no barrier")
        u = lambda s: 0.25 * self.a * s ** 4 - 0.5 * self.b * s ** 2 + self.c * s
        start = pts[0] if well == "left" else pts[2]
        return float(u(pts[1]) - u(start))

    def random_points(self, rng, n):
        return rng.uniform(-3.0, 3.0, size=(n, 2))


MUELLER_TABLE = {
    "A": np.array([-200.0, -100.0, -170.0, 15.0]),
    "a": np.array([-1.0, -1.0, -6.5, 0.7]),
    "b": np.array([0.0, 0.0, 11.0, 0.6]),
    "c": np.array([-10.0, -10.0, 6.5, 0.7]),
    "xc": np.array([1.0, 0.0, -0.5, -1.0]),
    "yc": np.array([0.0, 0.5, 1.5, 1.0]),
}


def mueller_energy(x: np.ndarray, alpha: float = 0.1):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    t = MUELLER_TABLE
    dx = x[:, :1] - t["xc"]
    dy = x[:, 1:2] - t["yc"]
    terms = t["A"] * np.exp(t["a"] * dx ** 2 + t["b"] * dx * dy + t["c"] * dy ** 2)
    e = alpha * terms.sum(axis=1)
    gx = alpha * np.sum(terms * (2.0 * t["a"] * dx + t["b"] * dy), axis=1)
    gy = alpha * np.sum(terms * (t["b"] * dx + 2.0 * t["c"] * dy), axis=1)
    return e, np.stack([gx, gy], axis=1)


class MuellerPotential(EnergyModel):
    name = "mueller"

    def __init__(self, alpha: float = 0.1):
        super().__init__(2, {"alpha": alpha})
        self.alpha = float(alpha)

    def _evaluate(self, x):
        return mueller_energy(x, self.alpha)


# ── Harmonic reference ─────────────────────────────────────────────────────────

class HarmonicModel(EnergyModel):
    """u = ½ Σ k_i (x_i - c_i)²; exact Gaussian oracle for tests."""

    name = "harmonic"

    def __init__(self, dim: int = 2, stiffness=1.0, center=0.0):
        stiffness = np.broadcast_to(np.asarray(stiffness, dtype=np.float64), (dim,)).copy()
        center = np.broadcast_to(np.asarray(center, dtype=np.float64), (dim,)).copy()
        if np.any(stiffness <= 0):
            raise ConfigError("harmonic stiffness must be positive")
        super().__init__(dim, {"stiffness": stiffness.tolist(), "center": center.tolist()})
        self.stiffness = stiffness
        self.center = center

    def _evaluate(self, x):
        dx = x - self.center
        return 0.5 * np.sum(self.stiffness * dx * dx, axis=1), self.stiffness * dx

    def random_points(self, rng, n):
        return self.center + rng.standard_normal((n, self.dim)) / np.sqrt(self.stiffness)


# ── Restraints ─────────────────────────────────────────────────────────────────

class RestrainedModel(EnergyModel):
    """Adds a flat-bottom harmonic wall ½k·dist(x[index], [lower, upper])² to a model.

    Used to confine a generator to one metastable state.
    """

    def __init__(self, model: EnergyModel, index: int, lower: float = -np.inf, upper: float = np.inf,
                 k: float = 100.0):
        if not 0 <= index < model.dim:
            raise ConfigError(f"restraint index {index} outside model dimension {model.dim}")
        if not lower < upper or k <= 0:
            raise ConfigError("restraint needs lower < upper and k > 0")
        super().__init__(model.dim, {**model.params, "restraint": {"index": index, "lower": lower,
                                                                    "upper": upper, "k": k}})
        self.name = f"{model.name}+restraint"
        self.model = model
        self.index, self.lower, self.upper, self.k = int(index), float(lower), float(upper), float(k)

    @property
    def calls(self) -> int:
        return self.model.calls

    def _count(self, n):
        pass

    def _evaluate(self, x):
        e, g = self.model.energy_and_gradient(x)
        r = x[:, self.index]
        over = np.maximum(r - self.upper, 0.0) - np.maximum(self.lower - r, 0.0)
        g = g.copy()
        g[:, self.index] += self.k * over
        return e + 0.5 * self.k * over ** 2, g

    def random_points(self, rng, n):
        return self.model.random_points(rng, n)


# ── Particle dimer ─────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class DimerParams:
    n_solvent: int = 36
    eps: float = 1.0
    sigma: float = 1.1
    k_d: float = 20.0
    d0: float = 1.5
    a: float = 25.0
    b: float = 10.0
    c: float = -0.5
    l_box: float = 3.0
    k_box: float = 100.0


class ParticleDimer(EnergyModel):
    """Bistable dimer (particles 0 and 1) in a box of repulsive solvent particles, 2-D.

    Layout: [x0, y0, x1, y1, ..., x_{n+1}, y_{n+1}].
    """

    name = "dimer"

    def __init__(self, chunk_size: int = DEFAULT_CHUNK, **overrides):
        try:
            self.p = DimerParams(**overrides)
        except TypeError as e:
            raise ConfigError(f"dimer: {e}")
        self.n_particles = self.p.n_solvent + 2
        super().__init__(2 * self.n_particles, asdict(self.p))
        iu, ju = np.triu_indices(self.n_particles, k=1)
        keep = ~((iu == 0) & (ju == 1))
        self._pi, self._pj = iu[keep], ju[keep]
        self.chunk_size = int(chunk_size)
        self.singularities = 0
        self.solvent = np.arange(2, self.n_particles)

    def _evaluate(self, x):
        energies = np.empty(len(x))
        grads = np.empty_like(x)
        for start in range(0, len(x), self.chunk_size):
            sl = slice(start, start + self.chunk_size)
            energies[sl], grads[sl] = self._evaluate_chunk(x[sl])
        return energies, grads

    def _evaluate_chunk(self, x):
        p = self.p
        B = len(x)
        pos = x.reshape(B, self.n_particles, 2)
        grad = np.zeros_like(pos)

        # dimer centre and y restraints
        sx = pos[:, 0, 0] + pos[:, 1, 0]
        e = p.k_d * sx ** 2 + p.k_d * pos[:, 0, 1] ** 2 + p.k_d * pos[:, 1, 1] ** 2
        grad[:, 0, 0] += 2.0 * p.k_d * sx
        grad[:, 1, 0] += 2.0 * p.k_d * sx
        grad[:, 0, 1] += 2.0 * p.k_d * pos[:, 0, 1]
        grad[:, 1, 1] += 2.0 * p.k_d * pos[:, 1, 1]

        # bistable dimer bond
        delta = pos[:, 0] - pos[:, 1]
        dist = np.maximum(np.sqrt(np.sum(delta ** 2, axis=1)), PAIR_DISTANCE_FLOOR)
        s = dist - p.d0
        e = e + 0.25 * p.a * s ** 4 - 0.5 * p.b * s ** 2 + p.c * s ** 4
        de_dd = p.a * s ** 3 - p.b * s + 4.0 * p.c * s ** 3
        unit = delta / dist[:, None]
        grad[:, 0] += de_dd[:, None] * unit
        grad[:, 1] -= de_dd[:, None] * unit

        # box walls
        over = np.maximum(np.abs(pos) - p.l_box, 0.0)
        e = e + p.k_box * np.sum(over ** 2, axis=(1, 2))
        grad += 2.0 * p.k_box * over * np.sign(pos)

        # r^-12 repulsion, dimer pair excluded
        rij = pos[:, self._pi] - pos[:, self._pj]
        r = np.sqrt(np.sum(rij ** 2, axis=2))
        singular = r < PAIR_DISTANCE_FLOOR
        if singular.any():
            n_sing = int(singular.sum())
            with self._lock:
                self.singularities += n_sing
            logger.warning(f"Dimer: {n_sing} coincident particle pairs, repulsion evaluated at the distance floor")
        r = np.maximum(r, PAIR_DISTANCE_FLOOR)
        rep = p.eps * (p.sigma / r) ** 12
        e = e + rep.sum(axis=1)
        coef = -12.0 * rep / r ** 2
        pair_grad = coef[..., None] * rij
        np.add.at(grad, (slice(None), self._pi), pair_grad)
        np.add.at(grad, (slice(None), self._pj), -pair_grad)
        return e, grad.reshape(B, -1)

    def initial_configuration(self, dimer_distance: float = 1.5, spacing: float = 0.1) -> np.ndarray:
        """Dimer on the x axis, solvent placed by farthest-point selection on a grid inside the box."""
        half = self.p.l_box - 0.1
        ticks = np.arange(-half, half + 1e-12, spacing)
        gx, gy = np.meshgrid(ticks, ticks)
        candidates = np.stack([gx.ravel(), gy.ravel()], axis=1)
        placed = [np.array([-0.5 * dimer_distance, 0.0]), np.array([0.5 * dimer_distance, 0.0])]
        mind = np.min([np.sum((candidates - q) ** 2, axis=1) for q in placed], axis=0)
        for _ in range(self.p.n_solvent):
            best = int(np.argmax(mind))
            placed.append(candidates[best])
            mind = np.minimum(mind, np.sum((candidates - candidates[best]) ** 2, axis=1))
        return np.concatenate(placed)

    def random_points(self, rng, n):
        base = self.initial_configuration()
        return base + 0.05 * rng.standard_normal((n, self.dim))


def dimer_energy(x: np.ndarray, **overrides):
    """(energy, gradient) of the solvated dimer without touching any call counter."""
    model = ParticleDimer(**overrides)
    batch, _ = _as_batch(x, model.dim)
    return model._evaluate(batch)


def dimer_distance(x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return np.sqrt((x[:, 0] - x[:, 2]) ** 2 + (x[:, 1] - x[:, 3]) ** 2)


def dimer_distance_gradient(x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    d = np.maximum(dimer_distance(x), PAIR_DISTANCE_FLOOR)
    g = np.zeros_like(x)
    g[:, 0] = (x[:, 0] - x[:, 2]) / d
    g[:, 1] = (x[:, 1] - x[:, 3]) / d
    g[:, 2] = -g[:, 0]
    g[:, 3] = -g[:, 1]
    return g


# ── Toy chain ──────────────────────────────────────────────────────────────────

class ToyChain(EnergyModel):
    """3-D bead chain: harmonic bonds and angles, a cosine dihedral term and a
    harmonic tether pinning the first three beads to a reference frame."""

    name = "toy_chain"

    def __init__(self, n_beads: int = 5, bond_length: float = 1.0, k_bond: float = 100.0,
                 angle: float = 1.9, k_angle: float = 20.0, dihedral: float = 1.0, k_dihedral: float = 2.0,
                 k_tether: float = 100.0):
        super().__init__(3 * n_beads, {
            "n_beads": n_beads, "bond_length": bond_length, "k_bond": k_bond, "angle": angle,
            "k_angle": k_angle, "dihedral": dihedral, "k_dihedral": k_dihedral, "k_tether": k_tether,
        })
        self.zmatrix = chain_zmatrix(n_beads)
        self.n_beads = n_beads
        self.bond_length, self.k_bond = bond_length, k_bond
        self.angle, self.k_angle = angle, k_angle
        self.dihedral, self.k_dihedral = dihedral, k_dihedral
        self.k_tether = k_tether
        self.reference = self.reference_chain()

    def reference_chain(self) -> np.ndarray:
        """Chain with every bond, angle and dihedral at its minimum."""
        frame = np.array([
            [0.0, 0.0, 0.0],
            [self.bond_length, 0.0, 0.0],
            [self.bond_length * (1.0 - np.cos(self.angle)), self.bond_length * np.sin(self.angle), 0.0],
        ])
        pos = np.zeros((1, self.n_beads, 3))
        pos[0, :3] = frame
        ones = np.ones(1)
        for i, j, k, l in self.zmatrix.entries:
            pos[:, i], _ = place_particle(pos[:, j], pos[:, k], pos[:, l], self.bond_length * ones,
                                          self.angle * ones, self.dihedral * ones, i)
        return pos.reshape(-1)

    def _evaluate(self, x):
        B = len(x)
        pos = x.reshape(B, self.n_beads, 3)
        grad = np.zeros_like(pos)

        tether = pos[:, :3] - self.reference.reshape(self.n_beads, 3)[:3]
        e = 0.5 * self.k_tether * np.sum(tether ** 2, axis=(1, 2))
        grad[:, :3] += self.k_tether * tether

        for i, j, k, l in self.zmatrix.entries:
            r = (pos[:, i], pos[:, j], pos[:, k], pos[:, l])
            d, alpha, phi = bond_angle_dihedral(*r, particle=i, check=False)
            jac = ic_jacobian(*r)
            e = e + 0.5 * self.k_bond * (d - self.bond_length) ** 2 \
                + 0.5 * self.k_angle * (alpha - self.angle) ** 2 \
                + self.k_dihedral * (1.0 - np.cos(phi - self.dihedral))
            de = np.stack([
                self.k_bond * (d - self.bond_length),
                self.k_angle * (alpha - self.angle),
                self.k_dihedral * np.sin(phi - self.dihedral),
            ], axis=1)
            for m, atom in enumerate((i, j, k, l)):
                grad[:, atom] += np.einsum("bc,bcx->bx", de, jac[:, :, m, :])
        return e, grad.reshape(B, -1)

    def random_points(self, rng, n):
        return self.reference + 0.05 * rng.standard_normal((n, self.dim))


# ── Prior and regularization ───────────────────────────────────────────────────

def prior_energy(z: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """‖z‖²/(2τ), the Gaussian prior energy with its normalization constant dropped."""
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    z = np.asarray(z, dtype=np.float64)
    return np.sum(z * z, axis=-1) / (2.0 * tau)


@dataclass(frozen=True)
class EnergyCap:
    e_high: float
    e_max: float = E_MAX

    def __post_init__(self):
        if not self.e_high < self.e_max:
            raise ConfigError(f"E_high ({self.e_high}) must be below E_max ({self.e_max})")


def regularize_energy(energy, cap: Optional[EnergyCap]) -> tuple[np.ndarray, np.ndarray]:
    """Three-branch E_reg: identity, logarithmic above E_high, constant above E_max.

    Returns (E_reg, dE_reg/dE). With `cap=None` energies pass through unchanged.
    """
    e = np.asarray(energy, dtype=np.float64)
    if cap is None:
        return e.copy(), np.ones_like(e)
    with np.errstate(invalid="ignore", over="ignore"):
        top = cap.e_high + np.log(cap.e_max - cap.e_high + 1.0)
        excess = np.clip(e, cap.e_high, cap.e_max) - cap.e_high
        log_branch = cap.e_high + np.log1p(excess)
        value = np.where(e < cap.e_high, e, np.where(e <= cap.e_max, log_branch, top))
        deriv = np.where(e < cap.e_high, 1.0, np.where(e <= cap.e_max, 1.0 / (excess + 1.0), 0.0))
    nan = np.isnan(e)
    value = np.where(nan, np.nan, value)
    deriv = np.where(nan, np.nan, deriv)
    return value, deriv


# ── Hungarian relabeling ───────────────────────────────────────────────────────

def hungarian(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost assignment for a square cost matrix, O(n³) shortest augmenting paths.

    Returns `col` with row i assigned to column col[i].
    """
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if cost.shape != (n, n):
        raise ConfigError(f"assignment needs a square cost matrix, got {cost.shape}")
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    row_of = np.zeros(n + 1, dtype=int)     # row_of[j] = row matched to column j (1-based, 0 = free)
    way = np.zeros(n + 1, dtype=int)
    for i in range(1, n + 1):
        row_of[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = row_of[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            candidates = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(candidates)) + 1
            delta = candidates[j1 - 1]
            u[row_of[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if row_of[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            row_of[j0] = row_of[j1]
            j0 = j1
    col = np.empty(n, dtype=int)
    for j in range(1, n + 1):
        col[row_of[j] - 1] = j - 1
    return col


def relabel_particles(x: np.ndarray, reference: np.ndarray, identical_set, dim_per_particle: int = 2) -> np.ndarray:
    """Permute interchangeable particles of each configuration onto `reference` ordering,
    minimizing the total squared displacement."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = np.atleast_2d(x)
    idx = np.asarray(identical_set, dtype=int)
    ref = np.asarray(reference, dtype=np.float64).reshape(-1, dim_per_particle)[idx]
    out = batch.copy()
    for b in range(len(batch)):
        pos = batch[b].reshape(-1, dim_per_particle)
        current = pos[idx]
        cost = np.sum((current[:, None, :] - ref[None, :, :]) ** 2, axis=2)
        col = hungarian(cost)
        new = pos.copy()
        new[idx[col]] = current
        out[b] = new.reshape(-1)
    return out[0] if single else out


@dataclass(frozen=True)
class Relabeler:
    """Hungarian relabeling of one particle set onto a fixed reference configuration."""
    reference: np.ndarray
    identical_set: np.ndarray
    dim_per_particle: int = 2

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return relabel_particles(x, self.reference, self.identical_set, self.dim_per_particle)


def relabeler_for(model: EnergyModel, reference: Optional[np.ndarray]) -> Optional[Relabeler]:
    """The solvent relabeler for dimer systems (restrained or not); None for systems without identical particles."""
    base = model.model if isinstance(model, RestrainedModel) else model
    if not isinstance(base, ParticleDimer):
        return None
    if reference is None:
        raise ConfigError("solvent relabeling needs a reference configuration")
    reference = np.asarray(reference, dtype=np.float64).reshape(-1)
    if reference.shape[0] != base.dim:
        raise ConfigError(f"relabeling reference has width {reference.shape[0]}, dimer has {base.dim}")
    return Relabeler(reference, base.solvent)


# ── Registry ───────────────────────────────────────────────────────────────────

SYSTEMS = {
    "double_well": DoubleWell,
    "mueller": MuellerPotential,
    "dimer": ParticleDimer,
    "toy_chain": ToyChain,
    "harmonic": HarmonicModel,
}


def make_system(name: str, params: Optional[dict] = None, restraint: Optional[dict] = None) -> EnergyModel:
    if name not in SYSTEMS:
        raise ConfigError(f"unknown system '{name}' (known: {', '.join(sorted(SYSTEMS))})")
    try:
        model = SYSTEMS[name](**(params or {}))
    except TypeError as e:
        raise ConfigError(f"system '{name}': {e}")
    if restraint:
        model = RestrainedModel(model, **restraint)
    logger.debug(f"System created: {model.describe()}")
    return model
