"""
Mixed Cartesian / internal-coordinate layer.

Particles in the Cartesian set are whitened jointly; every other particle i is
described by its bond length d(i, j), angle α(i, j, k) and dihedral
φ(i, j, k, l) relative to three parents placed before it. Internal coordinates
are normalized by the mean and std fitted on training data.

Conventions:
  * positions are flat (B, 3N) arrays, particle p at columns 3p..3p+2
  * dihedral φ(i, j, k, l) = atan2(y, x) with b1 = unit(r_k - r_j),
    v = (r_i - r_j) ⟂ b1, w = (r_l - r_k) ⟂ b1, x = v·w, y = (b1 × v)·w
    e.g. i=(1,0,0), j=0, k=(0,1,0), l=(0,1,1) gives φ = -π/2
  * placement uses the frame e1 = unit(r_k - r_j), e2 = unit(w ⟂ e1), e3 = e2 × e1:
        r_i = r_j + d (cos α e1 + sin α cos φ e2 + sin α sin φ e3)
    which is the exact inverse of the extraction above.

Z-matrix text format (one entry per line, '#' comments):
    cartesian 0 1 2
    3 2 1 0          # particle j k l
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from errors import ConfigError, DegenerateDataError, GeometryError
from flow_layers import WhiteningLayer, fit_whitening

logger = logging.getLogger(__name__)

MIN_DISTANCE = 1e-9
COLLINEAR_SIN = 1e-9
ROUNDTRIP_TOL = 1e-8


# ── Z-matrix ───────────────────────────────────────────────────────────────────

@dataclass
class ZMatrixSpec:
    n_particles: int
    cartesian: list[int]
    entries: list[tuple[int, int, int, int]]     # (i, j, k, l) in placement order
    ic_mean: Optional[np.ndarray] = None          # (3 * len(entries),) d, α, φ per particle
    ic_std: Optional[np.ndarray] = None

    def __post_init__(self):
        self.cartesian = [int(p) for p in self.cartesian]
        self.entries = [tuple(int(a) for a in e) for e in self.entries]
        problems = []
        placed = set()
        for p in self.cartesian:
            if not 0 <= p < self.n_particles:
                problems.append(f"cartesian particle {p} out of range")
            elif p in placed:
                problems.append(f"particle {p} listed twice")
            placed.add(p)
        if len(self.cartesian) < 3:
            problems.append("the Cartesian set needs at least 3 particles to define a frame")
        for i, j, k, l in self.entries:
            if i in placed:
                problems.append(f"particle {i} listed twice")
            if len({i, j, k, l}) != 4:
                problems.append(f"particle {i}: parents ({j}, {k}, {l}) must be distinct from each other and from it")
            for parent in (j, k, l):
                if parent not in placed:
                    problems.append(f"particle {i}: parent {parent} is not placed before it")
            placed.add(i)
        missing = set(range(self.n_particles)) - placed
        if missing:
            problems.append(f"particles without coordinates: {sorted(missing)}")
        if problems:
            raise ConfigError("invalid z-matrix: " + "; ".join(problems), problems=problems)
        if self.ic_std is not None and np.any(np.asarray(self.ic_std) <= 0):
            raise DegenerateDataError("internal-coordinate stds must be positive")

    @property
    def n_ic(self) -> int:
        return len(self.entries)

    @property
    def fitted(self) -> bool:
        return self.ic_mean is not None and self.ic_std is not None

    def fit_normalization(self, positions: np.ndarray) -> "ZMatrixSpec":
        raw = extract_ics(self, positions).reshape(len(positions), -1)
        std = raw.std(axis=0)
        if np.any(std <= 0):
            bad = int(np.argmin(std)) // 3
            raise DegenerateDataError(f"particle {self.entries[bad][0]}: internal coordinate has zero variance in data")
        return ZMatrixSpec(self.n_particles, self.cartesian, self.entries, raw.mean(axis=0), std)

    def to_dict(self) -> dict:
        return {"n_particles": self.n_particles, "cartesian": self.cartesian, "entries": [list(e) for e in self.entries]}


def parse_zmatrix(text: str, n_particles: Optional[int] = None) -> ZMatrixSpec:
    cartesian: list[int] = []
    entries = []
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        try:
            if fields[0] == "cartesian":
                cartesian.extend(int(f) for f in fields[1:])
            elif len(fields) == 4:
                entries.append(tuple(int(f) for f in fields))
            else:
                raise ValueError
        except ValueError:
            raise ConfigError(f"z-matrix line {lineno}: expected 'cartesian p...' or 'i j k l', got '{raw_line.strip()}'")
    if n_particles is None:
        n_particles = len(cartesian) + len(entries)
    return ZMatrixSpec(n_particles, cartesian, entries)


def load_zmatrix(path: Path, n_particles: Optional[int] = None) -> ZMatrixSpec:
    return parse_zmatrix(Path(path).read_text(), n_particles)


def chain_zmatrix(n_beads: int) -> ZMatrixSpec:
    """Linear bead chain: the first three beads are Cartesian, bead i hangs off i-1, i-2, i-3."""
    if n_beads < 4:
        raise ConfigError(f"a chain z-matrix needs at least 4 beads, got {n_beads}")
    return ZMatrixSpec(n_beads, [0, 1, 2], [(i, i - 1, i - 2, i - 3) for i in range(3, n_beads)])


# ── Geometry kernels ───────────────────────────────────────────────────────────

def _norm(v: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("bx,bx->b", v, v))


def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("bx,bx->b", a, b)


def bond_angle_dihedral(ri, rj, rk, rl, particle: int = -1, check: bool = True):
    """Raw (d, α, φ) for one particle over a batch; each r is (B, 3)."""
    a = ri - rj
    b = rk - rj
    c = rl - rk
    d = _norm(a)
    nb = _norm(b)
    if check:
        if np.any(d < MIN_DISTANCE) or np.any(nb < MIN_DISTANCE):
            raise GeometryError(f"particle {particle}: coincident parent particles", particle=particle)
    cross_ab = np.cross(a, b)
    alpha = np.arctan2(_norm(cross_ab), _dot(a, b))

    b1 = b / nb[:, None]
    v = a - _dot(a, b1)[:, None] * b1
    w = c - _dot(c, b1)[:, None] * b1
    if check:
        if np.any(_norm(v) < COLLINEAR_SIN * d) or np.any(_norm(w) < COLLINEAR_SIN * _norm(c)):
            raise GeometryError(f"particle {particle}: collinear parents, dihedral undefined", particle=particle)
    phi = np.arctan2(_dot(np.cross(b1, v), w), _dot(v, w))
    return d, alpha, phi


def ic_jacobian(ri, rj, rk, rl) -> np.ndarray:
    """∂(d, α, φ)/∂(r_i, r_j, r_k, r_l) as a (B, 3, 4, 3) array."""
    B = ri.shape[0]
    jac = np.zeros((B, 3, 4, 3))

    a = ri - rj
    na = _norm(a)
    ua = a / na[:, None]
    jac[:, 0, 0] = ua
    jac[:, 0, 1] = -ua

    b = rk - rj
    nb = _norm(b)
    ub = b / nb[:, None]
    cos_a = _dot(ua, ub)
    sin_a = _norm(np.cross(ua, ub))
    d_alpha_da = (cos_a[:, None] * ua - ub) / (na * sin_a)[:, None]
    d_alpha_db = (cos_a[:, None] * ub - ua) / (nb * sin_a)[:, None]
    jac[:, 1, 0] = d_alpha_da
    jac[:, 1, 2] = d_alpha_db
    jac[:, 1, 1] = -(d_alpha_da + d_alpha_db)

    F = ri - rj
    G = rj - rk
    H = rl - rk
    A = np.cross(F, G)
    Bv = np.cross(H, G)
    nG = _norm(G)
    A2 = _dot(A, A)
    B2 = _dot(Bv, Bv)
    fg = _dot(F, G)
    hg = _dot(H, G)
    termA = A * (nG / A2)[:, None]
    termB = Bv * (nG / B2)[:, None]
    jac[:, 2, 0] = -termA
    jac[:, 2, 1] = termA + A * (fg / (A2 * nG))[:, None] - Bv * (hg / (B2 * nG))[:, None]
    jac[:, 2, 2] = Bv * (hg / (B2 * nG))[:, None] - A * (fg / (A2 * nG))[:, None] - termB
    jac[:, 2, 3] = termB
    return jac


def placement_degenerate(rj, rk, rl) -> tuple[np.ndarray, np.ndarray]:
    """(coincident, collinear) row masks for the placement frame spanned by j, k, l."""
    u = rk - rj
    nu = _norm(u)
    coincident = nu < MIN_DISTANCE
    e1 = u / np.maximum(nu, MIN_DISTANCE)[:, None]
    w = rl - rk
    nw = _norm(w - _dot(w, e1)[:, None] * e1)
    collinear = ~coincident & (nw < COLLINEAR_SIN * np.maximum(_norm(w), MIN_DISTANCE))
    return coincident, collinear


def _perpendicular(e1: np.ndarray) -> np.ndarray:
    axis = np.eye(3)[np.argmin(np.abs(e1), axis=1)]
    p = axis - _dot(axis, e1)[:, None] * e1
    return p / _norm(p)[:, None]


def place_particle(rj, rk, rl, d, alpha, phi, particle: int = -1, check: bool = True):
    """Position of i from its parents and raw ICs, plus ∂r_i/∂(d, α, φ) as (B, 3, 3).

    With check=False, rows whose parents are coincident or collinear are placed in
    an arbitrary frame instead of raising; find them with `placement_degenerate`.
    """
    coincident, collinear = placement_degenerate(rj, rk, rl)
    if check and coincident.any():
        raise GeometryError(f"particle {particle}: coincident parent particles", particle=particle)
    if check and collinear.any():
        raise GeometryError(f"particle {particle}: collinear parents, placement frame undefined", particle=particle)
    u = rk - rj
    e1 = u / np.maximum(_norm(u), MIN_DISTANCE)[:, None]
    e1[coincident] = (1.0, 0.0, 0.0)
    w = rl - rk
    w = w - _dot(w, e1)[:, None] * e1
    degenerate = coincident | collinear
    if degenerate.any():
        w[degenerate] = _perpendicular(e1[degenerate])
    e2 = w / _norm(w)[:, None]
    e3 = np.cross(e2, e1)

    ca, sa = np.cos(alpha)[:, None], np.sin(alpha)[:, None]
    cp, sp = np.cos(phi)[:, None], np.sin(phi)[:, None]
    direction = ca * e1 + sa * cp * e2 + sa * sp * e3
    ri = rj + d[:, None] * direction

    d_dir_alpha = -sa * e1 + ca * cp * e2 + ca * sp * e3
    d_dir_phi = sa * (-sp * e2 + cp * e3)
    dr_dic = np.stack([direction, d[:, None] * d_dir_alpha, d[:, None] * d_dir_phi], axis=-1)
    return ri, dr_dic


def _positions(x: np.ndarray, n_particles: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3 * n_particles:
        raise ConfigError(f"expected positions of width {3 * n_particles}, got shape {x.shape}")
    return x.reshape(x.shape[0], n_particles, 3)


def extract_ics(spec: ZMatrixSpec, positions: np.ndarray, check: bool = True) -> np.ndarray:
    """Raw (B, n_ic, 3) internal coordinates."""
    pos = _positions(positions, spec.n_particles)
    out = np.empty((pos.shape[0], spec.n_ic, 3))
    for p, (i, j, k, l) in enumerate(spec.entries):
        out[:, p] = np.stack(bond_angle_dihedral(pos[:, i], pos[:, j], pos[:, k], pos[:, l], i, check), axis=-1)
    return out


def cartesian_to_ic(spec: ZMatrixSpec, positions: np.ndarray) -> np.ndarray:
    """Normalized IC vectors (B, 3 n_ic)."""
    if not spec.fitted:
        raise ConfigError("z-matrix normalization has not been fitted")
    raw = extract_ics(spec, positions).reshape(len(positions), -1)
    return (raw - spec.ic_mean) / spec.ic_std


def place_ics(spec: ZMatrixSpec, raw: np.ndarray, cartesian_frame: np.ndarray) -> np.ndarray:
    """Place every IC particle from raw (B, n_ic, 3) ICs; returns (B, N, 3) positions."""
    frame = np.asarray(cartesian_frame, dtype=np.float64).reshape(raw.shape[0], len(spec.cartesian), 3)
    pos = np.zeros((raw.shape[0], spec.n_particles, 3))
    pos[:, spec.cartesian] = frame
    for p, (i, j, k, l) in enumerate(spec.entries):
        pos[:, i], _ = place_particle(pos[:, j], pos[:, k], pos[:, l], raw[:, p, 0], raw[:, p, 1], raw[:, p, 2], i)
    return pos


def ic_to_cartesian(spec: ZMatrixSpec, ic_vector: np.ndarray, cartesian_frame: np.ndarray) -> np.ndarray:
    """Flat positions (B, 3N) from normalized ICs and the Cartesian-set positions."""
    if not spec.fitted:
        raise ConfigError("z-matrix normalization has not been fitted")
    ic_vector = np.atleast_2d(np.asarray(ic_vector, dtype=np.float64))
    raw = (ic_vector * spec.ic_std + spec.ic_mean).reshape(ic_vector.shape[0], spec.n_ic, 3)
    return place_ics(spec, raw, cartesian_frame).reshape(ic_vector.shape[0], -1)


# ── Mixed layer ────────────────────────────────────────────────────────────────

class MixedLayer:
    """x (B, 3N) <-> [whitened Cartesian set (k), normalized ICs (3 n_ic)].

    log R_xz = log R_xz(whitening) - Σ (2 log d + log sin α) - Σ log std
    """

    kind = "mixed"

    def __init__(self, spec: ZMatrixSpec, whitening: WhiteningLayer):
        if not spec.fitted:
            raise ConfigError("mixed layer needs a fitted z-matrix")
        if whitening.dim_in != 3 * len(spec.cartesian):
            raise ConfigError(
                f"whitening width {whitening.dim_in} does not match {len(spec.cartesian)} Cartesian particles"
            )
        self.spec = spec
        self.whitening = whitening
        self.k = whitening.dim_out
        self.dim_in = 3 * spec.n_particles
        self.dim_out = self.k + 3 * spec.n_ic
        self._log_std = float(np.sum(np.log(spec.ic_std)))

    @classmethod
    def fit(cls, spec: ZMatrixSpec, data: np.ndarray, discard_null: int = 0) -> "MixedLayer":
        pos = _positions(data, spec.n_particles)
        fitted = spec.fit_normalization(data)
        whitening = fit_whitening(pos[:, spec.cartesian].reshape(len(pos), -1), discard_null)
        logger.info(f"Mixed layer fitted: {len(spec.cartesian)} Cartesian particles, {spec.n_ic} IC particles")
        return cls(fitted, whitening)

    def _ic_logdet(self, raw: np.ndarray) -> np.ndarray:
        return np.sum(2.0 * np.log(np.abs(raw[..., 0])) + np.log(np.abs(np.sin(raw[..., 1]))), axis=1)

    def dihedral_columns(self) -> np.ndarray:
        """Latent-side columns holding normalized dihedrals."""
        return self.k + 3 * np.arange(self.spec.n_ic) + 2

    def forward_xz(self, x):
        pos = _positions(x, self.spec.n_particles)
        B = pos.shape[0]
        zc, ld_w = self.whitening.whiten(pos[:, self.spec.cartesian].reshape(B, -1))
        raw = np.empty((B, self.spec.n_ic, 3))
        jacs = np.empty((B, self.spec.n_ic, 3, 4, 3))
        for p, (i, j, k, l) in enumerate(self.spec.entries):
            r = (pos[:, i], pos[:, j], pos[:, k], pos[:, l])
            raw[:, p] = np.stack(bond_angle_dihedral(*r, particle=i), axis=-1)
            jacs[:, p] = ic_jacobian(*r)
        zic = (raw.reshape(B, -1) - self.spec.ic_mean) / self.spec.ic_std
        log_det = ld_w - self._ic_logdet(raw) - self._log_std
        return np.concatenate([zc, zic], axis=1), log_det, {"raw": raw, "jacs": jacs}

    def backward_xz(self, cache, grad_z, grad_logdet):
        raw, jacs = cache["raw"], cache["jacs"]
        B = grad_z.shape[0]
        g_ic = (grad_z[:, self.k:] / self.spec.ic_std).reshape(B, self.spec.n_ic, 3).copy()
        g_ic[..., 0] -= grad_logdet[:, None] * 2.0 / raw[..., 0]
        g_ic[..., 1] -= grad_logdet[:, None] / np.tan(raw[..., 1])

        grad_pos = np.zeros((B, self.spec.n_particles, 3))
        g_cart, _ = self.whitening.backward_xz(None, grad_z[:, : self.k], grad_logdet)
        grad_pos[:, self.spec.cartesian] += g_cart.reshape(B, -1, 3)
        for p, atoms in enumerate(self.spec.entries):
            for m, atom in enumerate(atoms):
                grad_pos[:, atom] += np.einsum("bc,bcx->bx", g_ic[:, p], jacs[:, p, :, m, :])
        return grad_pos.reshape(B, -1), {}

    def inverse_zx(self, z):
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 2 or z.shape[1] != self.dim_out:
            raise ConfigError(f"mixed inverse: expected width {self.dim_out}, got shape {z.shape}")
        B = z.shape[0]
        cart, ld_w = self.whitening.unwhiten(z[:, : self.k])
        raw = (z[:, self.k:] * self.spec.ic_std + self.spec.ic_mean).reshape(B, self.spec.n_ic, 3)

        pos = np.zeros((B, self.spec.n_particles, 3))
        pos[:, self.spec.cartesian] = cart.reshape(B, -1, 3)
        placement = np.empty((B, self.spec.n_ic, 3, 3))
        degenerate = np.zeros(B, dtype=bool)
        for p, (i, j, k, l) in enumerate(self.spec.entries):
            coincident, collinear = placement_degenerate(pos[:, j], pos[:, k], pos[:, l])
            degenerate |= coincident | collinear
            pos[:, i], placement[:, p] = place_particle(
                pos[:, j], pos[:, k], pos[:, l], raw[:, p, 0], raw[:, p, 1], raw[:, p, 2], i, check=False
            )
        jacs = np.empty((B, self.spec.n_ic, 3, 4, 3))
        with np.errstate(invalid="ignore", divide="ignore"):
            for p, (i, j, k, l) in enumerate(self.spec.entries):
                jacs[:, p] = ic_jacobian(pos[:, i], pos[:, j], pos[:, k], pos[:, l])
        if degenerate.any():
            # no gradient reaches the parents of a row placed in a fallback frame
            jacs[degenerate] = 0.0
            jacs[degenerate, :, :, 0, :] = np.eye(3)
            logger.debug(f"Mixed inverse: {int(degenerate.sum())}/{B} samples have coincident or collinear parents")

        x = pos.reshape(B, -1)
        log_det = ld_w + self._ic_logdet(raw) + self._log_std
        valid = self._roundtrip_valid(pos, raw) & ~degenerate
        n_bad = int(np.sum(~valid))
        if n_bad:
            logger.debug(f"Mixed inverse: {n_bad}/{B} samples fail the z->x->z roundtrip")
        cache = {"raw": raw, "placement": placement, "jacs": jacs, "valid": valid}
        return x, log_det, cache

    def _roundtrip_valid(self, pos: np.ndarray, raw: np.ndarray) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            measured = np.empty_like(raw)
            for p, (i, j, k, l) in enumerate(self.spec.entries):
                measured[:, p] = np.stack(
                    bond_angle_dihedral(pos[:, i], pos[:, j], pos[:, k], pos[:, l], i, check=False), axis=-1
                )
        err = np.abs(measured - raw) / self.spec.ic_std.reshape(self.spec.n_ic, 3)
        err = np.where(np.isfinite(err), err, np.inf)
        return np.all(err.reshape(len(raw), -1) <= ROUNDTRIP_TOL, axis=1)

    def backward_zx(self, cache, grad_x, grad_logdet):
        raw, placement, jacs = cache["raw"], cache["placement"], cache["jacs"]
        B = grad_x.shape[0]
        G = np.asarray(grad_x, dtype=np.float64).reshape(B, self.spec.n_particles, 3).copy()
        g_ic = np.zeros((B, self.spec.n_ic, 3))
        for p in range(self.spec.n_ic - 1, -1, -1):
            i, j, k, l = self.spec.entries[p]
            gi = G[:, i]
            g_ic[:, p] = np.einsum("bxc,bx->bc", placement[:, p], gi)
            # parents move r_i rigidly with its local frame: ∂r_i/∂r_m = -K_i⁻¹ K_m
            h = np.linalg.solve(np.swapaxes(jacs[:, p, :, 0, :], 1, 2), gi[..., None])[..., 0]
            for m, atom in enumerate((j, k, l), start=1):
                G[:, atom] -= np.einsum("bcx,bc->bx", jacs[:, p, :, m, :], h)
        g_ic[..., 0] += grad_logdet[:, None] * 2.0 / raw[..., 0]
        g_ic[..., 1] += grad_logdet[:, None] / np.tan(raw[..., 1])

        g_cart, _ = self.whitening.backward_zx(None, G[:, self.spec.cartesian].reshape(B, -1), grad_logdet)
        g_zic = g_ic.reshape(B, -1) * self.spec.ic_std
        return np.concatenate([g_cart, g_zic], axis=1), {}

    def dihedrals(self, cache) -> np.ndarray:
        """Raw generated dihedrals (B, n_ic) from an inverse-pass cache."""
        return cache["raw"][..., 2]

    def parameters(self, prefix: str = ""):
        return {}

    def load_parameters(self, params, prefix: str = ""):
        pass

    def state(self, prefix: str):
        w_header, w_arrays = self.whitening.state(prefix + "W.")
        header = {"kind": self.kind, "zmatrix": self.spec.to_dict(), "whitening": w_header}
        arrays = {prefix + "ic_mean": self.spec.ic_mean, prefix + "ic_std": self.spec.ic_std, **w_arrays}
        return header, arrays

    @classmethod
    def from_state(cls, header: dict, arrays: dict, prefix: str) -> "MixedLayer":
        z = header["zmatrix"]
        spec = ZMatrixSpec(z["n_particles"], z["cartesian"], [tuple(e) for e in z["entries"]],
                           arrays[prefix + "ic_mean"], arrays[prefix + "ic_std"])
        whitening = WhiteningLayer(arrays[prefix + "W.R"], arrays[prefix + "W.eigenvalues"], arrays[prefix + "W.mean"],
                                   n_discarded=header["whitening"]["n_discarded"])
        return cls(spec, whitening)


def mixed_forward(layer: MixedLayer, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    z, log_det, _ = layer.forward_xz(x)
    return z, log_det


def mixed_inverse(layer: MixedLayer, z: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x, log_det, cache = layer.inverse_zx(z)
    return x, log_det, cache["valid"]
