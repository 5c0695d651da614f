"""
Training losses and the staged schedule runner.

Losses (all batch means, gradients w.r.t. every flow parameter):
  J_KL  = E_z[ E_reg(u(F_zx(z)) / τ) - log R_zx(z) ]        z ~ N(0, τ I)
  J_ML  = E_x[ ½‖F_xz(x)‖² / σ² - log R_xz(x) ]
  J_RC  = Σ_k P_k log(P_k / h)                                soft-binned RC marginal
  J_tor = E[ Σ max(0, |φ| - π)² ]                             generated dihedrals

A stage combines them as w_ML·J_ML + w_KL·Σ_τ J_KL(τ) + w_RC·Σ_τ J_RC(τ) + w_torsion·Σ_τ J_tor(τ),
with one latent batch ε shared by all temperatures (z_τ = √τ·ε).
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import stats

import nn_core
from energy_models import E_MAX, EnergyCap, EnergyModel, dimer_distance, dimer_distance_gradient, regularize_energy
from errors import ConfigError, NumericError, StageAbort
from flow_layers import FlowPass, FlowStack

logger = logging.getLogger(__name__)

P_FLOOR = 1e-12
EMA_HALF_LIFE = 25
LOW_ENERGY_QUANTILE = 0.99
HISTORY_COLUMNS = (
    "stage", "iter", "J_ML", "J_KL", "J_RC", "J_torsion", "J_total", "J_symmetric", "J_total_ema",
    "low_energy_fraction_x", "low_energy_fraction_z",
)


# ── Schedule types ─────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class LossWeights:
    w_ML: float = 0.0
    w_KL: float = 0.0
    w_RC: float = 0.0
    w_torsion: float = 0.0

    def problems(self) -> list[str]:
        values = (self.w_ML, self.w_KL, self.w_RC, self.w_torsion)
        found = []
        if any(w < 0 for w in values):
            found.append("loss weights must be non-negative")
        if not any(w > 0 for w in values):
            found.append("at least one loss weight must be positive")
        return found

    @property
    def needs_latent(self) -> bool:
        return self.w_KL > 0 or self.w_RC > 0 or self.w_torsion > 0


@dataclass(frozen=True)
class TrainingStage:
    iterations: int
    batch: int
    lr: float
    weights: LossWeights
    e_high: Optional[float] = None
    temperatures: tuple[float, ...] = (1.0,)

    def problems(self) -> list[str]:
        found = []
        if self.iterations <= 0:
            found.append(f"iter must be positive, got {self.iterations}")
        if self.batch <= 0:
            found.append(f"batch must be positive, got {self.batch}")
        if not self.lr > 0:
            found.append(f"lr must be positive, got {self.lr}")
        if not self.temperatures or any(t <= 0 for t in self.temperatures):
            found.append("temperatures must be a non-empty list of positive values")
        found.extend(self.weights.problems())
        return found

    @property
    def cap(self) -> Optional[EnergyCap]:
        return EnergyCap(self.e_high) if self.e_high is not None else None


@dataclass(frozen=True)
class TrainingSchedule:
    stages: tuple[TrainingStage, ...] = ()

    def __post_init__(self):
        problems = []
        previous = np.inf
        for s, stage in enumerate(self.stages):
            problems.extend(f"stage {s}: {p}" for p in stage.problems())
            e_high = np.inf if stage.e_high is None else stage.e_high
            if e_high > previous:
                problems.append(f"stage {s}: E_high {stage.e_high} exceeds the previous stage's {previous}")
            previous = e_high
        if problems:
            raise ConfigError(f"invalid training schedule ({len(problems)} problems)", problems=problems)

    @property
    def needs_data(self) -> bool:
        return any(stage.weights.w_ML > 0 for stage in self.stages)


@dataclass(frozen=True)
class TemperatureLadder:
    taus: tuple[float, ...] = (1.0,)
    reference_temperature: float = 1.0

    def __post_init__(self):
        if not self.taus or any(t <= 0 for t in self.taus) or self.reference_temperature <= 0:
            raise ConfigError("temperature ladder needs positive relative temperatures")

    @property
    def variances(self) -> tuple[float, ...]:
        return tuple(self.taus)

    def covers(self, tau: float, rtol: float = 1e-9) -> bool:
        return bool(np.any(np.isclose(self.taus, tau, rtol=rtol)))


@dataclass
class RCConfig:
    """Reaction coordinate r(x) with its gradient, bounds and kernel count."""
    fn: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    low: float
    high: float
    n_kernels: int = 20
    name: str = "rc"

    def __post_init__(self):
        if not (np.isfinite(self.low) and np.isfinite(self.high) and self.low < self.high):
            raise ConfigError(f"RC bounds must be finite with min < max, got [{self.low}, {self.high}]")
        if self.n_kernels < 2:
            raise ConfigError(f"RC needs at least 2 kernels, got {self.n_kernels}")

    @property
    def spacing(self) -> float:
        return (self.high - self.low) / self.n_kernels

    @property
    def centers(self) -> np.ndarray:
        return self.low + (np.arange(self.n_kernels) + 0.5) * self.spacing


def rc_coordinate(index: int, low: float, high: float, n_kernels: int = 20) -> RCConfig:
    def fn(x):
        return np.asarray(x)[:, index]

    def grad(x):
        g = np.zeros_like(x)
        g[:, index] = 1.0
        return g

    return RCConfig(fn, grad, low, high, n_kernels, name=f"x{index}")


def rc_projection(vector, low: float, high: float, n_kernels: int = 20) -> RCConfig:
    v = np.asarray(vector, dtype=np.float64)
    return RCConfig(lambda x: np.asarray(x) @ v, lambda x: np.broadcast_to(v, np.shape(x)).copy(),
                    low, high, n_kernels, name="projection")


def rc_dimer_distance(low: float = 0.5, high: float = 2.5, n_kernels: int = 20) -> RCConfig:
    return RCConfig(dimer_distance, dimer_distance_gradient, low, high, n_kernels, name="dimer_distance")


# ── Loss primitives ────────────────────────────────────────────────────────────

def _kl_terms(model: EnergyModel, cap: Optional[EnergyCap], x: np.ndarray, log_det: np.ndarray, tau: float):
    """Returns (J_KL, dJ/dx, dJ/dlog_det, raw energies).

    Energies above E_max (or non-finite) sit on the flat cap branch when a cap is
    set; without a cap they are left out of the batch mean.
    """
    B = len(x)
    energy, grad_e = model.energy_and_gradient(x)
    with np.errstate(invalid="ignore", over="ignore"):
        reduced = energy / tau
    overflow = ~np.isfinite(reduced) | (reduced > E_MAX)
    if overflow.all():
        raise StageAbort(f"all {B} sample energies overflow; increase E_high or lower the learning rate")
    keep = ~overflow
    if overflow.any():
        logger.debug(f"KL batch: {int(overflow.sum())}/{B} energies overflow")
    e_reg, de = regularize_energy(np.where(keep, reduced, np.inf), cap)
    weight = np.full(B, 1.0 / B) if cap is not None else keep / keep.sum()
    value = float(np.sum(weight * np.where(keep | (cap is not None), e_reg - log_det, 0.0)))
    grad_x = np.where(keep[:, None], grad_e * (de / tau * weight)[:, None], 0.0)
    return value, grad_x, -weight, energy


def _rc_terms(rc: RCConfig, x: np.ndarray):
    """Returns (J_RC, dJ/dx)."""
    B = len(x)
    r_raw = rc.fn(x)
    outside = (r_raw < rc.low) | (r_raw > rc.high)
    if outside.all():
        logger.warning(f"RC '{rc.name}': all {B} samples outside [{rc.low}, {rc.high}], density estimate is degenerate")
    r = np.clip(r_raw, rc.low, rc.high)
    h = rc.spacing
    a = -((r[:, None] - rc.centers[None, :]) ** 2) / (2.0 * h * h)
    a -= a.max(axis=1, keepdims=True)
    m = np.exp(a)
    m /= m.sum(axis=1, keepdims=True)
    P = m.mean(axis=0)
    logp = np.log(np.maximum(P, P_FLOOR) / h)
    value = float(np.sum(P * logp))

    G = logp + 1.0
    da = -(r[:, None] - rc.centers[None, :]) / (h * h)
    da_mean = np.sum(m * da, axis=1, keepdims=True)
    dr = np.sum(G[None, :] * m * (da - da_mean), axis=1) / B
    dr = np.where(outside, 0.0, dr)
    return value, dr[:, None] * rc.grad(x)


def torsion_penalty(dihedrals: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch mean of Σ max(0, |φ| - π)² and its gradient w.r.t. the dihedrals."""
    phi = np.atleast_2d(np.asarray(dihedrals, dtype=np.float64))
    excess = np.maximum(np.abs(phi) - np.pi, 0.0)
    value = float(np.mean(np.sum(excess ** 2, axis=1)))
    grad = 2.0 * excess * np.sign(phi) / phi.shape[0]
    return value, grad


def _torsion_terms(flow: FlowStack, fpass: FlowPass):
    """Torsion penalty on the mixed layer of a zx pass, as an injected latent-side gradient."""
    for i, layer in enumerate(flow.layers):
        if layer.kind == "mixed":
            value, grad_phi = torsion_penalty(layer.dihedrals(fpass.caches[i]))
            extra = np.zeros((grad_phi.shape[0], layer.dim_out))
            extra[:, layer.dihedral_columns()] = grad_phi * layer.spec.ic_std[2::3]
            return value, i, extra
    return 0.0, None, None


def _scaled(grads: dict, w: float) -> dict:
    return {k: w * g for k, g in grads.items()}


def _accumulate(total: Optional[dict], grads: dict, w: float = 1.0) -> dict:
    if total is None:
        return _scaled(grads, w)
    for k, g in grads.items():
        total[k] = total[k] + w * g
    return total


# ── Public losses ──────────────────────────────────────────────────────────────

def kl_loss(flow: FlowStack, energy_model: EnergyModel, cap: Optional[EnergyCap], batch_z: np.ndarray,
            tau: float = 1.0) -> tuple[float, dict]:
    fpass = flow.inverse_pass(batch_z)
    value, grad_x, grad_ld, _ = _kl_terms(energy_model, cap, fpass.output, fpass.log_det, tau)
    _, grads = flow.backward(fpass, grad_x, grad_ld)
    return value, grads


def ml_loss(flow: FlowStack, batch_x: np.ndarray, sigma2: float = 1.0) -> tuple[float, dict]:
    value, grads, _ = _ml_terms(flow, batch_x, sigma2)
    return value, grads


def _ml_terms(flow: FlowStack, batch_x: np.ndarray, sigma2: float):
    if not sigma2 > 0:
        raise ConfigError(f"prior variance must be positive, got {sigma2}")
    fpass = flow.forward_pass(batch_x)
    z = fpass.output
    bad = ~np.all(np.isfinite(z), axis=1)
    if bad.any():
        row = int(np.argmax(bad))
        raise NumericError(f"non-finite latent image of data sample {row}", row=row)
    B = len(z)
    per_sample = 0.5 * np.sum(z * z, axis=1) / sigma2 - fpass.log_det
    _, grads = flow.backward(fpass, z / (sigma2 * B), np.full(B, -1.0 / B))
    return float(per_sample.mean()), grads, z


def rc_loss(flow: FlowStack, batch_z: np.ndarray, rc: RCConfig) -> tuple[float, dict]:
    fpass = flow.inverse_pass(batch_z)
    value, grad_x = _rc_terms(rc, fpass.output)
    _, grads = flow.backward(fpass, grad_x, np.zeros(len(batch_z)))
    return value, grads


def multi_temperature_kl(flow: FlowStack, energy_model: EnergyModel, cap: Optional[EnergyCap],
                         ladder: TemperatureLadder, batch: np.ndarray) -> tuple[float, dict]:
    """Σ_k J_KL(τ_k) with z_k = √τ_k · batch; `batch` is standard-normal noise."""
    total, grads = 0.0, None
    for tau in ladder.taus:
        value, g = kl_loss(flow, energy_model, cap, np.sqrt(tau) * batch, tau)
        total += value
        grads = _accumulate(grads, g)
    return total, grads


# ── Combined stage loss ────────────────────────────────────────────────────────

@dataclass
class StepResult:
    values: dict[str, float]
    grads: dict[str, np.ndarray]
    generated_energies: Optional[np.ndarray] = None
    latent_data: Optional[np.ndarray] = None


def stage_loss(flow: FlowStack, energy_model: Optional[EnergyModel], stage: TrainingStage,
               data_batch: Optional[np.ndarray], eps: Optional[np.ndarray],
               rc: Optional[RCConfig] = None) -> StepResult:
    w = stage.weights
    values = {"J_ML": np.nan, "J_KL": np.nan, "J_RC": np.nan, "J_torsion": np.nan}
    grads = None
    total = 0.0
    latent_data = None
    generated = []

    if w.w_ML > 0:
        values["J_ML"], g, latent_data = _ml_terms(flow, data_batch, 1.0)
        grads = _accumulate(grads, g, w.w_ML)
        total += w.w_ML * values["J_ML"]

    if w.needs_latent:
        j_kl = j_rc = j_tor = 0.0
        cap = stage.cap
        for tau in stage.temperatures:
            fpass = flow.inverse_pass(np.sqrt(tau) * eps)
            grad_x = np.zeros_like(fpass.output)
            grad_ld = np.zeros(len(eps))
            extra = None
            if w.w_KL > 0:
                value, gx, gld, energies = _kl_terms(energy_model, cap, fpass.output, fpass.log_det, tau)
                j_kl += value
                grad_x += w.w_KL * gx
                grad_ld += w.w_KL * gld
                if tau == 1.0 or len(stage.temperatures) == 1:
                    generated.append(energies)
            if w.w_RC > 0:
                if rc is None:
                    raise ConfigError("stage has w_RC > 0 but no reaction coordinate is configured")
                value, gx = _rc_terms(rc, fpass.output)
                j_rc += value
                grad_x += w.w_RC * gx
            if w.w_torsion > 0:
                value, index, tor = _torsion_terms(flow, fpass)
                j_tor += value
                if index is not None:
                    extra = {index: w.w_torsion * tor}
            _, g = flow.backward(fpass, grad_x, grad_ld, extra=extra)
            grads = _accumulate(grads, g)
        values["J_KL"] = j_kl if w.w_KL > 0 else np.nan
        values["J_RC"] = j_rc if w.w_RC > 0 else np.nan
        values["J_torsion"] = j_tor if w.w_torsion > 0 else np.nan
        total += w.w_KL * j_kl + w.w_RC * j_rc + w.w_torsion * j_tor

    values["J_total"] = total
    return StepResult(values, grads, generated[0] if generated else None, latent_data)


# ── Schedule runner ────────────────────────────────────────────────────────────

@dataclass
class TrainingHistory:
    rows: list[dict] = field(default_factory=list)

    def append(self, row: dict) -> None:
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        return np.array([row[name] for row in self.rows], dtype=np.float64)

    def to_array(self) -> np.ndarray:
        if not self.rows:
            return np.empty((0, len(HISTORY_COLUMNS)))
        return np.array([[row[c] for c in HISTORY_COLUMNS] for row in self.rows], dtype=np.float64)

    def __len__(self) -> int:
        return len(self.rows)


def low_energy_fraction_x(generated_energies: np.ndarray, threshold: float) -> float:
    """Share of generated samples below the data-energy threshold."""
    e = np.asarray(generated_energies)
    return float(np.mean(e <= threshold)) if e.size else np.nan


def low_energy_fraction_z(latent: np.ndarray, dim: int, quantile: float = LOW_ENERGY_QUANTILE) -> float:
    """Share of latent images inside the `quantile` ball of the standard-normal prior."""
    radius2 = stats.chi2.ppf(quantile, dim)
    return float(np.mean(np.sum(latent * latent, axis=1) <= radius2))


def run_schedule(flow: FlowStack, schedule: TrainingSchedule, data: Optional[np.ndarray],
                 energy_model: Optional[EnergyModel], rng_seed: int, rc: Optional[RCConfig] = None,
                 log_every: int = 50) -> tuple[FlowStack, TrainingHistory]:
    """Run every stage in order. Parameters are updated in place on `flow`."""
    rng = np.random.default_rng(rng_seed)
    history = TrainingHistory()
    if schedule.needs_data and (data is None or len(data) == 0):
        raise ConfigError("the schedule has ML stages but no training data was given")
    if any(s.weights.w_KL > 0 for s in schedule.stages) and energy_model is None:
        raise ConfigError("the schedule has KL stages but no energy model was given")

    energy_threshold = np.nan
    if data is not None and len(data) and energy_model is not None and schedule.stages:
        energy_threshold = float(np.quantile(energy_model.energy(data), LOW_ENERGY_QUANTILE))

    params = {k: v.copy() for k, v in flow.parameters().items()}
    adam = nn_core.init_adam(params)
    last_lr = None
    decay = 0.5 ** (1.0 / EMA_HALF_LIFE)
    ema = None
    step = 0

    for s, stage in enumerate(schedule.stages):
        if last_lr is not None and stage.lr != last_lr:
            adam = nn_core.init_adam(params)
            logger.debug(f"[stage {s}] learning rate changed {last_lr} -> {stage.lr}, Adam moments reset")
        last_lr = stage.lr
        logger.info(f"[stage {s}] {stage.iterations} iterations, batch {stage.batch}, lr {stage.lr}, "
                    f"weights {stage.weights}, E_high {stage.e_high}, temperatures {list(stage.temperatures)}")
        for it in range(stage.iterations):
            data_batch = data[rng.integers(0, len(data), size=stage.batch)] if stage.weights.w_ML > 0 else None
            eps = rng.standard_normal((stage.batch, flow.dim_z)) if stage.weights.needs_latent else None
            try:
                result = stage_loss(flow, energy_model, stage, data_batch, eps, rc)
                if not np.isfinite(result.values["J_total"]):
                    raise NumericError(f"non-finite loss {result.values['J_total']}")
                params, adam = nn_core.adam_step(params, result.grads, adam, stage.lr)
            except NumericError as e:
                flow.load_parameters(params)
                logger.error(f"[stage {s}] iter {it}: aborting, {e}")
                raise StageAbort(f"stage {s} aborted at iteration {it}: {e}", params=params, stage=s) from e
            flow.load_parameters(params)

            total = result.values["J_total"]
            ema = total if ema is None else decay * ema + (1.0 - decay) * total
            row = {
                "stage": s, "iter": step, **result.values, "J_total_ema": ema,
                "J_symmetric": result.values["J_ML"] + result.values["J_KL"],
                "low_energy_fraction_x": (low_energy_fraction_x(result.generated_energies, energy_threshold)
                                          if result.generated_energies is not None else np.nan),
                "low_energy_fraction_z": (low_energy_fraction_z(result.latent_data, flow.dim_z)
                                          if result.latent_data is not None else np.nan),
            }
            history.append(row)
            if log_every and (it % log_every == 0 or it == stage.iterations - 1):
                logger.info(f"[stage {s}] iter {it}: J_ML={row['J_ML']:.4f} J_KL={row['J_KL']:.4f} "
                            f"J_RC={row['J_RC']:.4f} J_total={total:.4f} (ema {ema:.4f})")
            step += 1
    return flow, history
