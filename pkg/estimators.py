"""
Reweighting generated samples to Boltzmann statistics.

  log w_X = -u(x)/τ + ‖z‖²/(2τ) + log R_zx(z)

Weights are only ever used in ratios, so the additive constant of log w is
irrelevant; everything normalizes through logsumexp. Energies here are raw,
never passed through the training cap.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np
from scipy.special import logsumexp

from energy_models import EnergyModel, prior_energy
from errors import ConfigError, EstimatorError
from flow_layers import FlowStack

logger = logging.getLogger(__name__)

MIN_BIN_MASS = 0.01
DEFAULT_BINS = 100
CONVERGED_FRACTION = 0.5
MIN_RESAMPLES = 100

RngLike = Union[np.random.Generator, int, None]


def _rng(rng: RngLike) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


# ── Weighted samples ───────────────────────────────────────────────────────────

@dataclass(frozen=True)
class WeightedSample:
    x: np.ndarray
    z: Optional[np.ndarray]
    log_w: float
    tau: float
    valid: bool


@dataclass
class WeightedSampleSet:
    """Column storage for a batch of WeightedSample rows."""
    x: np.ndarray
    log_w: np.ndarray
    tau: float
    valid: np.ndarray
    z: Optional[np.ndarray] = None
    energies: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.x)

    def __getitem__(self, i: int) -> WeightedSample:
        return WeightedSample(self.x[i], None if self.z is None else self.z[i], float(self.log_w[i]),
                              self.tau, bool(self.valid[i]))

    def __iter__(self) -> Iterator[WeightedSample]:
        return (self[i] for i in range(len(self)))

    @property
    def n_invalid(self) -> int:
        return int(np.sum(~self.valid))

    def usable(self) -> np.ndarray:
        return self.valid & np.isfinite(self.log_w)

    def normalized_weights(self) -> np.ndarray:
        """Self-normalized weights over usable samples (zeros elsewhere)."""
        ok = self.usable()
        if not ok.any():
            raise EstimatorError("no valid sample with finite weight")
        w = np.zeros(len(self))
        w[ok] = np.exp(self.log_w[ok] - logsumexp(self.log_w[ok]))
        return w

    def subset(self, idx: np.ndarray) -> "WeightedSampleSet":
        return WeightedSampleSet(self.x[idx], self.log_w[idx], self.tau, self.valid[idx],
                                 None if self.z is None else self.z[idx],
                                 None if self.energies is None else self.energies[idx])


def generate_weighted(flow: FlowStack, energy_model: EnergyModel, n: int, tau: float,
                      rng: RngLike, ladder: Optional[Sequence[float]] = None,
                      batch_size: int = 10000,
                      relabel: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> WeightedSampleSet:
    """Draw z ~ N(0, τI), push through F_zx and weight against the uncapped energy.

    `relabel` maps valid configurations onto a fixed particle order before any
    energy is evaluated.
    """
    if n < 1:
        raise ConfigError(f"n must be at least 1, got {n}")
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    if ladder is not None and not np.any(np.isclose(ladder, tau)):
        logger.warning(f"Sampling at tau={tau}, outside the trained temperatures {list(ladder)}")
    rng = _rng(rng)

    z = np.sqrt(tau) * rng.standard_normal((n, flow.dim_z))
    x = np.empty((n, flow.dim_x))
    log_rzx = np.empty(n)
    valid = np.empty(n, dtype=bool)
    for start in range(0, n, batch_size):
        sl = slice(start, start + batch_size)
        fpass = flow.inverse_pass(z[sl])
        x[sl], log_rzx[sl], valid[sl] = fpass.output, fpass.log_det, fpass.valid

    energies = np.full(n, np.nan)
    if valid.any():
        if relabel is not None:
            x[valid] = relabel(x[valid])
        energies[valid] = energy_model.energy(x[valid])
    with np.errstate(invalid="ignore", over="ignore"):
        log_w = -energies / tau + prior_energy(z, tau) + log_rzx
    log_w = np.where(valid & np.isfinite(log_w), log_w, -np.inf)
    if not valid.all():
        logger.warning(f"{int((~valid).sum())}/{n} generated samples failed the invertibility check and were excluded")
    return WeightedSampleSet(x, log_w, tau, valid, z, energies)


def effective_sample_size(log_w: np.ndarray) -> float:
    """n_eff = (Σw)² / Σw², computed in log space."""
    log_w = np.asarray(log_w, dtype=np.float64)
    log_w = log_w[np.isfinite(log_w)]
    if log_w.size == 0:
        return 0.0
    return float(np.exp(2.0 * logsumexp(log_w) - logsumexp(2.0 * log_w)))


def weighted_expectation(samples: WeightedSampleSet, observable: Union[Callable, np.ndarray]) -> float:
    w = samples.normalized_weights()
    ok = w > 0
    values = observable(samples.x[ok]) if callable(observable) else np.asarray(observable)[ok]
    return float(np.sum(w[ok] * values))


# ── Profiles ───────────────────────────────────────────────────────────────────

@dataclass
class FreeEnergyProfile:
    """−log p̂ per bin in k_BT, anchored to min 0; masked bins carry NaN."""
    edges: np.ndarray
    free_energy: np.ndarray
    mass: np.ndarray
    mask: np.ndarray          # True = discarded

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[1:] + self.edges[:-1])

    def rows(self) -> np.ndarray:
        return np.column_stack([self.centers, self.free_energy, self.mass, self.mask.astype(float)])


def profile_from_values(r: np.ndarray, weights: np.ndarray, bins: int = DEFAULT_BINS,
                        range_: tuple[float, float] = (0.0, 1.0)) -> FreeEnergyProfile:
    """Histogram profile where `weights` are per-sample masses (normalized weight × n)."""
    if bins < 2:
        raise ConfigError(f"profiles need at least 2 bins, got {bins}")
    lo, hi = range_
    if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
        raise ConfigError(f"profile range must be finite and increasing, got {range_}")
    mass, edges = np.histogram(r, bins=bins, range=(lo, hi), weights=weights)
    mask = mass < MIN_BIN_MASS
    if mask.all():
        raise EstimatorError(f"every bin in [{lo}, {hi}] carries less than {MIN_BIN_MASS} samples of weight")
    free_energy = np.full(bins, np.nan)
    free_energy[~mask] = -np.log(mass[~mask])
    free_energy -= np.nanmin(free_energy)
    return FreeEnergyProfile(edges, free_energy, mass, mask)


def free_energy_profile(samples: WeightedSampleSet, coordinate_fn: Callable, bins: int = DEFAULT_BINS,
                        range_: tuple[float, float] = (0.0, 1.0)) -> FreeEnergyProfile:
    w = samples.normalized_weights()
    ok = w > 0
    mass = w[ok] * ok.sum()
    return profile_from_values(coordinate_fn(samples.x[ok]), mass, bins, range_)


def bootstrap_error(values: np.ndarray, resamples: int = 1000, rng: RngLike = None) -> float:
    """Standard deviation of means over `resamples` bootstrap draws."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise EstimatorError("cannot bootstrap an empty series")
    if resamples < MIN_RESAMPLES:
        raise ConfigError(f"bootstrap needs at least {MIN_RESAMPLES} resamples, got {resamples}")
    rng = _rng(rng)
    idx = rng.integers(0, values.size, size=(resamples, values.size))
    return float(np.std(values[idx].mean(axis=1)))


def profile_bootstrap_error(samples: WeightedSampleSet, coordinate_fn: Callable, bins: int = DEFAULT_BINS,
                            range_: tuple[float, float] = (0.0, 1.0), resamples: int = 100,
                            rng: RngLike = None) -> np.ndarray:
    """Per-bin standard deviation of the profile over bootstrap resamples of the samples."""
    if resamples < MIN_RESAMPLES:
        raise ConfigError(f"bootstrap needs at least {MIN_RESAMPLES} resamples, got {resamples}")
    rng = _rng(rng)
    profiles = np.full((resamples, bins), np.nan)
    for b in range(resamples):
        idx = rng.integers(0, len(samples), size=len(samples))
        try:
            profiles[b] = free_energy_profile(samples.subset(idx), coordinate_fn, bins, range_).free_energy
        except EstimatorError:
            continue
    with np.errstate(invalid="ignore"):
        return np.nanstd(profiles, axis=0)


def total_estimator_error(errors_by_tau: dict[float, np.ndarray]) -> float:
    """sqrt(Σ_τ ε_τ²) with ε_τ the mean bootstrap error over a profile's reported bins."""
    eps = [float(np.nanmean(e)) for e in errors_by_tau.values() if np.isfinite(e).any()]
    return float(np.sqrt(np.sum(np.square(eps))))


# ── Two-generator free energy difference ───────────────────────────────────────

@dataclass(frozen=True)
class DeltaAResult:
    tau: float
    delta_a: float
    std_err: float
    n_batches: int


def kl_batch_values(flow: FlowStack, energy_model: EnergyModel, z: np.ndarray, tau: float):
    """Per-sample u(F_zx(z))/τ - log R_zx(z) with raw energies, and the validity mask."""
    fpass = flow.inverse_pass(z)
    valid = fpass.valid.copy()
    values = np.full(len(z), np.nan)
    if valid.any():
        values[valid] = energy_model.energy(fpass.output[valid]) / tau - fpass.log_det[valid]
    return values, valid & np.isfinite(values)


def two_bg_free_energy_difference(flow_a: FlowStack, flow_b: FlowStack, energy_model: EnergyModel,
                                  ladder: Sequence[float], n: int, rng: RngLike, batch: int = 1000,
                                  converged_fraction: float = CONVERGED_FRACTION,
                                  resamples: int = 1000,
                                  energy_model_b: Optional[EnergyModel] = None) -> list[DeltaAResult]:
    """ΔA(τ) = ⟨J_KL^B⟩ − ⟨J_KL^A⟩ per temperature.

    Both generators see the same latent draws, so each batch yields a paired
    difference; ΔA is the mean over the final `converged_fraction` of the batch
    series and its error the bootstrap standard error of that segment.
    Restrained generators are scored under their own restraint by passing
    `energy_model_b`; otherwise both use `energy_model`.
    """
    if flow_a.dim_z != flow_b.dim_z:
        raise ConfigError(f"generators have different latent widths ({flow_a.dim_z} vs {flow_b.dim_z})")
    if not 0 < converged_fraction <= 1:
        raise ConfigError(f"converged_fraction must be in (0, 1], got {converged_fraction}")
    rng = _rng(rng)
    n_batches = max(1, n // batch)
    results = []
    for tau in ladder:
        diffs = []
        for _ in range(n_batches):
            z = np.sqrt(tau) * rng.standard_normal((batch, flow_a.dim_z))
            ja, ok_a = kl_batch_values(flow_a, energy_model, z, tau)
            jb, ok_b = kl_batch_values(flow_b, energy_model_b or energy_model, z, tau)
            ok = ok_a & ok_b
            if ok.any():
                diffs.append(float(np.mean(jb[ok] - ja[ok])))
        if not diffs:
            raise EstimatorError(f"tau={tau}: no batch produced valid samples for both generators")
        segment = np.asarray(diffs[int(len(diffs) * (1.0 - converged_fraction)):])
        err = bootstrap_error(segment, resamples, rng) if len(segment) > 1 else np.nan
        results.append(DeltaAResult(float(tau), float(segment.mean()), err, len(segment)))
        logger.info(f"[tau {tau}] Delta A = {segment.mean():.4f} +/- {err:.4f} kT over {len(segment)} batches")
    return results


# ── CSV artifacts ──────────────────────────────────────────────────────────────

def csv_header(columns: Sequence[str], system: str, seed: Optional[int], extra: str = "") -> str:
    line = f"system={system} seed={seed}" + (f" {extra}" if extra else "")
    return line + "\n" + ",".join(columns)


def write_weighted_samples(path: Path, samples: WeightedSampleSet, system: str, seed: Optional[int]) -> None:
    dim = samples.x.shape[1]
    columns = [f"x{i}" for i in range(dim)] + ["log_w", "tau", "valid"]
    data = np.column_stack([samples.x, samples.log_w, np.full(len(samples), samples.tau),
                            samples.valid.astype(float)])
    n_eff = effective_sample_size(samples.log_w[samples.usable()])
    footer = f"n_eff={n_eff:.6g} n={len(samples)} n_invalid={samples.n_invalid}"
    np.savetxt(path, data, delimiter=",", header=csv_header(columns, system, seed), footer=footer, fmt="%.10g")


def load_weighted_samples(path: Path) -> WeightedSampleSet:
    data = np.atleast_2d(np.loadtxt(path, delimiter=",", comments="#"))
    if data.shape[1] < 4:
        raise ConfigError(f"{path}: not a weighted-sample file")
    taus = np.unique(data[:, -2])
    if len(taus) != 1:
        raise ConfigError(f"{path}: mixed temperatures {taus.tolist()} in one sample file")
    return WeightedSampleSet(data[:, :-3], data[:, -3], float(taus[0]), data[:, -1] > 0.5)


def write_profile(path: Path, profile: FreeEnergyProfile, system: str, seed: Optional[int], extra: str = "") -> None:
    np.savetxt(path, profile.rows(), delimiter=",", fmt="%.10g",
               header=csv_header(("r_center", "free_energy", "weight_mass", "masked"), system, seed, extra))


def write_delta_a(path: Path, results: Sequence[DeltaAResult], system: str, seed: Optional[int]) -> None:
    rows = np.array([[r.tau, r.delta_a, r.std_err] for r in results]).reshape(-1, 3)
    np.savetxt(path, rows, delimiter=",", fmt="%.10g", header=csv_header(("tau", "delta_A", "std_err"), system, seed))
