"""
Baseline and hybrid samplers.

- metropolis_chain: local Gaussian-step Metropolis in configuration space,
  vectorized over independent chains.
- umbrella_sampling: harmonic windows along a coordinate, swept forward then
  backward, recombined by self-consistent (WHAM) reweighting of all frames.
- latent_explore: Metropolis moves in the latent space of a generator that is
  trained on its own buffer while it explores.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

import nn_core
from energy_models import EnergyModel
from errors import ConfigError, EstimatorError, NumericError, StageAbort
from estimators import FreeEnergyProfile, profile_from_values
from flow_layers import FlowStack
from training import LossWeights, TrainingStage, stage_loss

logger = logging.getLogger(__name__)

WHAM_TOLERANCE = 1e-8
WHAM_MAX_ITER = 100000
TARGET_ACCEPTANCE = 0.3
STEP_FACTOR = 1.02
STEP_MIN = 1e-4
STEP_MAX = 10.0
DIAGNOSTIC_COLUMNS = ("iter", "J_ML", "J_KL", "step", "acceptance", "efficiency", "energy_calls", "n_invalid")


# ── Metropolis ─────────────────────────────────────────────────────────────────

@dataclass
class MetropolisConfig:
    step: float
    steps: int
    stride: int = 1
    seed: Optional[int] = None
    initial: Optional[np.ndarray] = None
    tau_scaled: bool = False

    def __post_init__(self):
        problems = []
        if self.step < 0:
            problems.append(f"step must be non-negative, got {self.step}")
        if self.steps < 0:
            problems.append(f"steps must be non-negative, got {self.steps}")
        if self.stride < 1:
            problems.append(f"stride must be at least 1, got {self.stride}")
        if problems:
            raise ConfigError("invalid Metropolis configuration", problems=problems)


@dataclass
class ChainResult:
    trajectory: np.ndarray        # (frames, chains, dim)
    energies: np.ndarray          # (frames, chains), raw energies without bias
    acceptance: float
    final: np.ndarray             # (chains, dim)

    @property
    def frames(self) -> np.ndarray:
        return self.trajectory.reshape(-1, self.trajectory.shape[-1])


def metropolis_chain(energy_model: EnergyModel, cfg: MetropolisConfig, tau: float = 1.0,
                     bias: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                     rng: Optional[np.random.Generator] = None) -> ChainResult:
    """Run one Metropolis chain per row of `cfg.initial`.

    Acceptance uses min(1, exp(-Δ(u + bias)/τ)). Frames are stored every
    `stride` steps, starting after the first stride.
    """
    if cfg.initial is None:
        raise ConfigError("Metropolis chain needs an initial configuration")
    x = np.atleast_2d(np.asarray(cfg.initial, dtype=np.float64)).copy()
    if x.shape[1] != energy_model.dim:
        raise ConfigError(f"initial configuration has width {x.shape[1]}, model expects {energy_model.dim}")
    if not np.all(np.isfinite(x)):
        raise NumericError("initial configuration is not finite")
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    sigma = cfg.step * (np.sqrt(tau) if cfg.tau_scaled else 1.0)

    def total(points):
        e = energy_model.energy(points)
        return e, (e + bias(points) if bias is not None else e)

    e, e_tot = total(x)
    n_frames = cfg.steps // cfg.stride
    trajectory = np.empty((n_frames, *x.shape))
    energies = np.empty((n_frames, x.shape[0]))
    accepted = 0
    for step in range(cfg.steps):
        proposal = x + sigma * rng.standard_normal(x.shape)
        e_new, e_tot_new = total(proposal)
        with np.errstate(invalid="ignore", over="ignore"):
            accept = np.log(rng.random(x.shape[0])) < -(e_tot_new - e_tot) / tau
        accept &= np.isfinite(e_tot_new)
        x[accept] = proposal[accept]
        e[accept] = e_new[accept]
        e_tot[accept] = e_tot_new[accept]
        accepted += int(accept.sum())
        if (step + 1) % cfg.stride == 0:
            trajectory[(step + 1) // cfg.stride - 1] = x
            energies[(step + 1) // cfg.stride - 1] = e
    rate = accepted / (cfg.steps * x.shape[0]) if cfg.steps else 1.0
    logger.debug(f"Metropolis: {cfg.steps} steps x {x.shape[0]} chains, sigma={sigma:.4g}, acceptance {rate:.3f}")
    return ChainResult(trajectory, energies, rate, x.copy())


def metropolis_data(energy_model: EnergyModel, starts: np.ndarray, cfg: MetropolisConfig,
                    tau: float = 1.0) -> np.ndarray:
    """Training data from independent chains started in each metastable state."""
    run = MetropolisConfig(cfg.step, cfg.steps, cfg.stride, cfg.seed, np.atleast_2d(starts), cfg.tau_scaled)
    result = metropolis_chain(energy_model, run, tau)
    logger.info(f"Metropolis data: {len(result.frames)} frames from {len(run.initial)} starts "
                f"(acceptance {result.acceptance:.3f})")
    return result.frames


# ── Umbrella sampling ──────────────────────────────────────────────────────────

@dataclass
class UmbrellaConfig:
    centers: np.ndarray
    k: float
    coordinate: Callable[[np.ndarray], np.ndarray]
    steps_per_window: int
    forward_backward: bool = True
    step: float = 0.02
    stride: int = 10
    seed: Optional[int] = None
    initial: Optional[np.ndarray] = None
    bins: int = 100
    range_: Optional[tuple[float, float]] = None

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        problems = []
        if self.centers.ndim != 1 or len(self.centers) < 1:
            problems.append("umbrella centers must be a non-empty list")
        elif np.any(np.diff(self.centers) <= 0):
            problems.append("umbrella centers must be strictly increasing")
        if not self.k > 0:
            problems.append(f"umbrella force constant must be positive, got {self.k}")
        if self.steps_per_window < self.stride:
            problems.append("steps_per_window must cover at least one stride")
        if problems:
            raise ConfigError("invalid umbrella configuration", problems=problems)

    @property
    def profile_range(self) -> tuple[float, float]:
        return self.range_ if self.range_ is not None else (float(self.centers[0]), float(self.centers[-1]))


@dataclass
class UmbrellaWindow:
    center: float
    sweep: str
    frames: np.ndarray
    coordinate: np.ndarray
    acceptance: float


@dataclass
class UmbrellaResult:
    windows: list[UmbrellaWindow]
    profile: FreeEnergyProfile
    forward_profile: Optional[FreeEnergyProfile] = None
    backward_profile: Optional[FreeEnergyProfile] = None
    window_free_energies: np.ndarray = field(default_factory=lambda: np.empty(0))


def _sweep(energy_model, cfg: UmbrellaConfig, tau, order, start, rng, sweep: str) -> tuple[list, np.ndarray]:
    windows = []
    x = start
    for j in order:
        center = cfg.centers[j]
        bias = lambda p, c=center: 0.5 * cfg.k * (cfg.coordinate(p) - c) ** 2
        run = MetropolisConfig(cfg.step, cfg.steps_per_window, cfg.stride, initial=x)
        chain = metropolis_chain(energy_model, run, tau, bias=bias, rng=rng)
        frames = chain.frames
        windows.append(UmbrellaWindow(float(center), sweep, frames, cfg.coordinate(frames), chain.acceptance))
        x = chain.final
        logger.debug(f"[umbrella {sweep}] window {j} at {center:.4g}: acceptance {chain.acceptance:.3f}")
    return windows, x


def _check_overlap(windows: Sequence[UmbrellaWindow]) -> None:
    ordered = sorted(windows, key=lambda w: w.center)
    for left, right in zip(ordered[:-1], ordered[1:]):
        if left.coordinate.max() < right.coordinate.min():
            logger.warning(f"Umbrella window at {right.center:.4g} ({right.sweep}) has no overlap with its "
                           f"neighbor at {left.center:.4g}; the stitched profile is unreliable there")


def wham(coordinates: Sequence[np.ndarray], centers: np.ndarray, k: float, tau: float = 1.0,
         tol: float = WHAM_TOLERANCE, max_iter: int = WHAM_MAX_ITER) -> tuple[np.ndarray, np.ndarray]:
    """Self-consistent unbiasing of all frames from harmonic windows.

    Returns (log weight per concatenated frame, window free energies f_j with f_0 = 0).
    Iterates f_j until Σ_j (Δf_j)² < tol.
    """
    r = np.concatenate(coordinates)
    log_n = np.log([len(c) for c in coordinates])
    bias = 0.5 * k * (r[:, None] - np.asarray(centers)[None, :]) ** 2 / tau     # (frames, windows)
    f = np.zeros(len(centers))
    for it in range(max_iter):
        log_w = -logsumexp(log_n[None, :] + f[None, :] - bias, axis=1)
        f_new = -logsumexp(log_w[:, None] - bias, axis=0)
        f_new -= f_new[0]
        change = float(np.sum((f_new - f) ** 2))
        f = f_new
        if change < tol:
            logger.debug(f"WHAM converged after {it + 1} iterations")
            break
    else:
        logger.warning(f"WHAM did not converge in {max_iter} iterations (last change {change:.3g})")
    log_w = -logsumexp(log_n[None, :] + f[None, :] - bias, axis=1)
    return log_w, f


def wham_profile(coordinates: Sequence[np.ndarray], centers: np.ndarray, k: float, tau: float,
                 bins: int, range_: tuple[float, float]) -> tuple[FreeEnergyProfile, np.ndarray]:
    log_w, f = wham(coordinates, centers, k, tau)
    r = np.concatenate(coordinates)
    mass = np.exp(log_w - logsumexp(log_w)) * len(r)
    return profile_from_values(r, mass, bins, range_), f


def umbrella_sampling(energy_model: EnergyModel, cfg: UmbrellaConfig, tau: float = 1.0) -> UmbrellaResult:
    if cfg.initial is None:
        raise ConfigError("umbrella sampling needs an initial configuration")
    rng = np.random.default_rng(cfg.seed)
    start = np.atleast_2d(np.asarray(cfg.initial, dtype=np.float64))
    order = np.arange(len(cfg.centers))
    forward, last = _sweep(energy_model, cfg, tau, order, start, rng, "forward")
    backward = []
    if cfg.forward_backward:
        backward, _ = _sweep(energy_model, cfg, tau, order[::-1], last, rng, "backward")
    windows = forward + backward
    _check_overlap(forward)
    if backward:
        _check_overlap(backward)

    def combine(ws):
        return wham_profile([w.coordinate for w in ws], np.array([w.center for w in ws]),
                            cfg.k, tau, cfg.bins, cfg.profile_range)

    profile, f = combine(windows)
    forward_profile = combine(forward)[0] if backward else None
    backward_profile = combine(backward)[0] if backward else None
    logger.info(f"Umbrella sampling: {len(windows)} windows, {sum(len(w.frames) for w in windows)} frames, "
                f"{int((~profile.mask).sum())}/{cfg.bins} bins reported")
    return UmbrellaResult(windows, profile, forward_profile, backward_profile, f)


def umbrella_profile_error(windows: Sequence[UmbrellaWindow], k: float, tau: float, bins: int,
                           range_: tuple[float, float], resamples: int = 100,
                           rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Per-bin bootstrap standard deviation, resampling frames within each window."""
    rng = rng if rng is not None else np.random.default_rng()
    centers = np.array([w.center for w in windows])
    profiles = np.full((resamples, bins), np.nan)
    for b in range(resamples):
        coords = [w.coordinate[rng.integers(0, len(w.coordinate), len(w.coordinate))] for w in windows]
        try:
            profiles[b] = wham_profile(coords, centers, k, tau, bins, range_)[0].free_energy
        except EstimatorError:
            continue
    with np.errstate(invalid="ignore"):
        return np.nanstd(profiles, axis=0)


# ── Latent-space exploration ───────────────────────────────────────────────────

class SampleBuffer:
    """Fixed-capacity set of configurations with cached energies.

    With `relabel` set, the seed and every accepted replacement are stored in
    the relabeled particle order.
    """

    def __init__(self, capacity: int, initial: np.ndarray, energy_model: EnergyModel, noise: float = 0.0,
                 rng: Optional[np.random.Generator] = None,
                 relabel: Optional[Callable[[np.ndarray], np.ndarray]] = None):
        if capacity < 1:
            raise ConfigError(f"buffer capacity must be positive, got {capacity}")
        initial = np.atleast_2d(np.asarray(initial, dtype=np.float64))
        if initial.shape[1] != energy_model.dim:
            raise ConfigError(f"buffer seed has width {initial.shape[1]}, model expects {energy_model.dim}")
        rng = rng if rng is not None else np.random.default_rng()
        cycle = np.arange(capacity) % len(initial)
        if noise > 0:
            x = initial[cycle] + noise * rng.standard_normal((capacity, initial.shape[1]))
            if relabel is not None:
                x = relabel(x)
            energies = energy_model.energy(x)
        else:
            # exact copies share one energy evaluation
            seeds = initial if relabel is None else relabel(initial)
            x, energies = seeds[cycle], energy_model.energy(seeds)[cycle]
        self.relabel = relabel
        self.capacity = int(capacity)
        self.x = x
        self.energies = energies
        if not np.all(np.isfinite(self.energies)):
            raise NumericError("buffer seed configurations have non-finite energy")

    def __len__(self) -> int:
        return self.capacity

    def sample(self, batch: int, rng: np.random.Generator) -> np.ndarray:
        """Indices of a batch drawn without replacement."""
        return rng.choice(self.capacity, size=min(batch, self.capacity), replace=False)

    def replace(self, idx: np.ndarray, x_new: np.ndarray, energies_new: np.ndarray, accept: np.ndarray) -> int:
        if not accept.any():
            return 0
        accepted = x_new[accept]
        self.x[idx[accept]] = accepted if self.relabel is None else self.relabel(accepted)
        self.energies[idx[accept]] = energies_new[accept]
        return int(accept.sum())


@dataclass
class StepController:
    step: float = 0.1
    target: float = TARGET_ACCEPTANCE
    factor: float = STEP_FACTOR
    min_step: float = STEP_MIN
    max_step: float = STEP_MAX
    adaptive: bool = True


def adapt_step(ctrl: StepController, recent_acceptance: float) -> float:
    """Multiplicative step update toward the target acceptance rate, clamped."""
    if not 0.0 <= recent_acceptance <= 1.0:
        raise ConfigError(f"acceptance rate must be in [0, 1], got {recent_acceptance}")
    s = ctrl.step
    if ctrl.adaptive:
        if recent_acceptance > ctrl.target:
            s *= ctrl.factor
        elif recent_acceptance < ctrl.target:
            s /= ctrl.factor
    return float(np.clip(s, ctrl.min_step, ctrl.max_step))


@dataclass(frozen=True)
class ExploreSchedule:
    iterations: int
    batch: int = 128
    lr: float = 1e-3
    e_high: Optional[float] = None
    pretrain_iterations: int = 0
    pretrain_batch: int = 128

    def __post_init__(self):
        if self.iterations < 0 or self.pretrain_iterations < 0:
            raise ConfigError("exploration iteration counts must be non-negative")
        if self.batch < 1 or self.pretrain_batch < 1 or not self.lr > 0:
            raise ConfigError("exploration needs positive batch sizes and learning rate")


def latent_acceptance_energy(u_new, u_old, log_rzx_new, log_rxz_old) -> np.ndarray:
    """ΔE of a latent move: u(x') - u(x) - log R_zx(z') - log R_xz(x)."""
    return u_new - u_old - log_rzx_new - log_rxz_old


def _train_step(flow, params, adam, energy_model, stage, data_batch, eps, it):
    try:
        result = stage_loss(flow, energy_model, stage, data_batch, eps)
        if not np.isfinite(result.values["J_total"]):
            raise NumericError(f"non-finite loss {result.values['J_total']}")
        params, adam = nn_core.adam_step(params, result.grads, adam, stage.lr)
    except NumericError as e:
        flow.load_parameters(params)
        logger.error(f"[explore] iter {it}: aborting, {e}")
        raise StageAbort(f"exploration aborted at iteration {it}: {e}", params=params) from e
    flow.load_parameters(params)
    return params, adam, result.values


def latent_explore(flow: FlowStack, energy_model: EnergyModel, buffer: SampleBuffer, schedule: ExploreSchedule,
                   step_ctrl: StepController, rng: np.random.Generator, train: bool = True,
                   log_every: int = 100, on_iteration: Optional[Callable[[int, SampleBuffer], None]] = None,
                   ) -> tuple[FlowStack, SampleBuffer, list[dict]]:
    """Alternate generator training on the buffer with latent Metropolis moves.

    Each iteration draws one batch from the buffer, takes a gradient step on
    J_KL + J_ML with it, then proposes z' = F_xz(x) + s·ξ for the same batch
    and replaces accepted entries.
    """
    params = {k: v.copy() for k, v in flow.parameters().items()}
    adam = nn_core.init_adam(params)
    calls_at_start = energy_model.calls

    if train and schedule.pretrain_iterations:
        pretrain = TrainingStage(schedule.pretrain_iterations, schedule.pretrain_batch, schedule.lr,
                                 LossWeights(w_ML=1.0))
        for it in range(schedule.pretrain_iterations):
            batch = buffer.x[buffer.sample(schedule.pretrain_batch, rng)]
            params, adam, _ = _train_step(flow, params, adam, energy_model, pretrain, batch, None, it)
        logger.info(f"[explore] pretrained by example for {schedule.pretrain_iterations} iterations")

    stage = TrainingStage(max(schedule.iterations, 1), schedule.batch, schedule.lr,
                          LossWeights(w_ML=1.0, w_KL=1.0), e_high=schedule.e_high)
    diagnostics = []
    for it in range(schedule.iterations):
        idx = buffer.sample(schedule.batch, rng)
        x = buffer.x[idx]
        values = {"J_ML": np.nan, "J_KL": np.nan}
        if train:
            eps = rng.standard_normal((len(idx), flow.dim_z))
            params, adam, values = _train_step(flow, params, adam, energy_model, stage, x, eps, it)

        step = step_ctrl.step
        z, log_rxz = flow.forward(x)
        fpass = flow.inverse_pass(z + step * rng.standard_normal(z.shape))
        valid = fpass.valid & np.all(np.isfinite(fpass.output), axis=1)
        u_new = np.full(len(idx), np.inf)
        if valid.any():
            u_new[valid] = energy_model.energy(fpass.output[valid])
        with np.errstate(invalid="ignore", over="ignore"):
            delta = latent_acceptance_energy(u_new, buffer.energies[idx], fpass.log_det, log_rxz)
            accept = valid & np.isfinite(delta) & (np.log(rng.random(len(idx))) < -delta)
        n_accepted = buffer.replace(idx, fpass.output, u_new, accept)

        acceptance = n_accepted / len(idx)
        step_ctrl.step = adapt_step(step_ctrl, acceptance)
        row = {
            "iter": it, "J_ML": values["J_ML"], "J_KL": values["J_KL"], "step": step,
            "acceptance": acceptance, "efficiency": step * acceptance,
            "energy_calls": energy_model.calls - calls_at_start, "n_invalid": int((~valid).sum()),
        }
        diagnostics.append(row)
        if log_every and (it % log_every == 0 or it == schedule.iterations - 1):
            logger.info(f"[explore] iter {it}: J_ML={row['J_ML']:.4f} J_KL={row['J_KL']:.4f} step={step:.4g} "
                        f"acceptance={acceptance:.3f} energy_calls={row['energy_calls']}")
        if on_iteration is not None:
            on_iteration(it, buffer)
    return flow, buffer, diagnostics


def return_trip_estimate(t_flat: float, barrier: float, barrier_flat: float) -> float:
    """Return-trip time scaled from a flattened landscape by exp(B - B_flat)."""
    return float(t_flat * np.exp(barrier - barrier_flat))


def count_return_trips(trace: np.ndarray, low: float, high: float) -> int:
    """Completed round trips of a 1-D trace between the cores trace <= low and trace >= high.

    Excursions that leave a core without reaching the other one do not count.
    """
    trace = np.asarray(trace, dtype=np.float64).reshape(-1)
    if not low < high:
        raise ConfigError(f"core boundaries must satisfy low < high, got {low}, {high}")
    core = np.where(trace <= low, -1, np.where(trace >= high, 1, 0))
    visits = core[core != 0]
    if visits.size < 2:
        return 0
    return int(np.count_nonzero(np.diff(visits))) // 2
