"""
Command pipelines. Every command:
  1. Opens a Run (output directory, registry row, warning capture)
  2. Builds the energy model and generators it needs
  3. Runs the underlying algorithm
  4. Writes CSV / checkpoint artifacts
  5. Closes the Run: manifest.json plus registry update with the exact energy-call count
"""

import json
import logging
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import pydantic
import scipy

import database as db
from config import (
    CoordinateConfig, DeltaARequest, ExperimentConfig, MetropolisSettings, RCSettings, config_hash, save_config,
)
from energy_models import (
    DoubleWell, EnergyModel, ParticleDimer, Relabeler, RestrainedModel, ToyChain, dimer_distance, make_system,
    relabeler_for,
)
from errors import ConfigError, EstimatorError, StageAbort
from estimators import (
    WeightedSampleSet, effective_sample_size, free_energy_profile, generate_weighted, load_weighted_samples,
    profile_bootstrap_error, total_estimator_error, two_bg_free_energy_difference, weighted_expectation,
    csv_header, write_delta_a, write_profile, write_weighted_samples,
)
from flow_layers import build_flow, load_flow, parse_architecture, save_flow
from internal_coords import load_zmatrix
from reference import basin_delta_a, basins, integration_region, marginal_profile
from samplers import (
    DIAGNOSTIC_COLUMNS, ExploreSchedule, MetropolisConfig, SampleBuffer, StepController, UmbrellaConfig,
    count_return_trips, latent_explore, metropolis_chain, metropolis_data, return_trip_estimate,
    umbrella_profile_error, umbrella_sampling,
)
from training import HISTORY_COLUMNS, RCConfig, TrainingHistory, rc_coordinate, rc_dimer_distance, rc_projection, run_schedule

logger = logging.getLogger(__name__)

VERSIONS = {
    "python": platform.python_version(),
    "numpy": np.__version__,
    "scipy": scipy.__version__,
    "pydantic": pydantic.VERSION,
}
DIMER_STARTS = (1.0, 2.0)


# ── Runs and manifests ─────────────────────────────────────────────────────────

@dataclass
class RunManifest:
    run_id: str
    command: str
    system: str
    config_hash: str
    seed: int
    output_dir: str
    versions: dict = field(default_factory=lambda: dict(VERSIONS))
    wall_time: float = 0.0
    energy_calls: int = 0
    status: str = "running"
    warnings: list[str] = field(default_factory=list)
    artifacts: list[str] = field(default_factory=list)
    summary: dict = field(default_factory=dict)


class _WarningCollector(logging.Handler):
    def __init__(self):
        super().__init__(level=logging.WARNING)
        self.messages: list[str] = []

    def emit(self, record):
        self.messages.append(f"{record.name}: {record.getMessage()}")


class Run:
    """Context manager owning one command invocation's outputs and bookkeeping."""

    def __init__(self, config: ExperimentConfig, command: str):
        self.config = config
        self.out = Path(config.output_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        digest = config_hash(config)
        self.manifest = RunManifest(
            run_id=f"{command}-{digest}-s{config.seed}", command=command, system=config.system.name,
            config_hash=digest, seed=config.seed, output_dir=str(self.out),
        )
        self.models: list[EnergyModel] = []
        self._collector = _WarningCollector()
        self._started = 0.0

    def track(self, model: EnergyModel) -> EnergyModel:
        self.models.append(model)
        return model

    @property
    def energy_calls(self) -> int:
        return sum(m.calls for m in self.models)

    def artifact(self, name: str) -> Path:
        self.manifest.artifacts.append(name)
        return self.out / name

    def event(self, event_type: str, message: str) -> None:
        db.log_event(self.manifest.run_id, event_type, message)

    def __enter__(self) -> "Run":
        self._started = time.perf_counter()
        db.DB_FILE = self.out / self.config.registry
        db.init_db()
        logging.getLogger().addHandler(self._collector)
        save_config(self.config, self.out / "config.json")
        db.upsert_run(asdict(self.manifest))
        self.event("run_start", f"{self.manifest.command} on {self.manifest.system}, seed {self.config.seed}")
        return self

    def __exit__(self, exc_type, exc, tb):
        logging.getLogger().removeHandler(self._collector)
        m = self.manifest
        if exc is None:
            m.status = "ok"
        elif isinstance(exc, ConfigError):
            m.status = "config_error"
        elif isinstance(exc, StageAbort):
            m.status = "aborted"
        else:
            m.status = "failed"
        m.wall_time = time.perf_counter() - self._started
        m.energy_calls = self.energy_calls
        m.warnings = self._collector.messages
        with open(self.out / "manifest.json", "w") as f:
            json.dump(asdict(m), f, indent=2, default=float)
        db.upsert_run(asdict(m))
        self.event("run_end", f"status={m.status} energy_calls={m.energy_calls} wall_time={m.wall_time:.1f}s")
        logger.info(f"[{m.run_id}] {m.status}: {m.energy_calls} energy calls in {m.wall_time:.1f}s")
        return False


# ── Builders ───────────────────────────────────────────────────────────────────

def build_model(config: ExperimentConfig) -> EnergyModel:
    restraint = config.system.restraint.to_kwargs() if config.system.restraint else None
    return make_system(config.system.name, config.system.params, restraint)


def model_from_header(header: dict) -> EnergyModel:
    system = header["system"]
    return make_system(system["name"], system.get("params"), system.get("restraint"))


def _base(model: EnergyModel) -> EnergyModel:
    return model.model if isinstance(model, RestrainedModel) else model


def coordinate_fn(c: CoordinateConfig) -> Callable[[np.ndarray], np.ndarray]:
    if c.kind == "dimer_distance":
        return dimer_distance
    if c.kind == "projection":
        if not c.vector:
            raise ConfigError("a projection coordinate needs a vector")
        v = np.asarray(c.vector, dtype=np.float64)
        return lambda x: np.asarray(x) @ v
    return lambda x: np.asarray(x)[:, c.index]


def coordinate_name(c: CoordinateConfig) -> str:
    return {"dimer_distance": "d", "projection": "projection"}.get(c.kind, f"x{c.index}")


def make_rc(rc: RCSettings) -> RCConfig:
    if rc.kind == "dimer_distance":
        return rc_dimer_distance(rc.low, rc.high, rc.n_kernels)
    if rc.kind == "projection":
        return rc_projection(rc.vector, rc.low, rc.high, rc.n_kernels)
    return rc_coordinate(rc.index, rc.low, rc.high, rc.n_kernels)


def starting_points(model: EnergyModel, settings: MetropolisSettings) -> np.ndarray:
    if settings.starts:
        return np.asarray(settings.starts, dtype=np.float64)
    base = _base(model)
    if isinstance(base, ParticleDimer):
        return np.stack([base.initial_configuration(d) for d in (settings.dimer_distances or DIMER_STARTS)])
    if isinstance(base, ToyChain):
        return base.reference[None]
    raise ConfigError(f"Metropolis runs on '{model.name}' need explicit starting points")


def zmatrix_for(config: ExperimentConfig, model: EnergyModel):
    if config.flow.zmatrix:
        return load_zmatrix(Path(config.flow.zmatrix), n_particles=model.dim // 3)
    base = _base(model)
    return base.zmatrix if isinstance(base, ToyChain) else None


def load_training_data(config: ExperimentConfig, model: EnergyModel, seed: int) -> Optional[np.ndarray]:
    source = config.data
    if source is None:
        return None
    if source.file:
        path = Path(source.file)
        if not path.exists():
            raise ConfigError(f"data file not found: {path}")
        data = np.load(path) if path.suffix == ".npy" else np.loadtxt(path, delimiter=",", comments="#")
        data = np.atleast_2d(data)
    elif source.metropolis:
        s = source.metropolis
        data = metropolis_data(model, starting_points(model, s),
                               MetropolisConfig(s.step, s.steps, s.stride, seed, tau_scaled=s.tau_scaled),
                               tau=s.temperature)
    else:
        raise ConfigError("data: give either a file or a metropolis section")
    if data.shape[1] != model.dim:
        raise ConfigError(f"training data has width {data.shape[1]}, system '{model.name}' has {model.dim}")
    if source.noise > 0:
        data = data + source.noise * np.random.default_rng(seed + 1).standard_normal(data.shape)
    relabel = relabeler_for(model, data[0])
    if relabel is not None:
        data = relabel(data)
    logger.info(f"Training data: {len(data)} configurations of width {data.shape[1]}")
    return data


def checkpoint_header(config: ExperimentConfig, relabel_reference: Optional[np.ndarray] = None) -> dict:
    temps = sorted({t for s in config.training.stages for t in s.temperatures} or {1.0})
    restraint = config.system.restraint.to_kwargs() if config.system.restraint else None
    return {
        "system": {"name": config.system.name, "params": config.system.params, "restraint": restraint},
        "flow": config.flow.model_dump(),
        "seed": config.seed,
        "temperatures": temps,
        "config_hash": config_hash(config),
        "relabel_reference": None if relabel_reference is None else np.asarray(relabel_reference).tolist(),
    }


def relabeler_from_header(model: EnergyModel, header: dict) -> Optional[Relabeler]:
    if not isinstance(_base(model), ParticleDimer):
        return None
    reference = header.get("relabel_reference")
    if reference is None:
        logger.warning("Checkpoint carries no relabeling reference; using the default dimer configuration")
        reference = _base(model).initial_configuration()
    return relabeler_for(model, reference)


def _seeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n)]


def _per_temperature(config: ExperimentConfig, taus: Sequence[float], fn: Callable) -> list:
    """fn(tau, seed) for every temperature on `config.threads` workers; results in ladder order."""
    seeds = _seeds(config.seed, len(taus))
    with ThreadPoolExecutor(max_workers=config.threads) as pool:
        return list(pool.map(fn, taus, seeds))


def write_history(path: Path, history: TrainingHistory, system: str, seed: int) -> None:
    np.savetxt(path, history.to_array(), delimiter=",", fmt="%.10g", header=csv_header(HISTORY_COLUMNS, system, seed))


# ── train ──────────────────────────────────────────────────────────────────────

def cmd_train(config: ExperimentConfig) -> RunManifest:
    with Run(config, "train") as run:
        model = run.track(build_model(config))
        schedule = config.schedule()
        data_seed, flow_seed, train_seed = _seeds(config.seed, 3)
        data = load_training_data(config, model, data_seed)

        flow_rng = np.random.default_rng(flow_seed)
        f = config.flow
        flow = build_flow(f.architecture, model.dim, flow_rng, data=data, l_hidden=f.l_hidden,
                          n_hidden=f.n_hidden, scale_cap=f.scale_cap, discard_null=f.discard_null,
                          zmatrix=zmatrix_for(config, model))
        rc = make_rc(config.rc) if config.rc else None
        header = checkpoint_header(config, data[0] if data is not None and isinstance(_base(model), ParticleDimer) else None)
        try:
            flow, history = run_schedule(flow, schedule, data, model, train_seed, rc, config.training.log_every)
        except StageAbort as e:
            if e.params:
                flow.load_parameters(e.params)
            save_flow(run.artifact("flow_aborted.npz"), flow, {**header, "aborted_stage": e.stage})
            run.event("stage_abort", str(e))
            raise

        for s in range(len(schedule.stages)):
            rows = [r for r in history.rows if r["stage"] == s]
            last = f", J_total={rows[-1]['J_total']:.4f}" if rows else ""
            run.event("stage_end", f"stage {s}: {len(rows)} iterations{last}")
        save_flow(run.artifact("flow.npz"), flow, header, rng=flow_rng)
        write_history(run.artifact("history.csv"), history, config.system.name, config.seed)
        if len(history):
            run.manifest.summary = {"final_J_total": history.rows[-1]["J_total"], "iterations": len(history)}
    return run.manifest


# ── sample ─────────────────────────────────────────────────────────────────────

def cmd_sample(config: ExperimentConfig, checkpoint: Path, n: Optional[int] = None,
               tau: Optional[float] = None) -> RunManifest:
    with Run(config, "sample") as run:
        flow, header = load_flow(checkpoint)
        model = run.track(model_from_header(header))
        relabel = relabeler_from_header(model, header)
        n = n or config.sampling.n
        taus = [tau] if tau else config.sampling.temperatures

        def draw(t, seed):
            return generate_weighted(flow, model, n, t, np.random.default_rng(seed), header.get("temperatures"),
                                     config.sampling.batch_size, relabel)

        for t, samples in zip(taus, _per_temperature(config, taus, draw)):
            n_eff = effective_sample_size(samples.log_w[samples.usable()])
            write_weighted_samples(run.artifact(f"samples_tau{t:g}.csv"), samples, header["system"]["name"], config.seed)
            run.manifest.summary[f"tau={t:g}"] = {"n": n, "n_eff": n_eff, "efficiency": n_eff / n,
                                                   "n_invalid": samples.n_invalid}
            logger.info(f"[tau {t:g}] {n} samples, n_eff={n_eff:.1f} (efficiency {n_eff / n:.4f}), "
                        f"{samples.n_invalid} invalid")
            run.event("sampled", f"tau={t:g} n={n} n_eff={n_eff:.1f}")
    return run.manifest


# ── free-energy ────────────────────────────────────────────────────────────────

def _other_range(model: EnergyModel, index: int, tau: float) -> tuple[float, float]:
    region = integration_region(model, tau)
    return (region.y_lo, region.y_hi) if index == 0 else (region.x_lo, region.x_hi)


def _profile_artifacts(run: Run, samples: WeightedSampleSet, reference_model: EnergyModel,
                       rng: np.random.Generator) -> Optional[np.ndarray]:
    config = run.config
    tau = samples.tau
    first_error = None
    for i, req in enumerate(config.estimators.profiles):
        fn = coordinate_fn(req.coordinate)
        prof = free_energy_profile(samples, fn, req.bins, req.range)
        err = profile_bootstrap_error(samples, fn, req.bins, req.range, config.estimators.bootstrap_resamples, rng)
        if first_error is None:
            first_error = err
        write_profile(run.artifact(f"profile{i}_tau{tau:g}.csv"), prof, config.system.name, config.seed,
                      extra=f"tau={tau:g} coordinate={coordinate_name(req.coordinate)}")
        np.savetxt(run.artifact(f"profile{i}_tau{tau:g}_error.csv"), np.column_stack([prof.centers, err]),
                   delimiter=",", fmt="%.10g", header=csv_header(("r_center", "std_err"), config.system.name, config.seed))
        if not req.reference:
            continue
        if reference_model.dim != 2 or req.coordinate.kind != "coordinate":
            logger.warning(f"profile {i}: no quadrature reference for a {reference_model.dim}-D "
                           f"'{req.coordinate.kind}' coordinate")
            continue
        idx = req.coordinate.index
        exact = marginal_profile(reference_model, idx, prof.edges, _other_range(reference_model, idx, tau), tau)
        np.savetxt(run.artifact(f"profile{i}_tau{tau:g}_reference.csv"), np.column_stack([prof.centers, exact]),
                   delimiter=",", fmt="%.10g",
                   header=csv_header(("r_center", "free_energy"), config.system.name, config.seed))
        shown = ~prof.mask
        offset = np.mean(prof.free_energy[shown] - exact[shown])
        deviation = float(np.max(np.abs(prof.free_energy[shown] - exact[shown] - offset)))
        run.manifest.summary[f"profile{i}_tau{tau:g}_max_deviation"] = deviation
        logger.info(f"[tau {tau:g}] profile {i}: max deviation from quadrature {deviation:.3f} kT")
    return first_error


def _basin_artifacts(run: Run, samples: WeightedSampleSet, reference_model: EnergyModel) -> Optional[list]:
    req = run.config.estimators.basins
    if req is None:
        return None
    tau = samples.tau
    region_a, region_b = basins(reference_model, tau, req.split)

    def inside(region):
        return lambda x: ((x[:, 0] >= region.x_lo) & (x[:, 0] < region.x_hi)
                          & (x[:, 1] >= region.y_lo) & (x[:, 1] < region.y_hi)).astype(float)

    p_a = weighted_expectation(samples, inside(region_a))
    p_b = weighted_expectation(samples, inside(region_b))
    if p_a <= 0 or p_b <= 0:
        raise EstimatorError(f"tau={tau:g}: a basin carries no sample weight (p_A={p_a}, p_B={p_b})")
    row = [tau, -np.log(p_b / p_a), np.nan, np.nan]
    if req.reference:
        ref = basin_delta_a(reference_model, region_a, reference_model, region_b, tau)
        row[2:] = [ref.value, ref.richardson_error]
        logger.info(f"[tau {tau:g}] basin Delta A = {row[1]:.4f} kT, quadrature {ref.value:.4f} kT")
    return row


def _delta_a_pipeline(run: Run, checkpoints: Sequence[Path]) -> None:
    config = run.config
    flow_a, header_a = load_flow(checkpoints[0])
    flow_b, header_b = load_flow(checkpoints[1])
    model_a = run.track(model_from_header(header_a))
    model_b = run.track(model_from_header(header_b))
    req = config.estimators.delta_a or DeltaARequest()

    def at(tau, seed):
        return two_bg_free_energy_difference(
            flow_a, flow_b, model_a, [tau], req.n, np.random.default_rng(seed), req.batch, req.converged_fraction,
            config.estimators.bootstrap_resamples, energy_model_b=model_b,
        )[0]

    results = _per_temperature(config, req.temperatures, at)
    write_delta_a(run.artifact("delta_a.csv"), results, config.system.name, config.seed)
    run.manifest.summary["delta_a"] = {f"{r.tau:g}": [r.delta_a, r.std_err] for r in results}
    if req.reference:
        rows = []
        for tau in req.temperatures:
            ref_a, ref_b = model_from_header(header_a), model_from_header(header_b)
            ref = basin_delta_a(ref_a, integration_region(ref_a, tau), ref_b, integration_region(ref_b, tau), tau)
            rows.append([tau, ref.value, ref.richardson_error])
        np.savetxt(run.artifact("delta_a_reference.csv"), np.array(rows), delimiter=",", fmt="%.10g",
                   header=csv_header(("tau", "delta_A", "richardson_error"), config.system.name, config.seed))
    run.event("delta_a", ", ".join(f"tau={r.tau:g}: {r.delta_a:.4f}+/-{r.std_err:.4f}" for r in results))


def cmd_free_energy(config: ExperimentConfig, samples_files: Sequence[Path] = (),
                    checkpoints: Sequence[Path] = ()) -> RunManifest:
    """Profiles / basin ΔA / expectations from weighted samples, or two-generator ΔA from two checkpoints."""
    if len(checkpoints) > 2:
        raise ConfigError("free-energy takes one checkpoint (profiles) or two (two-generator Delta A)")
    if not samples_files and not checkpoints:
        raise ConfigError("free-energy needs --samples files or --checkpoints")
    with Run(config, "free-energy") as run:
        if len(checkpoints) == 2:
            _delta_a_pipeline(run, checkpoints)
        else:
            rng = np.random.default_rng(config.seed)
            if checkpoints:
                flow, header = load_flow(checkpoints[0])
                model = run.track(model_from_header(header))
                reference_model = model_from_header(header)
                relabel = relabeler_from_header(model, header)

                def draw(t, seed):
                    return generate_weighted(flow, model, config.sampling.n, t, np.random.default_rng(seed),
                                             header.get("temperatures"), config.sampling.batch_size, relabel)

                sets = _per_temperature(config, config.sampling.temperatures, draw)
            else:
                reference_model = build_model(config)
                sets = [load_weighted_samples(Path(p)) for p in samples_files]

            errors_by_tau, basin_rows, expectation_rows = {}, [], []
            for samples in sets:
                err = _profile_artifacts(run, samples, reference_model, rng)
                if err is not None:
                    errors_by_tau[samples.tau] = err
                row = _basin_artifacts(run, samples, reference_model)
                if row is not None:
                    basin_rows.append(row)
                for c in config.estimators.expectations:
                    value = weighted_expectation(samples, coordinate_fn(c))
                    expectation_rows.append(f"{samples.tau:g},{coordinate_name(c)},{value:.10g}")
            if basin_rows:
                np.savetxt(run.artifact("basins.csv"), np.array(basin_rows), delimiter=",", fmt="%.10g",
                           header=csv_header(("tau", "delta_A", "reference", "richardson_error"),
                                             config.system.name, config.seed))
            if expectation_rows:
                with open(run.artifact("expectations.csv"), "w") as f:
                    f.write(f"# system={config.system.name} seed={config.seed}\n# tau,observable,value\n")
                    f.write("\n".join(expectation_rows) + "\n")
            if errors_by_tau:
                eps = total_estimator_error(errors_by_tau)
                run.manifest.summary["estimator_error"] = eps
                logger.info(f"Estimator error over {len(errors_by_tau)} temperatures: {eps:.4f} kT")
    return run.manifest


# ── explore ────────────────────────────────────────────────────────────────────

def cmd_explore(config: ExperimentConfig) -> RunManifest:
    ex = config.explore
    if ex is None:
        raise ConfigError("explore needs an 'explore' section in the config")
    with Run(config, "explore") as run:
        model = run.track(build_model(config))
        buffer_seed, flow_seed, explore_seed = _seeds(config.seed, 3)
        initial = np.asarray(ex.initial, dtype=np.float64)
        reference = np.atleast_2d(initial)[0] if isinstance(_base(model), ParticleDimer) else None
        buffer = SampleBuffer(ex.capacity, initial, model, ex.noise, np.random.default_rng(buffer_seed),
                              relabel=relabeler_for(model, reference))
        np.savetxt(run.artifact("buffer_initial.csv"), buffer.x, delimiter=",", fmt="%.10g",
                   header=csv_header([f"x{i}" for i in range(model.dim)], config.system.name, config.seed))

        f = config.flow
        fitted = any(t in "WM" for t in parse_architecture(f.architecture))
        flow_rng = np.random.default_rng(flow_seed)
        flow = build_flow(f.architecture, model.dim, flow_rng, data=buffer.x if fitted else None,
                          l_hidden=f.l_hidden, n_hidden=f.n_hidden, scale_cap=f.scale_cap,
                          discard_null=f.discard_null, zmatrix=zmatrix_for(config, model))
        schedule = ExploreSchedule(ex.iterations, ex.batch, ex.lr, ex.E_high, ex.pretrain_iterations, ex.pretrain_batch)
        ctrl = StepController(ex.step, ex.target_acceptance, ex.step_factor, adaptive=ex.adaptive)

        def snapshot(it: int, buf: SampleBuffer) -> None:
            if ex.snapshot_every and (it + 1) % ex.snapshot_every == 0:
                np.savetxt(run.artifact(f"buffer_iter{it + 1}.csv"), buf.x, delimiter=",", fmt="%.10g")

        flow, buffer, diagnostics = latent_explore(flow, model, buffer, schedule, ctrl,
                                                   np.random.default_rng(explore_seed), on_iteration=snapshot)
        rows = np.array([[d[c] for c in DIAGNOSTIC_COLUMNS] for d in diagnostics], dtype=np.float64)
        np.savetxt(run.artifact("diagnostics.csv"), rows.reshape(-1, len(DIAGNOSTIC_COLUMNS)), delimiter=",",
                   fmt="%.10g", header=csv_header(DIAGNOSTIC_COLUMNS, config.system.name, config.seed))
        np.savetxt(run.artifact("buffer_final.csv"), buffer.x, delimiter=",", fmt="%.10g",
                   header=csv_header([f"x{i}" for i in range(model.dim)], config.system.name, config.seed))
        save_flow(run.artifact("flow.npz"), flow, checkpoint_header(config, reference), rng=flow_rng)
        run.manifest.summary = {
            "iterations": len(diagnostics),
            "final_step": ctrl.step,
            "mean_acceptance": float(np.mean([d["acceptance"] for d in diagnostics])) if diagnostics else None,
        }
    return run.manifest


# ── baseline ───────────────────────────────────────────────────────────────────

def _umbrella_initial(model: EnergyModel, settings, center: float) -> np.ndarray:
    if settings.initial is not None:
        return np.asarray(settings.initial, dtype=np.float64)
    base = _base(model)
    if isinstance(base, ParticleDimer) and settings.coordinate.kind == "dimer_distance":
        return base.initial_configuration(center)
    if settings.coordinate.kind == "coordinate":
        x = np.zeros(model.dim)
        x[settings.coordinate.index] = center
        return x
    raise ConfigError("baseline.umbrella: give an initial configuration for this coordinate")


def _flattened_well(run: Run, model: EnergyModel) -> Optional[DoubleWell]:
    rt = run.config.baseline.return_trip
    if rt is None:
        return None
    base = _base(model)
    if not isinstance(base, DoubleWell):
        raise ConfigError(f"baseline.return_trip needs the double_well system, got '{model.name}'")
    flat = DoubleWell(**{**base.params, **rt.flat.model_dump(exclude_none=True)})
    flat.barrier_height()    # raises ConfigError when the flattened well keeps no barrier
    return run.track(flat)


def _return_trip_at(run: Run, model: EnergyModel, flat: DoubleWell, tau: float,
                    rng: np.random.Generator) -> dict:
    rt = run.config.baseline.return_trip
    left, saddle, right = flat.stationary_points()
    chain = metropolis_chain(flat, MetropolisConfig(rt.step, rt.steps, 1, None, np.array([[left, 0.0]])),
                             tau, rng=rng)
    trips = count_return_trips(chain.trajectory[:, 0, 0], 0.5 * (left + saddle), 0.5 * (saddle + right))
    base = _base(model)
    barrier = max(base.barrier_height("left"), base.barrier_height("right")) / tau
    barrier_flat = max(flat.barrier_height("left"), flat.barrier_height("right")) / tau
    summary = {"return_trips_flat": trips, "barrier": barrier, "barrier_flat": barrier_flat}
    if trips == 0:
        logger.warning(f"[tau {tau:g}] no return trip in {rt.steps} steps on the flattened well; "
                       f"raise baseline.return_trip.steps")
        return summary
    t_flat = rt.steps / trips
    summary["t_flat"] = t_flat
    summary["t_return_trip"] = return_trip_estimate(t_flat, barrier, barrier_flat)
    logger.info(f"[tau {tau:g}] {trips} return trips on the flattened well (t_flat={t_flat:.4g} steps), "
                f"estimated return trip {summary['t_return_trip']:.4g} steps")
    return summary


def _baseline_at(run: Run, model: EnergyModel, tau: float, seed: int, flat: Optional[DoubleWell] = None) -> dict:
    config = run.config
    bl = config.baseline
    system = config.system.name
    summary = {}
    rng = np.random.default_rng(seed)
    if bl.metropolis is not None:
        s = bl.metropolis
        starts = starting_points(model, s)
        chain = metropolis_chain(model, MetropolisConfig(s.step, s.steps, s.stride, None, starts, s.tau_scaled),
                                 tau, rng=rng)
        n_frames, n_chains, dim = chain.trajectory.shape
        table = np.column_stack([
            np.repeat(np.arange(n_frames), n_chains), np.tile(np.arange(n_chains), n_frames),
            chain.frames, chain.energies.reshape(-1),
        ])
        columns = ["frame", "chain"] + [f"x{i}" for i in range(dim)] + ["energy"]
        np.savetxt(run.artifact(f"metropolis_tau{tau:g}.csv"), table, delimiter=",", fmt="%.10g",
                   header=csv_header(columns, system, config.seed, f"tau={tau:g}"))
        summary["metropolis_acceptance"] = chain.acceptance

    if bl.umbrella is not None:
        u = bl.umbrella
        centers = np.linspace(u.low, u.high, u.windows)
        ucfg = UmbrellaConfig(centers, u.k, coordinate_fn(u.coordinate), u.steps_per_window, u.forward_backward,
                              u.step, u.stride, int(rng.integers(2 ** 31)), _umbrella_initial(model, u, centers[0]),
                              u.bins, u.range)
        result = umbrella_sampling(model, ucfg, tau)
        write_profile(run.artifact(f"umbrella_tau{tau:g}.csv"), result.profile, system, config.seed, f"tau={tau:g}")
        if result.forward_profile is not None:
            fwd = [w for w in result.windows if w.sweep == "forward"]
            bwd = [w for w in result.windows if w.sweep == "backward"]
            args = (u.k, tau, u.bins, ucfg.profile_range, bl.bootstrap_resamples, rng)
            err_f, err_b = umbrella_profile_error(fwd, *args), umbrella_profile_error(bwd, *args)
            f_f, f_b = result.forward_profile.free_energy, result.backward_profile.free_energy
            both = np.isfinite(f_f) & np.isfinite(f_b)
            offset = np.mean(f_f[both] - f_b[both]) if both.any() else 0.0
            gap = np.abs(f_f - f_b - offset)
            tolerance = 2.0 * np.hypot(err_f, err_b)
            both &= np.isfinite(tolerance)
            consistent = bool(np.all(gap[both] <= tolerance[both]))
            np.savetxt(run.artifact(f"umbrella_tau{tau:g}_hysteresis.csv"),
                       np.column_stack([result.profile.centers, f_f, f_b, err_f, err_b]), delimiter=",", fmt="%.10g",
                       header=csv_header(("r_center", "F_forward", "F_backward", "err_forward", "err_backward"),
                                         system, config.seed))
            if not consistent:
                logger.warning(f"[tau {tau:g}] umbrella forward and backward sweeps disagree beyond their errors")
            summary["hysteresis_consistent"] = consistent

    if flat is not None:
        summary["return_trip"] = _return_trip_at(run, model, flat, tau, rng)
    return summary


def cmd_baseline(config: ExperimentConfig) -> RunManifest:
    bl = config.baseline
    if bl is None or (bl.metropolis is None and bl.umbrella is None and bl.return_trip is None):
        raise ConfigError("baseline needs a 'baseline' section with metropolis, umbrella or return_trip settings")
    with Run(config, "baseline") as run:
        model = run.track(build_model(config))
        flat = _flattened_well(run, model)
        results = _per_temperature(config, bl.temperatures, lambda tau, seed: _baseline_at(run, model, tau, seed, flat))
        for tau, summary in zip(bl.temperatures, results):
            run.manifest.summary[f"tau={tau:g}"] = summary
    return run.manifest
