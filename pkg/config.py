"""
Experiment configuration: JSON file merged over DEFAULTS, then validated by the
pydantic schema below plus the semantic checks pydantic cannot express. All
problems are gathered into one ConfigError before any compute starts.
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from energy_models import SYSTEMS
from errors import ConfigError
from flow_layers import parse_architecture
from training import LossWeights, TrainingSchedule, TrainingStage

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "output_dir": "runs",
    "threads": 1,
    "registry": "boltzgen_runs.db",
}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class RestraintConfig(_Strict):
    index: int = Field(ge=0)
    lower: Optional[float] = None
    upper: Optional[float] = None
    k: float = Field(100.0, gt=0)

    def to_kwargs(self) -> dict:
        return {
            "index": self.index,
            "lower": float("-inf") if self.lower is None else self.lower,
            "upper": float("inf") if self.upper is None else self.upper,
            "k": self.k,
        }


class SystemConfig(_Strict):
    name: str
    params: dict = Field(default_factory=dict)
    restraint: Optional[RestraintConfig] = None


class FlowConfig(_Strict):
    architecture: str = "R3"
    l_hidden: int = Field(3, ge=1)
    n_hidden: int = Field(100, ge=1)
    scale_cap: float = Field(3.0, gt=0)
    discard_null: int = Field(0, ge=0)
    zmatrix: Optional[str] = None


class CoordinateConfig(_Strict):
    kind: Literal["coordinate", "projection", "dimer_distance"] = "coordinate"
    index: int = Field(0, ge=0)
    vector: Optional[list[float]] = None


class RCSettings(CoordinateConfig):
    low: float
    high: float
    n_kernels: int = Field(20, ge=2)


class MetropolisSettings(_Strict):
    starts: Optional[list[list[float]]] = None
    dimer_distances: Optional[list[float]] = None
    step: float = Field(0.1, ge=0)
    steps: int = Field(1000, ge=0)
    stride: int = Field(1, ge=1)
    tau_scaled: bool = False
    temperature: float = Field(1.0, gt=0)


class DataConfig(_Strict):
    file: Optional[str] = None
    metropolis: Optional[MetropolisSettings] = None
    noise: float = Field(0.0, ge=0)


class StageConfig(_Strict):
    iter: int
    batch: int
    lr: float
    w_ML: float = 0.0
    w_KL: float = 0.0
    w_RC: float = 0.0
    w_torsion: float = 0.0
    E_high: Optional[float] = None
    temperatures: list[float] = Field(default_factory=lambda: [1.0])

    def to_stage(self) -> TrainingStage:
        return TrainingStage(self.iter, self.batch, self.lr,
                             LossWeights(self.w_ML, self.w_KL, self.w_RC, self.w_torsion),
                             self.E_high, tuple(self.temperatures))


class TrainingConfig(_Strict):
    stages: list[StageConfig] = Field(default_factory=list)
    log_every: int = Field(50, ge=0)


class SamplingConfig(_Strict):
    n: int = Field(10000, ge=1)
    temperatures: list[float] = Field(default_factory=lambda: [1.0])
    batch_size: int = Field(10000, ge=1)


class ProfileRequest(_Strict):
    coordinate: CoordinateConfig = Field(default_factory=CoordinateConfig)
    bins: int = Field(100, ge=2)
    range: tuple[float, float]
    reference: bool = False


class DeltaARequest(_Strict):
    temperatures: list[float] = Field(default_factory=lambda: [1.0])
    n: int = Field(100000, ge=1)
    batch: int = Field(1000, ge=1)
    converged_fraction: float = Field(0.5, gt=0, le=1)
    reference: bool = False


class BasinRequest(_Strict):
    split: Optional[float] = None
    reference: bool = True


class EstimatorConfig(_Strict):
    profiles: list[ProfileRequest] = Field(default_factory=list)
    delta_a: Optional[DeltaARequest] = None
    basins: Optional[BasinRequest] = None
    expectations: list[CoordinateConfig] = Field(default_factory=list)
    bootstrap_resamples: int = Field(100, ge=100)


class UmbrellaSettings(_Strict):
    coordinate: CoordinateConfig = Field(default_factory=CoordinateConfig)
    low: float
    high: float
    windows: int = Field(ge=1)
    k: float = Field(gt=0)
    steps_per_window: int = Field(ge=1)
    forward_backward: bool = True
    step: float = Field(0.02, ge=0)
    stride: int = Field(10, ge=1)
    bins: int = Field(100, ge=2)
    range: Optional[tuple[float, float]] = None
    initial: Optional[list[float]] = None


class FlatWellParams(_Strict):
    a: float = Field(0.25, gt=0)
    b: float = Field(1.5, gt=0)
    c: Optional[float] = None
    d: Optional[float] = Field(None, gt=0)


class ReturnTripSettings(_Strict):
    """Metropolis on a flattened double well; the crossing time is scaled back by exp(B - B_flat)."""
    flat: FlatWellParams = Field(default_factory=FlatWellParams)
    step: float = Field(0.1, gt=0)
    steps: int = Field(100000, ge=1)


class BaselineConfig(_Strict):
    temperatures: list[float] = Field(default_factory=lambda: [1.0])
    metropolis: Optional[MetropolisSettings] = None
    umbrella: Optional[UmbrellaSettings] = None
    return_trip: Optional[ReturnTripSettings] = None
    bootstrap_resamples: int = Field(100, ge=100)


class ExploreConfig(_Strict):
    iterations: int = Field(1000, ge=0)
    batch: int = Field(128, ge=1)
    lr: float = Field(1e-3, gt=0)
    E_high: Optional[float] = None
    pretrain_iterations: int = Field(20, ge=0)
    pretrain_batch: int = Field(128, ge=1)
    capacity: int = Field(10000, ge=1)
    noise: float = Field(0.0, ge=0)
    initial: list[float]
    step: float = Field(0.1, gt=0)
    adaptive: bool = True
    target_acceptance: float = Field(0.3, gt=0, lt=1)
    step_factor: float = Field(1.02, gt=1)
    snapshot_every: int = Field(0, ge=0)


class ExperimentConfig(_Strict):
    schema_version: int
    name: str = "experiment"
    seed: int = 0
    output_dir: str = "runs"
    threads: int = Field(1, ge=1)
    registry: str = "boltzgen_runs.db"
    system: SystemConfig
    flow: FlowConfig = Field(default_factory=FlowConfig)
    data: Optional[DataConfig] = None
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    rc: Optional[RCSettings] = None
    sampling: SamplingConfig = Field(default_factory=SamplingConfig)
    estimators: EstimatorConfig = Field(default_factory=EstimatorConfig)
    baseline: Optional[BaselineConfig] = None
    explore: Optional[ExploreConfig] = None

    def schedule(self) -> TrainingSchedule:
        return TrainingSchedule(tuple(s.to_stage() for s in self.training.stages))


# ── Loading ────────────────────────────────────────────────────────────────────

def load_config(path: Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})")
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return {**DEFAULTS, **data}


def apply_overrides(data: dict, seed: Optional[int] = None, out: Optional[str] = None,
                    threads: Optional[int] = None) -> dict:
    overrides = {"seed": seed, "output_dir": out, "threads": threads}
    return {**data, **{k: v for k, v in overrides.items() if v is not None}}


def _pydantic_problems(err: ValidationError) -> list[str]:
    return [f"{'.'.join(str(p) for p in e['loc']) or '<root>'}: {e['msg']}" for e in err.errors()]


def _semantic_problems(data: dict) -> list[str]:
    """Checks on the raw dict, so they run even when the schema itself fails."""
    found = []
    if data.get("schema_version") != SCHEMA_VERSION:
        found.append(f"schema_version: expected {SCHEMA_VERSION}, got {data.get('schema_version')}")

    system = data.get("system") or {}
    name = system.get("name") if isinstance(system, dict) else None
    if name is not None and name not in SYSTEMS:
        found.append(f"system.name: unknown system '{name}' (known: {', '.join(sorted(SYSTEMS))})")

    flow = data.get("flow") or {}
    if isinstance(flow, dict):
        try:
            tokens = parse_architecture(flow.get("architecture", "R3"))
            if "M" in tokens and not flow.get("zmatrix") and name != "toy_chain":
                found.append("flow.architecture: an M layer needs flow.zmatrix (or the toy_chain system)")
        except ConfigError as e:
            found.append(f"flow.architecture: {e}")

    training = data.get("training") or {}
    stages = training.get("stages", []) if isinstance(training, dict) else []
    try:
        schedule = TrainingSchedule(tuple(StageConfig(**s).to_stage() for s in stages))
        if schedule.needs_data and not data.get("data"):
            found.append("data: the schedule has ML stages but no data source is configured")
        if any(s.weights.w_RC > 0 for s in schedule.stages) and not data.get("rc"):
            found.append("rc: the schedule has w_RC > 0 but no reaction coordinate is configured")
    except ConfigError as e:
        found.extend(f"training.{p}" for p in (e.problems or [str(e)]))
    except (TypeError, ValidationError):
        pass    # reported by the schema pass

    rc = data.get("rc")
    if isinstance(rc, dict) and rc.get("low") is not None and rc.get("high") is not None:
        if not rc["low"] < rc["high"]:
            found.append(f"rc: low ({rc['low']}) must be below high ({rc['high']})")

    baseline = data.get("baseline") or {}
    umbrella = baseline.get("umbrella") if isinstance(baseline, dict) else None
    if isinstance(umbrella, dict) and umbrella.get("low") is not None and umbrella.get("high") is not None:
        if not umbrella["low"] < umbrella["high"]:
            found.append("baseline.umbrella: low must be below high")

    if isinstance(baseline, dict) and baseline.get("return_trip") is not None and name not in (None, "double_well"):
        found.append(f"baseline.return_trip: only defined for the double_well system, not '{name}'")

    for key in ("sampling", "baseline"):
        section = data.get(key) or {}
        temps = section.get("temperatures", []) if isinstance(section, dict) else []
        if any(not isinstance(t, (int, float)) or t <= 0 for t in temps):
            found.append(f"{key}.temperatures: must be positive")
    return found


def validate_config(data: dict) -> ExperimentConfig:
    problems = []
    config = None
    try:
        config = ExperimentConfig(**data)
    except ValidationError as e:
        problems.extend(_pydantic_problems(e))
    problems.extend(_semantic_problems(data))
    if problems:
        raise ConfigError(f"invalid configuration ({len(problems)} problems)", problems=problems)
    return config


def config_hash(config: ExperimentConfig) -> str:
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def save_config(config: ExperimentConfig, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(config.model_dump(mode="json"), f, indent=2)
