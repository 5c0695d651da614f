"""End-to-end runs against quadrature references. Minutes each; run with `pytest -m slow`."""

from pathlib import Path

import numpy as np
import pytest
from scipy.integrate import simpson

import experiments
from config import apply_overrides, load_config, validate_config
from energy_models import DoubleWell, ParticleDimer, dimer_distance
from estimators import free_energy_profile, generate_weighted, load_weighted_samples
from flow_layers import build_flow, load_flow
from reference import integration_region, marginal_profile
from samplers import ExploreSchedule, SampleBuffer, StepController, UmbrellaConfig, latent_explore, umbrella_sampling

pytestmark = pytest.mark.slow

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"
WELL_SAMPLED = 5.0
DIMER_TEMPERATURES = [0.5, 1.0, 2.0]
EXPLORE_CALLS = 100000


def _config(name, out):
    return validate_config(apply_overrides(load_config(CONFIG_DIR / f"{name}.json"), out=str(out)))


def _compare(profile_values, exact, max_error):
    keep = np.isfinite(profile_values) & (exact < WELL_SAMPLED)
    offset = np.mean(profile_values[keep] - exact[keep])
    assert np.max(np.abs(profile_values[keep] - exact[keep] - offset)) < max_error


def test_trained_double_well_profile_matches_quadrature(tmp_path, registry):
    config = _config("double_well", tmp_path)
    experiments.cmd_train(config)
    flow, _ = load_flow(tmp_path / "flow.npz")
    model = DoubleWell()
    samples = generate_weighted(flow, model, 100000, 1.0, np.random.default_rng(0))
    profile = free_energy_profile(samples, lambda x: x[:, 0], bins=60, range_=(-3.5, 3.5))
    region = integration_region(model)
    exact = marginal_profile(model, 0, profile.edges, (region.y_lo, region.y_hi))
    _compare(profile.free_energy, exact, 0.2)


def test_restrained_generators_reproduce_the_well_free_energy_difference(tmp_path, registry):
    checkpoints = []
    for side in ("left", "right"):
        experiments.cmd_train(_config(f"double_well_{side}", tmp_path / side))
        checkpoints.append(tmp_path / side / "flow.npz")
    experiments.cmd_free_energy(_config("double_well_left", tmp_path / "delta"), checkpoints=checkpoints)
    estimate = np.loadtxt(tmp_path / "delta" / "delta_a.csv", delimiter=",")
    reference = np.loadtxt(tmp_path / "delta" / "delta_a_reference.csv", delimiter=",")
    assert np.array_equal(estimate[:, 0], [0.5, 1.0, 2.0, 4.0])
    assert np.all(np.abs(estimate[:, 1] - reference[:, 1]) < 0.3)


def test_umbrella_profile_matches_quadrature():
    model = DoubleWell()
    cfg = UmbrellaConfig(centers=np.linspace(-3.0, 3.0, 25), k=20.0, coordinate=lambda x: x[:, 0],
                         steps_per_window=20000, step=0.1, stride=10, seed=0, initial=np.array([-3.0, 0.0]),
                         bins=60, range_=(-3.0, 3.0))
    result = umbrella_sampling(model, cfg)
    region = integration_region(model)
    exact = marginal_profile(model, 0, result.profile.edges, (region.y_lo, region.y_hi))
    _compare(result.profile.free_energy, exact, 0.2)
    _compare(result.forward_profile.free_energy, result.backward_profile.free_energy, 0.3)


def test_mueller_basin_free_energy_matches_quadrature(tmp_path, registry):
    config = _config("mueller", tmp_path)
    experiments.cmd_train(config)
    experiments.cmd_free_energy(config, checkpoints=[tmp_path / "flow.npz"])
    tau, estimate, reference, richardson = np.loadtxt(tmp_path / "basins.csv", delimiter=",")
    assert tau == 1.0
    assert np.isfinite(richardson)
    assert abs(estimate - reference) < 0.3


def _overlap_coefficient(a, b, bins=50):
    edges = np.histogram_bin_edges(np.concatenate([a, b]), bins=bins)
    pa, _ = np.histogram(a, bins=edges, density=True)
    pb, _ = np.histogram(b, bins=edges, density=True)
    return float(np.sum(np.minimum(pa, pb) * np.diff(edges)))


def test_dimer_profiles_match_umbrella_sampling(tmp_path, registry):
    data = load_config(CONFIG_DIR / "dimer.json")
    metropolis = {"dimer_distances": [1.0, 2.0], "step": 0.02, "tau_scaled": True, "steps": 20000, "stride": 10}
    data = {
        **data, "output_dir": str(tmp_path), "threads": len(DIMER_TEMPERATURES),
        "sampling": {**data["sampling"], "temperatures": DIMER_TEMPERATURES},
        "baseline": {**data["baseline"], "temperatures": DIMER_TEMPERATURES, "metropolis": metropolis},
    }
    config = validate_config(data)
    experiments.cmd_train(config)
    experiments.cmd_sample(config, tmp_path / "flow.npz")
    experiments.cmd_baseline(config)

    model = ParticleDimer()
    for tau in DIMER_TEMPERATURES:
        samples = load_weighted_samples(tmp_path / f"samples_tau{tau:g}.csv")
        profile = free_energy_profile(samples, dimer_distance, bins=50, range_=(0.5, 2.5))
        umbrella = np.loadtxt(tmp_path / f"umbrella_tau{tau:g}.csv", delimiter=",")
        known = np.isfinite(umbrella[:, 1])
        reference = np.interp(profile.centers, umbrella[known, 0], umbrella[known, 1], left=np.nan, right=np.nan)
        keep = np.isfinite(reference)
        _compare(profile.free_energy[keep], reference[keep], 1.0)

    samples = load_weighted_samples(tmp_path / "samples_tau1.csv")
    generated = model.energy(samples.x[samples.valid])
    baseline = np.loadtxt(tmp_path / "metropolis_tau1.csv", delimiter=",")[:, -1]
    assert _overlap_coefficient(generated, baseline) >= 0.2


def _right_well_share(model: DoubleWell) -> float:
    x = np.linspace(-6.0, 6.0, 24001)
    u = model.energy(np.column_stack([x, np.zeros_like(x)]))
    p = np.exp(-(u - u.min()))
    right = x > 0
    return float(simpson(p[right], x=x[right]) / simpson(p, x=x))


def test_latent_exploration_finds_the_second_well():
    model = DoubleWell()
    # the right well holds under 1% of the equilibrium mass at tau = 1
    threshold = 0.5 * _right_well_share(DoubleWell())
    rng = np.random.default_rng(0)
    capacity, batch = 2000, 128
    buffer = SampleBuffer(capacity, np.array([-2.55, 0.0]), model, noise=0.05, rng=rng)
    flow = build_flow("W R4", 2, rng, data=buffer.x, l_hidden=3, n_hidden=64)
    found = {}

    def watch(it, buf):
        if "calls" not in found and np.mean(buf.x[:, 0] > 0) > threshold:
            found["calls"] = model.calls

    iterations = (EXPLORE_CALLS - capacity) // (2 * batch)
    _, _, diagnostics = latent_explore(
        flow, model, buffer, ExploreSchedule(iterations=iterations, batch=batch, pretrain_iterations=20),
        StepController(step=0.5), rng, log_every=0, on_iteration=watch,
    )
    assert model.calls <= EXPLORE_CALLS
    assert "calls" in found
    final_third = np.array([d["J_KL"] for d in diagnostics[-(len(diagnostics) // 3):]])
    slope = np.polyfit(np.arange(len(final_third)), final_third, 1)[0]
    assert slope <= 1e-3
