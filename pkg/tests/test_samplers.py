import numpy as np
import pytest
from scipy import stats

from energy_models import DoubleWell, HarmonicModel, ParticleDimer, relabeler_for
from errors import ConfigError, NumericError
from flow_layers import FlowStack, build_flow
from samplers import (
    DIAGNOSTIC_COLUMNS, ExploreSchedule, MetropolisConfig, SampleBuffer, StepController, UmbrellaConfig,
    UmbrellaWindow, _check_overlap,
    adapt_step, count_return_trips, latent_acceptance_energy, latent_explore, metropolis_chain, metropolis_data,
    return_trip_estimate,
    umbrella_profile_error, umbrella_sampling, wham, wham_profile,
)


# ── Metropolis ─────────────────────────────────────────────────────────────────

def test_metropolis_samples_a_gaussian():
    cfg = MetropolisConfig(step=1.0, steps=4000, stride=2, seed=3, initial=np.zeros((20, 2)))
    result = metropolis_chain(HarmonicModel(2, stiffness=[1.0, 4.0]), cfg)
    assert result.trajectory.shape == (2000, 20, 2)
    assert result.energies.shape == (2000, 20)
    frames = result.frames[len(result.frames) // 4:]
    assert abs(np.var(frames[:, 0]) - 1.0) < 0.1
    assert abs(np.var(frames[:, 1]) - 0.25) < 0.03
    assert 0.2 < result.acceptance < 0.9


def test_metropolis_energies_match_the_stored_frames():
    model = DoubleWell()
    cfg = MetropolisConfig(step=0.3, steps=50, stride=5, seed=0, initial=np.array([-2.5, 0.0]))
    result = metropolis_chain(model, cfg)
    assert np.allclose(result.energies[:, 0], model.energy(result.trajectory[:, 0]))


def test_zero_step_accepts_every_move():
    cfg = MetropolisConfig(step=0.0, steps=10, seed=0, initial=np.ones((2, 2)))
    result = metropolis_chain(HarmonicModel(2), cfg)
    assert result.acceptance == 1.0
    assert np.array_equal(result.final, np.ones((2, 2)))


def test_metropolis_is_reproducible():
    cfg = MetropolisConfig(step=0.5, steps=100, seed=11, initial=np.zeros(2))
    first = metropolis_chain(DoubleWell(), cfg).frames
    second = metropolis_chain(DoubleWell(), cfg).frames
    assert np.array_equal(first, second)


def test_tau_scaled_steps_widen_with_temperature():
    cfg = MetropolisConfig(step=0.1, steps=1, seed=0, initial=np.zeros((4000, 1)), tau_scaled=True)
    result = metropolis_chain(HarmonicModel(1, stiffness=1e-12), cfg, tau=4.0)
    assert abs(np.std(result.final) - 0.2) < 0.02


def test_metropolis_argument_errors():
    with pytest.raises(ConfigError) as exc:
        MetropolisConfig(step=-1.0, steps=-1, stride=0)
    assert len(exc.value.problems) == 3
    with pytest.raises(ConfigError):
        metropolis_chain(HarmonicModel(2), MetropolisConfig(0.1, 10))
    with pytest.raises(ConfigError):
        metropolis_chain(HarmonicModel(2), MetropolisConfig(0.1, 10, initial=np.zeros(3)))
    with pytest.raises(NumericError):
        metropolis_chain(HarmonicModel(2), MetropolisConfig(0.1, 10, initial=np.array([np.nan, 0.0])))
    with pytest.raises(ConfigError):
        metropolis_chain(HarmonicModel(2), MetropolisConfig(0.1, 10, initial=np.zeros(2)), tau=0.0)


def test_metropolis_data_pools_all_starts():
    cfg = MetropolisConfig(step=0.1, steps=100, stride=10, seed=0)
    data = metropolis_data(DoubleWell(), np.array([[-2.55, 0.0], [2.38, 0.0]]), cfg)
    assert data.shape == (20, 2)
    assert np.sum(data[:, 0] < 0) == 10


# ── Umbrella sampling and WHAM ─────────────────────────────────────────────────

def _biased_gaussian_windows(centers, k, n, rng):
    """Exact draws from exp(-r²/2 - k(r-c)²/2) for each window center."""
    precision = 1.0 + k
    return [k * c / precision + rng.standard_normal(n) / np.sqrt(precision) for c in centers]


def test_wham_recovers_window_free_energies(rng):
    centers = np.linspace(-2.0, 2.0, 9)
    k = 10.0
    coords = _biased_gaussian_windows(centers, k, 5000, rng)
    _, f = wham(coords, centers, k)
    expected = 0.5 * k / (1.0 + k) * (centers ** 2 - centers[0] ** 2)
    assert f[0] == 0.0
    assert np.allclose(f, expected, atol=0.1)


def test_wham_profile_recovers_the_unbiased_density(rng):
    centers = np.linspace(-2.0, 2.0, 9)
    coords = _biased_gaussian_windows(centers, 10.0, 5000, rng)
    profile, _ = wham_profile(coords, centers, 10.0, 1.0, bins=16, range_=(-2.0, 2.0))
    expected = 0.5 * profile.centers ** 2
    ok = ~profile.mask
    assert ok.sum() >= 14
    assert np.allclose(profile.free_energy[ok], expected[ok] - expected[ok].min(), atol=0.1)


def test_umbrella_sampling_sweeps_both_ways():
    cfg = UmbrellaConfig(centers=np.linspace(-2.0, 2.0, 9), k=4.0, coordinate=lambda x: x[:, 0],
                         steps_per_window=200, step=0.2, stride=4, seed=2, initial=np.array([-2.5, 0.0]), bins=10)
    result = umbrella_sampling(DoubleWell(), cfg)
    assert len(result.windows) == 18
    assert [w.sweep for w in result.windows] == ["forward"] * 9 + ["backward"] * 9
    assert [w.center for w in result.windows[9:]] == list(np.linspace(-2.0, 2.0, 9)[::-1])
    assert all(len(w.frames) == 50 for w in result.windows)
    assert result.forward_profile is not None and result.backward_profile is not None
    assert result.window_free_energies.shape == (18,)
    assert np.nanmin(result.profile.free_energy) == 0.0
    errors = umbrella_profile_error(result.windows, cfg.k, 1.0, cfg.bins, cfg.profile_range,
                                    resamples=100, rng=np.random.default_rng(0))
    assert errors.shape == (10,)


def test_single_sweep_has_no_hysteresis_profiles():
    cfg = UmbrellaConfig(centers=[-1.0, 0.0, 1.0], k=2.0, coordinate=lambda x: x[:, 0], steps_per_window=40,
                         forward_backward=False, step=0.2, stride=4, seed=0, initial=np.zeros(2), bins=5)
    result = umbrella_sampling(HarmonicModel(2), cfg)
    assert len(result.windows) == 3
    assert result.forward_profile is None and result.backward_profile is None


def test_umbrella_config_validation():
    with pytest.raises(ConfigError) as exc:
        UmbrellaConfig(centers=[1.0, 0.0], k=0.0, coordinate=lambda x: x[:, 0], steps_per_window=1, stride=10)
    assert len(exc.value.problems) == 3
    with pytest.raises(ConfigError):
        umbrella_sampling(HarmonicModel(2), UmbrellaConfig([0.0, 1.0], 1.0, lambda x: x[:, 0], 10, stride=1))


def test_disjoint_windows_warn(caplog):
    windows = [UmbrellaWindow(-1.0, "forward", np.zeros((3, 2)), np.array([-1.1, -1.0, -0.9]), 0.5),
               UmbrellaWindow(1.0, "forward", np.zeros((3, 2)), np.array([0.9, 1.0, 1.1]), 0.5)]
    _check_overlap(windows)
    assert "no overlap" in caplog.text


# ── Latent exploration ─────────────────────────────────────────────────────────

def test_buffer_fills_cyclically_and_samples_without_replacement(rng):
    model = HarmonicModel(2)
    buffer = SampleBuffer(5, np.array([[0.0, 0.0], [1.0, 1.0]]), model)
    assert len(buffer) == 5
    assert model.calls == 2
    assert np.array_equal(buffer.x[:, 0], [0.0, 1.0, 0.0, 1.0, 0.0])
    assert np.allclose(buffer.energies, model.energy(buffer.x))
    idx = buffer.sample(4, rng)
    assert len(set(idx.tolist())) == 4
    assert len(buffer.sample(10, rng)) == 5
    accepted = buffer.replace(np.array([0, 1]), np.full((2, 2), 3.0), np.array([9.0, 9.0]), np.array([True, False]))
    assert accepted == 1
    assert np.array_equal(buffer.x[0], [3.0, 3.0]) and buffer.energies[0] == 9.0
    assert np.array_equal(buffer.x[1], [1.0, 1.0])


def test_buffer_validation():
    with pytest.raises(ConfigError):
        SampleBuffer(0, np.zeros(2), HarmonicModel(2))
    with pytest.raises(ConfigError):
        SampleBuffer(3, np.zeros(3), HarmonicModel(2))


def test_adapt_step():
    assert np.isclose(adapt_step(StepController(step=1.0), 0.5), 1.02)
    assert np.isclose(adapt_step(StepController(step=1.0), 0.1), 1.0 / 1.02)
    assert adapt_step(StepController(step=1.0), 0.3) == 1.0
    assert adapt_step(StepController(step=1.0, adaptive=False), 0.9) == 1.0
    assert adapt_step(StepController(step=20.0), 0.9) == 10.0
    with pytest.raises(ConfigError):
        adapt_step(StepController(), 1.5)


def test_adaptive_step_settles_on_a_gaussian(rng):
    model = HarmonicModel(2)
    ctrl = StepController(step=0.1)
    buffer = SampleBuffer(100, np.zeros(2), model)
    _, _, diagnostics = latent_explore(FlowStack([], dim=2), model, buffer, ExploreSchedule(iterations=600, batch=100),
                                       ctrl, rng, train=False, log_every=0)
    assert 0.5 < ctrl.step < 5.0
    late = np.mean([row["acceptance"] for row in diagnostics[-200:]])
    assert 0.15 < late < 0.5


def test_latent_acceptance_energy():
    assert latent_acceptance_energy(3.0, 1.0, 0.5, -0.25) == 3.0 - 1.0 - 0.5 + 0.25


def test_explore_schedule_validation():
    with pytest.raises(ConfigError):
        ExploreSchedule(iterations=-1)
    with pytest.raises(ConfigError):
        ExploreSchedule(iterations=1, lr=0.0)


def test_identity_generator_explores_like_metropolis(rng):
    model = HarmonicModel(2)
    buffer = SampleBuffer(200, np.zeros(2), model)
    seen = []
    _, buffer, diagnostics = latent_explore(
        FlowStack([], dim=2), model, buffer, ExploreSchedule(iterations=300, batch=50), StepController(step=0.5),
        rng, train=False, log_every=0, on_iteration=lambda it, buf: seen.append(it),
    )
    assert len(diagnostics) == 300 and seen == list(range(300))
    assert set(diagnostics[0]) == set(DIAGNOSTIC_COLUMNS)
    assert np.isnan(diagnostics[0]["J_ML"])
    assert diagnostics[-1]["energy_calls"] == 300 * 50
    assert np.allclose(buffer.energies, model.energy(buffer.x))
    assert abs(np.var(buffer.x[:, 0]) - 1.0) < 0.4


def test_frozen_generator_moves_keep_the_boltzmann_distribution(rng):
    model = HarmonicModel(2, stiffness=[1.0, 4.0])
    data = rng.standard_normal((500, 2)) * [2.0, 0.3] + [0.5, -0.2]
    flow = build_flow("W R2", 2, rng, data=data, l_hidden=1, n_hidden=8)
    flow.load_parameters({k: v + 0.3 * rng.standard_normal(v.shape) for k, v in flow.parameters().items()})
    _, log_det = flow.forward(data[:10])
    assert np.ptp(log_det) > 1e-3

    buffer = SampleBuffer(2000, np.array([1.0, 0.5]), model, noise=0.05, rng=rng)
    _, buffer, diagnostics = latent_explore(flow, model, buffer, ExploreSchedule(iterations=500, batch=2000),
                                            StepController(step=0.5), rng, train=False, log_every=0)
    assert np.mean([d["acceptance"] for d in diagnostics[-100:]]) > 0.1
    x = buffer.x
    assert abs(np.var(x[:, 0]) - 1.0) < 0.12
    assert abs(np.var(x[:, 1]) - 0.25) < 0.03
    assert np.all(np.abs(x.mean(axis=0)) < 0.1)
    # 2u(x) = x1^2 + 4 x2^2 is chi-squared with two degrees of freedom under the Boltzmann density
    assert stats.kstest(2.0 * buffer.energies, stats.chi2(df=2).cdf).pvalue > 1e-3


def test_dimer_buffer_stays_in_the_reference_labeling(rng):
    model = ParticleDimer(n_solvent=6)
    reference = model.initial_configuration()
    relabel = relabeler_for(model, reference)
    seed = reference.reshape(-1, 2).copy()
    seed[model.solvent] = seed[model.solvent[::-1]]
    buffer = SampleBuffer(32, seed.reshape(-1), model, noise=0.02, rng=rng, relabel=relabel)
    assert np.max(np.abs(buffer.x - reference)) < 0.2
    assert np.array_equal(relabel(buffer.x), buffer.x)

    shuffled = buffer.x[:4].reshape(4, -1, 2).copy()
    shuffled[:, model.solvent] = shuffled[:, np.roll(model.solvent, 1)]
    shuffled = shuffled.reshape(4, -1)
    accept = np.array([True, True, False, True])
    assert buffer.replace(np.arange(4), shuffled, model.energy(shuffled), accept) == 3
    assert np.array_equal(relabel(buffer.x), buffer.x)

    flow = build_flow("R2", model.dim, rng, l_hidden=1, n_hidden=8)
    flow.load_parameters({k: v + 0.05 * rng.standard_normal(v.shape) for k, v in flow.parameters().items()})
    _, buffer, diagnostics = latent_explore(flow, model, buffer, ExploreSchedule(iterations=30, batch=16),
                                            StepController(step=0.05, adaptive=False), rng, train=False, log_every=0)
    assert sum(d["acceptance"] for d in diagnostics) > 0
    assert np.array_equal(relabel(buffer.x), buffer.x)
    assert np.allclose(buffer.energies, model.energy(buffer.x))


def test_explore_with_training_updates_the_generator(rng):
    model = DoubleWell()
    buffer = SampleBuffer(64, np.array([-2.55, 0.0]), model, noise=0.1, rng=rng)
    flow = build_flow("W R1", 2, rng, data=buffer.x, l_hidden=1, n_hidden=8)
    before = {k: v.copy() for k, v in flow.parameters().items()}
    _, _, diagnostics = latent_explore(
        flow, model, buffer, ExploreSchedule(iterations=5, batch=16, e_high=1e3, pretrain_iterations=3,
                                             pretrain_batch=16),
        StepController(step=0.1), rng, log_every=0,
    )
    assert all(np.isfinite(row["J_ML"]) and np.isfinite(row["J_KL"]) for row in diagnostics)
    assert any(not np.array_equal(before[k], v) for k, v in flow.parameters().items())


def test_return_trip_estimate():
    assert np.isclose(return_trip_estimate(10.0, 5.0, 2.0), 10.0 * np.exp(3.0))


def test_count_return_trips_ignores_failed_excursions():
    trace = np.array([-2.0, -0.5, -1.5, 0.5, 1.5, 0.0, 1.2, -1.2, -2.0, 0.3, 1.1, -1.1])
    assert count_return_trips(trace, -1.0, 1.0) == 2
    assert count_return_trips(np.full(10, -2.0), -1.0, 1.0) == 0
    with pytest.raises(ConfigError):
        count_return_trips(trace, 1.0, -1.0)
