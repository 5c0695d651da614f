import numpy as np
import pytest

from energy_models import HarmonicModel, ParticleDimer, relabeler_for
from errors import ConfigError, EstimatorError
from estimators import (
    WeightedSampleSet, bootstrap_error, effective_sample_size, free_energy_profile, generate_weighted,
    load_weighted_samples, profile_bootstrap_error, profile_from_values, total_estimator_error,
    two_bg_free_energy_difference, weighted_expectation, write_delta_a, write_weighted_samples,
)
from flow_layers import FlowStack, WhiteningLayer


def identity_flow(dim=2):
    return FlowStack([], dim=dim)


def exact_harmonic_flow(stiffness, center, dim=2):
    """x = center + z/√k, the exact generator of HarmonicModel(dim, stiffness, center)."""
    return FlowStack([WhiteningLayer(np.eye(dim), np.full(dim, 1.0 / stiffness), np.full(dim, center))])


def test_exact_generator_gives_uniform_weights(rng):
    samples = generate_weighted(identity_flow(), HarmonicModel(2), 500, 1.0, rng)
    assert np.allclose(samples.log_w, 0.0)
    assert np.isclose(effective_sample_size(samples.log_w), 500.0)
    assert samples.n_invalid == 0


def test_reweighting_recovers_a_stiffer_harmonic_moment(rng):
    samples = generate_weighted(identity_flow(), HarmonicModel(2, stiffness=2.0), 20000, 1.0, rng)
    assert abs(weighted_expectation(samples, lambda x: x[:, 0] ** 2) - 0.5) < 0.03
    assert np.isclose(weighted_expectation(samples, np.ones(len(samples))), 1.0)


def test_temperature_scales_the_latent_draw(rng):
    samples = generate_weighted(identity_flow(), HarmonicModel(2), 20000, 4.0, rng)
    assert abs(np.var(samples.z[:, 0]) - 4.0) < 0.2
    assert samples.tau == 4.0


def test_generate_weighted_rejects_bad_arguments(rng):
    with pytest.raises(ConfigError):
        generate_weighted(identity_flow(), HarmonicModel(2), 0, 1.0, rng)
    with pytest.raises(ConfigError):
        generate_weighted(identity_flow(), HarmonicModel(2), 10, -1.0, rng)


def test_sampling_off_ladder_warns(rng, caplog):
    generate_weighted(identity_flow(), HarmonicModel(2), 10, 3.0, rng, ladder=[1.0, 2.0])
    assert "outside the trained temperatures" in caplog.text


def test_generated_dimer_samples_are_relabeled_before_weighting(rng):
    model = ParticleDimer(n_solvent=5)
    reference = model.initial_configuration()
    reversed_solvent = reference.reshape(-1, 2).copy()
    reversed_solvent[model.solvent] = reversed_solvent[model.solvent[::-1]]
    flow = FlowStack([WhiteningLayer(np.eye(model.dim), np.full(model.dim, 0.02 ** 2), reversed_solvent.reshape(-1))])

    samples = generate_weighted(flow, model, 50, 1.0, rng, relabel=relabeler_for(model, reference))
    assert np.max(np.abs(samples.x - reference)) < 0.2
    assert np.allclose(samples.energies, model.energy(samples.x))
    assert np.all(np.isfinite(samples.log_w))


def test_effective_sample_size():
    assert np.isclose(effective_sample_size(np.zeros(10)), 10.0)
    assert np.isclose(effective_sample_size(np.array([0.0, -np.inf, -np.inf])), 1.0)
    assert effective_sample_size(np.array([-np.inf])) == 0.0
    assert np.isclose(effective_sample_size(np.log([1.0, 3.0])), 16.0 / 10.0)


def test_invalid_samples_are_excluded_from_weights():
    samples = WeightedSampleSet(np.zeros((3, 1)), np.array([0.0, 5.0, 0.0]), 1.0, np.array([True, False, True]))
    assert np.allclose(samples.normalized_weights(), [0.5, 0.0, 0.5])
    assert samples[1].valid is False
    none_valid = WeightedSampleSet(np.zeros((2, 1)), np.array([-np.inf, 0.0]), 1.0, np.array([True, False]))
    with pytest.raises(EstimatorError):
        none_valid.normalized_weights()


def test_profile_masks_light_bins_and_anchors_at_zero():
    r = np.array([0.1, 0.1, 0.1, 0.6])
    profile = profile_from_values(r, np.ones(4), bins=4, range_=(0.0, 1.0))
    assert np.allclose(profile.mass, [3.0, 0.0, 1.0, 0.0])
    assert profile.mask.tolist() == [False, True, False, True]
    assert profile.free_energy[0] == 0.0
    assert np.isclose(profile.free_energy[2], np.log(3.0))
    assert np.isnan(profile.free_energy[1])
    assert profile.rows().shape == (4, 4)


def test_profile_argument_errors():
    with pytest.raises(ConfigError):
        profile_from_values(np.zeros(3), np.ones(3), bins=1)
    with pytest.raises(ConfigError):
        profile_from_values(np.zeros(3), np.ones(3), range_=(1.0, 0.0))
    with pytest.raises(EstimatorError):
        profile_from_values(np.full(3, 5.0), np.ones(3), bins=4, range_=(0.0, 1.0))


def test_profile_of_reweighted_harmonic_is_parabolic(rng):
    samples = generate_weighted(identity_flow(), HarmonicModel(2, stiffness=2.0), 50000, 1.0, rng)
    profile = free_energy_profile(samples, lambda x: x[:, 0], bins=10, range_=(-1.0, 1.0))
    expected = 0.5 * 2.0 * profile.centers ** 2
    assert np.allclose(profile.free_energy - np.min(profile.free_energy), expected - expected.min(), atol=0.1)
    errors = profile_bootstrap_error(samples, lambda x: x[:, 0], bins=10, range_=(-1.0, 1.0), resamples=100, rng=1)
    assert errors.shape == (10,)
    assert np.all(errors < 0.1)


def test_bootstrap_error():
    assert bootstrap_error(np.ones(50), rng=0) == 0.0
    values = np.random.default_rng(5).standard_normal(400)
    assert abs(bootstrap_error(values, 1000, rng=0) - 0.05) < 0.01
    with pytest.raises(ConfigError):
        bootstrap_error(values, resamples=10)
    with pytest.raises(EstimatorError):
        bootstrap_error(np.array([]))


def test_total_estimator_error_combines_temperatures():
    total = total_estimator_error({1.0: np.array([0.3, np.nan, 0.3]), 2.0: np.array([0.4]),
                                  3.0: np.array([np.nan])})
    assert np.isclose(total, 0.5)


def test_two_generator_delta_a_is_exact_for_exact_generators(rng):
    results = two_bg_free_energy_difference(
        identity_flow(), exact_harmonic_flow(4.0, 1.0), HarmonicModel(2), [1.0, 2.0], n=2000, rng=rng,
        batch=100, resamples=100, energy_model_b=HarmonicModel(2, stiffness=4.0, center=1.0),
    )
    assert [r.tau for r in results] == [1.0, 2.0]
    for r in results:
        assert np.isclose(r.delta_a, np.log(4.0))
        assert r.std_err < 1e-10
        assert r.n_batches == 10


def test_identical_generators_give_zero_delta_a(rng):
    flow = exact_harmonic_flow(4.0, 1.0)
    model = HarmonicModel(2, stiffness=4.0, center=1.0)
    for r in two_bg_free_energy_difference(flow, flow, model, [0.5, 1.0], n=500, rng=rng, batch=50):
        assert r.delta_a == 0.0
        assert r.std_err == 0.0


def test_two_generator_delta_a_rejects_mismatched_latents(rng):
    with pytest.raises(ConfigError):
        two_bg_free_energy_difference(identity_flow(2), identity_flow(3), HarmonicModel(2), [1.0], 10, rng)
    with pytest.raises(ConfigError):
        two_bg_free_energy_difference(identity_flow(), identity_flow(), HarmonicModel(2), [1.0], 10, rng,
                                      converged_fraction=0.0)


def test_sample_file_keeps_weights_and_footer(tmp_path):
    samples = WeightedSampleSet(np.arange(6.0).reshape(3, 2), np.array([0.0, -np.inf, 1.0]), 2.0,
                                np.array([True, False, True]))
    path = tmp_path / "samples.csv"
    write_weighted_samples(path, samples, "harmonic", 4)
    text = path.read_text()
    assert text.startswith("# system=harmonic seed=4\n# x0,x1,log_w,tau,valid")
    assert "n_invalid=1" in text.splitlines()[-1]
    loaded = load_weighted_samples(path)
    assert loaded.tau == 2.0
    assert loaded.valid.tolist() == [True, False, True]
    assert np.isneginf(loaded.log_w[1])
    assert np.allclose(loaded.normalized_weights(), samples.normalized_weights())


def test_delta_a_file(tmp_path):
    from estimators import DeltaAResult
    path = tmp_path / "delta_a.csv"
    write_delta_a(path, [DeltaAResult(1.0, 0.5, 0.01, 10)], "double_well", 0)
    assert np.allclose(np.loadtxt(path, delimiter=","), [1.0, 0.5, 0.01])
