import numpy as np
import pytest

from checks import numeric_jacobian
from errors import ConfigError, DegenerateDataError, NumericError
from flow_layers import (
    FlowStack, RealNVPBlock, build_flow, fit_whitening, load_flow, parse_architecture, save_flow,
    stack_forward, stack_inverse,
)


def _perturbed(flow: FlowStack, rng, scale=0.1) -> FlowStack:
    flow.load_parameters({k: v + scale * rng.standard_normal(v.shape) for k, v in flow.parameters().items()})
    return flow


@pytest.fixture
def data(rng):
    return rng.standard_normal((300, 4)) * np.array([0.5, 1.0, 2.0, 0.3]) + np.array([1.0, -1.0, 0.0, 2.0])


@pytest.fixture
def flow(rng, data):
    return _perturbed(build_flow("W R3", 4, rng, data=data, l_hidden=2, n_hidden=16), rng)


def test_parse_architecture_expands_motifs():
    assert parse_architecture("W R3") == ["W", "R", "R", "R"]
    assert parse_architecture("MR2") == ["M", "R", "R"]
    assert parse_architecture("R") == ["R"]
    assert parse_architecture("") == []


@pytest.mark.parametrize("bad", ["X2", "R0", "R2 W", "R2 M"])
def test_parse_architecture_rejects_bad_strings(bad):
    with pytest.raises(ConfigError):
        parse_architecture(bad)


def test_fresh_blocks_are_identity(rng):
    flow = build_flow("R2", 3, rng, l_hidden=2, n_hidden=8)
    x = rng.standard_normal((10, 3))
    z, ld = flow.forward(x)
    assert np.array_equal(z, x)
    assert np.array_equal(ld, np.zeros(10))


def test_roundtrip_and_log_det_antisymmetry(flow, data):
    z, ld_xz = stack_forward(flow, data[:50])
    x, ld_zx = stack_inverse(flow, z)
    assert np.max(np.abs(x - data[:50])) < 1e-8
    assert np.max(np.abs(ld_xz + ld_zx)) < 1e-8


def test_log_det_matches_numeric_jacobian(flow, data):
    _, ld = flow.forward(data[:3])
    for b in range(3):
        J = numeric_jacobian(lambda p: flow.forward(p)[0], data[b])
        assert abs(np.linalg.slogdet(J)[1] - ld[b]) < 1e-5


def test_whitening_produces_unit_covariance(data):
    layer = fit_whitening(data)
    z, ld = layer.whiten(data)
    assert np.allclose(z.mean(axis=0), 0.0, atol=1e-10)
    assert np.allclose(np.cov(z, rowvar=False), np.eye(4), atol=1e-8)
    assert np.allclose(ld, -0.5 * np.sum(np.log(layer.eigenvalues)))


def test_whitening_discards_null_directions(rng):
    base = rng.standard_normal((200, 2))
    data = np.column_stack([base, base[:, 0] + base[:, 1]])
    with pytest.raises(DegenerateDataError):
        fit_whitening(data)
    layer = fit_whitening(data, discard_null=1)
    assert (layer.dim_in, layer.dim_out) == (3, 2)
    z, _ = layer.whiten(data)
    x, _ = layer.unwhiten(z)
    assert np.allclose(x, data, atol=1e-8)


def test_whitening_needs_more_samples_than_dimensions(rng):
    with pytest.raises(DegenerateDataError):
        fit_whitening(rng.standard_normal((3, 3)))


def test_width_mismatch_is_a_config_error(flow):
    with pytest.raises(ConfigError):
        flow.forward(np.zeros((2, 5)))
    with pytest.raises(ConfigError):
        build_flow("W R2", 4, np.random.default_rng(0))


def test_non_finite_input_names_the_layer(flow):
    x = np.zeros((2, 4))
    x[0, 1] = np.inf
    with pytest.raises(NumericError, match="layer"):
        flow.inverse(x)


def test_backward_gradient_matches_finite_differences(rng):
    flow = _perturbed(build_flow("R2", 2, rng, l_hidden=1, n_hidden=6), rng, scale=0.3)
    z = rng.standard_normal((5, 2))
    weight = rng.standard_normal((5, 2))

    def loss():
        x, ld = flow.inverse(z)
        return float(np.sum(weight * x) + np.sum(ld))

    fpass = flow.inverse_pass(z)
    grad_z, grads = flow.backward(fpass, weight, np.ones(5))
    params = flow.parameters()
    name = "L1.c0.S.W0"
    numeric = np.zeros_like(params[name])
    for idx in np.ndindex(params[name].shape):
        for sign in (1.0, -1.0):
            shifted = {k: v.copy() for k, v in params.items()}
            shifted[name][idx] += sign * 1e-6
            flow.load_parameters(shifted)
            numeric[idx] += sign * loss() / 2e-6
    flow.load_parameters(params)
    assert np.allclose(grads[name], numeric, atol=1e-5)
    assert set(grads) == set(params)
    assert grad_z.shape == z.shape


def test_parameter_snapshots_survive_updates(flow):
    before = flow.parameters()
    frozen = {k: v.copy() for k, v in before.items()}
    flow.load_parameters({k: v + 1.0 for k, v in before.items()})
    for k in frozen:
        assert np.array_equal(before[k], frozen[k])


def test_save_load_is_bit_exact(tmp_path, flow, data):
    save_flow(tmp_path / "flow.npz", flow, {"system": {"name": "harmonic"}})
    loaded, header = load_flow(tmp_path / "flow.npz")
    assert header["system"]["name"] == "harmonic"
    assert header["architecture"] == "W R3"
    z_a, ld_a = flow.forward(data[:20])
    z_b, ld_b = loaded.forward(data[:20])
    assert np.array_equal(z_a, z_b)
    assert np.array_equal(ld_a, ld_b)


def test_realnvp_block_needs_two_dimensions(rng):
    with pytest.raises(ConfigError):
        RealNVPBlock.create(1, 1, 4, rng)


def test_empty_stack_is_identity():
    stack = FlowStack([], dim=3)
    z, ld = stack.forward(np.ones((2, 3)))
    assert np.array_equal(z, np.ones((2, 3)))
    assert np.array_equal(ld, np.zeros(2))
