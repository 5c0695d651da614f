"""
Dense feed-forward networks with hand-written reverse-mode gradients, an Adam
optimizer and checkpoint IO. This is the trainable substrate of the coupling
layers; nothing here knows about flows.

Shapes: batches are (B, width) float64 arrays, weights are stored (d_in, d_out)
so a layer is `h = a @ W + b`.
"""

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from errors import ConfigError, ContractError, NumericError

logger = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "tanh", "linear")
CHECKPOINT_VERSION = 1


@dataclass
class DenseLayer:
    weight: np.ndarray      # (d_in, d_out)
    bias: np.ndarray        # (d_out,)
    activation: str


class DenseNet:
    """Stack of dense layers. `output_scale` multiplies the final activation
    (used to cap scaling nets at ±c)."""

    def __init__(self, layers: list[DenseLayer], output_scale: float = 1.0):
        if not layers:
            raise ConfigError("DenseNet needs at least one layer")
        for k, layer in enumerate(layers):
            if layer.activation not in ACTIVATIONS:
                raise ConfigError(f"layer {k}: unknown activation '{layer.activation}'")
            if layer.weight.ndim != 2 or layer.bias.shape != (layer.weight.shape[1],):
                raise ConfigError(f"layer {k}: weight {layer.weight.shape} and bias {layer.bias.shape} disagree")
            if k > 0 and layers[k - 1].weight.shape[1] != layer.weight.shape[0]:
                raise ConfigError(
                    f"layer {k}: input width {layer.weight.shape[0]} does not chain "
                    f"to previous output width {layers[k - 1].weight.shape[1]}"
                )
        self.layers = layers
        self.output_scale = float(output_scale)
        # bumped on every parameter update so stale tapes can be detected
        self.version = 0

    @property
    def input_width(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def output_width(self) -> int:
        return self.layers[-1].weight.shape[1]

    def parameters(self, prefix: str = "") -> dict[str, np.ndarray]:
        params = {}
        for k, layer in enumerate(self.layers):
            params[f"{prefix}W{k}"] = layer.weight
            params[f"{prefix}b{k}"] = layer.bias
        return params

    def load_parameters(self, params: dict[str, np.ndarray], prefix: str = "") -> None:
        for k, layer in enumerate(self.layers):
            w = np.array(params[f"{prefix}W{k}"], dtype=np.float64)
            b = np.array(params[f"{prefix}b{k}"], dtype=np.float64)
            if w.shape != layer.weight.shape or b.shape != layer.bias.shape:
                raise ConfigError(f"parameter block {prefix}{k}: shape mismatch")
            layer.weight = w
            layer.bias = b
        self.version += 1

    def describe(self) -> dict:
        return {
            "widths": [self.input_width] + [l.weight.shape[1] for l in self.layers],
            "activations": [l.activation for l in self.layers],
            "output_scale": self.output_scale,
        }


@dataclass
class GradientTape:
    """Primal values recorded by net_forward."""
    net_id: int
    version: int
    inputs: list[np.ndarray] = field(default_factory=list)       # a_{k-1} per layer
    preacts: list[np.ndarray] = field(default_factory=list)      # h_k per layer
    activations: list[np.ndarray] = field(default_factory=list)  # act(h_k), unscaled
    output: Optional[np.ndarray] = None

    def replay(self, net: DenseNet) -> np.ndarray:
        """Recompute the forward output from the recorded input."""
        out, _ = net_forward(net, self.inputs[0])
        return out


def _activate(h: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(h, 0.0)
    if activation == "tanh":
        return np.tanh(h)
    return h


def _activation_derivative(h: np.ndarray, a: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return (h > 0.0).astype(np.float64)
    if activation == "tanh":
        return 1.0 - a * a
    return np.ones_like(h)


def _check_finite(batch: np.ndarray, what: str) -> None:
    bad = ~np.isfinite(batch)
    if bad.any():
        row = int(np.argwhere(bad.any(axis=1))[0, 0])
        raise NumericError(f"non-finite {what} in batch row {row}", row=row)


def net_forward(net: DenseNet, batch: np.ndarray) -> tuple[np.ndarray, GradientTape]:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != net.input_width:
        raise ConfigError(f"batch shape {batch.shape} does not match net input width {net.input_width}")
    _check_finite(batch, "input")

    tape = GradientTape(net_id=id(net), version=net.version)
    a = batch
    last = len(net.layers) - 1
    for k, layer in enumerate(net.layers):
        tape.inputs.append(a)
        h = a @ layer.weight + layer.bias
        a = _activate(h, layer.activation)
        tape.preacts.append(h)
        tape.activations.append(a)
        if k == last and net.output_scale != 1.0:
            a = net.output_scale * a
    tape.output = a
    return a, tape


def net_backward(
    net: DenseNet,
    tape: GradientTape,
    out_grad: np.ndarray,
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Gradients of the scalar loss whose gradient w.r.t. the net output is `out_grad`.

    Returns (gradient w.r.t. the input batch, gradients keyed like net.parameters()).
    """
    if tape.net_id != id(net) or tape.version != net.version:
        raise ContractError("gradient tape was recorded on a different net or before a parameter update")
    out_grad = np.asarray(out_grad, dtype=np.float64)
    if out_grad.shape != tape.output.shape:
        raise ContractError(f"output gradient shape {out_grad.shape} != recorded output {tape.output.shape}")

    grads: dict[str, np.ndarray] = {}
    g = out_grad * net.output_scale if net.output_scale != 1.0 else out_grad
    for k in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[k]
        dh = g * _activation_derivative(tape.preacts[k], tape.activations[k], layer.activation)
        grads[f"W{k}"] = tape.inputs[k].T @ dh
        grads[f"b{k}"] = dh.sum(axis=0)
        g = dh @ layer.weight.T
    return g, grads


def init_dense_net(
    d_in: int,
    d_out: int,
    l_hidden: int,
    n_hidden: int,
    hidden_activation: str,
    output_activation: str,
    rng: np.random.Generator,
    output_scale: float = 1.0,
    zero_output: bool = True,
) -> DenseNet:
    """Glorot-uniform hidden layers; the output layer is zero when `zero_output`."""
    widths = [d_in] + [n_hidden] * l_hidden + [d_out]
    layers = []
    for k in range(len(widths) - 1):
        fan_in, fan_out = widths[k], widths[k + 1]
        is_output = k == len(widths) - 2
        if is_output and zero_output:
            w = np.zeros((fan_in, fan_out))
        else:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        layers.append(DenseLayer(w, np.zeros(fan_out), output_activation if is_output else hidden_activation))
    return DenseNet(layers, output_scale=output_scale)


def scaling_net(d_in, d_out, l_hidden, n_hidden, rng, cap: float = 3.0, zero_output: bool = True) -> DenseNet:
    """S network: tanh hidden layers, output cap·tanh(.) bounded in (-cap, cap)."""
    return init_dense_net(d_in, d_out, l_hidden, n_hidden, "tanh", "tanh", rng,
                          output_scale=cap, zero_output=zero_output)


def translation_net(d_in, d_out, l_hidden, n_hidden, rng, zero_output: bool = True) -> DenseNet:
    """T network: ReLU hidden layers, linear output."""
    return init_dense_net(d_in, d_out, l_hidden, n_hidden, "relu", "linear", rng, zero_output=zero_output)


# ── Adam ───────────────────────────────────────────────────────────────────────

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(params: dict[str, np.ndarray], beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
        beta1=beta1, beta2=beta2, eps=eps,
    )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Inputs are not mutated."""
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    for name, p in params.items():
        g = grads.get(name)
        if g is None or np.shape(g) != p.shape or state.m[name].shape != p.shape:
            raise ConfigError(f"parameter block '{name}': gradient/state shape does not match {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter block '{name}'", block=name)

    t = state.t + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        new_params[name] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, replace(state, m=new_m, v=new_v, t=t)


# ── Checkpoints ────────────────────────────────────────────────────────────────

def save_checkpoint(
    path: Path,
    arrays: dict[str, np.ndarray],
    header: dict,
    rng: Optional[np.random.Generator] = None,
) -> None:
    """Write arrays plus a JSON header (and the RNG state) to an .npz archive."""
    meta = {**header, "format_version": CHECKPOINT_VERSION}
    if rng is not None:
        meta["rng_state"] = rng.bit_generator.state
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        np.savez(f, __header__=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    logger.info(f"Checkpoint written: {path} ({len(arrays)} arrays)")


def load_checkpoint(path: Path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(Path(path), allow_pickle=False) as archive:
        header = json.loads(str(archive["__header__"]))
        arrays = {k: archive[k].copy() for k in archive.files if k != "__header__"}
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint format {header.get('format_version')}")
    return arrays, header


def restore_rng(header: dict) -> Optional[np.random.Generator]:
    state = header.get("rng_state")
    if state is None:
        return None
    rng = np.random.Generator(getattr(np.random, state["bit_generator"])())
    rng.bit_generator.state = state
    return rng
