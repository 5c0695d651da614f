"""
Invertible layers with exact log-Jacobian accounting.

Every layer maps configuration side -> latent side (`forward_xz`) and back
(`inverse_zx`), returns a per-sample log|det J| vector, and can push gradients
back through either direction (`backward_xz` / `backward_zx`). A FlowStack
orders layers from the configuration side to the latent side, so F_xz runs
layers 0..n-1 and F_zx runs their inverses n-1..0.

Architecture strings follow the usual motif notation: "W R8" is a whitening
layer followed by eight RealNVP blocks, "M R4" a mixed-coordinate layer
followed by four blocks. Whitespace is optional ("WR8").
"""

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

import nn_core
from errors import BoltzgenError, ConfigError, DegenerateDataError, NumericError, with_layer_index
from nn_core import DenseLayer, DenseNet, net_backward, net_forward

logger = logging.getLogger(__name__)

NULL_EIGENVALUE_RTOL = 1e-10


# ── Coupling layers ────────────────────────────────────────────────────────────

class CouplingLayer:
    """RealNVP affine coupling: channel 1 passes through and conditions the
    scale S and shift T applied to channel 2.

        z2 = x2 * exp(S(x1)) + T(x1),   log R_xz = sum_i S_i(x1)
    """

    kind = "coupling"

    def __init__(self, channels_1: np.ndarray, channels_2: np.ndarray, S: DenseNet, T: DenseNet):
        channels_1 = np.asarray(channels_1, dtype=int)
        channels_2 = np.asarray(channels_2, dtype=int)
        dim = len(channels_1) + len(channels_2)
        if np.intersect1d(channels_1, channels_2).size or sorted(np.concatenate([channels_1, channels_2])) != list(range(dim)):
            raise ConfigError("coupling channels must be disjoint and cover every dimension")
        for name, net in (("S", S), ("T", T)):
            if net.input_width != len(channels_1) or net.output_width != len(channels_2):
                raise ConfigError(
                    f"{name} net maps {net.input_width}->{net.output_width}, "
                    f"channels need {len(channels_1)}->{len(channels_2)}"
                )
        self.channels_1 = channels_1
        self.channels_2 = channels_2
        self.S = S
        self.T = T
        self.dim_in = self.dim_out = dim

    def _conditioner(self, c1: np.ndarray):
        s, tape_s = net_forward(self.S, c1)
        t, tape_t = net_forward(self.T, c1)
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(t))):
            raise NumericError("non-finite scaling/translation output")
        return s, t, tape_s, tape_t

    def forward_xz(self, x: np.ndarray):
        x1, x2 = x[:, self.channels_1], x[:, self.channels_2]
        s, t, tape_s, tape_t = self._conditioner(x1)
        es = np.exp(s)
        z = np.empty_like(x)
        z[:, self.channels_1] = x1
        z[:, self.channels_2] = x2 * es + t
        cache = {"x2": x2, "es": es, "tape_s": tape_s, "tape_t": tape_t}
        return z, s.sum(axis=1), cache

    def backward_xz(self, cache, grad_z: np.ndarray, grad_logdet: np.ndarray):
        gz1, gz2 = grad_z[:, self.channels_1], grad_z[:, self.channels_2]
        gs = gz2 * cache["x2"] * cache["es"] + grad_logdet[:, None]
        gx1_s, grads_s = net_backward(self.S, cache["tape_s"], gs)
        gx1_t, grads_t = net_backward(self.T, cache["tape_t"], gz2)
        grad_x = np.empty_like(grad_z)
        grad_x[:, self.channels_1] = gz1 + gx1_s + gx1_t
        grad_x[:, self.channels_2] = gz2 * cache["es"]
        return grad_x, _merge_grads(grads_s, grads_t)

    def inverse_zx(self, z: np.ndarray):
        z1, z2 = z[:, self.channels_1], z[:, self.channels_2]
        s, t, tape_s, tape_t = self._conditioner(z1)
        ems = np.exp(-s)
        x2 = (z2 - t) * ems
        x = np.empty_like(z)
        x[:, self.channels_1] = z1
        x[:, self.channels_2] = x2
        cache = {"x2": x2, "ems": ems, "tape_s": tape_s, "tape_t": tape_t}
        return x, -s.sum(axis=1), cache

    def backward_zx(self, cache, grad_x: np.ndarray, grad_logdet: np.ndarray):
        gx1, gx2 = grad_x[:, self.channels_1], grad_x[:, self.channels_2]
        gs = -gx2 * cache["x2"] - grad_logdet[:, None]
        gt = -gx2 * cache["ems"]
        gz1_s, grads_s = net_backward(self.S, cache["tape_s"], gs)
        gz1_t, grads_t = net_backward(self.T, cache["tape_t"], gt)
        grad_z = np.empty_like(grad_x)
        grad_z[:, self.channels_1] = gx1 + gz1_s + gz1_t
        grad_z[:, self.channels_2] = gx2 * cache["ems"]
        return grad_z, _merge_grads(grads_s, grads_t)

    def parameters(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {**self.S.parameters(prefix + "S."), **self.T.parameters(prefix + "T.")}

    def load_parameters(self, params: dict[str, np.ndarray], prefix: str = "") -> None:
        self.S.load_parameters(params, prefix + "S.")
        self.T.load_parameters(params, prefix + "T.")

    def state(self, prefix: str):
        header = {
            "kind": self.kind,
            "channels_1": self.channels_1.tolist(),
            "channels_2": self.channels_2.tolist(),
            "S": self.S.describe(),
            "T": self.T.describe(),
        }
        return header, self.parameters(prefix)


def _merge_grads(grads_s: dict, grads_t: dict) -> dict:
    merged = {f"S.{k}": v for k, v in grads_s.items()}
    merged.update({f"T.{k}": v for k, v in grads_t.items()})
    return merged


def even_odd_channels(dim: int) -> tuple[np.ndarray, np.ndarray]:
    idx = np.arange(dim)
    return idx[0::2], idx[1::2]


class RealNVPBlock:
    """Two coupling layers with swapped channel roles, so every dimension is
    transformed nonlinearly once per block."""

    kind = "realnvp"

    def __init__(self, first: CouplingLayer, second: CouplingLayer):
        if first.dim_in != second.dim_in:
            raise ConfigError("block couplings must have equal width")
        self.couplings = (first, second)
        self.dim_in = self.dim_out = first.dim_in

    @classmethod
    def create(cls, dim: int, l_hidden: int, n_hidden: int, rng: np.random.Generator,
               scale_cap: float = 3.0, zero_output: bool = True) -> "RealNVPBlock":
        if dim < 2:
            raise ConfigError(f"RealNVP blocks need at least 2 dimensions, got {dim}")
        even, odd = even_odd_channels(dim)
        layers = []
        for c1, c2 in ((even, odd), (odd, even)):
            S = nn_core.scaling_net(len(c1), len(c2), l_hidden, n_hidden, rng, cap=scale_cap, zero_output=zero_output)
            T = nn_core.translation_net(len(c1), len(c2), l_hidden, n_hidden, rng, zero_output=zero_output)
            layers.append(CouplingLayer(c1, c2, S, T))
        return cls(*layers)

    def forward_xz(self, x):
        z, ld0, c0 = self.couplings[0].forward_xz(x)
        z, ld1, c1 = self.couplings[1].forward_xz(z)
        return z, ld0 + ld1, (c0, c1)

    def backward_xz(self, cache, grad_z, grad_logdet):
        g, grads1 = self.couplings[1].backward_xz(cache[1], grad_z, grad_logdet)
        g, grads0 = self.couplings[0].backward_xz(cache[0], g, grad_logdet)
        return g, {**_prefixed(grads0, "c0."), **_prefixed(grads1, "c1.")}

    def inverse_zx(self, z):
        x, ld1, c1 = self.couplings[1].inverse_zx(z)
        x, ld0, c0 = self.couplings[0].inverse_zx(x)
        return x, ld0 + ld1, (c0, c1)

    def backward_zx(self, cache, grad_x, grad_logdet):
        g, grads0 = self.couplings[0].backward_zx(cache[0], grad_x, grad_logdet)
        g, grads1 = self.couplings[1].backward_zx(cache[1], g, grad_logdet)
        return g, {**_prefixed(grads0, "c0."), **_prefixed(grads1, "c1.")}

    def parameters(self, prefix: str = ""):
        return {**self.couplings[0].parameters(prefix + "c0."), **self.couplings[1].parameters(prefix + "c1.")}

    def load_parameters(self, params, prefix: str = ""):
        self.couplings[0].load_parameters(params, prefix + "c0.")
        self.couplings[1].load_parameters(params, prefix + "c1.")

    def state(self, prefix: str):
        h0, a0 = self.couplings[0].state(prefix + "c0.")
        h1, a1 = self.couplings[1].state(prefix + "c1.")
        return {"kind": self.kind, "couplings": [h0, h1]}, {**a0, **a1}


def _prefixed(grads: dict, prefix: str) -> dict:
    return {prefix + k: v for k, v in grads.items()}


# ── Whitening ──────────────────────────────────────────────────────────────────

class WhiteningLayer:
    """PCA whitening z = Λ^{-1/2} Rᵀ (x - mean), optionally dropping the
    smallest-variance (null) directions. Parameter free."""

    kind = "whitening"

    def __init__(self, R: np.ndarray, eigenvalues: np.ndarray, mean: np.ndarray, n_discarded: int = 0):
        R = np.asarray(R, dtype=np.float64)
        eigenvalues = np.asarray(eigenvalues, dtype=np.float64)
        if R.ndim != 2 or R.shape[1] != eigenvalues.shape[0] or R.shape[0] != np.shape(mean)[0]:
            raise ConfigError("whitening basis, eigenvalues and mean have inconsistent shapes")
        if np.any(eigenvalues <= 0):
            raise DegenerateDataError("whitening eigenvalues must be positive")
        self.R = R
        self.eigenvalues = eigenvalues
        self.mean = np.asarray(mean, dtype=np.float64)
        self.n_discarded = int(n_discarded)
        self.dim_in, self.dim_out = R.shape
        self._sqrt_lam = np.sqrt(eigenvalues)
        self.log_det_zx = 0.5 * float(np.sum(np.log(eigenvalues)))

    def whiten(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = _check_width(x, self.dim_in, "whiten")
        z = ((x - self.mean) @ self.R) / self._sqrt_lam
        return z, np.full(x.shape[0], -self.log_det_zx)

    def unwhiten(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        z = _check_width(z, self.dim_out, "unwhiten")
        x = (z * self._sqrt_lam) @ self.R.T + self.mean
        return x, np.full(z.shape[0], self.log_det_zx)

    def forward_xz(self, x):
        z, ld = self.whiten(x)
        return z, ld, None

    def backward_xz(self, cache, grad_z, grad_logdet):
        return (grad_z / self._sqrt_lam) @ self.R.T, {}

    def inverse_zx(self, z):
        x, ld = self.unwhiten(z)
        return x, ld, None

    def backward_zx(self, cache, grad_x, grad_logdet):
        return (grad_x @ self.R) * self._sqrt_lam, {}

    def parameters(self, prefix: str = ""):
        return {}

    def load_parameters(self, params, prefix: str = ""):
        pass

    def state(self, prefix: str):
        header = {"kind": self.kind, "n_discarded": self.n_discarded}
        arrays = {prefix + "R": self.R, prefix + "eigenvalues": self.eigenvalues, prefix + "mean": self.mean}
        return header, arrays


def fit_whitening(data: np.ndarray, discard_null: int = 0) -> WhiteningLayer:
    """Mean-centred PCA basis of `data`, dropping the `discard_null` smallest
    eigen-directions (6 for roto-translation invariant systems)."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ConfigError(f"whitening data must be 2-D, got shape {data.shape}")
    n, d = data.shape
    if n <= d:
        raise DegenerateDataError(f"whitening needs more samples than dimensions (N={n}, d={d})")
    if not np.all(np.isfinite(data)):
        raise NumericError("non-finite whitening data")
    if not 0 <= discard_null < d:
        raise ConfigError(f"discard_null must be in [0, {d}), got {discard_null}")

    mean = data.mean(axis=0)
    cov = np.cov(data - mean, rowvar=False).reshape(d, d)
    eigenvalues, eigenvectors = np.linalg.eigh(cov)
    order = np.argsort(eigenvalues)[::-1]
    eigenvalues, eigenvectors = eigenvalues[order], eigenvectors[:, order]

    tol = NULL_EIGENVALUE_RTOL * max(eigenvalues[0], 0.0)
    n_null = int(np.sum(eigenvalues < tol))
    if n_null > discard_null:
        raise DegenerateDataError(
            f"found {n_null} null directions (eigenvalue < {tol:.3g}) but only {discard_null} may be discarded"
        )
    k = d - discard_null
    logger.debug(f"Whitening fitted: d={d}, kept={k}, smallest kept eigenvalue={eigenvalues[k - 1]:.4g}")
    return WhiteningLayer(eigenvectors[:, :k], eigenvalues[:k], mean, n_discarded=discard_null)


def _check_width(a: np.ndarray, width: int, what: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != width:
        raise ConfigError(f"{what}: expected width {width}, got shape {a.shape}")
    return a


# ── Stacks ─────────────────────────────────────────────────────────────────────

@dataclass
class FlowPass:
    """Result of running a stack in one direction, with everything needed for backward."""
    direction: str                      # "xz" or "zx"
    output: np.ndarray
    log_det: np.ndarray
    caches: list = field(default_factory=list)
    valid: Optional[np.ndarray] = None


class FlowStack:
    """Ordered invertible layers, configuration side first."""

    def __init__(self, layers: list, dim: Optional[int] = None):
        if not layers and dim is None:
            raise ConfigError("an empty FlowStack needs an explicit width")
        for i in range(1, len(layers)):
            if layers[i - 1].dim_out != layers[i].dim_in:
                raise ConfigError(
                    f"layer {i} ({layers[i].kind}) expects width {layers[i].dim_in}, "
                    f"previous layer produces {layers[i - 1].dim_out}"
                )
        self.layers = list(layers)
        self.dim_x = layers[0].dim_in if layers else int(dim)
        self.dim_z = layers[-1].dim_out if layers else int(dim)
        self.architecture = ""

    def forward_pass(self, x: np.ndarray) -> FlowPass:
        out = _check_width(x, self.dim_x, "stack_forward")
        log_det = np.zeros(out.shape[0])
        caches = [None] * len(self.layers)
        for i, layer in enumerate(self.layers):
            try:
                out, ld, caches[i] = layer.forward_xz(out)
            except BoltzgenError as e:
                raise with_layer_index(e, i, layer.kind) from e
            log_det = log_det + ld
        return FlowPass("xz", out, log_det, caches, np.ones(out.shape[0], dtype=bool))

    def inverse_pass(self, z: np.ndarray) -> FlowPass:
        out = _check_width(z, self.dim_z, "stack_inverse")
        log_det = np.zeros(out.shape[0])
        valid = np.ones(out.shape[0], dtype=bool)
        caches = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            try:
                out, ld, caches[i] = layer.inverse_zx(out)
            except BoltzgenError as e:
                raise with_layer_index(e, i, layer.kind) from e
            log_det = log_det + ld
            if isinstance(caches[i], dict) and "valid" in caches[i]:
                valid &= caches[i]["valid"]
        return FlowPass("zx", out, log_det, caches, valid)

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        fp = self.forward_pass(x)
        return fp.output, fp.log_det

    def inverse(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        fp = self.inverse_pass(z)
        return fp.output, fp.log_det

    def backward(
        self,
        fpass: FlowPass,
        grad_out: np.ndarray,
        grad_logdet: np.ndarray,
        extra: Optional[dict[int, np.ndarray]] = None,
    ) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        """Push d loss / d output and d loss / d log_det back through `fpass`.

        `extra[i]` is added to the gradient w.r.t. layer i's latent-side value
        (for zx passes: the input of its inverse). Returns the gradient w.r.t.
        the pass input and a complete parameter-gradient dict.
        """
        g = np.asarray(grad_out, dtype=np.float64)
        grad_logdet = np.asarray(grad_logdet, dtype=np.float64)
        grads: dict[str, np.ndarray] = {}
        if fpass.direction == "xz":
            for i in range(len(self.layers) - 1, -1, -1):
                if extra and i in extra:
                    g = g + extra[i]
                g, layer_grads = self.layers[i].backward_xz(fpass.caches[i], g, grad_logdet)
                grads.update(_prefixed(layer_grads, f"L{i}."))
        else:
            for i in range(len(self.layers)):
                g, layer_grads = self.layers[i].backward_zx(fpass.caches[i], g, grad_logdet)
                grads.update(_prefixed(layer_grads, f"L{i}."))
                if extra and i in extra:
                    g = g + extra[i]
        return g, self.complete_grads(grads)

    def parameters(self) -> dict[str, np.ndarray]:
        params = {}
        for i, layer in enumerate(self.layers):
            params.update(layer.parameters(f"L{i}."))
        return params

    def load_parameters(self, params: dict[str, np.ndarray]) -> None:
        for i, layer in enumerate(self.layers):
            layer.load_parameters(params, f"L{i}.")

    def complete_grads(self, grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        return {k: grads.get(k, np.zeros_like(p)) for k, p in self.parameters().items()}

    def mixed_layer(self):
        for layer in self.layers:
            if layer.kind == "mixed":
                return layer
        return None


def stack_forward(stack: FlowStack, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return stack.forward(x)


def stack_inverse(stack: FlowStack, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return stack.inverse(z)


# ── Architecture strings ───────────────────────────────────────────────────────

_MOTIF = re.compile(r"([WMR])(\d*)")


def parse_architecture(architecture: str) -> list[str]:
    """'W R8' -> ['W', 'R', 'R', ..., 'R']."""
    compact = re.sub(r"\s+", "", architecture or "")
    tokens: list[str] = []
    pos = 0
    for match in _MOTIF.finditer(compact):
        if match.start() != pos:
            break
        count = int(match.group(2)) if match.group(2) else 1
        if count < 1:
            raise ConfigError(f"architecture '{architecture}': motif count must be positive")
        tokens.extend([match.group(1)] * count)
        pos = match.end()
    if pos != len(compact):
        raise ConfigError(f"architecture '{architecture}': cannot parse from '{compact[pos:]}'")
    for i, token in enumerate(tokens):
        if token in "WM" and i != 0:
            raise ConfigError(f"architecture '{architecture}': '{token}' is only allowed as the first layer")
    return tokens


def build_flow(
    architecture: str,
    dim: int,
    rng: np.random.Generator,
    data: Optional[np.ndarray] = None,
    l_hidden: int = 3,
    n_hidden: int = 100,
    scale_cap: float = 3.0,
    discard_null: int = 0,
    zmatrix=None,
) -> FlowStack:
    """Build an untrained stack. W and M layers are fitted on `data`."""
    layers = []
    width = dim
    for token in parse_architecture(architecture):
        if token == "W":
            if data is None:
                raise ConfigError("a whitening layer needs training data to fit")
            layers.append(fit_whitening(data, discard_null))
        elif token == "M":
            from internal_coords import MixedLayer
            if data is None or zmatrix is None:
                raise ConfigError("a mixed-coordinate layer needs training data and a z-matrix")
            layers.append(MixedLayer.fit(zmatrix, data, discard_null=discard_null))
        else:
            layers.append(RealNVPBlock.create(width, l_hidden, n_hidden, rng, scale_cap=scale_cap))
        width = layers[-1].dim_out
    stack = FlowStack(layers, dim=dim)
    stack.architecture = architecture
    logger.info(f"Flow built: '{architecture}' x-width={stack.dim_x} z-width={stack.dim_z} "
                f"params={sum(p.size for p in stack.parameters().values())}")
    return stack


# ── Checkpoints ────────────────────────────────────────────────────────────────

def save_flow(path: Path, stack: FlowStack, header: Optional[dict] = None,
              rng: Optional[np.random.Generator] = None) -> None:
    layer_headers = []
    arrays: dict[str, np.ndarray] = {}
    for i, layer in enumerate(stack.layers):
        h, a = layer.state(f"L{i}.")
        layer_headers.append(h)
        arrays.update(a)
    meta = {
        **(header or {}),
        "architecture": stack.architecture,
        "dim_x": stack.dim_x,
        "dim_z": stack.dim_z,
        "layers": layer_headers,
    }
    nn_core.save_checkpoint(path, arrays, meta, rng)


def load_flow(path: Path) -> tuple[FlowStack, dict]:
    arrays, header = nn_core.load_checkpoint(path)
    layers = [layer_from_state(h, arrays, f"L{i}.") for i, h in enumerate(header["layers"])]
    stack = FlowStack(layers, dim=header["dim_x"])
    stack.architecture = header.get("architecture", "")
    return stack, header


def _net_from_state(desc: dict, arrays: dict, prefix: str) -> DenseNet:
    layers = []
    for k, activation in enumerate(desc["activations"]):
        layers.append(DenseLayer(arrays[f"{prefix}W{k}"].copy(), arrays[f"{prefix}b{k}"].copy(), activation))
    return DenseNet(layers, output_scale=desc["output_scale"])


def layer_from_state(header: dict, arrays: dict, prefix: str):
    kind = header["kind"]
    if kind == "coupling":
        return CouplingLayer(
            header["channels_1"], header["channels_2"],
            _net_from_state(header["S"], arrays, prefix + "S."),
            _net_from_state(header["T"], arrays, prefix + "T."),
        )
    if kind == "realnvp":
        return RealNVPBlock(
            layer_from_state(header["couplings"][0], arrays, prefix + "c0."),
            layer_from_state(header["couplings"][1], arrays, prefix + "c1."),
        )
    if kind == "whitening":
        return WhiteningLayer(arrays[prefix + "R"], arrays[prefix + "eigenvalues"], arrays[prefix + "mean"],
                              n_discarded=header["n_discarded"])
    if kind == "mixed":
        from internal_coords import MixedLayer
        return MixedLayer.from_state(header, arrays, prefix)
    raise ConfigError(f"unknown layer kind '{kind}' in checkpoint")
