"""
Invariant battery behind `boltzgen check`.

Every check builds small, seeded objects, compares an analytic quantity with an
independent oracle (finite differences, brute force, closed form) and records
the outcome. `perturb_logdet` shifts every analytic log-determinant before the
Jacobian comparisons so the report can be shown to fail.
"""

import itertools
import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from energy_models import (
    DoubleWell, EnergyCap, HarmonicModel, MuellerPotential, ParticleDimer, ToyChain, dimer_energy, hungarian,
    regularize_energy, relabeler_for,
)
from estimators import generate_weighted
from flow_layers import FlowStack, build_flow
from internal_coords import MixedLayer
from nn_core import net_backward, net_forward, scaling_net
from training import kl_loss, ml_loss

logger = logging.getLogger(__name__)

ROUNDTRIP_TOL = 1e-8
LOGDET_TOL = 1e-5
GRAD_TOL = 1e-4
REWEIGHT_TOL = 1e-8
CONTINUITY_TOL = 1e-9
FD_STEP = 1e-5


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""


def _result(name: str, value: float, tolerance: float, detail: str = "") -> CheckResult:
    passed = bool(np.isfinite(value) and value <= tolerance)
    return CheckResult(name, passed, float(value), tolerance, detail)


def _relative(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))))


def numeric_jacobian(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central-difference Jacobian of a batch map at a single point `x` (d,)."""
    cols = []
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((fn((x + e)[None])[0] - fn((x - e)[None])[0]) / (2.0 * h))
    return np.stack(cols, axis=1)


def _randomized_flow(rng: np.random.Generator, dim: int = 4, architecture: str = "W R2") -> tuple[FlowStack, np.ndarray]:
    data = rng.standard_normal((200, dim)) * np.linspace(0.5, 2.0, dim) + 0.3
    flow = build_flow(architecture, dim, rng, data=data, l_hidden=2, n_hidden=16)
    params = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in flow.parameters().items()}
    flow.load_parameters(params)
    return flow, data[:16]


def _mixed_layer(rng: np.random.Generator) -> tuple[MixedLayer, np.ndarray]:
    chain = ToyChain(n_beads=5)
    data = chain.random_points(rng, 200)
    return MixedLayer.fit(chain.zmatrix, data), data[:8]


# ── Individual checks ──────────────────────────────────────────────────────────

def check_flow_roundtrip(rng) -> list[CheckResult]:
    flow, x = _randomized_flow(rng)
    z, ld_xz = flow.forward(x)
    x_back, ld_zx = flow.inverse(z)
    return [
        _result("flow roundtrip x->z->x", np.max(np.abs(x_back - x)), ROUNDTRIP_TOL),
        _result("log-det antisymmetry", np.max(np.abs(ld_xz + ld_zx)), ROUNDTRIP_TOL),
    ]


def check_flow_logdet(rng, perturb: float = 0.0) -> CheckResult:
    flow, x = _randomized_flow(rng)
    _, ld = flow.forward(x[:4])
    worst = 0.0
    for b in range(4):
        J = numeric_jacobian(lambda p: flow.forward(p)[0], x[b])
        worst = max(worst, abs(np.linalg.slogdet(J)[1] - (ld[b] + perturb)))
    return _result("flow log-det vs numeric Jacobian", worst, LOGDET_TOL, f"dim {flow.dim_x}")


def check_mixed_logdet(rng, perturb: float = 0.0) -> CheckResult:
    layer, x = _mixed_layer(rng)
    _, ld, _ = layer.forward_xz(x[:3])
    worst = 0.0
    for b in range(3):
        J = numeric_jacobian(lambda p: layer.forward_xz(p)[0], x[b])
        worst = max(worst, abs(np.linalg.slogdet(J)[1] - (ld[b] + perturb)))
    return _result("mixed-layer log-det vs numeric Jacobian", worst, LOGDET_TOL, f"dim {layer.dim_in}")


def check_ic_roundtrip(rng) -> CheckResult:
    layer, x = _mixed_layer(rng)
    z, _, _ = layer.forward_xz(x)
    x_back, _, cache = layer.inverse_zx(z)
    err = np.max(np.abs(x_back - x))
    return _result("internal-coordinate roundtrip", err, ROUNDTRIP_TOL, f"valid {int(cache['valid'].sum())}/{len(x)}")


def check_net_gradient(rng) -> CheckResult:
    net = scaling_net(3, 2, 2, 8, rng, zero_output=False)
    batch = rng.standard_normal((5, 3))
    weight = rng.standard_normal((5, 2))
    out, tape = net_forward(net, batch)
    grad_in, grads = net_backward(net, tape, weight)
    loss = lambda b: float(np.sum(weight * net_forward(net, b)[0]))
    numeric_in = np.zeros_like(batch)
    for idx in np.ndindex(batch.shape):
        e = np.zeros_like(batch)
        e[idx] = FD_STEP
        numeric_in[idx] = (loss(batch + e) - loss(batch - e)) / (2.0 * FD_STEP)
    worst = _relative(grad_in, numeric_in)
    params = net.parameters()
    for name in ("W0", "b1"):
        numeric = np.zeros_like(params[name])
        for idx in np.ndindex(params[name].shape):
            for sign in (1.0, -1.0):
                shifted = {k: v.copy() for k, v in params.items()}
                shifted[name][idx] += sign * FD_STEP
                net.load_parameters(shifted)
                numeric[idx] += sign * loss(batch) / (2.0 * FD_STEP)
        net.load_parameters(params)
        worst = max(worst, _relative(grads[name], numeric))
    return _result("dense-net gradients vs finite differences", worst, GRAD_TOL)


def _loss_gradient_error(flow: FlowStack, loss: Callable[[], tuple[float, dict]], rng, directions: int = 6) -> float:
    _, grads = loss()
    params = flow.parameters()
    names = [k for k, v in params.items() if v.size]
    worst = 0.0
    for _ in range(directions):
        name = names[rng.integers(len(names))]
        idx = tuple(rng.integers(0, n) for n in params[name].shape)
        values = []
        for sign in (1.0, -1.0):
            shifted = {k: v.copy() for k, v in params.items()}
            shifted[name][idx] += sign * FD_STEP
            flow.load_parameters(shifted)
            values.append(loss()[0])
        flow.load_parameters(params)
        worst = max(worst, _relative(grads[name][idx], (values[0] - values[1]) / (2.0 * FD_STEP)))
    return worst


def check_loss_gradients(rng) -> list[CheckResult]:
    flow, x = _randomized_flow(rng, architecture="R2")
    model = HarmonicModel(dim=4, stiffness=np.linspace(0.5, 2.0, 4))
    z = rng.standard_normal((16, 4))
    return [
        _result("ML loss gradient vs finite differences", _loss_gradient_error(flow, lambda: ml_loss(flow, x), rng), GRAD_TOL),
        _result("KL loss gradient vs finite differences",
                _loss_gradient_error(flow, lambda: kl_loss(flow, model, None, z), rng), GRAD_TOL),
    ]


def check_energy_gradients(rng) -> list[CheckResult]:
    results = []
    for model in (DoubleWell(), MuellerPotential(), ParticleDimer(), ToyChain()):
        x = model.random_points(rng, 4)
        v = rng.standard_normal(x.shape)
        analytic = np.sum(model.gradient(x) * v, axis=1)
        numeric = (model.energy(x + FD_STEP * v) - model.energy(x - FD_STEP * v)) / (2.0 * FD_STEP)
        results.append(_result(f"{model.name} energy gradient", _relative(analytic, numeric), GRAD_TOL))
    return results


def check_hungarian(rng, max_n: int = 7) -> CheckResult:
    worst = 0.0
    for n in range(1, max_n + 1):
        cost = rng.uniform(0.0, 10.0, size=(n, n))
        col = hungarian(cost)
        best = min(cost[np.arange(n), list(p)].sum() for p in itertools.permutations(range(n)))
        worst = max(worst, abs(cost[np.arange(n), col].sum() - best))
    return _result("Hungarian assignment vs exhaustive search", worst, 1e-9, f"n <= {max_n}")


def check_relabel_invariance(rng, n_solvent: int = 8) -> CheckResult:
    """Shuffled solvent is relabeled back onto the reference without changing the dimer energy."""
    model = ParticleDimer(n_solvent=n_solvent)
    relabel = relabeler_for(model, model.initial_configuration())
    x = model.random_points(rng, 4)
    shuffled = x.reshape(len(x), -1, 2).copy()
    for row in shuffled:
        row[model.solvent] = row[rng.permutation(model.solvent)]
    shuffled = shuffled.reshape(len(x), -1)
    relabeled = relabel(shuffled)
    before, _ = dimer_energy(shuffled, n_solvent=n_solvent)
    after, _ = dimer_energy(relabeled, n_solvent=n_solvent)
    worst = max(_relative(before, after), float(np.max(np.abs(relabeled - x))))
    return _result("dimer energy invariant under solvent relabeling", worst, CONTINUITY_TOL, f"{n_solvent} solvent")


def check_reweighting(rng) -> CheckResult:
    """Identity generator against u = ½k‖x‖²: log w = -½(k - 1)‖x‖² exactly."""
    stiffness = 1.7
    model = HarmonicModel(dim=3, stiffness=stiffness)
    samples = generate_weighted(FlowStack([], dim=3), model, 64, 1.0, rng)
    expected = -0.5 * (stiffness - 1.0) * np.sum(samples.x ** 2, axis=1)
    return _result("reweighting on an analytic Gaussian generator", np.max(np.abs(samples.log_w - expected)), REWEIGHT_TOL)


def check_energy_cap() -> CheckResult:
    cap = EnergyCap(e_high=1e3)
    worst = 0.0
    for breakpoint in (cap.e_high, cap.e_max):
        around = np.array([np.nextafter(breakpoint, -np.inf), breakpoint, np.nextafter(breakpoint, np.inf)])
        value, _ = regularize_energy(around, cap)
        worst = max(worst, float(np.max(np.abs(np.diff(value)))) / max(1.0, abs(float(value[1]))))
    return _result("regularized energy continuity at E_high and E_max", worst, CONTINUITY_TOL)


# ── Battery ────────────────────────────────────────────────────────────────────

def run_checks(seed: int = 0, perturb_logdet: float = 0.0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results: list[CheckResult] = []
    results += check_flow_roundtrip(rng)
    results.append(check_flow_logdet(rng, perturb_logdet))
    results.append(check_mixed_logdet(rng, perturb_logdet))
    results.append(check_ic_roundtrip(rng))
    results.append(check_net_gradient(rng))
    results += check_loss_gradients(rng)
    results += check_energy_gradients(rng)
    results.append(check_hungarian(rng))
    results.append(check_relabel_invariance(rng))
    results.append(check_reweighting(rng))
    results.append(check_energy_cap())
    failed = [r.name for r in results if not r.passed]
    if failed:
        logger.warning(f"{len(failed)} checks failed: {', '.join(failed)}")
    return results


def format_report(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        detail = f"  ({r.detail})" if r.detail else ""
        lines.append(f"{status}  {r.name:<{width}}  {r.value:.3e} <= {r.tolerance:.1e}{detail}")
    n_pass = sum(r.passed for r in results)
    lines.append(f"{n_pass}/{len(results)} checks passed")
    return "\n".join(lines)
