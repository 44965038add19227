"""Central finite-difference checks of the hand-written backward passes.

Everything here runs in double precision. A layer is checked through the
scalar ``L = sum(forward(x) * R)`` with a fixed random ``R``, so that
``backward(R)`` must reproduce ``dL/dx`` and every ``dL/dparam``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fire import ConvNormAct, FireConfig, FireModule
from .gmlp import GmlpBlock, GmlpConfig, SpatialGatingUnit
from .layers import (GELU, BatchNorm2d, Conv2d, GlobalAvgPool, GroupAffineNorm, LayerNormTokens,
                     Linear, MaxPool2d, ReLU, softmax_cross_entropy)
from .models import Model, ModelGraph

FD_STEP = 1e-5  # near the roundoff/truncation optimum cbrt(eps) for central differences
# Whole models sum many terms (roundoff grows) and a single weight moves
# many pre-activations at once, so ReLU kinks sit closer; smaller steps.
MODEL_STEP = 1e-6
KINKED_MODEL_STEP = 1e-7
REL_FLOOR = 1e-3
LAYER_TOL = 1e-5
E2E_TOL = 1e-4


def rel_error(analytic, numeric, floor: float = REL_FLOOR) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_grad(f, x: np.ndarray, index=None, step: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x`` (perturbed in place).

    ``index`` restricts the check to a list of flat positions.
    """
    flat = x.reshape(-1)
    if not np.shares_memory(flat, x):
        raise ValueError("numeric_grad needs a contiguous array to perturb in place")
    positions = range(flat.size) if index is None else index
    out = np.zeros(len(positions))
    for i, pos in enumerate(positions):
        orig = flat[pos]
        flat[pos] = orig + step
        fp = f()
        flat[pos] = orig - step
        fm = f()
        flat[pos] = orig
        out[i] = (fp - fm) / (2 * step)
    return out


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_error: float
    checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tol)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:<28} max_rel_err={self.max_rel_error:.3e} n={self.checked} tol={self.tol:g}"


def check_layer(name: str, layer, x: np.ndarray, rng: np.random.Generator, train: bool = True,
                tol: float = LAYER_TOL) -> CheckResult:
    """Check input and parameter gradients of ``layer`` at ``x``."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    r = rng.standard_normal(layer.forward(x, train).shape)

    def loss():
        return float(np.sum(layer.forward(x, train) * r))

    layer.forward(x, train)
    dx = layer.backward(r.copy())
    analytic = {"input": np.array(dx, dtype=np.float64)}
    analytic.update((pname, g.copy()) for pname, _, g in layer.named_params())
    worst, count = 0.0, 0
    targets = [("input", x)] + [(pname, p) for pname, p, _ in layer.named_params()]
    for tname, arr in targets:
        num = numeric_grad(loss, arr)
        err = rel_error(analytic[tname].reshape(-1), num)
        worst = max(worst, float(err.max()))
        count += num.size
    return CheckResult(name, worst, count, tol)


def check_loss(rng: np.random.Generator, n: int = 4, k: int = 5, tol: float = LAYER_TOL) -> CheckResult:
    logits = rng.standard_normal((n, k))
    labels = rng.integers(0, k, size=n)
    _, analytic = softmax_cross_entropy(logits, labels)
    num = numeric_grad(lambda: softmax_cross_entropy(logits, labels)[0], logits)
    return CheckResult("softmax_cross_entropy", float(rel_error(analytic.reshape(-1), num).max()), num.size, tol)


def _perturb(layer, rng, scale=0.5):
    """Move parameters off their initial values (e.g. W_g = 0, gamma = 1)."""
    for _, p, _ in layer.named_params():
        p += rng.standard_normal(p.shape) * scale
    return layer


def layer_suite(seed: int = 0, tol: float = LAYER_TOL) -> list[CheckResult]:
    """Every layer kind on a small double-precision input."""
    rng = np.random.default_rng(seed)
    f64 = np.float64
    img = lambda *s: rng.standard_normal(s)  # noqa: E731
    results = []

    def run(name, layer, x, train=True):
        results.append(check_layer(name, layer, x, rng, train, tol))

    run("conv3x3_s2_p1", Conv2d(3, 4, 3, 2, 1, rng=rng, dtype=f64), img(2, 3, 5, 5))
    run("conv1x1", Conv2d(3, 4, 1, 1, 0, rng=rng, dtype=f64), img(2, 3, 5, 5))
    run("conv7x7_s2_p3", Conv2d(2, 3, 7, 2, 3, rng=rng, dtype=f64), img(1, 2, 9, 9))
    run("batchnorm_train", _perturb(BatchNorm2d(3, dtype=f64), rng, 0.1), img(2, 3, 4, 4))
    bn = _perturb(BatchNorm2d(3, dtype=f64), rng, 0.1)
    bn.forward(img(4, 3, 4, 4), True)
    run("batchnorm_infer", bn, img(2, 3, 4, 4), train=False)
    run("group_affine_norm", _perturb(GroupAffineNorm(6, 3, dtype=f64), rng, 0.1), img(2, 6, 4, 4))
    run("layernorm_tokens", _perturb(LayerNormTokens(6, dtype=f64), rng, 0.1), img(2, 5, 6))
    run("linear_bias", Linear(6, 4, bias=True, rng=rng, dtype=f64), img(2, 5, 6))
    run("gelu", GELU(), img(3, 7))
    run("relu", ReLU(), img(3, 7))
    run("maxpool_floor", MaxPool2d(3, 2, "floor"), img(2, 2, 7, 7))
    run("maxpool_ceil", MaxPool2d(3, 2, "ceil"), img(2, 2, 8, 8))
    run("global_avgpool", GlobalAvgPool(), img(2, 3, 4, 5))
    results.append(check_loss(rng, tol=tol))
    for preset in ("table-i", "paper-eq"):
        cfg = GmlpConfig.preset(preset, d_model=6, n_tokens=9)
        sgu = SpatialGatingUnit(cfg, dtype=f64)
        _perturb(sgu, rng, 0.5)
        width = cfg.d_model
        run(f"sgu_{preset}", sgu, img(2, 9, width))
        block = GmlpBlock(cfg, rng=rng, dtype=f64)
        _perturb(block, rng, 0.5)
        run(f"gmlp_block_{preset}", block, img(2, 6, 3, 3))
    run("fire_module", _perturb(FireModule(FireConfig(4, 2, 3, 3), rng=rng, dtype=f64), rng, 0.5),
        img(2, 4, 5, 5))
    run("conv_norm_act", ConvNormAct(4, 3, 1, 1, 0, act=True, rng=rng, dtype=f64), img(2, 4, 3, 3))
    return results


def model_check(graph: ModelGraph, seed: int = 0, fraction: float = 0.01, min_samples: int = 1,
                batch: int = 2, tol: float = E2E_TOL, step: float | None = None) -> CheckResult:
    """End-to-end loss gradient w.r.t. a random ``fraction`` of all parameters."""
    if step is None:
        kinked = any(n.kind in ("relu", "fire", "conv_norm_act") for n in graph.layers)
        step = KINKED_MODEL_STEP if kinked else MODEL_STEP
    rng = np.random.default_rng(seed)
    model = Model(graph, seed=seed, dtype=np.float64)
    x = rng.standard_normal((batch,) + graph.input_shape)
    labels = rng.integers(0, graph.classes, size=batch)

    def loss():
        return softmax_cross_entropy(model.forward(x, "train"), labels)[0]

    _, dlogits = softmax_cross_entropy(model.forward(x, "train"), labels)
    grads = {name: g.copy() for name, g in model.backward(dlogits).items()}
    params = list(model.named_params())
    sizes = np.array([p.size for _, p, _ in params])
    total = int(sizes.sum())
    n = min(total, max(min_samples, int(round(fraction * total))))
    picks = np.sort(rng.choice(total, size=n, replace=False))
    bounds = np.cumsum(sizes)
    worst = 0.0
    for pi, (name, p, _) in enumerate(params):
        lo = bounds[pi] - sizes[pi]
        local = picks[(picks >= lo) & (picks < bounds[pi])] - lo
        if local.size == 0:
            continue
        num = numeric_grad(loss, p, local.tolist(), step)
        worst = max(worst, float(rel_error(grads[name].reshape(-1)[local], num).max()))
    return CheckResult(f"end_to_end_{graph.name}", worst, n, tol)
