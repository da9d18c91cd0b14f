"""Central finite-difference checks for every differentiable op.

Checks run in float64.  Each op's analytic gradient of a random linear
functional ``sum(R * op(inputs))`` is compared elementwise with
``(f(x + eps) - f(x - eps)) / (2 eps)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .unet import UNetConfig, as_tensors, init_unet, unet_forward

OP_TOL = 1e-4
COMPOSITE_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    trials: int
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < self.tolerance)


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_function(fn: Callable[..., ad.Tensor], inputs: list[np.ndarray], eps: float = 1e-3,
                   wrt=None, n_entries: int | None = None, rng=None) -> float:
    """Max relative error of d(scalar fn)/d(inputs) against central differences.

    ``fn`` takes Tensors and returns a scalar Tensor.  With ``n_entries``
    only that many randomly chosen entries per input are probed.
    """
    wrt = range(len(inputs)) if wrt is None else wrt
    tensors = [ad.parameter(x.copy()) for x in inputs]
    out = fn(*tensors)
    out.backward()
    worst = 0.0
    for i in wrt:
        x = inputs[i]
        flat_idx = np.arange(x.size)
        if n_entries is not None and n_entries < x.size:
            flat_idx = rng.choice(x.size, size=n_entries, replace=False)
        numeric = np.empty(len(flat_idx))
        for j, idx in enumerate(flat_idx):
            vals = []
            for sign in (1.0, -1.0):
                shifted = [xx.copy() for xx in inputs]
                shifted[i].flat[idx] += sign * eps
                vals.append(fn(*[ad.constant(s) for s in shifted]).item())
            numeric[j] = (vals[0] - vals[1]) / (2 * eps)
        analytic = tensors[i].grad.ravel()[flat_idx]
        worst = max(worst, rel_error(analytic, numeric))
    return worst


def _probe(op: Callable[..., ad.Tensor], weights: np.ndarray):
    return lambda *ts: ad.weighted_sum(op(*ts), weights)


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.uniform(margin, 1.0, size=shape) * rng.choice((-1.0, 1.0), size=shape)
    return x


def _distinct(rng, shape, gap=0.01):
    # distinct values with spacing > 2 eps keep the argmax stable under probing
    n = int(np.prod(shape))
    return (rng.permutation(n) * gap).reshape(shape) + rng.uniform(0, 0.1)


def _op_checks(rng) -> dict[str, Callable[[], float]]:
    def conv3():
        c_in, c_out = 2, 2
        x = rng.standard_normal((c_in, 5, 5, 5))
        w = rng.standard_normal((c_out, c_in, 3, 3, 3))
        b = rng.standard_normal(c_out)
        r = rng.standard_normal((c_out, 5, 5, 5))
        return check_function(_probe(ad.conv3, r), [x, w, b])

    def conv1():
        x = rng.standard_normal((3, 4, 4, 4))
        w = rng.standard_normal((2, 3))
        b = rng.standard_normal(2)
        r = rng.standard_normal((2, 4, 4, 4))
        return check_function(_probe(ad.conv1, r), [x, w, b])

    def relu():
        x = _away_from_zero(rng, (2, 3, 3, 3))
        return check_function(_probe(ad.relu, rng.standard_normal(x.shape)), [x])

    def sigmoid():
        x = rng.standard_normal((2, 3, 3, 3)) * 3
        return check_function(_probe(ad.sigmoid, rng.standard_normal(x.shape)), [x])

    def softmax3():
        x = rng.standard_normal(3) * 2
        return check_function(_probe(ad.softmax3, rng.standard_normal(3)), [x])

    def maxpool2():
        x = _distinct(rng, (2, 4, 4, 4))
        return check_function(_probe(ad.maxpool2, rng.standard_normal((2, 2, 2, 2))), [x])

    def upsample2():
        x = rng.standard_normal((2, 2, 3, 2))
        return check_function(_probe(ad.upsample2, rng.standard_normal((2, 4, 6, 4))), [x])

    def concat():
        a = rng.standard_normal((2, 3, 3, 3))
        b = rng.standard_normal((1, 3, 3, 3))
        return check_function(_probe(ad.concat, rng.standard_normal((3, 3, 3, 3))), [a, b])

    def global_avg_pool():
        x = rng.standard_normal((3, 2, 3, 4))
        return check_function(_probe(ad.global_avg_pool, rng.standard_normal(3)), [x])

    def linear():
        v = rng.standard_normal(4)
        w = rng.standard_normal((3, 4))
        b = rng.standard_normal(3)
        return check_function(_probe(ad.linear, rng.standard_normal(3)), [v, w, b])

    def log_load():
        x = rng.uniform(0.01, 1.0, size=(1, 3, 2, 3))
        return check_function(lambda t: ad.weighted_sum(ad.log_load(t, 0.05), [1.7]), [x], eps=1e-6)

    return {
        "conv3": conv3, "conv1": conv1, "relu": relu, "sigmoid": sigmoid, "softmax3": softmax3,
        "maxpool2": maxpool2, "upsample2": upsample2, "concat": concat,
        "global_avg_pool": global_avg_pool, "linear": linear, "log_load": log_load,
    }


def _loss_checks(rng) -> dict[str, Callable[[], float]]:
    from .. import losses

    def probs(shape):
        return rng.uniform(0.05, 0.95, size=shape)

    def target(shape):
        y = (rng.random(shape) < 0.3).astype(np.float64)
        y.flat[0] = 1.0
        return y

    def fnw():
        shape = (1, 3, 3, 3)
        y = target(shape)
        cfg = losses.LossConfig(w_fn=float(rng.uniform(1, 20)))
        return check_function(lambda p: losses.fnw_bce(p, y, cfg), [probs(shape)], eps=1e-6)

    def voxel_ratio():
        shape = (1, 3, 3, 3)
        y = target(shape)
        return check_function(lambda p: losses.voxel_ratio_bce(p, y), [probs(shape)], eps=1e-6)

    def burden():
        z = rng.standard_normal(3) * 2
        c = int(rng.integers(3))
        return check_function(lambda t: losses.burden_ce(t, c), [z], eps=1e-5)

    def joint():
        shape = (1, 4, 4, 4)
        y = np.zeros(shape)
        for _ in range(int(rng.integers(0, 5))):
            y.flat[rng.integers(y.size)] = 1.0
        cfg = losses.LossConfig(w_fn=float(rng.uniform(1, 20)), lambda_burden=float(rng.uniform(0.1, 2)))
        z = rng.standard_normal(3)
        return check_function(lambda p, t: losses.joint_loss(p, y, t, cfg), [probs(shape), z], eps=1e-6)

    return {"fnw_bce": fnw, "voxel_ratio_bce": voxel_ratio, "burden_ce": burden, "joint_loss": joint}


def _unet_check(rng, residual: bool = False) -> float:
    """End-to-end: joint loss through a depth-2 U-Net, 10 random parameter entries."""
    from .. import losses

    cfg = UNetConfig(depth=2, base_channels=2, in_channels=2, head="dense_plus_classifier",
                     residual_logit=residual)
    params = init_unet(cfg, rng, dtype=np.float64)
    for k in params:
        if k.endswith(".b") or k == "head.w":
            params[k] = rng.standard_normal(params[k].shape) * (0.1 if k.endswith(".b") else 0.5)
    x = rng.standard_normal((2, 4, 4, 4))
    if residual:
        x[0] = rng.uniform(0.01, 0.99, (4, 4, 4))
    y = (rng.random((1, 4, 4, 4)) < 0.2).astype(np.float64)
    lcfg = losses.LossConfig(w_fn=5.0, lambda_burden=1.0)
    names = list(params)
    sizes = np.array([params[n].size for n in names])
    picks = rng.choice(int(sizes.sum()), size=10, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def loss_of(p):
        out = unet_forward(cfg, as_tensors(p), ad.constant(x))
        return losses.joint_loss(out.dense, y, out.class_logits, lcfg)

    tensors = as_tensors(params)
    out = unet_forward(cfg, tensors, ad.constant(x))
    losses.joint_loss(out.dense, y, out.class_logits, lcfg).backward()
    analytic, numeric = [], []
    eps = 1e-5
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        name, idx = names[k], int(flat - offsets[k])
        vals = []
        for sign in (1.0, -1.0):
            shifted = {n: v.copy() for n, v in params.items()}
            shifted[name].flat[idx] += sign * eps
            vals.append(loss_of(shifted).item())
        numeric.append((vals[0] - vals[1]) / (2 * eps))
        analytic.append(tensors[name].grad.flat[idx])
    return rel_error(np.array(analytic), np.array(numeric))


def run_gradcheck(trials: int = 20, seed: int = 0, include_composite: bool = True) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    checks = {**_op_checks(rng), **_loss_checks(rng)}
    for name, check in checks.items():
        worst = max(check() for _ in range(trials))
        results.append(CheckResult(name, trials, worst, OP_TOL))
    if include_composite:
        worst = max(_unet_check(rng, residual=bool(t % 2)) for t in range(trials))
        results.append(CheckResult("unet_composite", trials, worst, COMPOSITE_TOL))
    return results
