"""Finite-difference verification of every backward pass.

Each check builds a scalar objective (a fixed random projection of the
layer output, or the actual training loss for the end-to-end check),
computes analytic gradients with the hand-written backward, and compares
against central differences in float64. The reported figure is

    max_i |analytic_i - numeric_i| / max(max_i |analytic_i|,
                                         max_i |numeric_i|, 1e-12)

i.e. the largest absolute discrepancy normalized by the gradient scale.
Coordinates within 1e-3 of a ReLU or max-pool decision boundary are
excluded: a finite step across the kink measures a different function.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import layers, model, objective
from .layers import BatchNormParams, ConvParams, same_padding
from .model import NetworkConfig, build_unet
from .tensor import RngStream

STEP = 1e-5
LAYER_TOL = 1e-6
NET_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def central_diff(f, x: np.ndarray, mask: np.ndarray | None = None,
                 step: float = STEP) -> np.ndarray:
    """Central finite differences of scalar f w.r.t. every element of x."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    mflat = None if mask is None else mask.reshape(-1)
    for i in range(flat.size):
        if mflat is not None and not mflat[i]:
            continue
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray,
              mask: np.ndarray | None = None) -> float:
    a = analytic.astype(np.float64)
    n = numeric.astype(np.float64)
    if mask is not None:
        a = np.where(mask, a, 0.0)
        n = np.where(mask, n, 0.0)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-12)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def _projection(rng: RngStream, shape) -> np.ndarray:
    return rng.normal(shape, 0.0, 1.0, dtype=np.float64)


def check_conv2d(k: int, seed: int = 11) -> CheckResult:
    rng = RngStream(seed)
    n, cin, cout, h = 2, 3, 4, 5
    x = rng.normal((n, cin, h, h), 0.0, 1.0, dtype=np.float64)
    params = ConvParams(
        weights=rng.normal((cout, cin, k, k), 0.0, 0.5, dtype=np.float64),
        bias=rng.normal((cout,), 0.0, 0.5, dtype=np.float64))
    pad = same_padding(k, k)
    g = _projection(rng, layers.conv2d(x, params, pad).shape)

    def f():
        return float((layers.conv2d(x, params, pad) * g).sum())

    dx, dw, db = layers.conv2d_grad(x, params, pad, g)
    err = max(rel_error(dx, central_diff(f, x)),
              rel_error(dw, central_diff(f, params.weights)),
              rel_error(db, central_diff(f, params.bias)))
    return CheckResult(f"conv2d_{k}x{k}", err, LAYER_TOL)


def check_batchnorm(seed: int = 12) -> CheckResult:
    rng = RngStream(seed)
    n, c, h = 2, 2, 3
    x = rng.normal((n, c, h, h), 0.0, 1.0, dtype=np.float64)
    params = BatchNormParams(
        gamma=rng.normal((c,), 1.0, 0.2, dtype=np.float64),
        beta=rng.normal((c,), 0.0, 0.2, dtype=np.float64),
        running_mean=np.zeros(c), running_var=np.ones(c))
    g = _projection(rng, x.shape)

    def f():
        out, _, _, _ = layers.batchnorm_train(x, params)
        return float((out * g).sum())

    out, cache, _, _ = layers.batchnorm_train(x, params)
    dx, dgamma, dbeta = layers.batchnorm_grad(cache, g)
    err = max(rel_error(dx, central_diff(f, x)),
              rel_error(dgamma, central_diff(f, params.gamma)),
              rel_error(dbeta, central_diff(f, params.beta)))
    return CheckResult("batchnorm", err, LAYER_TOL)


def check_relu(seed: int = 13) -> CheckResult:
    rng = RngStream(seed)
    x = rng.normal((3, 4, 5, 5), 0.0, 1.0, dtype=np.float64)
    g = _projection(rng, x.shape)
    kink_free = np.abs(x) > 1e-3

    def f():
        return float((layers.relu(x) * g).sum())

    dx = layers.relu_grad(x, g)
    err = rel_error(dx, central_diff(f, x, mask=kink_free), mask=kink_free)
    return CheckResult("relu", err, LAYER_TOL)


def check_maxpool2(seed: int = 14) -> CheckResult:
    rng = RngStream(seed)
    x = rng.normal((2, 2, 4, 4), 0.0, 1.0, dtype=np.float64)
    out, argmax = layers.maxpool2(x)
    g = _projection(rng, out.shape)
    # exclude inputs whose window winner could flip under the FD step
    win = x.reshape(2, 2, 2, 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(2, 2, 2, 2, 4)
    srt = np.sort(win, axis=-1)
    gap_ok = (srt[..., -1] - srt[..., -2]) > 1e-3
    kink_free = np.repeat(np.repeat(gap_ok, 2, axis=2), 2, axis=3)

    def f():
        o, _ = layers.maxpool2(x)
        return float((o * g).sum())

    dx = layers.maxpool2_grad(argmax, g, x.shape)
    err = rel_error(dx, central_diff(f, x, mask=kink_free), mask=kink_free)
    return CheckResult("maxpool2", err, LAYER_TOL)


def check_upsample_nn(seed: int = 15) -> CheckResult:
    rng = RngStream(seed)
    x = rng.normal((2, 3, 4, 4), 0.0, 1.0, dtype=np.float64)
    g = _projection(rng, (2, 3, 8, 8))

    def f():
        return float((layers.upsample_nn(x) * g).sum())

    dx = layers.upsample_nn_grad(g)
    err = rel_error(dx, central_diff(f, x))
    return CheckResult("upsample_nn", err, LAYER_TOL)


def check_concat(seed: int = 16) -> CheckResult:
    rng = RngStream(seed)
    a = rng.normal((2, 2, 3, 3), 0.0, 1.0, dtype=np.float64)
    b = rng.normal((2, 3, 3, 3), 0.0, 1.0, dtype=np.float64)
    g = _projection(rng, (2, 5, 3, 3))

    def f():
        return float((layers.concat_channels(a, b) * g).sum())

    da, db = layers.concat_channels_grad(g, 2)
    err = max(rel_error(da, central_diff(f, a)),
              rel_error(db, central_diff(f, b)))
    return CheckResult("concat_channels", err, LAYER_TOL)


def check_residual(seed: int = 17) -> CheckResult:
    rng = RngStream(seed)
    x = rng.normal((2, 2, 3, 3), 0.0, 1.0, dtype=np.float64)
    y = rng.normal((2, 2, 3, 3), 0.0, 1.0, dtype=np.float64)
    g = _projection(rng, x.shape)

    def f():
        return float((layers.residual_add(x, y) * g).sum())

    err = max(rel_error(g, central_diff(f, x)),
              rel_error(g, central_diff(f, y)))
    return CheckResult("residual_add", err, LAYER_TOL)


def check_softmax_loss(loss_name: str, seed: int = 18) -> CheckResult:
    rng = RngStream(seed)
    logits = rng.normal((2, 2, 4, 4), 0.0, 1.0, dtype=np.float64)
    truth = (rng.uniform((2, 4, 4), 0.0, 1.0, dtype=np.float64) > 0.5) \
        .astype(np.float64)
    loss_fn = objective.LOSS_FUNCTIONS[loss_name]

    def f():
        probs = layers.softmax_channels(logits)
        return loss_fn(probs[:, 0], truth).value

    probs = layers.softmax_channels(logits)
    loss = loss_fn(probs[:, 0], truth)
    dprobs = np.zeros_like(probs)
    dprobs[:, 0] = loss.dprob
    dlogits = layers.softmax_channels_grad(probs, dprobs)
    err = rel_error(dlogits, central_diff(f, logits))
    return CheckResult(f"softmax_{loss_name}_loss", err, LAYER_TOL)


def check_whole_net(seed: int = 19, size: int = 8) -> CheckResult:
    """End-to-end loss-vs-parameter check on a tiny full network."""
    config = NetworkConfig(levels=2, base_features=2, input_size=(size, size),
                           shrink_factor=1, loss="jaccard")
    rng = RngStream(seed)
    net = build_unet(config, rng, dtype=np.float64)
    x = rng.uniform((2, 1, size, size), 0.0, 1.0, dtype=np.float64)
    truth = (rng.uniform((2, size, size), 0.0, 1.0, dtype=np.float64) > 0.5) \
        .astype(np.float64)
    loss_fn = objective.LOSS_FUNCTIONS[config.loss]

    def f():
        probs, _ = model.forward(net, x, "train")
        return loss_fn(probs, truth).value

    probs, cache = model.forward(net, x, "train")
    grads = model.backward(net, cache, loss_fn(probs, truth).dprob)
    err = 0.0
    for name, p in net.named_params():
        numeric = central_diff(f, p)
        err = max(err, rel_error(grads[name], numeric))
    return CheckResult("whole_net_levels2", err, NET_TOL)


def run_all(size: str = "small") -> list[CheckResult]:
    """Every layer check plus the whole-network check; float64 throughout."""
    results = [
        check_conv2d(1), check_conv2d(2), check_conv2d(3),
        check_batchnorm(), check_relu(), check_maxpool2(),
        check_upsample_nn(), check_concat(), check_residual(),
        check_softmax_loss("jaccard"), check_softmax_loss("dice"),
        check_whole_net(size=8 if size == "small" else 4),
    ]
    return results


def format_report(results: list[CheckResult],
                  elapsed: float | None = None) -> str:
    lines = []
    width = max(len(r.name) for r in results)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{r.name:<{width}}  max_rel_err={r.max_rel_error:.3e}  "
                     f"tol={r.tolerance:.0e}  {status}")
    ok = sum(r.passed for r in results)
    tail = f"{ok}/{len(results)} checks passed"
    if elapsed is not None:
        tail += f" in {elapsed:.1f}s"
    lines.append(tail)
    return "\n".join(lines)


def run_and_report(size: str = "small") -> tuple[list[CheckResult], str]:
    t0 = time.perf_counter()
    results = run_all(size)
    return results, format_report(results, time.perf_counter() - t0)
