"""Layer primitives with hand-written forward and backward passes.

Everything operates on NCHW float arrays and is written as pure functions:
forwards return outputs (plus a cache where the backward needs one),
backwards take the cache and the upstream gradient and return exact
gradients. Convolutions are im2col + GEMM, stride fixed at 1, with "same"
zero padding chosen per kernel size so spatial extents never change.

Convention: convolution is cross-correlation (no kernel flip).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateBatchError, CacheError, ShapeError

# padding is (top, bottom, left, right)
Padding = tuple[int, int, int, int]


@dataclass
class ConvParams:
    weights: np.ndarray  # (out_ch, in_ch, kh, kw)
    bias: np.ndarray     # (out_ch,)


@dataclass
class BatchNormParams:
    gamma: np.ndarray         # (ch,)
    beta: np.ndarray          # (ch,)
    running_mean: np.ndarray  # (ch,)
    running_var: np.ndarray   # (ch,)
    momentum: float = 0.1
    eps: float = 1e-5


def same_padding(kh: int, kw: int) -> Padding:
    """Per-side zero padding that preserves H and W at stride 1.

    3x3 -> 1 on every side; 2x2 -> 0 top/left, 1 bottom/right; 1x1 -> 0.
    """
    return (kh // 2 if kh % 2 else kh // 2 - 1, kh // 2,
            kw // 2 if kw % 2 else kw // 2 - 1, kw // 2)


def _pad(x: np.ndarray, padding: Padding) -> np.ndarray:
    pt, pb, pl, pr = padding
    if pt == pb == pl == pr == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))


def _im2col(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(N, C, Hp, Wp) padded input -> (N*H'*W', C*kh*kw) patch matrix."""
    n, c, hp, wp = xp.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    # win: (N, C, H', W', kh, kw) -> (N, H', W', C, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols)


def conv2d(x: np.ndarray, params: ConvParams, padding: Padding) -> np.ndarray:
    """Cross-correlation plus bias. x: (N, Cin, H, W) -> (N, Cout, H', W')."""
    n, cin, h, w = x.shape
    cout, cin_w, kh, kw = params.weights.shape
    if cin != cin_w:
        raise ShapeError(f"input has {cin} channels, weights expect {cin_w}")
    pt, pb, pl, pr = padding
    ho, wo = h + pt + pb - kh + 1, w + pl + pr - kw + 1
    cols = _im2col(_pad(x, padding), kh, kw)
    w2 = params.weights.reshape(cout, cin * kh * kw)
    out = cols @ w2.T + params.bias.astype(x.dtype)
    return out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)


def conv2d_grad(x: np.ndarray, params: ConvParams, padding: Padding,
                upstream: np.ndarray):
    """Gradients of sum(upstream * conv2d(x)) -> (dx, dweights, dbias)."""
    n, cin, h, w = x.shape
    cout, cin_w, kh, kw = params.weights.shape
    if cin != cin_w:
        raise ShapeError(f"input has {cin} channels, weights expect {cin_w}")
    pt, pb, pl, pr = padding
    ho, wo = h + pt + pb - kh + 1, w + pl + pr - kw + 1
    if upstream.shape != (n, cout, ho, wo):
        raise ShapeError(
            f"upstream shape {upstream.shape} != {(n, cout, ho, wo)}")

    up2 = np.ascontiguousarray(
        upstream.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cout)
    cols = _im2col(_pad(x, padding), kh, kw)

    dw = (up2.T @ cols).reshape(cout, cin, kh, kw)
    db = upstream.sum(axis=(0, 2, 3))

    w2 = params.weights.reshape(cout, cin * kh * kw)
    dcols = (up2 @ w2).reshape(n, ho, wo, cin, kh, kw)
    dxp = np.zeros((n, cin, h + pt + pb, w + pl + pr), dtype=x.dtype)
    # scatter-add each kernel tap; windows overlap at stride 1
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + ho, j:j + wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, pt:pt + h, pl:pl + w]
    return dx, dw, db


@dataclass
class BatchNormCache:
    x_hat: np.ndarray
    inv_std: np.ndarray  # (ch,)
    gamma: np.ndarray


def batchnorm_train(x: np.ndarray, params: BatchNormParams):
    """Normalize by batch statistics over (N, H, W) per channel.

    Returns (out, cache, running_mean', running_var'); running stats are
    returned rather than written back:
    running' = (1 - momentum) * running + momentum * batch.
    """
    n, c, h, w = x.shape
    if n * h * w < 2:
        raise DegenerateBatchError(
            f"batchnorm needs >= 2 elements per channel, got {n * h * w}")
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(var + params.eps)
    x_hat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = params.gamma[None, :, None, None] * x_hat \
        + params.beta[None, :, None, None]
    m = params.momentum
    run_mean = ((1.0 - m) * params.running_mean + m * mean).astype(params.running_mean.dtype)
    run_var = ((1.0 - m) * params.running_var + m * var).astype(params.running_var.dtype)
    cache = BatchNormCache(x_hat=x_hat, inv_std=inv_std.astype(x.dtype),
                           gamma=params.gamma)
    return out.astype(x.dtype), cache, run_mean, run_var


def batchnorm_infer(x: np.ndarray, params: BatchNormParams) -> np.ndarray:
    """Normalize by running statistics; touches no state."""
    if x.shape[1] != params.gamma.shape[0]:
        raise ShapeError(
            f"input has {x.shape[1]} channels, params expect {params.gamma.shape[0]}")
    inv_std = 1.0 / np.sqrt(params.running_var + params.eps)
    x_hat = (x - params.running_mean[None, :, None, None]) \
        * inv_std[None, :, None, None]
    out = params.gamma[None, :, None, None] * x_hat \
        + params.beta[None, :, None, None]
    return out.astype(x.dtype)


def batchnorm_grad(cache: BatchNormCache, upstream: np.ndarray):
    """Exact gradients through the batch statistics -> (dx, dgamma, dbeta)."""
    if upstream.shape != cache.x_hat.shape:
        raise CacheError(
            f"upstream shape {upstream.shape} does not match cached "
            f"activation shape {cache.x_hat.shape}")
    m = upstream.shape[0] * upstream.shape[2] * upstream.shape[3]
    dgamma = (upstream * cache.x_hat).sum(axis=(0, 2, 3))
    dbeta = upstream.sum(axis=(0, 2, 3))
    g = cache.gamma[None, :, None, None] * cache.inv_std[None, :, None, None]
    dx = g * (upstream
              - dbeta[None, :, None, None] / m
              - cache.x_hat * dgamma[None, :, None, None] / m)
    return dx.astype(upstream.dtype), dgamma, dbeta


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_grad(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Pass-through where x > 0, zero elsewhere (ties at 0 give 0)."""
    return np.where(x > 0, upstream, 0).astype(upstream.dtype)


def maxpool2(x: np.ndarray):
    """2x2 max pooling, stride 2. Returns (out, argmax flat input offsets).

    Ties break toward the lowest flat (row-major) index.
    """
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even H and W, got {h}x{w}")
    ho, wo = h // 2, w // 2
    win = x.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5) \
        .reshape(n, c, ho, wo, 4)
    local = win.argmax(axis=-1)  # first max wins -> lowest flat index
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    dy, dx_ = local // 2, local % 2
    iy = 2 * np.arange(ho)[None, None, :, None] + dy
    ix = 2 * np.arange(wo)[None, None, None, :] + dx_
    base = (np.arange(n)[:, None, None, None] * c
            + np.arange(c)[None, :, None, None]) * (h * w)
    argmax = base + iy * w + ix
    return np.ascontiguousarray(out), argmax


def maxpool2_grad(argmax: np.ndarray, upstream: np.ndarray,
                  input_shape) -> np.ndarray:
    """Route each upstream value to the cell that produced the window max."""
    if upstream.shape != argmax.shape:
        raise CacheError(
            f"upstream shape {upstream.shape} != pooled shape {argmax.shape}")
    dx = np.zeros(int(np.prod(input_shape)), dtype=upstream.dtype)
    dx[argmax.ravel()] = upstream.ravel()
    return dx.reshape(input_shape)


def upsample_nn(x: np.ndarray) -> np.ndarray:
    """Replicate each pixel into a 2x2 block."""
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample_nn_grad(upstream: np.ndarray) -> np.ndarray:
    """Each input cell collects the sum of its four replicas."""
    n, c, h2, w2 = upstream.shape
    return upstream.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Channel concatenation, encoder features first."""
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concat {a.shape} with {b.shape}")
    return np.concatenate([a, b], axis=1)


def concat_channels_grad(upstream: np.ndarray, ca: int):
    return upstream[:, :ca], upstream[:, ca:]


def residual_add(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Elementwise shortcut sum; gradient fans upstream to both inputs."""
    if x.shape != y.shape:
        raise ShapeError(f"residual_add shapes differ: {x.shape} vs {y.shape}")
    return x + y


def softmax_channels(logits: np.ndarray) -> np.ndarray:
    """Per-pixel two-class softmax over the channel axis.

    Stabilized by max subtraction; output channels sum to 1 everywhere.
    """
    if logits.shape[1] != 2:
        raise ShapeError(f"expected 2 channels, got {logits.shape[1]}")
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_channels_grad(probs: np.ndarray,
                          upstream: np.ndarray) -> np.ndarray:
    """Jacobian-vector product: dlogits = p * (up - sum_c(up * p))."""
    if upstream.shape != probs.shape:
        raise ShapeError(
            f"upstream shape {upstream.shape} != probs shape {probs.shape}")
    dot = (upstream * probs).sum(axis=1, keepdims=True)
    return (probs * (upstream - dot)).astype(probs.dtype)
