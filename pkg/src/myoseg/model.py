"""Encoder-decoder network: configuration, assembly, forward and backward.

The graph is the classic U shape: repeated double-3x3-conv blocks with
2x2 max pooling on the way down (feature channels double per level), and
nearest-neighbor 2x upsampling followed by a channel-halving 2x2
convolution plus a skip concatenation on the way up. Optional per-conv
batch normalization and an optional in-block residual shortcut (first
conv output added to second conv output, applied just before the level
hand-off) are the two ablation switches. A 1x1 convolution maps the top
features to two class logits; per-pixel softmax gives the foreground
probability map (channel 0 = foreground, channel 1 = background).

All convolutions are zero-padded "same", so every feature map in a level
shares one spatial size and the output mask covers the full input frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import layers
from .errors import CacheError, ConfigError, ParameterError, ShapeError
from .layers import BatchNormParams, ConvParams, same_padding
from .tensor import RngStream

BLOCK_ORDERS = ("conv-bn-relu", "conv-relu-bn")
LOSS_NAMES = ("jaccard", "dice")

FOREGROUND_CHANNEL = 0
BACKGROUND_CHANNEL = 1


@dataclass
class NetworkConfig:
    levels: int = 5
    base_features: int = 64
    input_size: tuple[int, int] = (128, 128)
    shrink_factor: int = 1
    block_order: str = "conv-bn-relu"
    use_batchnorm: bool = True
    use_residual: bool = True
    loss: str = "jaccard"

    def validate(self) -> "NetworkConfig":
        if self.levels < 2:
            raise ConfigError(f"levels must be >= 2, got {self.levels}")
        if self.base_features < 1:
            raise ConfigError(f"base_features must be >= 1, got {self.base_features}")
        if self.shrink_factor < 1:
            raise ConfigError(f"shrink_factor must be >= 1, got {self.shrink_factor}")
        h, w = self.input_size
        if h < 1 or w < 1:
            raise ConfigError(f"input_size must be positive, got {self.input_size}")
        div = 2 ** (self.levels - 1)
        for name, s in (("height", h), ("width", w)):
            if s % self.shrink_factor:
                raise ConfigError(
                    f"input {name} {s} not divisible by shrink_factor {self.shrink_factor}")
            if (s // self.shrink_factor) % div:
                raise ConfigError(
                    f"input {name} {s} / shrink_factor {self.shrink_factor} "
                    f"must be divisible by 2^(levels-1) = {div}")
        if self.block_order not in BLOCK_ORDERS:
            raise ConfigError(f"block_order must be one of {BLOCK_ORDERS}")
        if self.loss not in LOSS_NAMES:
            raise ConfigError(f"loss must be one of {LOSS_NAMES}")
        return self

    def net_input_size(self) -> tuple[int, int]:
        """Spatial size of tensors entering the network (after shrinking)."""
        h, w = self.input_size
        return h // self.shrink_factor, w // self.shrink_factor

    def to_dict(self) -> dict:
        return {
            "levels": self.levels,
            "base_features": self.base_features,
            "input_size": list(self.input_size),
            "shrink_factor": self.shrink_factor,
            "block_order": self.block_order,
            "use_batchnorm": self.use_batchnorm,
            "use_residual": self.use_residual,
            "loss": self.loss,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        kwargs = dict(d)
        if "input_size" in kwargs:
            size = kwargs["input_size"]
            if not (isinstance(size, (list, tuple)) and len(size) == 2):
                raise ConfigError(f"input_size must be [H, W], got {size!r}")
            kwargs["input_size"] = (int(size[0]), int(size[1]))
        return cls(**kwargs).validate()


@dataclass
class ConvSub:
    """One conv sub-block: convolution plus optional batch normalization."""
    conv: ConvParams
    bn: BatchNormParams | None


@dataclass
class DoubleConvBlock:
    sub1: ConvSub
    sub2: ConvSub


@dataclass
class DecoderLevel:
    upconv: ConvParams  # 2x2, halves channels after nearest upsampling
    block: DoubleConvBlock


@dataclass
class Network:
    config: NetworkConfig
    encoder: list[DoubleConvBlock]  # level 0 first; each is followed by pooling
    bottom: DoubleConvBlock
    decoder: list[DecoderLevel]     # deepest level first
    head: ConvParams                # 1x1 -> 2 class logits

    def _block_names(self):
        yield from ((f"enc{l}", b) for l, b in enumerate(self.encoder))
        yield "bottom", self.bottom

    def named_params(self) -> list[tuple[str, np.ndarray]]:
        """Learnable tensors in a fixed, serialization-stable order."""
        out: list[tuple[str, np.ndarray]] = []

        def add_block(prefix: str, blk: DoubleConvBlock) -> None:
            for i, sub in enumerate((blk.sub1, blk.sub2), start=1):
                out.append((f"{prefix}.conv{i}.weight", sub.conv.weights))
                out.append((f"{prefix}.conv{i}.bias", sub.conv.bias))
                if sub.bn is not None:
                    out.append((f"{prefix}.bn{i}.gamma", sub.bn.gamma))
                    out.append((f"{prefix}.bn{i}.beta", sub.bn.beta))

        for prefix, blk in self._block_names():
            add_block(prefix, blk)
        for i, dl in enumerate(self.decoder):
            level = self.config.levels - 2 - i
            out.append((f"dec{level}.up.weight", dl.upconv.weights))
            out.append((f"dec{level}.up.bias", dl.upconv.bias))
            add_block(f"dec{level}", dl.block)
        out.append(("head.weight", self.head.weights))
        out.append(("head.bias", self.head.bias))
        return out

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        """Batch-norm running statistics, in the same traversal order."""
        out: list[tuple[str, np.ndarray]] = []

        def add_block(prefix: str, blk: DoubleConvBlock) -> None:
            for i, sub in enumerate((blk.sub1, blk.sub2), start=1):
                if sub.bn is not None:
                    out.append((f"{prefix}.bn{i}.running_mean", sub.bn.running_mean))
                    out.append((f"{prefix}.bn{i}.running_var", sub.bn.running_var))

        for prefix, blk in self._block_names():
            add_block(prefix, blk)
        for i, dl in enumerate(self.decoder):
            add_block(f"dec{self.config.levels - 2 - i}", dl.block)
        return out

    def astype(self, dtype) -> "Network":
        """Copy of the network with every tensor cast to dtype."""
        rng = RngStream(0)
        net = build_unet(self.config, rng, dtype=dtype)
        src = dict(self.named_params() + self.named_buffers())
        for name, arr in net.named_params() + net.named_buffers():
            arr[...] = src[name].astype(dtype)
        return net


def level_channels(config: NetworkConfig) -> list[int]:
    """Output channel count per level (doubling from base_features)."""
    return [config.base_features * (2 ** l) for l in range(config.levels)]


def parameter_count(config: NetworkConfig) -> int:
    """Learnable parameter total as a closed function of the configuration."""
    chans = level_channels(config)
    bn = 4 if config.use_batchnorm else 0  # gamma + beta for two BN layers
    total = 0
    prev = 1
    for c in chans:
        total += c * prev * 9 + c          # conv1 3x3
        total += c * c * 9 + c             # conv2 3x3
        total += bn * c
        prev = c
    for l in range(config.levels - 2, -1, -1):
        c = chans[l]
        total += c * chans[l + 1] * 4 + c  # up-conv 2x2
        total += c * (2 * c) * 9 + c       # conv1 3x3 after concatenation
        total += c * c * 9 + c             # conv2 3x3
        total += bn * c
    total += 2 * config.base_features + 2  # 1x1 head
    return total


def _he_conv(rng: RngStream, out_ch: int, in_ch: int, k: int, dtype) -> ConvParams:
    fan_in = in_ch * k * k
    w = rng.normal((out_ch, in_ch, k, k), 0.0, math.sqrt(2.0 / fan_in), dtype=dtype)
    return ConvParams(weights=w, bias=np.zeros(out_ch, dtype=dtype))


def _fresh_bn(ch: int, dtype) -> BatchNormParams:
    return BatchNormParams(
        gamma=np.ones(ch, dtype=dtype),
        beta=np.zeros(ch, dtype=dtype),
        running_mean=np.zeros(ch, dtype=dtype),
        running_var=np.ones(ch, dtype=dtype),
    )


def build_unet(config: NetworkConfig, rng: RngStream,
               dtype=np.float32) -> Network:
    """Instantiate the network: He-initialized convs, identity batch norms."""
    config.validate()
    chans = level_channels(config)
    use_bn = config.use_batchnorm

    def block(in_ch: int, out_ch: int) -> DoubleConvBlock:
        return DoubleConvBlock(
            sub1=ConvSub(conv=_he_conv(rng, out_ch, in_ch, 3, dtype),
                         bn=_fresh_bn(out_ch, dtype) if use_bn else None),
            sub2=ConvSub(conv=_he_conv(rng, out_ch, out_ch, 3, dtype),
                         bn=_fresh_bn(out_ch, dtype) if use_bn else None))

    encoder = []
    prev = 1
    for l in range(config.levels - 1):
        encoder.append(block(prev, chans[l]))
        prev = chans[l]
    bottom = block(prev, chans[-1])
    decoder = []
    for l in range(config.levels - 2, -1, -1):
        decoder.append(DecoderLevel(
            upconv=_he_conv(rng, chans[l], chans[l + 1], 2, dtype),
            block=block(2 * chans[l], chans[l])))
    head = _he_conv(rng, 2, config.base_features, 1, dtype)
    return Network(config=config, encoder=encoder, bottom=bottom,
                   decoder=decoder, head=head)


# ---------------------------------------------------------------------------
# forward / backward

PAD3 = same_padding(3, 3)
PAD2 = same_padding(2, 2)
PAD1 = same_padding(1, 1)


@dataclass
class _SubCache:
    x: np.ndarray
    pre_relu: np.ndarray
    bn_cache: layers.BatchNormCache | None


@dataclass
class _BlockCache:
    sub1: _SubCache
    sub2: _SubCache


@dataclass
class ForwardCache:
    input_shape: tuple
    enc: list            # per level: (_BlockCache, argmax, skip_shape)
    bottom: _BlockCache
    dec: list            # per decoder step: (u0, _BlockCache, skip_channels)
    head_in: np.ndarray
    probs: np.ndarray    # (N, 2, H, W)


def _sub_forward(x, sub: ConvSub, order: str, train: bool):
    c = layers.conv2d(x, sub.conv, PAD3)
    if order == "conv-bn-relu":
        if sub.bn is not None:
            if train:
                b, bn_cache, rm, rv = layers.batchnorm_train(c, sub.bn)
                sub.bn.running_mean[...] = rm
                sub.bn.running_var[...] = rv
            else:
                b, bn_cache = layers.batchnorm_infer(c, sub.bn), None
        else:
            b, bn_cache = c, None
        out = layers.relu(b)
        cache = _SubCache(x=x, pre_relu=b, bn_cache=bn_cache) if train else None
    else:  # conv-relu-bn
        r = layers.relu(c)
        if sub.bn is not None:
            if train:
                out, bn_cache, rm, rv = layers.batchnorm_train(r, sub.bn)
                sub.bn.running_mean[...] = rm
                sub.bn.running_var[...] = rv
            else:
                out, bn_cache = layers.batchnorm_infer(r, sub.bn), None
        else:
            out, bn_cache = r, None
        cache = _SubCache(x=x, pre_relu=c, bn_cache=bn_cache) if train else None
    return out, cache


def _sub_backward(cache: _SubCache, sub: ConvSub, order: str, upstream,
                  grads: dict, prefix: str, idx: int):
    if order == "conv-bn-relu":
        d = layers.relu_grad(cache.pre_relu, upstream)
        if cache.bn_cache is not None:
            d, dgamma, dbeta = layers.batchnorm_grad(cache.bn_cache, d)
            grads[f"{prefix}.bn{idx}.gamma"] = dgamma
            grads[f"{prefix}.bn{idx}.beta"] = dbeta
    else:
        d = upstream
        if cache.bn_cache is not None:
            d, dgamma, dbeta = layers.batchnorm_grad(cache.bn_cache, d)
            grads[f"{prefix}.bn{idx}.gamma"] = dgamma
            grads[f"{prefix}.bn{idx}.beta"] = dbeta
        d = layers.relu_grad(cache.pre_relu, d)
    dx, dw, db = layers.conv2d_grad(cache.x, sub.conv, PAD3, d)
    grads[f"{prefix}.conv{idx}.weight"] = dw
    grads[f"{prefix}.conv{idx}.bias"] = db
    return dx


def _block_forward(x, blk: DoubleConvBlock, order: str, residual: bool,
                   train: bool):
    h1, c1 = _sub_forward(x, blk.sub1, order, train)
    h2, c2 = _sub_forward(h1, blk.sub2, order, train)
    out = layers.residual_add(h2, h1) if residual else h2
    return out, (_BlockCache(sub1=c1, sub2=c2) if train else None)


def _block_backward(cache: _BlockCache, blk: DoubleConvBlock, order: str,
                    residual: bool, upstream, grads: dict, prefix: str):
    dh1 = _sub_backward(cache.sub2, blk.sub2, order, upstream, grads, prefix, 2)
    if residual:
        dh1 = dh1 + upstream
    return _sub_backward(cache.sub1, blk.sub1, order, dh1, grads, prefix, 1)


def forward(net: Network, batch: np.ndarray, mode: str = "infer"):
    """Full pass. Returns probs (N, H, W) and, in train mode, a cache.

    Train mode normalizes by batch statistics and folds them into the
    running statistics; infer mode reads running statistics only.
    """
    if mode not in ("train", "infer"):
        raise ParameterError(f"mode must be 'train' or 'infer', got {mode!r}")
    cfg = net.config
    h, w = cfg.net_input_size()
    if batch.ndim != 4 or batch.shape[1] != 1 or batch.shape[2:] != (h, w):
        raise ShapeError(
            f"batch must be (N, 1, {h}, {w}), got {batch.shape}")
    train = mode == "train"
    order, res = cfg.block_order, cfg.use_residual

    x = batch
    skips, enc_caches = [], []
    for blk in net.encoder:
        s, bc = _block_forward(x, blk, order, res, train)
        x, argmax = layers.maxpool2(s)
        skips.append(s)
        enc_caches.append((bc, argmax, s.shape))
    x, bottom_cache = _block_forward(x, net.bottom, order, res, train)

    dec_caches = []
    for i, dl in enumerate(net.decoder):
        skip = skips[len(skips) - 1 - i]
        u0 = layers.upsample_nn(x)
        u = layers.conv2d(u0, dl.upconv, PAD2)
        cc = layers.concat_channels(skip, u)
        x, bc = _block_forward(cc, dl.block, order, res, train)
        dec_caches.append((u0 if train else None, bc, skip.shape[1]))

    logits = layers.conv2d(x, net.head, PAD1)
    probs = layers.softmax_channels(logits)
    fg = probs[:, FOREGROUND_CHANNEL]
    if not train:
        return fg, None
    cache = ForwardCache(input_shape=batch.shape, enc=enc_caches,
                         bottom=bottom_cache, dec=dec_caches,
                         head_in=x, probs=probs)
    return fg, cache


def backward(net: Network, cache: ForwardCache,
             dprob: np.ndarray) -> dict[str, np.ndarray]:
    """Gradient of a scalar through the whole graph.

    dprob is the upstream gradient w.r.t. the foreground probability map;
    returns one gradient array per learnable parameter name.
    """
    if cache is None:
        raise CacheError("backward requires the cache from a train-mode forward")
    if dprob.shape != cache.probs.shape[:1] + cache.probs.shape[2:]:
        raise CacheError(
            f"dprob shape {dprob.shape} does not match cached forward "
            f"output {cache.probs.shape[:1] + cache.probs.shape[2:]}")
    cfg = net.config
    order, res = cfg.block_order, cfg.use_residual
    grads: dict[str, np.ndarray] = {}

    dprobs = np.zeros_like(cache.probs)
    dprobs[:, FOREGROUND_CHANNEL] = dprob
    dlogits = layers.softmax_channels_grad(cache.probs, dprobs)
    d, dw, db = layers.conv2d_grad(cache.head_in, net.head, PAD1, dlogits)
    grads["head.weight"] = dw
    grads["head.bias"] = db

    skip_grads = [None] * len(net.encoder)
    for i in range(len(net.decoder) - 1, -1, -1):
        dl = net.decoder[i]
        u0, bc, ca = cache.dec[i]
        level = cfg.levels - 2 - i
        d = _block_backward(bc, dl.block, order, res, d, grads, f"dec{level}")
        d_skip, d_u = layers.concat_channels_grad(d, ca)
        skip_index = len(net.encoder) - 1 - i
        skip_grads[skip_index] = d_skip
        d_u0, dw, db = layers.conv2d_grad(u0, dl.upconv, PAD2, d_u)
        grads[f"dec{level}.up.weight"] = dw
        grads[f"dec{level}.up.bias"] = db
        d = layers.upsample_nn_grad(d_u0)

    d = _block_backward(cache.bottom, net.bottom, order, res, d, grads, "bottom")

    for l in range(len(net.encoder) - 1, -1, -1):
        bc, argmax, skip_shape = cache.enc[l]
        d_skip = layers.maxpool2_grad(argmax, d, skip_shape)
        if skip_grads[l] is not None:
            d_skip = d_skip + skip_grads[l]
        d = _block_backward(bc, net.encoder[l], order, res, d_skip, grads,
                            f"enc{l}")
    return grads


def predict_mask(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Binary mask: 1 strictly above threshold, else 0."""
    if not 0.0 < threshold < 1.0:
        raise ParameterError(f"threshold must be in (0, 1), got {threshold}")
    return (probs > threshold).astype(np.float32)


def shrink_mean(x: np.ndarray, factor: int) -> np.ndarray:
    """Downsample the trailing two axes by local mean pooling."""
    if factor == 1:
        return x
    h, w = x.shape[-2], x.shape[-1]
    if h % factor or w % factor:
        raise ShapeError(f"size {h}x{w} not divisible by shrink factor {factor}")
    shape = x.shape[:-2] + (h // factor, factor, w // factor, factor)
    return x.reshape(shape).mean(axis=(-3, -1)).astype(x.dtype)


def shrink_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Downsample a binary mask: mean pooling then majority threshold."""
    if factor == 1:
        return mask
    return (shrink_mean(mask.astype(np.float32), factor) > 0.5).astype(np.float32)


def expand_nn(x: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbor upsampling of the trailing two axes."""
    if factor == 1:
        return x
    return x.repeat(factor, axis=-2).repeat(factor, axis=-1)
