"""On-the-fly geometric augmentation applied identically to image and mask.

Four families: spatial shift, rotation, zoom (all about the image
center), and a dense elastic displacement field built from Gaussian-
smoothed white noise. Warping is a pull-back: every output pixel reads
the inverse-mapped source coordinate, so no holes appear. Images are
resampled with prefiltered cubic B-splines, masks with nearest neighbor
so labels stay binary.

The sampled transform is a plain value object (TransformSpec) that can
be serialized to JSON and replayed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, ShapeError
from .tensor import RngStream


@dataclass
class AugmentConfig:
    shift_frac: float = 0.10
    max_rotation_deg: float = 10.0
    zoom_range: tuple[float, float] = (0.5, 2.0)
    elastic_mu: float = 10.0     # white-noise displacement std, pixels
    elastic_sigma: float = 20.0  # Gaussian smoothing std, pixels
    enable_shift: bool = True
    enable_rotation: bool = True
    enable_zoom: bool = True
    enable_elastic: bool = True

    def validate(self) -> "AugmentConfig":
        if not 0.0 <= self.shift_frac < 1.0:
            raise ConfigError(f"shift_frac must be in [0, 1), got {self.shift_frac}")
        if self.max_rotation_deg < 0:
            raise ConfigError(f"max_rotation_deg must be >= 0, got {self.max_rotation_deg}")
        lo, hi = self.zoom_range
        if not 0.0 < lo <= hi:
            raise ConfigError(f"zoom_range must satisfy 0 < lo <= hi, got {self.zoom_range}")
        if self.elastic_mu < 0:
            raise ConfigError(f"elastic_mu must be >= 0, got {self.elastic_mu}")
        if self.elastic_sigma <= 0:
            raise ConfigError(f"elastic_sigma must be > 0, got {self.elastic_sigma}")
        return self

    def to_dict(self) -> dict:
        return {
            "shift_frac": self.shift_frac,
            "max_rotation_deg": self.max_rotation_deg,
            "zoom_range": list(self.zoom_range),
            "elastic_mu": self.elastic_mu,
            "elastic_sigma": self.elastic_sigma,
            "enable_shift": self.enable_shift,
            "enable_rotation": self.enable_rotation,
            "enable_zoom": self.enable_zoom,
            "enable_elastic": self.enable_elastic,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown augment config keys: {sorted(unknown)}")
        kwargs = dict(d)
        if "zoom_range" in kwargs:
            kwargs["zoom_range"] = tuple(kwargs["zoom_range"])
        return cls(**kwargs).validate()

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(enable_shift=False, enable_rotation=False,
                   enable_zoom=False, enable_elastic=False)


@dataclass
class TransformSpec:
    """One sampled geometric transform; fully determines the warp."""
    dx: float = 0.0
    dy: float = 0.0
    angle_deg: float = 0.0
    zoom: float = 1.0
    displacement: np.ndarray | None = None  # (2, H, W): (dy, dx) source offsets

    def is_identity(self) -> bool:
        return (self.dx == 0.0 and self.dy == 0.0 and self.angle_deg == 0.0
                and self.zoom == 1.0 and self.displacement is None)

    def to_json_dict(self) -> dict:
        return {
            "dx": self.dx,
            "dy": self.dy,
            "angle_deg": self.angle_deg,
            "zoom": self.zoom,
            "displacement": None if self.displacement is None
            else self.displacement.tolist(),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "TransformSpec":
        disp = d.get("displacement")
        return cls(dx=float(d["dx"]), dy=float(d["dy"]),
                   angle_deg=float(d["angle_deg"]), zoom=float(d["zoom"]),
                   displacement=None if disp is None
                   else np.asarray(disp, dtype=np.float32))


def sample_transform(rng: RngStream, config: AugmentConfig,
                     image_size: tuple[int, int]) -> TransformSpec:
    """Draw one transform; disabled families contribute identity components."""
    h, w = image_size
    spec = TransformSpec()
    if config.enable_shift and config.shift_frac > 0:
        d = rng.uniform((2,), -1.0, 1.0, dtype=np.float64)
        spec.dx = float(d[0]) * config.shift_frac * w
        spec.dy = float(d[1]) * config.shift_frac * h
    if config.enable_rotation and config.max_rotation_deg > 0:
        a = rng.uniform((1,), -config.max_rotation_deg,
                        config.max_rotation_deg, dtype=np.float64)
        spec.angle_deg = float(a[0])
    if config.enable_zoom:
        z = rng.uniform((1,), config.zoom_range[0], config.zoom_range[1],
                        dtype=np.float64)
        spec.zoom = float(z[0])
    if config.enable_elastic:
        noise = rng.normal((2, h, w), 0.0, config.elastic_mu, dtype=np.float64)
        field = gaussian_filter(noise, sigma=(0, config.elastic_sigma,
                                              config.elastic_sigma))
        spec.displacement = field.astype(np.float32)
    return spec


# ---------------------------------------------------------------------------
# cubic B-spline interpolation with IIR prefiltering (mirror boundaries)

_POLE = math.sqrt(3.0) - 2.0
_GAIN = (1.0 - _POLE) * (1.0 - 1.0 / _POLE)  # 6 exactly for the cubic pole


def _prefilter_axis(c: np.ndarray, axis: int) -> np.ndarray:
    """In-place recursive filter along one axis: samples -> spline coefficients."""
    c = np.moveaxis(c, axis, -1)
    n = c.shape[-1]
    if n == 1:
        return np.moveaxis(c, -1, axis)
    c *= _GAIN
    # causal init: truncated mirror-boundary series
    horizon = min(n, int(math.ceil(-30.0 / math.log10(abs(_POLE)))))
    zk = _POLE
    s = c[..., 0].copy()
    for k in range(1, horizon):
        s += zk * c[..., k]
        zk *= _POLE
    c[..., 0] = s
    for k in range(1, n):
        c[..., k] += _POLE * c[..., k - 1]
    c[..., -1] = (_POLE / (_POLE * _POLE - 1.0)) \
        * (_POLE * c[..., -2] + c[..., -1])
    for k in range(n - 2, -1, -1):
        c[..., k] = _POLE * (c[..., k + 1] - c[..., k])
    return np.moveaxis(c, -1, axis)


def bspline_prefilter(image: np.ndarray) -> np.ndarray:
    """Cubic B-spline coefficient image (float64) for later evaluation."""
    c = image.astype(np.float64, copy=True)
    c = _prefilter_axis(c, 0)
    c = _prefilter_axis(c, 1)
    return c


def _mirror_index(idx: np.ndarray, n: int) -> np.ndarray:
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * n - 2
    idx = np.abs(idx) % period
    return np.where(idx >= n, period - idx, idx)


def _bspline_weights(t: np.ndarray):
    """Uniform cubic B-spline basis values for taps at offsets -1, 0, 1, 2."""
    t2 = t * t
    t3 = t2 * t
    w0 = (1.0 - 3.0 * t + 3.0 * t2 - t3) / 6.0
    w1 = (4.0 - 6.0 * t2 + 3.0 * t3) / 6.0
    w2 = (1.0 + 3.0 * t + 3.0 * t2 - 3.0 * t3) / 6.0
    w3 = t3 / 6.0
    return w0, w1, w2, w3


def bspline_eval(coeffs: np.ndarray, ys: np.ndarray, xs: np.ndarray,
                 fill: float = 0.0) -> np.ndarray:
    """Evaluate the spline at real coordinates; fill outside the image bounds."""
    h, w = coeffs.shape
    ys = np.asarray(ys, dtype=np.float64)
    xs = np.asarray(xs, dtype=np.float64)
    inside = (ys >= 0) & (ys <= h - 1) & (xs >= 0) & (xs <= w - 1)
    ysc = np.where(inside, ys, 0.0)
    xsc = np.where(inside, xs, 0.0)
    iy = np.floor(ysc).astype(np.int64)
    ix = np.floor(xsc).astype(np.int64)
    ty = ysc - iy
    tx = xsc - ix
    wy = _bspline_weights(ty)
    wx = _bspline_weights(tx)
    out = np.zeros(ys.shape, dtype=np.float64)
    for m in range(4):
        row = _mirror_index(iy + m - 1, h)
        acc = np.zeros_like(out)
        for k in range(4):
            col = _mirror_index(ix + k - 1, w)
            acc += wx[k] * coeffs[row, col]
        out += wy[m] * acc
    return np.where(inside, out, fill)


def bspline_sample(image: np.ndarray, x: float, y: float,
                   fill: float = 0.0) -> float:
    """Cubic B-spline value of `image` at one real (x, y); prefiltering included."""
    coeffs = bspline_prefilter(image)
    return float(bspline_eval(coeffs, np.asarray([y]), np.asarray([x]), fill)[0])


# ---------------------------------------------------------------------------

def _source_coords(spec: TransformSpec, h: int, w: int):
    """Pull-back coordinates: affine (zoom -> rotate -> shift inverted about
    the center), then the displacement field added to the source position."""
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    u = xs - spec.dx - cx
    v = ys - spec.dy - cy
    th = math.radians(spec.angle_deg)
    ct, st = math.cos(th), math.sin(th)
    src_x = (ct * u + st * v) / spec.zoom + cx
    src_y = (-st * u + ct * v) / spec.zoom + cy
    if spec.displacement is not None:
        if spec.displacement.shape != (2, h, w):
            raise ShapeError(
                f"displacement field shape {spec.displacement.shape} "
                f"does not match image {h}x{w}")
        src_y = src_y + spec.displacement[0]
        src_x = src_x + spec.displacement[1]
    return src_y, src_x


def apply_transform(image: np.ndarray, spec: TransformSpec,
                    interp: str = "bspline", fill: float = 0.0) -> np.ndarray:
    """Warp one (H, W) image by the spec; out-of-bounds reads return fill."""
    if image.ndim != 2:
        raise ShapeError(f"expected a 2-D image, got shape {image.shape}")
    if interp not in ("bspline", "nearest"):
        raise ConfigError(f"interp must be 'bspline' or 'nearest', got {interp!r}")
    if spec.is_identity():
        return image.copy()
    h, w = image.shape
    src_y, src_x = _source_coords(spec, h, w)
    if interp == "nearest":
        iy = np.rint(src_y).astype(np.int64)
        ix = np.rint(src_x).astype(np.int64)
        inside = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
        out = np.full((h, w), fill, dtype=image.dtype)
        out[inside] = image[iy[inside], ix[inside]]
        return out
    coeffs = bspline_prefilter(image)
    out = bspline_eval(coeffs, src_y, src_x, fill)
    return out.astype(image.dtype)


def _border_mean(image: np.ndarray) -> float:
    ring = np.concatenate([image[0, :], image[-1, :],
                           image[1:-1, 0], image[1:-1, -1]])
    return float(ring.mean())


def augment_pair(image: np.ndarray, mask: np.ndarray, rng: RngStream,
                 config: AugmentConfig):
    """Sample one transform and apply it to both image and mask.

    The image is warped with B-spline interpolation (fill = border mean);
    the mask with nearest neighbor (fill = 0) so it stays binary.
    """
    if image.shape != mask.shape:
        raise ShapeError(
            f"image shape {image.shape} != mask shape {mask.shape}")
    spec = sample_transform(rng, config, image.shape)
    if spec.is_identity():
        return image.copy(), mask.copy()
    img_out = apply_transform(image, spec, "bspline", fill=_border_mean(image))
    mask_out = apply_transform(mask, spec, "nearest", fill=0.0)
    return img_out, mask_out
