"""Synthetic short-axis phantom: a bright pool disk inside a mid-gray ring.

Stands in for clinical data at desk scale. The ring (the segmentation
target) sits on a noisy dark background; intensity ordering is
pool > ring > background. Every case and slice is generated from a
stream derived from (dataset seed, case index, slice index), so datasets
are bit-reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import dataio
from .errors import ConfigError
from .tensor import RngStream, derive_stream


@dataclass
class PhantomConfig:
    image_size: int = 128
    inner_radius_range: tuple[float, float] = (0.08, 0.15)  # fraction of size
    thickness_range: tuple[float, float] = (0.05, 0.12)     # fraction of size
    center_jitter: float = 0.10                             # fraction of size
    background_intensity: float = 0.2
    myocardium_intensity: float = 0.5
    blood_intensity: float = 0.9
    noise_std: float = 0.05
    slices_per_case: int = 13

    def validate(self) -> "PhantomConfig":
        if self.image_size < 8:
            raise ConfigError(f"image_size must be >= 8, got {self.image_size}")
        r_lo, r_hi = self.inner_radius_range
        t_lo, t_hi = self.thickness_range
        if not 0 < r_lo <= r_hi or not 0 < t_lo <= t_hi:
            raise ConfigError("radius/thickness ranges must be positive and ordered")
        if r_hi + t_hi >= 0.5:
            raise ConfigError(
                "inner radius + thickness must stay below half the image size")
        if not 0 <= self.center_jitter < 0.5:
            raise ConfigError(f"center_jitter must be in [0, 0.5), got {self.center_jitter}")
        for name in ("background_intensity", "myocardium_intensity",
                     "blood_intensity"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if self.noise_std < 0:
            raise ConfigError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.slices_per_case < 1:
            raise ConfigError(f"slices_per_case must be >= 1, got {self.slices_per_case}")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown phantom config keys: {sorted(unknown)}")
        kwargs = dict(d)
        for key in ("inner_radius_range", "thickness_range"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs).validate()


def generate_phantom(rng: RngStream, config: PhantomConfig):
    """One (image, mask) pair. Mask is 1 exactly on the ring r_in < r <= r_out."""
    config.validate()
    s = config.image_size
    jitter = rng.uniform((2,), -config.center_jitter * s,
                         config.center_jitter * s, dtype=np.float64)
    r_lo, r_hi = config.inner_radius_range
    t_lo, t_hi = config.thickness_range
    r_in = float(rng.uniform((1,), r_lo * s, r_hi * s, dtype=np.float64)[0])
    r_out = r_in + float(rng.uniform((1,), t_lo * s, t_hi * s,
                                     dtype=np.float64)[0])
    noise = rng.normal((s, s), 0.0, config.noise_std, dtype=np.float64) \
        if config.noise_std > 0 else np.zeros((s, s))

    cy = (s - 1) / 2.0 + float(jitter[0])
    cx = (s - 1) / 2.0 + float(jitter[1])
    ys, xs = np.meshgrid(np.arange(s, dtype=np.float64),
                         np.arange(s, dtype=np.float64), indexing="ij")
    r = np.sqrt((ys - cy) ** 2 + (xs - cx) ** 2)

    mask = ((r > r_in) & (r <= r_out)).astype(np.float32)
    image = np.full((s, s), config.background_intensity, dtype=np.float64)
    image[r <= r_in] = config.blood_intensity
    image[mask == 1] = config.myocardium_intensity
    image = np.clip(image + noise, 0.0, 1.0).astype(np.float32)
    return image, mask


def generate_phantom_fixed(config: PhantomConfig, center: tuple[float, float],
                           r_in: float, r_out: float):
    """Deterministic phantom with explicit geometry (no jitter, no noise)."""
    s = config.image_size
    cy, cx = center
    ys, xs = np.meshgrid(np.arange(s, dtype=np.float64),
                         np.arange(s, dtype=np.float64), indexing="ij")
    r = np.sqrt((ys - cy) ** 2 + (xs - cx) ** 2)
    mask = ((r > r_in) & (r <= r_out)).astype(np.float32)
    image = np.full((s, s), config.background_intensity, dtype=np.float64)
    image[r <= r_in] = config.blood_intensity
    image[mask == 1] = config.myocardium_intensity
    return image.astype(np.float32), mask


def generate_dataset(n_cases: int, seed: int, out_dir,
                     config: PhantomConfig | None = None) -> Path:
    """Write n_cases of slices_per_case slices each; returns the manifest path."""
    if n_cases < 1:
        raise ConfigError(f"n_cases must be >= 1, got {n_cases}")
    config = (config or PhantomConfig()).validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(n_cases):
        case_id = f"case_{i:04d}"
        case_dir = out_dir / case_id
        case_dir.mkdir(exist_ok=True)
        slices = []
        for j in range(config.slices_per_case):
            stream = derive_stream(seed, i, j)
            image, mask = generate_phantom(stream, config)
            img_rel = f"{case_id}/slice_{j:02d}_image.myovol"
            mask_rel = f"{case_id}/slice_{j:02d}_mask.myovol"
            dataio.write_volume(out_dir / img_rel, image[None])
            dataio.write_volume(out_dir / mask_rel,
                                mask[None].astype(np.uint8))
            slices.append({"image": img_rel, "mask": mask_rel})
        records.append({"case_id": case_id, "seed": seed, "slices": slices})
    manifest = out_dir / "manifest.json"
    with open(manifest, "w", encoding="utf-8") as fh:
        json.dump(records, fh, indent=2)
        fh.write("\n")
    return manifest
