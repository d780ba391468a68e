"""Bit-exact file formats: volumes, dataset manifests, PGM/PPM exports.

Volume file layout:
    uint32 little-endian header length
    UTF-8 JSON header {"magic": "MYOVOL01", "dims": [W, H, slices],
                       "spacing": [sx, sy, sz], "dtype": "f32"|"u8"}
    raw little-endian payload, slice-major then row-major

Readers never guess: a wrong magic tag, an unknown dtype, or a payload
that does not match the declared dims each raise their own error type.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (BadMagicError, DataError, FormatError, ParameterError,
                     ShapeError, TruncatedFileError)

VOLUME_MAGIC = "MYOVOL01"
DEFAULT_SPACING = (1.36, 1.36, 1.0)

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


@dataclass
class VolumeHeader:
    magic: str
    dims: tuple[int, int, int]  # (W, H, slices)
    spacing: tuple[float, float, float]
    dtype: str


def _dtype_tag(array: np.ndarray) -> str:
    if array.dtype == np.float32:
        return "f32"
    if array.dtype == np.uint8:
        return "u8"
    raise ParameterError(
        f"volumes store float32 or uint8, got dtype {array.dtype}")


def write_volume(path, volume: np.ndarray,
                 spacing: tuple[float, float, float] = DEFAULT_SPACING) -> None:
    """Write a (slices, H, W) array; dtype tag taken from the array."""
    if volume.ndim != 3:
        raise ShapeError(f"expected (slices, H, W), got shape {volume.shape}")
    tag = _dtype_tag(volume)
    s, h, w = volume.shape
    header = {"magic": VOLUME_MAGIC, "dims": [w, h, s],
              "spacing": list(spacing), "dtype": tag}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(len(blob).to_bytes(4, "little"))
        fh.write(blob)
        fh.write(np.ascontiguousarray(volume, dtype=_DTYPES[tag]).tobytes())


def read_volume(path):
    """Exact inverse of write_volume -> (array (slices, H, W), VolumeHeader)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: shorter than the length prefix")
    n = int.from_bytes(raw[:4], "little")
    if len(raw) < 4 + n:
        raise TruncatedFileError(f"{path}: header truncated")
    try:
        header = json.loads(raw[4:4 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: unparseable header ({e})") from e
    if not isinstance(header, dict) or header.get("magic") != VOLUME_MAGIC:
        raise BadMagicError(
            f"{path}: magic {header.get('magic')!r} != {VOLUME_MAGIC!r}")
    tag = header.get("dtype")
    if tag not in _DTYPES:
        raise FormatError(f"{path}: unknown dtype tag {tag!r}")
    dims = header.get("dims")
    if (not isinstance(dims, list) or len(dims) != 3
            or any(not isinstance(d, int) or d < 1 for d in dims)):
        raise FormatError(f"{path}: bad dims {dims!r}")
    w, h, s = dims
    expected = w * h * s * _DTYPES[tag].itemsize
    payload = raw[4 + n:]
    if len(payload) < expected:
        raise TruncatedFileError(
            f"{path}: payload has {len(payload)} bytes, expected {expected}")
    if len(payload) > expected:
        raise FormatError(
            f"{path}: payload has {len(payload)} bytes, dims declare {expected}")
    array = np.frombuffer(payload, dtype=_DTYPES[tag]).reshape(s, h, w)
    spacing = tuple(float(x) for x in header.get("spacing", DEFAULT_SPACING))
    return array.copy(), VolumeHeader(magic=VOLUME_MAGIC, dims=(w, h, s),
                                      spacing=spacing, dtype=tag)


def write_pgm(path, image: np.ndarray) -> None:
    """Binary PGM (P5, maxval 255) from a [0, 1] grayscale image."""
    if image.ndim != 2:
        raise ShapeError(f"expected (H, W), got shape {image.shape}")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ParameterError("PGM export needs values in [0, 1]")
    h, w = image.shape
    data = np.rint(image.astype(np.float64) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


AGREE_TINT = np.array([255, 220, 90], dtype=np.float64)     # warm
DISAGREE_TINT = np.array([235, 80, 210], dtype=np.float64)  # magenta


def write_overlay(path, image: np.ndarray, truth: np.ndarray,
                  pred: np.ndarray) -> None:
    """Color PPM: grayscale base, overlap tinted warm, mismatch magenta.

    Overlap = pixels where truth and prediction are both foreground;
    mismatch = their symmetric difference. Tints are a 50/50 blend with
    the underlying gray value.
    """
    if image.shape != truth.shape or image.shape != pred.shape:
        raise ShapeError(
            f"shape mismatch: image {image.shape}, truth {truth.shape}, "
            f"pred {pred.shape}")
    gray = np.clip(np.rint(image.astype(np.float64) * 255.0), 0, 255)
    rgb = np.repeat(gray[:, :, None], 3, axis=2)
    agree = (truth == 1) & (pred == 1)
    disagree = (truth == 1) ^ (pred == 1)
    rgb[agree] = np.rint((rgb[agree] + AGREE_TINT) / 2.0)
    rgb[disagree] = np.rint((rgb[disagree] + DISAGREE_TINT) / 2.0)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# dataset manifests

@dataclass
class Case:
    case_id: str
    images: np.ndarray        # (slices, H, W) float32
    masks: np.ndarray | None  # (slices, H, W) binary float32


def read_manifest(path) -> list[dict]:
    """JSON list of case records: {case_id, seed, slices: [{image, mask}]}."""
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            records = json.load(fh)
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid manifest JSON ({e})") from e
    if not isinstance(records, list) or not records:
        raise DataError(f"{path}: manifest must be a non-empty JSON list")
    for rec in records:
        if not isinstance(rec, dict) or "case_id" not in rec or "slices" not in rec:
            raise FormatError(f"{path}: malformed case record {rec!r}")
    return records


def load_cases(manifest_path) -> list[Case]:
    """Read every slice of every case into memory.

    Mask volumes are converted to binary float32. Cases whose records
    carry no mask paths get masks=None.
    """
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    cases = []
    for rec in read_manifest(manifest_path):
        images, masks = [], []
        has_masks = True
        for sl in rec["slices"]:
            vol, _ = read_volume(base / sl["image"])
            if vol.shape[0] != 1:
                raise DataError(
                    f"{sl['image']}: expected a single-slice volume")
            images.append(vol[0].astype(np.float32))
            if sl.get("mask"):
                mvol, _ = read_volume(base / sl["mask"])
                masks.append(mvol[0].astype(np.float32))
            else:
                has_masks = False
        cases.append(Case(
            case_id=str(rec["case_id"]),
            images=np.stack(images),
            masks=np.stack(masks) if has_masks else None))
    return cases
