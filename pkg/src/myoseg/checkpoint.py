"""Checkpoint serialization.

File layout:
    magic bytes b"MYOSEG01"
    uint32 little-endian header length
    UTF-8 JSON header: version, network config, epoch, global seed,
        channel order, optional Adam hyperparameters/step, and a tensor
        directory of {name, shape, offset} entries
    raw little-endian float32 payloads, concatenated in directory order

Save -> load -> save is byte-identical; the reader distinguishes bad
magic, version mismatch, header corruption, and truncation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (BadMagicError, FormatError, TruncatedFileError,
                     VersionError)
from .model import Network, NetworkConfig, build_unet
from .optim import AdamState, init_adam
from .tensor import RngStream

MAGIC = b"MYOSEG01"
VERSION = 1
CHANNEL_ORDER = ["myocardium", "background"]


@dataclass
class Checkpoint:
    config: NetworkConfig
    network: Network
    adam: AdamState | None
    epoch: int
    global_seed: int


def _tensor_entries(net: Network, adam: AdamState | None):
    entries = list(net.named_params()) + list(net.named_buffers())
    if adam is not None:
        names = [n for n, _ in net.named_params()]
        entries += [(f"adam.m.{n}", adam.m[n]) for n in names]
        entries += [(f"adam.v.{n}", adam.v[n]) for n in names]
    return entries


def save_checkpoint(path, net: Network, adam: AdamState | None = None,
                    epoch: int = 0, global_seed: int = 0) -> None:
    entries = _tensor_entries(net, adam)
    directory = []
    offset = 0
    blobs = []
    for name, arr in entries:
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append({"name": name, "shape": list(arr.shape),
                          "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "version": VERSION,
        "config": net.config.to_dict(),
        "epoch": int(epoch),
        "global_seed": int(global_seed),
        "channel_order": CHANNEL_ORDER,
        "adam": None if adam is None else {
            "lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2,
            "eps": adam.eps, "t": adam.t,
        },
        "tensors": directory,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(blob).to_bytes(4, "little"))
        fh.write(blob)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC):
        raise TruncatedFileError(f"{path}: shorter than the magic prefix")
    if raw[:len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path}: magic {raw[:len(MAGIC)]!r} != {MAGIC!r}")
    pos = len(MAGIC)
    if len(raw) < pos + 4:
        raise TruncatedFileError(f"{path}: missing header length")
    n = int.from_bytes(raw[pos:pos + 4], "little")
    pos += 4
    if len(raw) < pos + n:
        raise TruncatedFileError(f"{path}: header truncated")
    try:
        header = json.loads(raw[pos:pos + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: corrupt header ({e})") from e
    if header.get("version") != VERSION:
        raise VersionError(
            f"{path}: version {header.get('version')!r}, expected {VERSION}")
    pos += n

    config = NetworkConfig.from_dict(header["config"])
    net = build_unet(config, RngStream(0))
    adam_hdr = header.get("adam")
    adam = None
    if adam_hdr is not None:
        adam = init_adam(net.named_params(), lr=adam_hdr["lr"],
                         beta1=adam_hdr["beta1"], beta2=adam_hdr["beta2"],
                         eps=adam_hdr["eps"])
        adam.t = int(adam_hdr["t"])

    targets = dict(net.named_params() + net.named_buffers())
    if adam is not None:
        targets.update({f"adam.m.{k}": v for k, v in adam.m.items()})
        targets.update({f"adam.v.{k}": v for k, v in adam.v.items()})

    payload = raw[pos:]
    seen = set()
    for entry in header["tensors"]:
        name = entry["name"]
        if name not in targets:
            raise FormatError(f"{path}: unexpected tensor {name!r}")
        target = targets[name]
        if list(target.shape) != entry["shape"]:
            raise FormatError(
                f"{path}: tensor {name!r} has shape {entry['shape']}, "
                f"expected {list(target.shape)}")
        nbytes = int(np.prod(entry["shape"])) * 4
        start = entry["offset"]
        if start + nbytes > len(payload):
            raise TruncatedFileError(
                f"{path}: payload truncated at tensor {name!r}")
        target[...] = np.frombuffer(
            payload[start:start + nbytes], dtype="<f4").reshape(target.shape)
        seen.add(name)
    missing = set(targets) - seen
    if missing:
        raise FormatError(f"{path}: missing tensors {sorted(missing)[:4]}...")
    return Checkpoint(config=config, network=net, adam=adam,
                      epoch=int(header["epoch"]),
                      global_seed=int(header["global_seed"]))
