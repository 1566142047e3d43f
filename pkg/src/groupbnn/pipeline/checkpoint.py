"""Self-describing binary checkpoints.

Layout::

    b"GBNNCKPT"              8-byte magic
    version                  uint32, little-endian
    header length            uint64, little-endian
    header                   UTF-8 JSON (sorted keys)
    payload                  raw little-endian arrays, in header order

The header lists every array with its dtype, shape, offset and size, plus a
CRC-32 of the payload. Serialization is byte-stable: the same state always
produces the same file.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from groupbnn.architecture import NetworkConfig
from groupbnn.pipeline.data import DataError
from groupbnn.training_engine import Parameter

MAGIC = b"GBNNCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(DataError):
    pass


@dataclass
class Checkpoint:
    kind: str  # "supernet" or "model"
    network: NetworkConfig
    params: dict[str, Parameter]
    buffers: dict[str, np.ndarray]
    groups: tuple[int, ...] | None = None
    rng_states: dict[str, dict] = field(default_factory=dict)
    step: int = 0
    epoch: int = 0
    train: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("supernet", "model"):
            raise ValueError(f"unknown checkpoint kind {self.kind!r}")
        if self.kind == "model" and self.groups is None:
            raise ValueError("model checkpoints need a group vector")


def _arrays(ckpt: Checkpoint):
    for name in sorted(ckpt.params):
        p = ckpt.params[name]
        for part in ("value", "m", "v"):
            yield f"param/{name}/{part}", getattr(p, part)
    for name in sorted(ckpt.buffers):
        yield f"buffer/{name}", ckpt.buffers[name]


def serialize(ckpt: Checkpoint) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in _arrays(ckpt):
        arr = np.asarray(arr)
        le = arr.dtype.newbyteorder("<")
        data = np.ascontiguousarray(arr, dtype=le).tobytes()
        entries.append({"name": name, "dtype": le.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    header = {
        "kind": ckpt.kind,
        "network": ckpt.network.to_dict(),
        "groups": None if ckpt.groups is None else list(ckpt.groups),
        "params": {name: {"step": p.step, "sparse": p.sparse} for name, p in sorted(ckpt.params.items())},
        "rng_states": ckpt.rng_states,
        "step": ckpt.step,
        "epoch": ckpt.epoch,
        "train": ckpt.train,
        "meta": ckpt.meta,
        "arrays": entries,
        "payload_crc32": zlib.crc32(payload),
        "payload_bytes": len(payload),
    }
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=True).encode()
    return _PREFIX.pack(MAGIC, VERSION, len(hdr)) + hdr + payload


def deserialize(raw: bytes, path=None) -> Checkpoint:
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"file too short for a checkpoint ({len(raw)} bytes)", path, 0)
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}", path, 0)
    if version != VERSION:
        raise CheckpointError(f"unsupported format version {version} (expected {VERSION})", path, 8)
    start = _PREFIX.size
    if len(raw) < start + hlen:
        raise CheckpointError(f"header needs {hlen} bytes, file ends early", path, len(raw))
    try:
        header = json.loads(raw[start:start + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}", path, start) from exc
    payload = raw[start + hlen:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(f"payload is {len(payload)} bytes, header says {header['payload_bytes']}",
                              path, start + hlen + min(len(payload), header["payload_bytes"]))
    if zlib.crc32(payload) != header["payload_crc32"]:
        raise CheckpointError("payload checksum mismatch", path, start + hlen)
    arrays = {}
    for e in header["arrays"]:
        arr = np.frombuffer(payload, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.dtype(e["dtype"]).newbyteorder("="))
    params = {}
    for name, info in header["params"].items():
        params[name] = Parameter(arrays[f"param/{name}/value"], m=arrays[f"param/{name}/m"].copy(),
                                 v=arrays[f"param/{name}/v"].copy(), step=info["step"],
                                 sparse=info["sparse"])
    buffers = {e["name"][len("buffer/"):]: arrays[e["name"]].copy()
               for e in header["arrays"] if e["name"].startswith("buffer/")}
    return Checkpoint(
        kind=header["kind"],
        network=NetworkConfig.from_dict(header["network"]),
        params=params,
        buffers=buffers,
        groups=None if header["groups"] is None else tuple(header["groups"]),
        rng_states=header["rng_states"],
        step=header["step"],
        epoch=header["epoch"],
        train=header["train"],
        meta=header["meta"],
    )


def save_checkpoint(path, ckpt: Checkpoint):
    """Write atomically: a crash never leaves a half-written checkpoint behind."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(serialize(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError("checkpoint not found", path) from exc
    return deserialize(raw, path)
