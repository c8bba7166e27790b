"""Versioned binary checkpoint container.

Layout: 8-byte magic, uint32 format version, uint64 header length, a UTF-8
JSON header (configs plus a tensor table of name/dtype/shape/offset), then the
raw little-endian tensor bytes. Output is byte-stable for identical inputs.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from ..sbde import ExpansionSpec, FillScheme
from .net import Model, NetConfig

MAGIC = b"LPCKPT\x00\x01"
VERSION = 1


class CheckpointError(ValueError):
    pass


def spec_to_dict(spec: Optional[ExpansionSpec]) -> Optional[dict]:
    if spec is None:
        return None
    return {"factor": spec.factor, "fill": {"kind": spec.fill.kind, "value": spec.fill.value},
            "channels": spec.channels, "height": spec.height, "width": spec.width}


def spec_from_dict(d: Optional[dict]) -> Optional[ExpansionSpec]:
    if d is None:
        return None
    return ExpansionSpec(int(d["factor"]), FillScheme(d["fill"]["kind"], float(d["fill"]["value"])),
                         int(d["channels"]), int(d["height"]), int(d["width"]))


def save_checkpoint(path, model: Model, spec: Optional[ExpansionSpec], extra: Optional[dict] = None) -> None:
    state = model.state_dict()
    table, blobs, offset = [], [], 0
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        table.append({"name": name, "dtype": arr.dtype.str.lstrip("<>|="), "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format": "landscape-probe-checkpoint",
        "version": VERSION,
        "net_config": model.config.to_dict(),
        "expansion": spec_to_dict(spec),
        "dtype": model.dtype.name,
        "tensors": table,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(hbytes)))
        fh.write(hbytes)
        for raw in blobs:
            fh.write(raw)


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack("<IQ", fh.read(12))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        return json.loads(fh.read(hlen).decode("utf-8"))


def load_checkpoint(path) -> tuple:
    """Returns ``(model, spec, header)``."""
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", raw[len(MAGIC): len(MAGIC) + 12])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = len(MAGIC) + 12
    header = json.loads(raw[start:start + hlen].decode("utf-8"))
    body = memoryview(raw)[start + hlen:]
    state = {}
    for t in header["tensors"]:
        dt = np.dtype(t["dtype"]).newbyteorder("<")
        arr = np.frombuffer(body[t["offset"]:t["offset"] + t["nbytes"]], dtype=dt)
        state[t["name"]] = arr.reshape(t["shape"]).astype(dt.newbyteorder("="))
    model = Model(NetConfig.from_dict(header["net_config"]), seed=0, dtype=np.dtype(header["dtype"]))
    model.load_state_dict(state)
    model.eval()
    return model, spec_from_dict(header["expansion"]), header
