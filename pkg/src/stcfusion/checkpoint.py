"""Single-file checkpoint container.

Layout: ``STCCKPT1`` magic, little-endian u32 format version, u64 header
length, a UTF-8 JSON header (sorted keys) describing metadata and the tensor
table, then the raw little-endian tensor bytes in table order. Loading and
re-saving reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError
from .model import StreamModel

MAGIC = b"STCCKPT1"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")

_DTYPES = {torch.float32: "<f4", torch.float64: "<f8"}


@dataclass
class Checkpoint:
    model: StreamModel
    stream: str
    history: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    state = ckpt.model.state_dict()
    table, blobs, offset = [], [], 0
    for name in sorted(state):
        t = state[name].detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        raw = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
        table.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "stream": ckpt.stream,
        "architecture": ckpt.model.architecture(),
        "seed": ckpt.model.seed,
        "history": ckpt.history,
        "meta": ckpt.meta,
        "tensors": table,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path, stream: str | None = None) -> Checkpoint:
    """Load a checkpoint; with ``stream`` given, reject one trained for another stream."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc
    if len(data) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version} incompatible with {FORMAT_VERSION}")
    start = _PREFIX.size + hlen
    if len(data) < start:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[_PREFIX.size:start])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    if stream is not None and header["stream"] != stream:
        raise CheckpointError(f"{path}: checkpoint is for the {header['stream']} stream, not {stream}")
    expected = start + sum(t["nbytes"] for t in header["tensors"])
    if len(data) != expected:
        raise CheckpointError(f"{path}: expected {expected} bytes, found {len(data)}")
    model = StreamModel.from_architecture(header["architecture"])
    state = {}
    for t in header["tensors"]:
        arr = np.frombuffer(data, dtype=t["dtype"], count=t["nbytes"] // np.dtype(t["dtype"]).itemsize,
                            offset=start + t["offset"]).reshape(t["shape"])
        state[t["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    if any(t.dtype == torch.float64 for t in state.values()):
        model = model.double()
    model.load_state_dict(state)
    return Checkpoint(model, header["stream"], header["history"], header["meta"])
