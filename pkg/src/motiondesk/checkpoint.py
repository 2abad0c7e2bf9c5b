"""Binary checkpoint container: JSON header plus raw float32 buffers.

Layout: 8-byte little-endian header length, the UTF-8 JSON header, then one
little-endian float32 buffer per parameter in header order. The header
carries ``format_version``, the ordered parameter table (name + shape), the
training step, and an arbitrary ``meta`` dict for model configuration.
Round trips are bit-exact: save(load(p)) produces identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Raised for malformed or incompatible checkpoint files."""


@dataclass
class Checkpoint:
    """Ordered named float32 parameters plus metadata."""

    params: dict[str, np.ndarray]
    step: int = 0
    meta: dict = field(default_factory=dict)

    def save(self, path: str | Path) -> None:
        table = []
        buffers = []
        for name, arr in self.params.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            table.append({"name": name, "shape": list(arr.shape)})
            buffers.append(arr.tobytes())
        header = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "dtype": "<f4",
            "step": int(self.step),
            "params": table,
            "meta": self.meta,
        }
        blob = json.dumps(header, separators=(",", ":"), sort_keys=False).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            for buf in buffers:
                fh.write(buf)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        raw = Path(path).read_bytes()
        if len(raw) < 8:
            raise CheckpointError(f"{path}: file too short for a header")
        (hlen,) = struct.unpack("<Q", raw[:8])
        if len(raw) < 8 + hlen:
            raise CheckpointError(f"{path}: truncated header")
        try:
            header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: bad header: {exc}") from exc
        if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported format_version {header.get('format_version')!r}"
            )
        if header.get("dtype") != "<f4":
            raise CheckpointError(f"{path}: unsupported dtype {header.get('dtype')!r}")
        offset = 8 + hlen
        params: dict[str, np.ndarray] = {}
        for entry in header["params"]:
            shape = tuple(int(s) for s in entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            nbytes = count * 4
            if offset + nbytes > len(raw):
                raise CheckpointError(f"{path}: truncated buffer for {entry['name']!r}")
            arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
            params[entry["name"]] = arr.copy()
            offset += nbytes
        if offset != len(raw):
            raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
        return cls(params=params, step=int(header.get("step", 0)), meta=header.get("meta", {}))
