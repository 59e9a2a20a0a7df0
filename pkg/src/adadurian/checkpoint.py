"""ADCKPT1 checkpoint container.

Layout: magic ``ADCKPT1``, u32 little-endian header length, UTF-8 JSON header,
then raw little-endian float32 tensor payloads in header order.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .neural import GROUP_NAMES, group_of

MAGIC = b"ADCKPT1"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    tensors: Dict[str, np.ndarray]
    step: int = 0
    valid_loss: Optional[float] = None
    seed: int = 0
    threads: int = 1
    meta: dict = field(default_factory=dict)

    def group_names(self) -> Dict[str, List[str]]:
        groups = {g: [] for g in GROUP_NAMES}
        for name in self.tensors:
            groups.setdefault(group_of(name), []).append(name)
        return groups

    def header(self) -> dict:
        loss = self.valid_loss
        if loss is not None and not math.isfinite(loss):
            loss = None
        return {
            "config": self.config,
            "groups": self.group_names(),
            "tensors": [{"name": n, "shape": list(t.shape), "dtype": "float32"}
                        for n, t in self.tensors.items()],
            "step": self.step,
            "valid_loss": loss,
            "seed": self.seed,
            "threads": self.threads,
            "meta": self.meta,
        }

    def to_bytes(self) -> bytes:
        head = json.dumps(self.header(), sort_keys=True, separators=(",", ":")).encode("utf-8")
        parts = [MAGIC, struct.pack("<I", len(head)), head]
        for t in self.tensors.values():
            parts.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:len(MAGIC)] != MAGIC:
            raise CheckpointError("not an ADCKPT1 checkpoint")
        pos = len(MAGIC)
        (n,) = struct.unpack("<I", data[pos:pos + 4])
        pos += 4
        header = json.loads(data[pos:pos + n].decode("utf-8"))
        pos += n
        tensors = {}
        for spec in header["tensors"]:
            count = int(np.prod(spec["shape"])) if spec["shape"] else 1
            nbytes = 4 * count
            if pos + nbytes > len(data):
                raise CheckpointError(f"truncated payload for {spec['name']}")
            arr = np.frombuffer(data[pos:pos + nbytes], dtype="<f4").reshape(spec["shape"])
            tensors[spec["name"]] = arr.astype(np.float32)
            pos += nbytes
        if pos != len(data):
            raise CheckpointError("trailing bytes after tensor payloads")
        return cls(header["config"], tensors, header["step"], header["valid_loss"],
                   header["seed"], header["threads"], header.get("meta", {}))


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(ckpt.to_bytes())
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    return Checkpoint.from_bytes(path.read_bytes())
