"""Checkpoint files: a versioned text manifest ``<name>.mfst`` plus a raw blob ``<name>.bin``.

Manifest layout, one record per line::

    sarmae-checkpoint 1
    kind <mae|encoder|detector>
    step <int>
    config <json>
    rng <json|null>
    provenance <json|null>
    tensors <count>
    tensor <name> f32 <d0,d1,...> <byte offset> <byte length>

The blob is the concatenation of every tensor as little-endian float32, in
manifest order.
"""
from __future__ import annotations

import hashlib
import json
import os
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CheckpointError

MAGIC = "sarmae-checkpoint"
FORMAT_VERSION = 1
_LE_F32 = np.dtype("<f4")


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def stem(path) -> Path:
    p = Path(path)
    if p.suffix in (".mfst", ".bin"):
        p = p.with_suffix("")
    return p


@dataclass
class Checkpoint:
    kind: str
    config: dict
    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    step: int = 0
    rng_state: Optional[dict] = None
    provenance: Optional[dict] = None

    def manifest_and_blob(self) -> tuple[bytes, bytes]:
        lines = [f"{MAGIC} {FORMAT_VERSION}", f"kind {self.kind}", f"step {int(self.step)}",
                 f"config {_dumps(self.config)}", f"rng {_dumps(self.rng_state)}",
                 f"provenance {_dumps(self.provenance)}", f"tensors {len(self.tensors)}"]
        chunks, offset = [], 0
        for name, arr in self.tensors.items():
            if any(c.isspace() for c in name):
                raise CheckpointError(f"tensor name {name!r} contains whitespace")
            raw = np.ascontiguousarray(arr, dtype=_LE_F32).tobytes()
            shape = ",".join(str(int(d)) for d in np.shape(arr))
            lines.append(f"tensor {name} f32 {shape} {offset} {len(raw)}")
            chunks.append(raw)
            offset += len(raw)
        return ("\n".join(lines) + "\n").encode("utf-8"), b"".join(chunks)

    def digest(self) -> str:
        manifest, blob = self.manifest_and_blob()
        return hashlib.sha256(manifest + blob).hexdigest()

    def save(self, path) -> Path:
        base = stem(path)
        base.parent.mkdir(parents=True, exist_ok=True)
        manifest, blob = self.manifest_and_blob()
        # blob first, manifest last: a readable manifest implies a complete blob
        for suffix, payload in ((".bin", blob), (".mfst", manifest)):
            tmp = base.with_suffix(suffix + ".tmp")
            tmp.write_bytes(payload)
            os.replace(tmp, base.with_suffix(suffix))
        return base

    @classmethod
    def load(cls, path) -> "Checkpoint":
        base = stem(path)
        mpath, bpath = base.with_suffix(".mfst"), base.with_suffix(".bin")
        try:
            text = mpath.read_text(encoding="utf-8")
            blob = bpath.read_bytes()
        except OSError as exc:
            raise CheckpointError(f"cannot read checkpoint {base}: {exc}") from exc
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        try:
            magic, version = lines[0].split(" ")
            if magic != MAGIC:
                raise CheckpointError(f"{mpath}: not a checkpoint manifest")
            if int(version) != FORMAT_VERSION:
                raise CheckpointError(f"{mpath}: unsupported format version {version}")
            header = {}
            for line in lines[1:7]:
                key, _, value = line.partition(" ")
                header[key] = value
            count = int(header["tensors"])
            tensors = OrderedDict()
            for line in lines[7:]:
                tag, name, dtype, shape, offset, nbytes = line.split(" ")
                if tag != "tensor" or dtype != "f32":
                    raise CheckpointError(f"{mpath}: bad tensor record {line!r}")
                dims = tuple(int(d) for d in shape.split(",")) if shape else ()
                offset, nbytes = int(offset), int(nbytes)
                if nbytes != 4 * int(np.prod(dims, dtype=np.int64)) or offset + nbytes > len(blob):
                    raise CheckpointError(f"{mpath}: tensor {name} has inconsistent byte length")
                arr = np.frombuffer(blob, dtype=_LE_F32, count=nbytes // 4, offset=offset)
                tensors[name] = arr.reshape(dims).astype(np.float32)
            if len(tensors) != count:
                raise CheckpointError(f"{mpath}: manifest lists {len(tensors)} tensors, header says {count}")
            return cls(kind=header["kind"], config=json.loads(header["config"]), tensors=tensors,
                       step=int(header["step"]), rng_state=json.loads(header["rng"]),
                       provenance=json.loads(header["provenance"]))
        except CheckpointError:
            raise
        except (ValueError, KeyError, IndexError) as exc:
            raise CheckpointError(f"{mpath}: malformed manifest ({exc})") from exc
