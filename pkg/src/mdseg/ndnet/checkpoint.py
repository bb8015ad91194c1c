"""MTCKPT1 checkpoint files.

Layout: ``b"MTCKPT1"``, a little-endian u64 header length, a UTF-8 JSON header
(net config, global class list, training step, parameter table), then every
parameter in declaration order as a little-endian float32 blob.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .unet import NetConfig, Network, Parameter

MAGIC = b"MTCKPT1"


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(net: Network, classes: list[dict] | None = None, step: int = 0,
                     extra: dict | None = None) -> bytes:
    header = {
        "net": net.config.to_dict(),
        "classes": classes or [],
        "step": int(step),
        "parameters": [
            {"name": p.name, "shape": list(p.value.shape), "role": p.role,
             "class_index": p.class_index}
            for p in net.parameters
        ],
    }
    if extra:
        header["extra"] = extra
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    blobs = b"".join(np.ascontiguousarray(p.value, dtype="<f4").tobytes() for p in net.parameters)
    return MAGIC + struct.pack("<Q", len(raw)) + raw + blobs


def save_checkpoint(net: Network, path, classes=None, step=0, extra=None) -> Path:
    """Write atomically (temp file, then rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(net, classes, step, extra))
    os.replace(tmp, path)
    return path


def load_checkpoint(path, dtype=np.float32, expected_classes=None) -> tuple[Network, dict]:
    """Read a checkpoint; with ``expected_classes`` the stored class list must match it."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    off = len(MAGIC)
    (n,) = struct.unpack_from("<Q", blob, off)
    off += 8
    header = json.loads(blob[off:off + n])
    off += n
    params = []
    for entry in header["parameters"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) * 4
        if off + size > len(blob):
            raise CheckpointError(f"{path}: truncated parameter data at {entry['name']}")
        value = np.frombuffer(blob, dtype="<f4", count=size // 4, offset=off)
        params.append(Parameter(entry["name"], value.reshape(shape).astype(dtype),
                                entry["role"], entry["class_index"]))
        off += size
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes")
    if expected_classes is not None and header["classes"] != list(expected_classes):
        raise CheckpointError(f"{path}: class list does not match the expected classes")
    net = Network(NetConfig.from_dict(header["net"]), params)
    return net, header


def class_list(manifest) -> list[dict]:
    """Serializable global class list of a manifest."""
    return [{"dataset_id": c.dataset_id, "local_index": c.local_index, "name": c.name}
            for c in manifest.global_classes]
