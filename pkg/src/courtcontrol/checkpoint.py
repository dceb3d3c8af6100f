"""Self-describing binary checkpoints.

Layout: magic `CTRLAREA1\\n`, a little-endian uint64 metadata byte length,
the metadata JSON (grid, encoder layout, model and training config, tensor
manifest), a uint32 tensor count, then per tensor: uint16 name length,
name, uint8 ndim, uint32 dims, float32 little-endian data. Round trips are
bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

MAGIC = b"CTRLAREA1\n"


class CorruptCheckpoint(ValueError):
    pass


class CheckpointMismatch(ValueError):
    """Checkpoint disagrees with the runtime configuration."""


def save_checkpoint(params: dict[str, np.ndarray], metadata: dict, path) -> None:
    meta = dict(metadata)
    meta["tensors"] = [
        {"name": k, "shape": list(np.asarray(v).shape)} for k, v in sorted(params.items())
    ]
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name], dtype="<f4")
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        raw = f.read()
    view = memoryview(raw)
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(raw):
            raise CorruptCheckpoint(f"truncated while reading {what}")
        out = view[off : off + n]
        off += n
        return out

    if bytes(take(len(MAGIC), "magic")) != MAGIC:
        raise CorruptCheckpoint("bad magic bytes")
    (meta_len,) = struct.unpack("<Q", take(8, "metadata length"))
    try:
        meta = json.loads(bytes(take(meta_len, "metadata")).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpoint(f"metadata is not valid JSON: {e}") from None
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "tensor name length"))
        name = bytes(take(name_len, "tensor name")).decode()
        (ndim,) = struct.unpack("<B", take(1, "tensor ndim"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "tensor shape"))
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(take(4 * size, f"tensor {name} data"), dtype="<f4")
        params[name] = data.reshape(shape).copy()
    if off != len(raw):
        raise CorruptCheckpoint(f"{len(raw) - off} trailing bytes")

    manifest = {t["name"]: tuple(t["shape"]) for t in meta.get("tensors", [])}
    if set(manifest) != set(params):
        raise CorruptCheckpoint("tensor names do not match the metadata manifest")
    for name, arr in params.items():
        if tuple(arr.shape) != manifest[name]:
            raise CorruptCheckpoint(
                f"tensor {name}: shape {arr.shape} != manifest {manifest[name]}"
            )
    return params, meta


def checkpoint_id(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:12]
