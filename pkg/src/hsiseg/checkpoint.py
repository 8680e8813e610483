"""Model checkpoints: a JSON manifest next to a raw parameter blob.

The manifest records tensor names, shapes and byte offsets plus arbitrary
metadata (config, epoch, rng state); the blob is the concatenation of all
tensors as little-endian float32. Both files are written atomically via a
rename so a crashed run never leaves a half-written checkpoint behind.
"""

import json
import os
from pathlib import Path

import numpy as np

from .errors import FormatError

CHECKPOINT_VERSION = 1


def _atomic_write(path: Path, payload: bytes):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def save_checkpoint(path, tensors: dict, metadata: dict | None = None) -> None:
    """Write ``<path>.json`` + ``<path>.bin`` for a name->array mapping.

    Tensor objects are accepted as values; everything is stored as f32.
    """
    path = Path(path)
    entries = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        value = tensors[name]
        array = np.ascontiguousarray(
            getattr(value, "values", value), dtype=np.dtype("<f4")
        )
        entries.append({"name": name, "shape": list(array.shape), "offset": offset})
        chunks.append(array.tobytes())
        offset += array.nbytes
    manifest = {
        "version": CHECKPOINT_VERSION,
        "dtype": "<f4",
        "total_bytes": offset,
        "tensors": entries,
        "metadata": metadata or {},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(path.with_suffix(".bin"), b"".join(chunks))
    _atomic_write(
        path.with_suffix(".json"),
        json.dumps(manifest, indent=2, sort_keys=True).encode(),
    )


def load_checkpoint(path) -> tuple[dict, dict]:
    """Read a checkpoint back as ``(name->float32 array, metadata)``."""
    path = Path(path)
    manifest_path = path.with_suffix(".json")
    blob_path = path.with_suffix(".bin")
    if not manifest_path.exists():
        raise FormatError(f"checkpoint manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"checkpoint manifest is not valid JSON: {exc}") from exc
    version = manifest.get("version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version!r}")
    blob = blob_path.read_bytes()
    if len(blob) != manifest.get("total_bytes"):
        raise FormatError(
            f"checkpoint blob is {len(blob)} bytes, manifest expects "
            f"{manifest.get('total_bytes')}"
        )
    tensors = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = entry["offset"]
        stop = start + 4 * count
        if stop > len(blob):
            raise FormatError(f"tensor {entry['name']!r} overruns blob", offset=start)
        array = np.frombuffer(blob, dtype="<f4", count=count, offset=start)
        tensors[entry["name"]] = array.reshape(shape).astype(np.float32)
    return tensors, manifest.get("metadata", {})
