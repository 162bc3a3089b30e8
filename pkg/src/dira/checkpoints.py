"""Checkpoint directory format.

A checkpoint is a directory holding ``manifest.json`` plus one raw binary
file per named array.  Arrays are stored as little-endian IEEE-754 float32
in row-major order; the manifest records name, shape, storage dtype, the
original dtype (integer state such as step counters rides along as exact
small floats), and arbitrary JSON metadata (epoch, stage, config hash, RNG
state, ...).  Round trips are bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import shutil
from pathlib import Path

import numpy as np

FORMAT_VERSION = "1"

# float32 represents every integer of magnitude <= 2^24 exactly; integer
# state beyond that would silently corrupt, so refuse it at save time.
_MAX_EXACT_INT = 2 ** 24


def _array_filename(name: str) -> str:
    safe = name.replace("/", "_")
    return f"{safe}.bin"


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], metadata: dict) -> Path:
    """Write arrays + metadata to ``path`` (replacing any existing checkpoint
    there).  The write goes to a sibling temp directory first so a crash
    cannot leave a half-written checkpoint under the final name."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)

    entries = []
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        orig_dtype = str(arr.dtype)
        if np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.bool_:
            if arr.size and np.abs(arr.astype(np.int64)).max() > _MAX_EXACT_INT:
                raise ValueError(f"integer array {name!r} exceeds exact float32 range")
            data = arr.astype(np.float32)
        elif arr.dtype == np.float64:
            data = arr.astype(np.float32)
        elif arr.dtype == np.float32:
            data = arr
        else:
            raise ValueError(f"unsupported dtype {arr.dtype} for array {name!r}")
        data = np.ascontiguousarray(data, dtype="<f4")
        fname = _array_filename(name)
        (tmp / fname).write_bytes(data.tobytes(order="C"))
        entries.append({
            "name": name,
            "shape": [int(s) for s in arr.shape],
            "dtype": "float32",
            "orig_dtype": orig_dtype,
            "file": fname,
        })

    manifest = {"format_version": FORMAT_VERSION, "arrays": entries, "metadata": metadata}
    (tmp / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")

    if path.exists():
        shutil.rmtree(path)
    tmp.rename(path)
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint directory back into ``(arrays, metadata)``.  Arrays
    come back in their original dtype; float64 state was stored at float32
    precision and returns as float32 values widened to float64."""
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format_version')!r}")

    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["arrays"]:
        raw = (path / entry["file"]).read_bytes()
        shape = tuple(entry["shape"])
        flat = np.frombuffer(raw, dtype="<f4")
        expected = int(np.prod(shape)) if shape else 1
        if flat.size != expected:
            raise ValueError(f"array {entry['name']!r}: file holds {flat.size} values, "
                             f"shape {shape} needs {expected}")
        arr = flat.reshape(shape).astype(np.float32)
        orig = entry.get("orig_dtype", "float32")
        if orig != "float32":
            arr = arr.astype(orig)
        arrays[entry["name"]] = arr
    return arrays, manifest["metadata"]


def config_hash(config_dict: dict) -> str:
    """Stable short hash of a JSON-serializable config."""
    blob = json.dumps(config_dict, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]
