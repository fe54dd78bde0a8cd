"""Weight checkpoints: a JSON manifest plus one raw little-endian float32 buffer.

``save_weights(path, params)`` writes ``path`` (the manifest) and
``path`` with suffix ``.bin``. The manifest lists every parameter's name,
shape, byte offset and element count in the buffer.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

from ..errors import ConfigurationError

FORMAT = "coopsim-weights/1"
_LE_F32 = np.dtype("<f4")


def _data_path(manifest: Path) -> Path:
    return manifest.with_suffix(".bin")


def save_weights(path, params: Mapping[str, np.ndarray], extra: dict | None = None) -> Path:
    manifest = Path(path)
    manifest.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name, arr in params.items():
        arr = np.asarray(getattr(arr, "data", arr))
        buf = np.ascontiguousarray(arr, dtype=_LE_F32).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(buf)
        offset += len(buf)
    doc = {"format": FORMAT, "dtype": "float32-le", "data_file": _data_path(manifest).name,
           "total_bytes": offset, "params": entries}
    if extra:
        doc["extra"] = extra
    _data_path(manifest).write_bytes(b"".join(chunks))
    manifest.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return manifest


def load_weights(path) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(name -> float32 array, extra metadata)``."""
    manifest = Path(path)
    if not manifest.exists():
        raise ConfigurationError(f"checkpoint not found: {manifest}")
    doc = json.loads(manifest.read_text())
    if doc.get("format") != FORMAT:
        raise ConfigurationError(f"{manifest}: unknown checkpoint format {doc.get('format')!r}")
    raw = (manifest.parent / doc["data_file"]).read_bytes()
    if len(raw) != doc["total_bytes"]:
        raise ConfigurationError(f"{manifest}: buffer has {len(raw)} bytes, expected {doc['total_bytes']}")
    out = {}
    for e in doc["params"]:
        arr = np.frombuffer(raw, dtype=_LE_F32, count=e["count"], offset=e["offset"])
        out[e["name"]] = arr.astype(np.float32).reshape(e["shape"])
    return out, doc.get("extra", {})
