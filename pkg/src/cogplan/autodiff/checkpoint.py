"""Flat parameter archive: a zip holding ``manifest.json`` and one raw
little-endian float64 blob per tensor. Entries carry a fixed timestamp so
identical parameters give identical bytes."""

from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np

from ..exceptions import ConfigError

FORMAT_VERSION = "cogplan-ckpt/1"
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _write(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_archive(path, tensors: dict[str, np.ndarray], frozen: dict[str, bool] | None = None,
                 seed: int | None = None, metadata: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frozen = frozen or {}
    entries = []
    for name in tensors:
        arr = np.asarray(tensors[name], dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape), "frozen": bool(frozen.get(name, False))})
    manifest = {"format": FORMAT_VERSION, "seed": seed, "tensors": entries, "metadata": metadata or {}}
    with zipfile.ZipFile(path, "w") as zf:
        _write(zf, "manifest.json", json.dumps(manifest, indent=2, sort_keys=True).encode())
        for name, arr in tensors.items():
            blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            _write(zf, f"tensors/{name}.f64", blob)
    return path


def load_archive(path) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(tensors, manifest)``."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != FORMAT_VERSION:
            raise ConfigError(f"unsupported checkpoint format {manifest.get('format')!r}")
        tensors = {}
        for entry in manifest["tensors"]:
            raw = zf.read(f"tensors/{entry['name']}.f64")
            tensors[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).copy()
    return tensors, manifest
