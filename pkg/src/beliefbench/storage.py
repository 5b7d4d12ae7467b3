"""Bit-deterministic array container used for datasets, checkpoints, reports.

Layout: a standard uncompressed zip whose entries are ``<name>.npy`` arrays
plus one ``manifest.json``.  Entry timestamps are pinned so that writing the
same content twice yields byte-identical files, and writes go through a
temporary file with an atomic rename so partial files are never left behind.
"""

from __future__ import annotations

import io
import json
import os
import zipfile
from pathlib import Path
from typing import Mapping

import numpy as np

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)
_MANIFEST = "manifest.json"


class StorageError(RuntimeError):
    """Corrupt payload, version mismatch, or malformed container."""


def save_arrays(path: str | Path, arrays: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named arrays plus a JSON manifest; atomic and deterministic."""
    path = Path(path)
    manifest = dict(meta or {})
    manifest["format_version"] = FORMAT_VERSION
    manifest["array_names"] = list(arrays.keys())
    tmp = path.with_name(path.name + ".tmp")
    try:
        with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
            for name, arr in arrays.items():
                buf = io.BytesIO()
                # ascontiguousarray would silently promote 0-d arrays to 1-d
                np.lib.format.write_array(buf, np.asarray(arr, order="C"), version=(1, 0))
                zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=_EPOCH), buf.getvalue())
            payload = json.dumps(manifest, sort_keys=True, default=_json_default)
            zf.writestr(zipfile.ZipInfo(_MANIFEST, date_time=_EPOCH), payload)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Load every array and the manifest, verifying the format version."""
    path = Path(path)
    if not path.exists():
        raise StorageError(f"no such file: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            names = zf.namelist()
            if _MANIFEST not in names:
                raise StorageError(f"{path}: missing manifest")
            meta = json.loads(zf.read(_MANIFEST).decode())
            if meta.get("format_version") != FORMAT_VERSION:
                raise StorageError(
                    f"{path}: format version {meta.get('format_version')!r}, expected {FORMAT_VERSION}"
                )
            arrays: dict[str, np.ndarray] = {}
            for name in names:
                if name == _MANIFEST:
                    continue
                arrays[name.removesuffix(".npy")] = np.lib.format.read_array(
                    io.BytesIO(zf.read(name)), allow_pickle=False
                )
    except (zipfile.BadZipFile, json.JSONDecodeError, ValueError, KeyError, EOFError) as exc:
        raise StorageError(f"{path}: corrupt payload ({exc})") from exc
    return arrays, meta


def load_manifest(path: str | Path) -> dict:
    try:
        with zipfile.ZipFile(Path(path)) as zf:
            return json.loads(zf.read(_MANIFEST).decode())
    except (zipfile.BadZipFile, json.JSONDecodeError, KeyError, FileNotFoundError) as exc:
        raise StorageError(f"{path}: corrupt payload ({exc})") from exc


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")
