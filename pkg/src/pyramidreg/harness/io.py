"""On-disk formats: volume bundles and parameter checkpoints.

A volume bundle is a JSON header (``<name>.json``) next to a raw file of
little-endian float32 values in ``(C, D, H, W)`` order.  A checkpoint is a
JSON manifest mapping each array path to its shape and element offset in a
single little-endian float32 blob.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..autodiff import ParamStore
from ..grid import Grid3D, LabelMap, LandmarkSet

DTYPE_TAG = "f32le"
_LE32 = np.dtype("<f4")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _header_path(path) -> Path:
    path = Path(path)
    return path if path.suffix == ".json" else path.with_suffix(".json")


@dataclass
class Bundle:
    header: dict
    data: np.ndarray
    path: Path

    @property
    def spacing(self):
        return tuple(self.header["spacing"])

    def grid(self) -> Grid3D:
        return Grid3D(self.data, self.spacing)

    def labelmap(self) -> LabelMap:
        if self.data.shape[0] != 1:
            raise ValueError(f"{self.path}: label bundles have one channel")
        return LabelMap(self.data[0], self.header.get("labels"), self.spacing)

    def landmarks(self) -> LandmarkSet | None:
        ref = self.header.get("landmarks")
        if not ref:
            return None
        return load_landmarks(self.path.parent / ref)


def save_bundle(path, obj, landmarks: str | None = None) -> Path:
    """Write a Grid3D or LabelMap; returns the header path."""
    header_path = _header_path(path)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    raw_path = header_path.with_suffix(".raw")
    if isinstance(obj, LabelMap):
        data = obj.data[None].astype(_LE32)
        extra = {"labels": [int(v) for v in obj.labels]}
    elif isinstance(obj, Grid3D):
        data = obj.data.astype(_LE32)
        extra = {}
    else:
        raise TypeError(f"cannot save {type(obj).__name__} as a bundle")
    header = {
        "channels": int(data.shape[0]),
        "dims": [int(n) for n in data.shape[1:]],
        "spacing": [float(s) for s in obj.spacing],
        "dtype": DTYPE_TAG,
        "raw": raw_path.name,
        "byte_length": int(data.nbytes),
        **extra,
    }
    if landmarks:
        header["landmarks"] = landmarks
    raw_path.write_bytes(np.ascontiguousarray(data).tobytes())
    _write_json(header_path, header)
    return header_path


def load_bundle(path) -> Bundle:
    header_path = _header_path(path)
    header = json.loads(header_path.read_text())
    if header.get("dtype") != DTYPE_TAG:
        raise ValueError(f"{header_path}: unsupported dtype tag {header.get('dtype')!r}")
    raw_path = header_path.parent / header["raw"]
    shape = (int(header["channels"]),) + tuple(int(n) for n in header["dims"])
    expected = int(np.prod(shape)) * 4
    actual = os.path.getsize(raw_path)
    if header.get("byte_length", expected) != expected or actual != expected:
        raise ValueError(f"{raw_path}: expected {expected} bytes, header says "
                         f"{header.get('byte_length')}, file has {actual}")
    data = np.frombuffer(raw_path.read_bytes(), dtype=_LE32).reshape(shape).astype(np.float32)
    return Bundle(header, data, header_path)


def save_landmarks(path, lms: LandmarkSet) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_json(path, {"points": lms.points.tolist(), "spacing": list(lms.spacing)})
    return path


def load_landmarks(path) -> LandmarkSet:
    obj = json.loads(Path(path).read_text())
    return LandmarkSet(np.asarray(obj["points"], float), tuple(obj["spacing"]))


# --- checkpoints --------------------------------------------------------------

def save_checkpoint(path, params: ParamStore, extra_arrays: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> Path:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (float32 blob)."""
    manifest_path = _header_path(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    blob_path = manifest_path.with_suffix(".bin")
    arrays = [(k, n.value) for k, n in params.items()]
    arrays += list((extra_arrays or {}).items())
    entries, chunks, offset = [], [], 0
    for key, arr in arrays:
        arr = np.ascontiguousarray(arr, dtype=_LE32)
        entries.append({"path": key, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    manifest = {
        "format": "param-blob-v1",
        "dtype": DTYPE_TAG,
        "blob": blob_path.name,
        "num_params": len(params),
        "count": offset,
        "entries": entries,
        "meta": meta or {},
    }
    blob_path.write_bytes(b"".join(chunks))
    _write_json(manifest_path, manifest)
    return manifest_path


@dataclass
class Checkpoint:
    params: ParamStore
    extra: dict[str, np.ndarray]
    meta: dict


def load_checkpoint(path) -> Checkpoint:
    manifest_path = _header_path(path)
    manifest = json.loads(manifest_path.read_text())
    blob = np.frombuffer((manifest_path.parent / manifest["blob"]).read_bytes(), dtype=_LE32)
    if blob.size != manifest["count"]:
        raise ValueError(f"{manifest_path}: blob holds {blob.size} values, manifest says {manifest['count']}")
    params = ParamStore()
    extra: dict[str, np.ndarray] = {}
    for i, e in enumerate(manifest["entries"]):
        n = int(np.prod(e["shape"]))
        arr = blob[e["offset"]:e["offset"] + n].reshape(e["shape"]).astype(np.float32)
        if i < manifest["num_params"]:
            params.add(e["path"], arr)
        else:
            extra[e["path"]] = arr
    return Checkpoint(params, extra, manifest.get("meta", {}))
