"""Portable tensor files and checkpoint containers.

Tensor file layout (all little-endian)::

    b"FTNS" | version u16 | rank u32 | dims u64 * rank | float32 payload

A checkpoint is an uncompressed zip holding ``manifest.json`` plus one tensor
file per entry.  Zip timestamps are pinned so identical contents give
identical bytes.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
import zipfile
from pathlib import Path

import numpy as np

MAGIC = b"FTNS"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class FormatError(ValueError):
    pass


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    head = MAGIC + struct.pack("<HI", VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise FormatError("bad magic, not a tensor file")
    version, rank = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported tensor file version {version}")
    off = 10
    dims = struct.unpack_from(f"<{rank}Q", buf, off)
    off += 8 * rank
    count = int(np.prod(dims)) if rank else 1
    payload = buf[off:]
    if len(payload) != 4 * count:
        raise FormatError(f"payload has {len(payload)} bytes, expected {4 * count} for dims {dims}")
    return np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(dims)


def save_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> str:
    """Write ``tensors`` to ``path``; returns the sha256 of the written file."""
    names = sorted(tensors)
    manifest = {
        "format": "fewshape-checkpoint",
        "version": VERSION,
        "entries": [{"name": n, "file": f"t{i:04d}.ftns", "shape": list(np.shape(tensors[n]))}
                    for i, n in enumerate(names)],
        "meta": meta or {},
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("manifest.json", _EPOCH), json.dumps(manifest, sort_keys=True, indent=1))
        for entry in manifest["entries"]:
            zf.writestr(zipfile.ZipInfo(entry["file"], _EPOCH), tensor_to_bytes(tensors[entry["name"]]))
    data = buf.getvalue()
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        tensors = {}
        for entry in manifest["entries"]:
            arr = tensor_from_bytes(zf.read(entry["file"]))
            tensors[entry["name"]] = arr.reshape(entry["shape"])
    return tensors, manifest.get("meta", {})


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
