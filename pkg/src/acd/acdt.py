"""ACDT tensor files and checkpoint directories.

File layout: magic ``ACDT``, u32 version=1, u32 ndim, ndim x u32 extents,
then the float32 little-endian payload in row-major order. This is the
only on-disk tensor format; checkpoints are directories of ACDT files
plus a ``params.idx`` manifest with one ``name<TAB>file<TAB>shape`` line
per parameter.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"ACDT"
VERSION = 1
MANIFEST = "params.idx"


def save_acdt(path, arr: np.ndarray):
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.astype("<f4").tobytes())


def load_acdt(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        version, ndim = struct.unpack("<II", f.read(8))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        payload = f.read(4 * count)
        if len(payload) != 4 * count:
            raise ValueError(f"{path}: truncated payload, expected {4 * count} bytes")
        extra = f.read(1)
        if extra:
            raise ValueError(f"{path}: trailing bytes after payload")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def save_params(ckpt_dir, params: dict[str, np.ndarray]):
    """Write one ACDT file per named tensor plus the params.idx manifest."""
    ckpt = Path(ckpt_dir)
    ckpt.mkdir(parents=True, exist_ok=True)
    lines = []
    for name in sorted(params):
        arr = np.asarray(params[name])
        fname = f"{name}.acdt"
        save_acdt(ckpt / fname, arr)
        shape_txt = "x".join(str(n) for n in arr.shape) or "scalar"
        lines.append(f"{name}\t{fname}\t{shape_txt}")
    (ckpt / MANIFEST).write_text("\n".join(lines) + "\n")


def load_params(ckpt_dir, names: list[str] | None = None) -> dict[str, np.ndarray]:
    """Load a checkpoint; if `names` given, fail listing any missing tensors."""
    ckpt = Path(ckpt_dir)
    manifest = ckpt / MANIFEST
    if not manifest.exists():
        raise FileNotFoundError(f"{ckpt}: no {MANIFEST} manifest")
    out = {}
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        name, fname, _shape = line.split("\t")
        out[name] = load_acdt(ckpt / fname)
    if names is not None:
        missing = sorted(set(names) - set(out))
        if missing:
            raise KeyError(f"{ckpt}: checkpoint is missing tensors: {', '.join(missing)}")
    return out
