"""Writers for the bundle file formats the classifier consumes.

Implements the documented interchange layout directly (this package never
imports the classifier): PCT1 tensors are "PCT1" magic | u16 version=1 |
u8 dtype=1 (little-endian f64) | u8 ndim | ndim x u32 dims | row-major
payload | u32 CRC32 of the payload; manifest.json ties the tensor files
together; descriptions.jsonl holds one object per class.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"PCT1"
VERSION = 1
DTYPE_F64 = 1
EXTENDED_TEMPLATE = "{class_name}, {description}"


def save_tensor(path, array) -> tuple[list[int], int]:
    """Write one tensor file; returns (shape, payload crc32)."""
    a = np.ascontiguousarray(np.asarray(array, dtype="<f8"))
    header = MAGIC + struct.pack("<HBB", VERSION, DTYPE_F64, a.ndim)
    header += struct.pack(f"<{a.ndim}I", *a.shape)
    payload = a.tobytes()
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    Path(path).write_bytes(header + payload + struct.pack("<I", crc))
    return list(a.shape), crc


def load_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic")
    version, dtype, ndim = struct.unpack("<HBB", raw[4:8])
    if version != VERSION or dtype != DTYPE_F64:
        raise ValueError(f"{path}: unsupported version/dtype {version}/{dtype}")
    shape = struct.unpack(f"<{ndim}I", raw[8:8 + 4 * ndim])
    payload = raw[8 + 4 * ndim:-4]
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise ValueError(f"{path}: checksum mismatch")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).copy()


def write_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def read_json(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


class ManifestWriter:
    """Accumulates tensor entries and writes/updates a manifest.json."""

    def __init__(self, out_dir, dim: int, n_classes: int, shots: int,
                 m_props: int, seed: int):
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.dim = dim
        self.n_classes = n_classes
        self.shots = shots
        self.m_props = m_props
        self.seed = seed
        self.files: dict[str, dict] = {}

    @classmethod
    def from_existing(cls, out_dir) -> "ManifestWriter":
        doc = read_json(Path(out_dir) / "manifest.json")
        writer = cls(out_dir, dim=int(doc["D"]), n_classes=int(doc["N"]),
                     shots=int(doc["K"]), m_props=int(doc["M"]),
                     seed=int(doc["seed"]))
        writer.files = dict(doc["files"])
        return writer

    def put(self, name: str, array) -> None:
        rel = f"{name}.pct1"
        shape, crc = save_tensor(self.out / rel, array)
        self.files[name] = {"path": rel, "shape": shape, "crc32": crc}

    def write(self) -> Path:
        write_json(self.out / "manifest.json", {
            "version": VERSION,
            "D": self.dim,
            "N": self.n_classes,
            "K": self.shots,
            "M": self.m_props,
            "seed": self.seed,
            "descriptions": "descriptions.jsonl",
            "extended_template": EXTENDED_TEMPLATE,
            "files": dict(sorted(self.files.items())),
        })
        return self.out / "manifest.json"


def write_descriptions_jsonl(path, per_class: list[dict]) -> None:
    """per_class entries: {"class_id", "class_name", "descriptions"}."""
    lines = [json.dumps(entry, sort_keys=True) for entry in per_class]
    text = "\n".join(lines)
    Path(path).write_text(text + "\n" if text else "", encoding="utf-8")


def read_descriptions_jsonl(path) -> list[dict]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            out.append(json.loads(line))
    return out
