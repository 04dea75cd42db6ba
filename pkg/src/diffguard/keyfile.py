"""Binary key container shared by key-E and key-I files.

Layout (all integers little-endian)::

    magic     4 bytes   b"DPKY"
    version   uint16
    kind      uint8     0x01 key-E, 0x02 key-I
    meta_len  uint32
    meta      meta_len bytes of UTF-8 JSON; must contain "shapes"
    payload   float32 little-endian, row-major, arrays in the order of meta["shapes"]
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

MAGIC = b"DPKY"
VERSION = 1
KIND_KEY_E = 0x01
KIND_KEY_I = 0x02
_HEADER = struct.Struct("<4sHBI")


class KeyFormatError(ValueError):
    """Malformed or mismatched key container."""


@dataclass
class KeyContainer:
    kind: int
    meta: dict
    arrays: list[np.ndarray]
    version: int = VERSION

    def to_bytes(self) -> bytes:
        meta = dict(self.meta)
        meta["shapes"] = [list(a.shape) for a in self.arrays]
        meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
        payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in self.arrays)
        return _HEADER.pack(MAGIC, self.version, self.kind, len(meta_bytes)) + meta_bytes + payload

    @classmethod
    def from_bytes(cls, data: bytes, expect_kind: int | None = None) -> "KeyContainer":
        if len(data) < _HEADER.size:
            raise KeyFormatError("file too short for a key header")
        magic, version, kind, meta_len = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise KeyFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        if version != VERSION:
            raise KeyFormatError(f"unsupported container version {version}")
        if kind not in (KIND_KEY_E, KIND_KEY_I):
            raise KeyFormatError(f"unknown key kind 0x{kind:02x}")
        if expect_kind is not None and kind != expect_kind:
            raise KeyFormatError(f"expected {kind_name(expect_kind)} container, got {kind_name(kind)}")
        start = _HEADER.size
        if len(data) < start + meta_len:
            raise KeyFormatError("truncated metadata block")
        try:
            meta = json.loads(data[start : start + meta_len].decode("utf-8"))
            shapes = [tuple(int(d) for d in s) for s in meta["shapes"]]
        except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise KeyFormatError(f"unreadable metadata: {exc}") from exc
        payload = data[start + meta_len :]
        expected = 4 * sum(int(np.prod(s, dtype=np.int64)) for s in shapes)
        if len(payload) != expected:
            raise KeyFormatError(f"payload is {len(payload)} bytes, metadata declares {expected}")
        arrays, off = [], 0
        for s in shapes:
            n = int(np.prod(s, dtype=np.int64))
            arrays.append(np.frombuffer(payload, dtype="<f4", count=n, offset=off).reshape(s).copy())
            off += 4 * n
        meta.pop("shapes")
        return cls(kind=kind, meta=meta, arrays=arrays, version=version)

    def write(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def read(cls, path: str | Path, expect_kind: int | None = None) -> "KeyContainer":
        return cls.from_bytes(Path(path).read_bytes(), expect_kind)


def kind_name(kind: int) -> str:
    return {KIND_KEY_E: "key-E", KIND_KEY_I: "key-I"}.get(kind, f"0x{kind:02x}")


def image_fingerprint(image: torch.Tensor | np.ndarray) -> str:
    """SHA-256 of the image's float32 pixel bytes and shape; binds keys to content."""
    arr = image.detach().cpu().numpy() if isinstance(image, torch.Tensor) else np.asarray(image)
    arr = np.ascontiguousarray(arr, dtype="<f4")
    h = hashlib.sha256()
    h.update(repr(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()
