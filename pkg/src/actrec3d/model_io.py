"""Single-file weight archive shared by the trainer and the edge runner.

Layout, little-endian::

    b"AR3D" | u32 header_len | header JSON (UTF-8) |
    per tensor: u8 ndim | u32 dim * ndim | float32 payload

The header carries the model spec, preprocess config, class names and the
ordered tensor names.  JSON is written canonically (sorted keys, no
whitespace) so identical inputs give identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import ModelSpec, check_params
from .vision import PreprocessConfig

MAGIC = b"AR3D"
FORMAT_VERSION = 1


class ArchiveError(ValueError):
    pass


@dataclass
class Archive:
    spec: ModelSpec
    params: dict
    preprocess: PreprocessConfig
    classes: list[str]
    fingerprint: str
    meta: dict


def _header(spec, params, pcfg, classes, meta) -> bytes:
    header = {
        "format_version": FORMAT_VERSION,
        "model": spec.to_dict(),
        "preprocess": pcfg.to_dict(),
        "classes": list(classes),
        "tensors": list(params),
        "meta": meta or {},
    }
    return json.dumps(header, sort_keys=True, separators=(",", ":"),
                      allow_nan=False).encode("utf-8")


def encode_archive(spec: ModelSpec, params: dict, pcfg: PreprocessConfig, classes,
                   meta: dict | None = None) -> bytes:
    check_params(spec, params)
    if len(classes) != spec.num_classes:
        raise ArchiveError(f"{len(classes)} class names for a {spec.num_classes}-class model")
    for name, p in params.items():
        if not np.all(np.isfinite(p)):
            raise ArchiveError(f"{name}: non-finite values cannot be archived")
    head = _header(spec, params, pcfg, classes, meta)
    parts = [MAGIC, struct.pack("<I", len(head)), head]
    for p in params.values():
        arr = np.ascontiguousarray(p, dtype="<f4")
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def save_archive(spec, params, pcfg, classes, path, meta: dict | None = None) -> str:
    """Write the archive and return its fingerprint."""
    data = encode_archive(spec, params, pcfg, classes, meta)
    Path(path).write_bytes(data)
    return fingerprint_of(data)


def fingerprint_of(data: bytes) -> str:
    (n,) = struct.unpack_from("<I", data, 4)
    return hashlib.sha256(data[8:8 + n]).hexdigest()


def decode_archive(data: bytes) -> Archive:
    if len(data) < 8 or data[:4] != MAGIC:
        raise ArchiveError("bad magic: not an AR3D archive")
    (n,) = struct.unpack_from("<I", data, 4)
    if 8 + n > len(data):
        raise ArchiveError(f"header: declared length {n} exceeds file size {len(data)}")
    try:
        header = json.loads(data[8:8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"header: corrupt JSON ({exc})") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise ArchiveError(f"format_version: unsupported {header.get('format_version')!r}")
    try:
        spec = ModelSpec.from_dict(header["model"])
        pcfg = PreprocessConfig.from_dict(header["preprocess"])
        classes = list(header["classes"])
        names = list(header["tensors"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ArchiveError(f"header: invalid field ({exc!r})") from None
    expected = spec.param_shapes()
    if names != list(expected):
        raise ArchiveError(f"tensors: names {names} do not match model {list(expected)}")
    if len(classes) != spec.num_classes:
        raise ArchiveError(f"classes: {len(classes)} names for {spec.num_classes} outputs")

    pos = 8 + n
    params = {}
    for name in names:
        if pos + 1 > len(data):
            raise ArchiveError(f"{name}: truncated before record header at byte {pos}")
        ndim = data[pos]
        if pos + 1 + 4 * ndim > len(data):
            raise ArchiveError(f"{name}: truncated dims at byte {pos}")
        dims = struct.unpack_from(f"<{ndim}I", data, pos + 1)
        pos += 1 + 4 * ndim
        if tuple(dims) != expected[name]:
            raise ArchiveError(f"{name}: shape {dims} does not match model {expected[name]}")
        nbytes = 4 * int(np.prod(dims))
        if pos + nbytes > len(data):
            raise ArchiveError(f"{name}: truncated payload, need {nbytes} bytes at byte {pos}, "
                               f"file has {len(data) - pos}")
        params[name] = np.frombuffer(data, dtype="<f4", count=nbytes // 4,
                                     offset=pos).reshape(dims).astype(np.float32)
        pos += nbytes
    if pos != len(data):
        raise ArchiveError(f"{len(data) - pos} unexpected trailing bytes at byte {pos}")
    return Archive(spec, params, pcfg, classes, hashlib.sha256(data[8:8 + n]).hexdigest(),
                   header.get("meta", {}))


def load_archive(path) -> Archive:
    return decode_archive(Path(path).read_bytes())
