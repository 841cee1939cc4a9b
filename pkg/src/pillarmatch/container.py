"""Versioned binary container used for pair files and checkpoints.

Layout (all little-endian, deterministic byte-for-byte for equal inputs):

    line 1: magic ``PMC1`` + newline
    line 2: ascii byte length of the manifest + newline
    manifest: UTF-8 JSON with sorted keys, followed by one newline
    payload: raw C-order array bytes, concatenated

The manifest is ``{"kind": ..., "version": 1, "meta": {...}, "arrays": [...]}``
where each array entry records name, dtype string (``<f8`` etc.), shape and
byte offset into the payload. Files are self-describing: a reader needs no
out-of-band schema.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"PMC1"
VERSION = 1

# dtype codes accepted in containers; everything is stored little-endian
_DTYPES = {"<f4", "<f8", "<i8", "|u1"}


def _canonical_dtype(arr: np.ndarray) -> str:
    kind = arr.dtype.kind
    if kind == "f":
        return "<f4" if arr.dtype.itemsize == 4 else "<f8"
    if kind in ("i", "b"):
        return "<i8"
    if kind == "u":
        return "|u1"
    raise FormatError(f"unsupported array dtype {arr.dtype!r}")


def write_container(path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    entries = []
    payload = bytearray()
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        shape = list(arr.shape)  # before ascontiguousarray, which promotes 0-d to 1-d
        code = _canonical_dtype(arr)
        arr = np.ascontiguousarray(arr).astype(np.dtype(code), copy=False)
        entries.append(
            {
                "name": name,
                "dtype": code,
                "shape": shape,
                "offset": len(payload),
                "nbytes": arr.nbytes,
            }
        )
        payload.extend(arr.tobytes(order="C"))
    manifest = {"kind": kind, "version": VERSION, "meta": meta, "arrays": entries}
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC + b"\n")
        fh.write(str(len(blob)).encode("ascii") + b"\n")
        fh.write(blob)
        fh.write(b"\n")
        fh.write(bytes(payload))


def read_container(path, expect_kind: str | None = None):
    """Return ``(meta, arrays)``; raises FormatError on any structural problem."""
    path = Path(path)
    raw = path.read_bytes()
    head, sep, rest = raw.partition(b"\n")
    if head != MAGIC or not sep:
        raise FormatError(f"{path}: not a PMC container")
    size_line, sep, rest = rest.partition(b"\n")
    try:
        manifest_len = int(size_line)
    except ValueError:
        raise FormatError(f"{path}: corrupt manifest length") from None
    if not sep or len(rest) < manifest_len + 1:
        raise FormatError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(rest[:manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad manifest json: {exc}") from None
    if manifest.get("version") != VERSION:
        raise FormatError(f"{path}: unsupported container version {manifest.get('version')!r}")
    if expect_kind is not None and manifest.get("kind") != expect_kind:
        raise FormatError(
            f"{path}: expected kind {expect_kind!r}, found {manifest.get('kind')!r}"
        )
    payload = rest[manifest_len + 1 :]
    arrays = {}
    for entry in manifest["arrays"]:
        code, shape = entry["dtype"], tuple(entry["shape"])
        if code not in _DTYPES:
            raise FormatError(f"{path}: unknown dtype {code!r}")
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise FormatError(f"{path}: truncated payload for array {entry['name']!r}")
        arr = np.frombuffer(payload[start : start + nbytes], dtype=np.dtype(code))
        arrays[entry["name"]] = arr.reshape(shape).copy()
    return manifest["meta"], arrays
