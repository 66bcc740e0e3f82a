"""Versioned binary container used for datasets and model checkpoints.

Layout (all integers little-endian):

    bytes 0..7    magic  b"CAPSANOM"
    bytes 8..11   format version (u32)
    bytes 12..19  header length in bytes (u64)
    header        canonical JSON: {"kind", "meta", "arrays": [...]}
    payload       raw C-order array bytes at the offsets named in the header
    last 32 bytes sha256 of everything before them

Writes are byte-deterministic for identical inputs: the header JSON is
canonical (sorted keys, no whitespace) and arrays are stored sorted by name.
Reads verify magic, version, and checksum and fail with the byte offset of
the problem where one exists.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from capsanom.errors import FormatError

MAGIC = b"CAPSANOM"
CONTAINER_VERSION = 1
_DIGEST_SIZE = 32


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _little_endian(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    if a.dtype.byteorder == ">":
        a = a.astype(a.dtype.newbyteorder("<"))
    return a


def write_container(
    path: str | Path, kind: str, meta: dict, arrays: dict[str, np.ndarray]
) -> None:
    """Write a container file; overwrites any existing file at ``path``."""
    entries = []
    payload = bytearray()
    for name in sorted(arrays):
        a = _little_endian(arrays[name])
        raw = a.tobytes()
        entries.append(
            {
                "name": name,
                "dtype": a.dtype.str,
                "shape": list(a.shape),
                "offset": len(payload),
                "nbytes": len(raw),
            }
        )
        payload.extend(raw)
    header = _canonical_json({"kind": kind, "meta": meta, "arrays": entries})

    blob = bytearray()
    blob += MAGIC
    blob += CONTAINER_VERSION.to_bytes(4, "little")
    blob += len(header).to_bytes(8, "little")
    blob += header
    blob += payload
    blob += hashlib.sha256(bytes(blob)).digest()
    Path(path).write_bytes(bytes(blob))


def read_container(
    path: str | Path, expect_kind: str | None = None
) -> tuple[str, dict, dict[str, np.ndarray]]:
    """Read and verify a container file.

    Returns:
        (kind, meta, arrays) with arrays as fresh writable ndarrays.

    Raises:
        FormatError: On bad magic, truncation, version mismatch, checksum
            failure, or (if ``expect_kind`` is given) an unexpected kind.
    """
    blob = Path(path).read_bytes()
    if len(blob) < 20:
        raise FormatError(f"{path}: truncated header, file is only {len(blob)} bytes")
    if blob[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic at byte 0: {blob[:8]!r}")
    version = int.from_bytes(blob[8:12], "little")
    if version != CONTAINER_VERSION:
        raise FormatError(
            f"{path}: container version {version} unsupported "
            f"(this build reads version {CONTAINER_VERSION})"
        )
    header_len = int.from_bytes(blob[12:20], "little")
    body_start = 20 + header_len
    if len(blob) < body_start + _DIGEST_SIZE:
        raise FormatError(f"{path}: truncated at byte {len(blob)}, header declares more")
    digest = blob[-_DIGEST_SIZE:]
    if hashlib.sha256(blob[:-_DIGEST_SIZE]).digest() != digest:
        raise FormatError(f"{path}: checksum mismatch, file is corrupted")
    try:
        header = json.loads(blob[20:body_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: unreadable header at byte 20: {e}") from e

    kind = header.get("kind")
    if expect_kind is not None and kind != expect_kind:
        raise FormatError(f"{path}: container kind {kind!r}, expected {expect_kind!r}")

    payload = blob[body_start : len(blob) - _DIGEST_SIZE]
    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise FormatError(
                f"{path}: array {entry['name']!r} overruns payload at byte "
                f"{body_start + start + nbytes}"
            )
        a = np.frombuffer(payload[start : start + nbytes], dtype=entry["dtype"])
        arrays[entry["name"]] = a.reshape(entry["shape"]).copy()
    return kind, header["meta"], arrays


def file_sha256(path: str | Path) -> str:
    """Hex sha256 of a file, used for manifests and compatibility messages."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
