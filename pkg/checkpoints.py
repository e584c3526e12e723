"""Checkpoint records: a JSON header line followed by named float64 tensors.

Each tensor is stored as ``uint32 name length | utf-8 name | uint64 count |
count little-endian binary64 values``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping

import numpy as np

from errors import ConfigurationError, IncompatibleCheckpointError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
_NAME_LEN = struct.Struct("<I")
_COUNT = struct.Struct("<Q")


@dataclass
class Checkpoint:
    header: Dict[str, Any]
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)

    def tensor(self, name: str) -> np.ndarray:
        if name not in self.tensors:
            raise ConfigurationError(f"Checkpoint has no tensor '{name}'")
        return self.tensors[name]


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    header = {"format_version": FORMAT_VERSION, **checkpoint.header}
    chunks = [json.dumps(header, sort_keys=True).encode("utf-8"), b"\n"]
    for name, values in checkpoint.tensors.items():
        raw_name = name.encode("utf-8")
        data = np.ascontiguousarray(values, dtype="<f8").reshape(-1)
        chunks.extend([_NAME_LEN.pack(len(raw_name)), raw_name, _COUNT.pack(data.size), data.tobytes()])
    return b"".join(chunks)


def decode_checkpoint(payload: bytes) -> Checkpoint:
    newline = payload.find(b"\n")
    if newline < 0:
        raise ConfigurationError("Checkpoint header is missing")
    try:
        header = json.loads(payload[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"Checkpoint header is not valid JSON: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise IncompatibleCheckpointError("format_version", FORMAT_VERSION, header.get("format_version"))

    tensors: Dict[str, np.ndarray] = {}
    offset = newline + 1
    try:
        while offset < len(payload):
            (name_len,) = _NAME_LEN.unpack_from(payload, offset)
            offset += _NAME_LEN.size
            name = payload[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (count,) = _COUNT.unpack_from(payload, offset)
            offset += _COUNT.size
            end = offset + 8 * count
            if end > len(payload):
                raise ConfigurationError(f"Checkpoint tensor '{name}' is truncated")
            tensors[name] = np.frombuffer(payload[offset:end], dtype="<f8").astype(np.float64)
            offset = end
    except struct.error as exc:
        raise ConfigurationError(f"Checkpoint body is truncated: {exc}") from exc
    return Checkpoint(header=header, tensors=tensors)


def write_checkpoint(path: Path | str, checkpoint: Checkpoint) -> str:
    """Write ``checkpoint`` and return the sha256 of the bytes on disk."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = encode_checkpoint(checkpoint)
    path.write_bytes(payload)
    digest = hashlib.sha256(payload).hexdigest()
    logger.info("Wrote checkpoint %s (%d tensors, sha256 %s)", path, len(checkpoint.tensors), digest[:12])
    return digest


def read_checkpoint(path: Path | str) -> Checkpoint:
    path = Path(path)
    checkpoint = decode_checkpoint(path.read_bytes())
    logger.info("Loaded checkpoint %s (step %s)", path, checkpoint.header.get("step"))
    return checkpoint


def file_sha256(path: Path | str) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def validate_header(checkpoint: Checkpoint, expected: Mapping[str, Any], fields: Iterable[str] | None = None) -> None:
    """Raise IncompatibleCheckpointError on the first header field that differs from ``expected``."""
    for name in fields or expected.keys():
        found = checkpoint.header.get(name)
        want = json.loads(json.dumps(expected.get(name)))
        if found != want:
            raise IncompatibleCheckpointError(name, want, found)
