"""On-disk formats: line-oriented telemetry and checksummed parameter snapshots.

Telemetry file
    Line 1 is a JSON header ``{"format": "eosprobe.telemetry", "version": 1,
    "fields": [...]}``; each following line is one JSON object holding a
    :class:`TelemetryRecord`. Every line ends in ``\\n``. Floats use Python's
    shortest round-trip representation, so reading gives back identical bits.

Snapshot container (little-endian)
    ======  ======  ==============================================
    offset  size    content
    ======  ======  ==============================================
    0       8       magic ``b"EOSPSNAP"``
    8       2       format version (uint16, currently 1)
    10      2       reserved, zero
    12      8       n_params (uint64)
    20      8*n     parameters as float64
    20+8n   32      SHA-256 of bytes [0, 20+8n)
    ======  ======  ==============================================

    Metadata (iteration, config hash, ...) lives in a JSON sidecar next to the
    container, named by replacing the suffix with ``.json``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

TELEMETRY_FORMAT = "eosprobe.telemetry"
TELEMETRY_VERSION = 1
SNAPSHOT_MAGIC = b"EOSPSNAP"
SNAPSHOT_VERSION = 1
_HEADER = struct.Struct("<8sHHQ")
_DIGEST = 32


class TelemetryFormatError(ValueError):
    pass


class SnapshotError(ValueError):
    pass


class SnapshotChecksumError(SnapshotError):
    pass


class SnapshotVersionError(SnapshotError):
    pass


@dataclass
class TelemetryRecord:
    iteration: int
    t: float
    eta: float
    loss: float
    eigenvalues: list = field(default_factory=list)
    eta_star: list = field(default_factory=list)
    rho: list = field(default_factory=list)
    coords: list = field(default_factory=list)
    grad_norm: float | None = None
    top_norm: float | None = None
    bulk_norm: float | None = None
    delta_top: float | None = None
    delta_bulk: float | None = None
    k_top: int = 0
    cadence: int = 1
    converged: bool = True
    stale: bool = False

    def rho_at(self, i: int) -> float | None:
        """1-based stability ratio, or None if not computed/undefined."""
        if 1 <= i <= len(self.rho):
            return self.rho[i - 1]
        return None


TELEMETRY_FIELDS = [f.name for f in dataclasses.fields(TelemetryRecord)]


def _atomic_write_bytes(path: Path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


class TelemetryWriter:
    """Append-only telemetry sink; each record is flushed as soon as it is written."""

    def __init__(self, path):
        self.path = Path(path)
        self._fh = open(self.path, "w", encoding="utf-8")
        header = {"format": TELEMETRY_FORMAT, "version": TELEMETRY_VERSION,
                  "fields": TELEMETRY_FIELDS}
        self._fh.write(json.dumps(header) + "\n")
        self._fh.flush()

    def __call__(self, record: TelemetryRecord) -> None:
        self._fh.write(json.dumps(dataclasses.asdict(record)) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_telemetry(records: Iterable[TelemetryRecord], path) -> None:
    with TelemetryWriter(path) as sink:
        for rec in records:
            sink(rec)


def read_telemetry(path) -> list[TelemetryRecord]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.readlines()
    if not lines:
        raise TelemetryFormatError(f"{path}: line 1: missing header")
    records = []
    for lineno, line in enumerate(lines, start=1):
        if not line.endswith("\n"):
            raise TelemetryFormatError(f"{path}: line {lineno}: truncated (no line terminator)")
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TelemetryFormatError(f"{path}: line {lineno}: {exc.msg}") from None
        if lineno == 1:
            if not isinstance(obj, dict) or obj.get("format") != TELEMETRY_FORMAT:
                raise TelemetryFormatError(f"{path}: line 1: not a telemetry header")
            if obj.get("version") != TELEMETRY_VERSION:
                raise TelemetryFormatError(
                    f"{path}: line 1: unsupported version {obj.get('version')}")
            continue
        if not isinstance(obj, dict) or set(obj) != set(TELEMETRY_FIELDS):
            raise TelemetryFormatError(f"{path}: line {lineno}: record fields do not match header")
        records.append(TelemetryRecord(**obj))
    return records


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def encode_snapshot(theta) -> bytes:
    theta = np.ascontiguousarray(theta, dtype="<f8")
    if theta.ndim != 1:
        raise SnapshotError("snapshot payload must be a 1-D parameter vector")
    body = _HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, 0, theta.size) + theta.tobytes()
    return body + hashlib.sha256(body).digest()


def decode_snapshot(blob: bytes) -> np.ndarray:
    if len(blob) < _HEADER.size + _DIGEST:
        raise SnapshotError("snapshot too short")
    magic, version, _, n = _HEADER.unpack_from(blob)
    if magic != SNAPSHOT_MAGIC:
        raise SnapshotError("bad snapshot magic")
    if version != SNAPSHOT_VERSION:
        raise SnapshotVersionError(f"snapshot version {version}, reader supports {SNAPSHOT_VERSION}")
    if len(blob) != _HEADER.size + 8 * n + _DIGEST:
        raise SnapshotError(f"snapshot length {len(blob)} inconsistent with n_params={n}")
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise SnapshotChecksumError("snapshot checksum mismatch")
    return np.frombuffer(body, dtype="<f8", offset=_HEADER.size).astype(np.float64)


def write_snapshot(theta, meta: dict, path) -> None:
    path = Path(path)
    _atomic_write_bytes(path, encode_snapshot(theta))
    text = json.dumps(dict(meta, n_params=int(np.size(theta)), version=SNAPSHOT_VERSION),
                      sort_keys=True, indent=2) + "\n"
    _atomic_write_bytes(sidecar_path(path), text.encode())


def read_snapshot(path) -> tuple[np.ndarray, dict]:
    theta = decode_snapshot(Path(path).read_bytes())
    side = sidecar_path(path)
    meta = json.loads(side.read_text()) if side.exists() else {}
    return theta, meta
