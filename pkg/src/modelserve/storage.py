"""Durable storage: the append-only observation log and versioned snapshots.

Both use the same little-endian binary framing: a u32 payload length, the
payload, and a CRC-32 of the payload. Log appends are flushed according to
the configured policy before the call returns, and the write-ahead contract
(append before the in-memory update) makes the log the source of truth:
replaying it through the trainer reconstructs every learner state.

On-disk layout per model: ``data_dir/<model>/log.bin`` plus
``snap-<version>.bin`` files and an ``active`` pointer naming the serving
version.
"""

from __future__ import annotations

import io
import os
import struct
import threading
import time
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import learner
from .core import FeatureParams, ModelSchema, ModelVersion
from .errors import ChecksumMismatch, IoFailure
from .trainer import VersionBundle

_LEN = struct.Struct("<I")
_CRC = struct.Struct("<I")
_SNAP_MAGIC = b"MSERVE\x01\n"

ITEM_ID = 0
ITEM_VECTOR = 1


@dataclass(frozen=True)
class LogRecord:
    seq: int
    timestamp: float
    model: str
    uid: int
    item: int | tuple
    label: float
    exploratory: bool = False


def _pack_item(out: bytearray, item) -> None:
    if isinstance(item, (int, np.integer)):
        out += struct.pack("<BQ", ITEM_ID, int(item))
    else:
        vec = np.asarray(item, dtype="<f8").ravel()
        out += struct.pack("<BI", ITEM_VECTOR, vec.shape[0])
        out += vec.tobytes()


def _unpack_item(buf: memoryview, off: int):
    kind = buf[off]
    off += 1
    if kind == ITEM_ID:
        (item,) = struct.unpack_from("<Q", buf, off)
        return int(item), off + 8
    if kind == ITEM_VECTOR:
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        vec = np.frombuffer(buf, dtype="<f8", count=n, offset=off)
        return tuple(float(x) for x in vec), off + 8 * n
    raise ChecksumMismatch(f"unknown item kind byte {kind}")


def _encode_record(rec: LogRecord) -> bytes:
    out = bytearray()
    name = rec.model.encode("utf-8")
    out += struct.pack("<QdH", rec.seq, rec.timestamp, len(name))
    out += name
    out += struct.pack("<Q", rec.uid)
    _pack_item(out, rec.item)
    out += struct.pack("<dB", rec.label, 1 if rec.exploratory else 0)
    return bytes(out)


def _decode_record(payload: bytes) -> LogRecord:
    buf = memoryview(payload)
    seq, ts, name_len = struct.unpack_from("<QdH", buf, 0)
    off = 18
    model = bytes(buf[off:off + name_len]).decode("utf-8")
    off += name_len
    (uid,) = struct.unpack_from("<Q", buf, off)
    off += 8
    item, off = _unpack_item(buf, off)
    label, flags = struct.unpack_from("<dB", buf, off)
    return LogRecord(seq=seq, timestamp=ts, model=model, uid=int(uid),
                     item=item, label=label, exploratory=bool(flags & 1))


def _write_frame(fh, payload: bytes) -> None:
    fh.write(_LEN.pack(len(payload)) + payload + _CRC.pack(zlib.crc32(payload)))


def _read_frames(fh):
    """Yield payloads; a torn frame at end-of-file ends iteration, a CRC
    failure on a complete frame raises ChecksumMismatch."""
    while True:
        head = fh.read(4)
        if len(head) < 4:
            return
        (length,) = _LEN.unpack(head)
        body = fh.read(length + 4)
        if len(body) < length + 4:
            return  # torn tail from an interrupted append
        payload, crc = body[:length], body[length:]
        if zlib.crc32(payload) != _CRC.unpack(crc)[0]:
            raise ChecksumMismatch("log frame failed CRC verification")
        yield payload


class ObservationLog:
    """Append-only, CRC-framed record log with strictly increasing sequence
    numbers. A single appender thread at a time is enforced with a lock."""

    def __init__(self, path, flush_every: int = 1, flush_interval: float | None = None):
        self.path = Path(path)
        self.flush_every = max(1, int(flush_every))
        self.flush_interval = flush_interval
        self._lock = threading.Lock()
        self._unflushed = 0
        self._last_flush = time.monotonic()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.last_seq = 0
        if self.path.exists():
            for rec in read_log(self.path):
                self.last_seq = rec.seq
        try:
            self._fh = open(self.path, "ab")
        except OSError as exc:
            raise IoFailure(f"cannot open log {self.path}: {exc}") from exc

    def append(self, model: str, uid: int, item, label: float,
               timestamp: float | None = None, exploratory: bool = False) -> int:
        """Durably append one observation; returns its sequence number."""
        with self._lock:
            seq = self.last_seq + 1
            rec = LogRecord(seq=seq, timestamp=time.time() if timestamp is None else timestamp,
                            model=model, uid=int(uid), item=item, label=float(label),
                            exploratory=exploratory)
            try:
                _write_frame(self._fh, _encode_record(rec))
                self._unflushed += 1
                now = time.monotonic()
                if (self._unflushed >= self.flush_every
                        or (self.flush_interval is not None
                            and now - self._last_flush >= self.flush_interval)):
                    self._fh.flush()
                    self._unflushed = 0
                    self._last_flush = now
            except OSError as exc:
                raise IoFailure(f"log append failed: {exc}") from exc
            self.last_seq = seq
            return seq

    def flush(self) -> None:
        with self._lock:
            try:
                self._fh.flush()
                self._unflushed = 0
            except OSError as exc:
                raise IoFailure(f"log flush failed: {exc}") from exc

    def close(self) -> None:
        with self._lock:
            try:
                self._fh.flush()
                self._fh.close()
            except OSError:
                pass


def read_log(path) -> list[LogRecord]:
    """All intact records in sequence order."""
    records = []
    try:
        with open(path, "rb") as fh:
            for payload in _read_frames(fh):
                records.append(_decode_record(payload))
    except FileNotFoundError:
        return []
    except OSError as exc:
        raise IoFailure(f"cannot read log {path}: {exc}") from exc
    return records


def _pack_vector_map(out: bytearray, vectors: dict, dim: int) -> None:
    out += struct.pack("<I", len(vectors))
    for key in sorted(vectors):
        out += struct.pack("<Q", int(key))
        out += np.asarray(vectors[key], dtype="<f8").tobytes()


def _unpack_vector_map(buf: memoryview, off: int, dim: int):
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    vectors = {}
    for _ in range(n):
        (key,) = struct.unpack_from("<Q", buf, off)
        off += 8
        vec = np.frombuffer(buf, dtype="<f8", count=dim, offset=off).copy()
        off += 8 * dim
        vectors[int(key)] = vec
    return vectors, off


def _encode_bundle(bundle: VersionBundle) -> bytes:
    version = bundle.version
    schema = version.schema
    d = schema.dimension
    out = bytearray()
    name = schema.name.encode("utf-8")
    out += struct.pack("<H", len(name))
    out += name
    out += struct.pack("<IddQQ", d, schema.regularization, schema.exploration,
                       version.version, bundle.last_seq)
    params = version.params
    if params.kind == "materialized":
        out += b"\x00"
        _pack_vector_map(out, dict(params.table), d)
    else:
        coeffs = np.asarray(params.coefficients, dtype="<f8")
        out += b"\x01"
        out += struct.pack("<I", coeffs.shape[0])
        out += coeffs.tobytes()
    _pack_vector_map(out, dict(version.user_weights), d)
    out += struct.pack("<I", len(bundle.states))
    for uid in sorted(bundle.states):
        st = bundle.states[uid]
        out += struct.pack("<QQ", int(uid), st.count)
        out += np.asarray(st.a_inv, dtype="<f8").tobytes()
        out += np.asarray(st.b, dtype="<f8").tobytes()
    return bytes(out)


def _decode_bundle(payload: bytes) -> VersionBundle:
    buf = memoryview(payload)
    (name_len,) = struct.unpack_from("<H", buf, 0)
    off = 2
    name = bytes(buf[off:off + name_len]).decode("utf-8")
    off += name_len
    d, reg, alpha, number, last_seq = struct.unpack_from("<IddQQ", buf, off)
    off += struct.calcsize("<IddQQ")
    schema = ModelSchema(name=name, dimension=d, regularization=reg, exploration=alpha)
    kind = buf[off]
    off += 1
    if kind == 0:
        table, off = _unpack_vector_map(buf, off, d)
        params = FeatureParams(kind="materialized", dimension=d, table=table)
    else:
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        coeffs = np.frombuffer(buf, dtype="<f8", count=n, offset=off).copy()
        off += 8 * n
        params = FeatureParams(kind="computed", dimension=d, coefficients=coeffs)
    weights, off = _unpack_vector_map(buf, off, d)
    (n_states,) = struct.unpack_from("<I", buf, off)
    off += 4
    states = {}
    for _ in range(n_states):
        uid, count = struct.unpack_from("<QQ", buf, off)
        off += 16
        a_inv = np.frombuffer(buf, dtype="<f8", count=d * d, offset=off).reshape(d, d).copy()
        off += 8 * d * d
        b = np.frombuffer(buf, dtype="<f8", count=d, offset=off).copy()
        off += 8 * d
        states[int(uid)] = learner.UserLearnerState(a_inv=a_inv, b=b, count=int(count))
    version = ModelVersion(schema=schema, params=params, user_weights=weights,
                           version=int(number))
    return VersionBundle(version=version, states=states, last_seq=int(last_seq))


def save_snapshot(bundle: VersionBundle, path) -> Path:
    """Write a checksummed snapshot; the CRC covers header and payload."""
    path = Path(path)
    payload = _encode_bundle(bundle)
    head = _SNAP_MAGIC + _LEN.pack(len(payload))
    crc = zlib.crc32(head + payload)
    tmp = path.with_suffix(".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "wb") as fh:
            fh.write(head + payload + _CRC.pack(crc))
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(f"snapshot write failed: {exc}") from exc
    return path


def load_snapshot(path) -> VersionBundle:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read snapshot {path}: {exc}") from exc
    head_len = len(_SNAP_MAGIC) + 4
    if len(blob) < head_len + 4:
        raise ChecksumMismatch("snapshot file truncated")
    if zlib.crc32(blob[:-4]) != _CRC.unpack(blob[-4:])[0]:
        raise ChecksumMismatch("snapshot failed CRC verification")
    if blob[:len(_SNAP_MAGIC)] != _SNAP_MAGIC:
        raise ChecksumMismatch("snapshot magic bytes do not match")
    (length,) = _LEN.unpack(blob[len(_SNAP_MAGIC):head_len])
    payload = blob[head_len:head_len + length]
    if len(payload) != length:
        raise ChecksumMismatch("snapshot payload truncated")
    return _decode_bundle(payload)


def model_dir(data_dir, model: str) -> Path:
    return Path(data_dir) / model


def log_path(data_dir, model: str) -> Path:
    return model_dir(data_dir, model) / "log.bin"


def snapshot_path(data_dir, model: str, version: int) -> Path:
    return model_dir(data_dir, model) / f"snap-{version}.bin"


def list_snapshot_versions(data_dir, model: str) -> list[int]:
    directory = model_dir(data_dir, model)
    versions = []
    if directory.is_dir():
        for entry in directory.glob("snap-*.bin"):
            stem = entry.stem.removeprefix("snap-")
            if stem.isdigit():
                versions.append(int(stem))
    return sorted(versions)


def read_active_version(data_dir, model: str) -> int | None:
    marker = model_dir(data_dir, model) / "active"
    try:
        return int(marker.read_text().strip())
    except (OSError, ValueError):
        return None


def write_active_version(data_dir, model: str, version: int) -> None:
    marker = model_dir(data_dir, model) / "active"
    try:
        marker.parent.mkdir(parents=True, exist_ok=True)
        tmp = marker.with_suffix(".tmp")
        tmp.write_text(f"{version}\n")
        os.replace(tmp, marker)
    except OSError as exc:
        raise IoFailure(f"cannot update active pointer: {exc}") from exc
