"""Framed binary protocol crossing the enclave boundary.

Frame layout: one type-tag byte, little-endian u32 payload length, payload.
Tensor payloads are u32 rank, u32 dims[rank], float32 data, all
little-endian.  The same frame functions serve both sides of the duplex
channel; replies reuse the request tag except where a dedicated reply tag
exists (TRAIN_BATCH -> IR_OUT, DELTA_IN -> UPDATE_ACK,
FINGERPRINT_BATCH -> LINKAGE_OUT, any failure -> ERROR).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ProtocolError
from .sealing import NONCE_LEN, TAG_LEN, SealedRecord

ATTEST = 0x01
PROVISION_KEY = 0x02
LOAD_MODEL = 0x03
TRAIN_BATCH = 0x04
IR_OUT = 0x05
DELTA_IN = 0x06
UPDATE_ACK = 0x07
EXPORT_FRONTNET = 0x08
FINGERPRINT_BATCH = 0x09
LINKAGE_OUT = 0x0A
ERROR = 0x0B

KNOWN_TAGS = frozenset(
    (
        ATTEST,
        PROVISION_KEY,
        LOAD_MODEL,
        TRAIN_BATCH,
        IR_OUT,
        DELTA_IN,
        UPDATE_ACK,
        EXPORT_FRONTNET,
        FINGERPRINT_BATCH,
        LINKAGE_OUT,
        ERROR,
    )
)

TAG_NAMES = {
    ATTEST: "ATTEST",
    PROVISION_KEY: "PROVISION_KEY",
    LOAD_MODEL: "LOAD_MODEL",
    TRAIN_BATCH: "TRAIN_BATCH",
    IR_OUT: "IR_OUT",
    DELTA_IN: "DELTA_IN",
    UPDATE_ACK: "UPDATE_ACK",
    EXPORT_FRONTNET: "EXPORT_FRONTNET",
    FINGERPRINT_BATCH: "FINGERPRINT_BATCH",
    LINKAGE_OUT: "LINKAGE_OUT",
    ERROR: "ERROR",
}

# rejection reason codes carried in IR_OUT / LINKAGE_OUT
REJECT_UNKNOWN_SOURCE = 1
REJECT_TAG_MISMATCH = 2
REJECT_MALFORMED = 3
REJECT_ZERO_EMBEDDING = 4
REJECT_NAMES = {
    REJECT_UNKNOWN_SOURCE: "UNKNOWN_SOURCE",
    REJECT_TAG_MISMATCH: "TAG_MISMATCH",
    REJECT_MALFORMED: "MALFORMED",
    REJECT_ZERO_EMBEDDING: "ZERO_EMBEDDING",
}

MAX_PAYLOAD = 512 * 2**20

_HEADER = struct.Struct("<BI")


def send_frame(stream, tag: int, payload: bytes) -> None:
    if tag not in KNOWN_TAGS:
        raise ProtocolError(f"refusing to send unknown tag {tag:#x}")
    if len(payload) > MAX_PAYLOAD:
        raise ProtocolError("payload exceeds frame limit")
    stream.write(_HEADER.pack(tag, len(payload)))
    stream.write(payload)
    stream.flush()


def recv_frame(stream) -> tuple[int, bytes] | None:
    """Read one frame; None on clean EOF; ProtocolError on truncation."""
    header = stream.read(_HEADER.size)
    if not header:
        return None
    if len(header) < _HEADER.size:
        raise ProtocolError("truncated frame header")
    tag, length = _HEADER.unpack(header)
    if length > MAX_PAYLOAD:
        raise ProtocolError("frame length exceeds limit")
    payload = stream.read(length) if length else b""
    if len(payload) < length:
        raise ProtocolError("truncated frame payload")
    return tag, payload


# ----- primitive codecs -------------------------------------------------------


class Reader:
    """Cursor over a payload with checked reads."""

    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise ProtocolError("payload underrun")
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u16()).decode("utf-8")

    def blob32(self) -> bytes:
        return self.take(self.u32())

    def done(self) -> None:
        if self.off != len(self.buf):
            raise ProtocolError("trailing bytes in payload")


def pack_string(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ProtocolError("string too long")
    return struct.pack("<H", len(raw)) + raw


def pack_blob32(b: bytes) -> bytes:
    return struct.pack("<I", len(b)) + b


def pack_tensor(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    dims = arr.shape
    head = struct.pack("<I", len(dims)) + struct.pack(f"<{len(dims)}I", *dims)
    return head + arr.tobytes()


def unpack_tensor(r: Reader) -> np.ndarray:
    rank = r.u32()
    if rank > 8:
        raise ProtocolError(f"implausible tensor rank {rank}")
    dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
    count = 1
    for d in dims:
        count *= d
    raw = r.take(4 * count)
    return np.frombuffer(raw, dtype="<f4").reshape(dims).copy()


# ----- message bodies ---------------------------------------------------------


@dataclass(frozen=True)
class BatchRecord:
    """A sealed record plus routing metadata for one mini-batch entry."""

    global_id: int
    source_id: str
    record: SealedRecord


def pack_batch(epoch: int, batch_index: int, entries: list[BatchRecord]) -> bytes:
    parts = [struct.pack("<III", epoch, batch_index, len(entries))]
    for e in entries:
        rec = e.record
        c, h, w = rec.dims
        parts.append(struct.pack("<I", e.global_id))
        parts.append(pack_string(e.source_id))
        parts.append(struct.pack("<IHHHH", rec.record_index, rec.label, c, h, w))
        parts.append(rec.nonce)
        parts.append(pack_blob32(rec.ciphertext))
        parts.append(rec.tag)
    return b"".join(parts)


def unpack_batch(r: Reader) -> tuple[int, int, list[BatchRecord]]:
    epoch, batch_index, n = struct.unpack("<III", r.take(12))
    entries = []
    for _ in range(n):
        (global_id,) = struct.unpack("<I", r.take(4))
        source_id = r.string()
        idx, label, c, h, w = struct.unpack("<IHHHH", r.take(12))
        nonce = r.take(NONCE_LEN)
        ct = r.blob32()
        tag = r.take(TAG_LEN)
        entries.append(
            BatchRecord(global_id, source_id, SealedRecord(idx, label, (c, h, w), nonce, ct, tag))
        )
    return epoch, batch_index, entries


@dataclass
class Rejection:
    global_id: int
    reason: int

    @property
    def reason_name(self) -> str:
        return REJECT_NAMES.get(self.reason, f"code {self.reason}")


def pack_rejections(rejections: list[Rejection]) -> bytes:
    parts = [struct.pack("<I", len(rejections))]
    for rj in rejections:
        parts.append(struct.pack("<IB", rj.global_id, rj.reason))
    return b"".join(parts)


def unpack_rejections(r: Reader) -> list[Rejection]:
    n = r.u32()
    return [Rejection(*struct.unpack("<IB", r.take(5))) for _ in range(n)]


def pack_ir_out(ids, labels, rejections, ir: np.ndarray) -> bytes:
    parts = [struct.pack("<I", len(ids))]
    parts.append(np.asarray(ids, dtype="<u4").tobytes())
    parts.append(np.asarray(labels, dtype="<u2").tobytes())
    parts.append(pack_rejections(rejections))
    parts.append(pack_tensor(ir))
    return b"".join(parts)


def unpack_ir_out(r: Reader):
    n = r.u32()
    ids = np.frombuffer(r.take(4 * n), dtype="<u4").copy()
    labels = np.frombuffer(r.take(2 * n), dtype="<u2").copy()
    rejections = unpack_rejections(r)
    ir = unpack_tensor(r)
    r.done()
    return ids, labels, rejections, ir


@dataclass(frozen=True)
class WireLinkage:
    global_id: int
    label: int
    source_id: str
    digest: bytes
    fingerprint: np.ndarray


def pack_linkage_out(records: list[WireLinkage], rejections: list[Rejection]) -> bytes:
    parts = [struct.pack("<I", len(records))]
    for lr in records:
        parts.append(struct.pack("<IH", lr.global_id, lr.label))
        parts.append(pack_string(lr.source_id))
        parts.append(lr.digest)
        fp = np.ascontiguousarray(lr.fingerprint, dtype="<f4")
        parts.append(struct.pack("<I", fp.size))
        parts.append(fp.tobytes())
    parts.append(pack_rejections(rejections))
    return b"".join(parts)


def unpack_linkage_out(r: Reader):
    n = r.u32()
    records = []
    for _ in range(n):
        gid, label = struct.unpack("<IH", r.take(6))
        source_id = r.string()
        digest = r.take(32)
        dim = r.u32()
        fp = np.frombuffer(r.take(4 * dim), dtype="<f4").copy()
        records.append(WireLinkage(gid, label, source_id, digest, fp))
    rejections = unpack_rejections(r)
    r.done()
    return records, rejections


def pack_error(code: str, message: str) -> bytes:
    return pack_string(code) + pack_string(message)


def unpack_error(r: Reader) -> tuple[str, str]:
    code = r.string()
    message = r.string()
    r.done()
    return code, message


def pack_load_model(header: dict, blobs: list[tuple[int, bytes]] = ()) -> bytes:
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [pack_blob32(head), struct.pack("<I", len(blobs))]
    for kind, blob in blobs:
        parts.append(struct.pack("<B", kind))
        parts.append(pack_blob32(blob))
    return b"".join(parts)


def unpack_load_model(r: Reader) -> tuple[dict, list[tuple[int, bytes]]]:
    try:
        header = json.loads(r.blob32().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise ProtocolError("malformed model header") from None
    nblobs = r.u32()
    blobs = [(r.u8(), r.blob32()) for _ in range(nblobs)]
    r.done()
    return header, blobs


# blob kinds inside LOAD_MODEL
BLOB_PLAIN_WEIGHTS = 1
BLOB_SEALED_FRONTNET = 2
