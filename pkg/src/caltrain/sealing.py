"""Participant-side sealing: keys, dataset packages, forensic disclosure.

A dataset package (.ctds) is a flat little-endian file of AES-128-GCM
sealed records.  Labels travel in plaintext (the learning protocol needs
them) but are bound into the associated data together with the source id,
record index and dimensions, so swapping a label or splicing a record into
another package breaks the authentication tag.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass

import numpy as np
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .attestation import verify_quote  # re-exported: participants verify quotes
from .errors import AuthenticationError, FileFormatError, UsageError

__all__ = [
    "SealedRecord",
    "DatasetPackage",
    "generate_key",
    "load_key",
    "record_aad",
    "seal_record",
    "open_record",
    "seal_dataset",
    "write_package",
    "read_package",
    "reveal_instance",
    "verify_quote",
]

PACKAGE_MAGIC = b"CTDS"
PACKAGE_VERSION = 1
KEY_LEN = 16
NONCE_LEN = 12
TAG_LEN = 16
_AAD_DOMAIN = b"CTDS1"
MAX_SOURCE_LEN = 64


@dataclass(frozen=True)
class SealedRecord:
    record_index: int
    label: int
    dims: tuple[int, int, int]  # C, H, W
    nonce: bytes
    ciphertext: bytes
    tag: bytes


@dataclass
class DatasetPackage:
    source_id: str
    records: list[SealedRecord]

    @property
    def record_count(self) -> int:
        return len(self.records)


def generate_key(path: str | None = None) -> bytes:
    """16 fresh bytes from OS entropy; written with owner-only permissions."""
    key = os.urandom(KEY_LEN)
    if path is not None:
        fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
        with os.fdopen(fd, "wb") as fh:
            fh.write(key)
    return key


def load_key(path: str) -> bytes:
    with open(path, "rb") as fh:
        key = fh.read()
    if len(key) != KEY_LEN:
        raise FileFormatError(f"{path}: key file must be exactly {KEY_LEN} bytes")
    return key


def _check_source(source_id: str) -> bytes:
    raw = source_id.encode("utf-8")
    if not raw or len(raw) > MAX_SOURCE_LEN:
        raise UsageError(f"source id must be 1..{MAX_SOURCE_LEN} bytes")
    return raw


def record_aad(source_id: str, label: int, record_index: int, dims) -> bytes:
    """Associated data binding identity, label, position and shape."""
    src = _check_source(source_id)
    c, h, w = dims
    return (
        _AAD_DOMAIN
        + struct.pack("<H", len(src))
        + src
        + struct.pack("<HIHHH", label, record_index, c, h, w)
    )


def seal_record(key: bytes, source_id: str, record_index: int, label: int, pixels: bytes, dims) -> SealedRecord:
    if label < 0 or label > 0xFFFF:
        raise UsageError("label overflows u16")
    c, h, w = dims
    if len(pixels) != c * h * w:
        raise UsageError("pixel byte count does not match dims")
    nonce = os.urandom(NONCE_LEN)
    aad = record_aad(source_id, label, record_index, dims)
    sealed = AESGCM(key).encrypt(nonce, pixels, aad)
    return SealedRecord(record_index, label, (c, h, w), nonce, sealed[:-TAG_LEN], sealed[-TAG_LEN:])


def open_record(key: bytes, source_id: str, rec: SealedRecord) -> bytes:
    """Authenticate and decrypt one record; raises AuthenticationError on any tamper."""
    c, h, w = rec.dims
    if len(rec.ciphertext) != c * h * w:
        raise FileFormatError("ciphertext length does not match dims")
    aad = record_aad(source_id, rec.label, rec.record_index, rec.dims)
    try:
        return AESGCM(key).decrypt(rec.nonce, rec.ciphertext + rec.tag, aad)
    except InvalidTag:
        raise AuthenticationError(
            f"tag mismatch for record {rec.record_index} of {source_id!r}"
        ) from None


def seal_dataset(images: np.ndarray, labels, key: bytes, source_id: str) -> DatasetPackage:
    """Seal u8 (N,C,H,W) images into a package; round-trips through open_record."""
    _check_source(source_id)
    if len(key) != KEY_LEN:
        raise UsageError(f"key must be {KEY_LEN} bytes")
    images = np.asarray(images)
    if images.dtype != np.uint8 or images.ndim != 4:
        raise UsageError("images must be uint8 (N,C,H,W)")
    labels = np.asarray(labels)
    if labels.shape != (images.shape[0],):
        raise UsageError("labels must match image count")
    dims = tuple(int(d) for d in images.shape[1:])
    records = [
        seal_record(key, source_id, i, int(labels[i]), images[i].tobytes(), dims)
        for i in range(images.shape[0])
    ]
    return DatasetPackage(source_id, records)


def write_package(pkg: DatasetPackage, path: str) -> None:
    src = _check_source(pkg.source_id)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(PACKAGE_MAGIC)
        fh.write(struct.pack("<HH", PACKAGE_VERSION, len(src)))
        fh.write(src)
        fh.write(struct.pack("<I", len(pkg.records)))
        for rec in pkg.records:
            c, h, w = rec.dims
            fh.write(struct.pack("<IHHHH", rec.record_index, rec.label, c, h, w))
            fh.write(rec.nonce)
            fh.write(struct.pack("<I", len(rec.ciphertext)))
            fh.write(rec.ciphertext)
            fh.write(rec.tag)
    os.replace(tmp, path)


def read_package(path: str) -> DatasetPackage:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != PACKAGE_MAGIC:
        raise FileFormatError(f"{path}: not a dataset package")
    version, srclen = struct.unpack_from("<HH", raw, 4)
    if version != PACKAGE_VERSION:
        raise FileFormatError(f"{path}: unsupported package version {version}")
    off = 8
    source_id = raw[off : off + srclen].decode("utf-8")
    off += srclen
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    records = []
    try:
        for _ in range(count):
            idx, label, c, h, w = struct.unpack_from("<IHHHH", raw, off)
            off += 12
            nonce = raw[off : off + NONCE_LEN]
            off += NONCE_LEN
            (ctlen,) = struct.unpack_from("<I", raw, off)
            off += 4
            ct = raw[off : off + ctlen]
            off += ctlen
            tag = raw[off : off + TAG_LEN]
            off += TAG_LEN
            if len(nonce) != NONCE_LEN or len(ct) != ctlen or len(tag) != TAG_LEN:
                raise FileFormatError(f"{path}: truncated record")
            records.append(SealedRecord(idx, label, (c, h, w), nonce, ct, tag))
    except struct.error:
        raise FileFormatError(f"{path}: truncated package") from None
    if off != len(raw):
        raise FileFormatError(f"{path}: trailing bytes")
    return DatasetPackage(source_id, records)


def reveal_instance(pkg: DatasetPackage, key: bytes, record_index: int):
    """Decrypt one owned record for a forensic disclosure.

    Returns (pixels u8 array shaped dims, label, sha256 hex of the plaintext
    pixel bytes) so the investigator can compare against a linkage digest.
    """
    by_index = {r.record_index: r for r in pkg.records}
    if record_index not in by_index:
        raise UsageError(f"record {record_index} not in package")
    rec = by_index[record_index]
    pixels = open_record(key, pkg.source_id, rec)
    digest = hashlib.sha256(pixels).hexdigest()
    arr = np.frombuffer(pixels, dtype=np.uint8).reshape(rec.dims)
    return arr, rec.label, digest
