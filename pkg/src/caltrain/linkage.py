"""Fingerprint linkage database and forensic nearest-neighbor queries.

Each training instance leaves a 4-tuple behind: its L2-normalized
penultimate-layer embedding, its training label, its source id, and the
SHA-256 of its plaintext pixels.  The database file (.ctfp) stores no pixel
data and no model weights; queries disclose only the distances, sources and
hashes of the k nearest same-label fingerprints, and an audit log records
exactly which records each query disclosed.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass

import numpy as np

from .data import center_crop
from .errors import FileFormatError, ShapeError, UsageError, ZeroEmbeddingError
from .netspec import SOFTMAX
from .network import Network

DB_MAGIC = b"CTFP"
DB_VERSION = 1
DEFAULT_K = 9


@dataclass(frozen=True)
class LinkageRecord:
    fingerprint: np.ndarray  # unit-norm float32
    label: int
    source_id: str
    digest: bytes  # 32-byte SHA-256 of the plaintext instance


@dataclass(frozen=True)
class Neighbor:
    distance: float
    source_id: str
    digest_hex: str
    offset: int  # record ordinal in the database


@dataclass
class QueryAudit:
    label: int
    k: int
    disclosed_offsets: tuple[int, ...]


class FingerprintDB:
    """Append-at-build, immutable-at-query fingerprint store."""

    def __init__(self, num_classes: int, dim: int):
        if num_classes < 1 or dim < 1:
            raise UsageError("need at least one class and one dimension")
        self.num_classes = num_classes
        self.dim = dim
        self._fingerprints: list[np.ndarray] = []
        self._labels: list[int] = []
        self._sources: list[str] = []
        self._digests: list[bytes] = []
        self._class_offsets: dict[int, list[int]] = {y: [] for y in range(num_classes)}
        self.audit_log: list[QueryAudit] = []

    # ----- building ------------------------------------------------------------

    def add(self, record: LinkageRecord) -> int:
        fp = np.asarray(record.fingerprint, dtype=np.float32)
        if fp.shape != (self.dim,):
            raise ShapeError(f"fingerprint dim {fp.shape} != ({self.dim},)")
        if not 0 <= record.label < self.num_classes:
            raise UsageError(f"label {record.label} outside [0,{self.num_classes})")
        if len(record.digest) != 32:
            raise UsageError("digest must be 32 bytes")
        self._fingerprints.append(fp)
        self._labels.append(int(record.label))
        self._sources.append(record.source_id)
        self._digests.append(record.digest)
        offset = len(self._labels) - 1
        self._class_offsets[int(record.label)].append(offset)
        return offset

    def __len__(self) -> int:
        return len(self._labels)

    def record(self, offset: int) -> LinkageRecord:
        return LinkageRecord(
            self._fingerprints[offset],
            self._labels[offset],
            self._sources[offset],
            self._digests[offset],
        )

    # ----- queries ----------------------------------------------------------------

    def query_knn(self, fingerprint: np.ndarray, label: int, k: int) -> list[Neighbor]:
        """The k nearest same-label records by L2 distance, ascending.

        Ties break toward the lower record offset.  Fewer than k results
        come back when the class holds fewer records.
        """
        if k < 1:
            raise UsageError("k must be >= 1")
        fp = np.asarray(fingerprint, dtype=np.float64)
        if fp.shape != (self.dim,):
            raise ShapeError(f"fingerprint dim {fp.shape} != ({self.dim},)")
        if not 0 <= label < self.num_classes:
            raise UsageError(f"unknown label {label}")
        offsets = np.asarray(self._class_offsets[label], dtype=np.int64)
        if offsets.size == 0:
            self.audit_log.append(QueryAudit(label, k, ()))
            return []
        matrix = np.stack([self._fingerprints[i] for i in offsets]).astype(np.float64)
        dists = np.sqrt(((matrix - fp) ** 2).sum(axis=1))
        order = np.argsort(dists, kind="stable")[:k]  # stable sort = offset tiebreak
        neighbors = [
            Neighbor(float(dists[j]), self._sources[offsets[j]], self._digests[offsets[j]].hex(), int(offsets[j]))
            for j in order
        ]
        self.audit_log.append(QueryAudit(label, k, tuple(n.offset for n in neighbors)))
        return neighbors

    # ----- persistence ---------------------------------------------------------------

    def save(self, path: str) -> None:
        by_class: dict[int, list[tuple[int, int]]] = {y: [] for y in range(self.num_classes)}
        tmp = path + ".tmp"
        with open(tmp, "wb") as fh:
            fh.write(DB_MAGIC)
            fh.write(struct.pack("<HHII", DB_VERSION, self.num_classes, self.dim, len(self)))
            for i in range(len(self)):
                by_class[self._labels[i]].append((i, fh.tell()))
                fh.write(self._fingerprints[i].astype("<f4").tobytes())
                src = self._sources[i].encode("utf-8")
                fh.write(struct.pack("<HH", self._labels[i], len(src)))
                fh.write(src)
                fh.write(self._digests[i])
            footer_start = fh.tell()
            for y in range(self.num_classes):
                entries = by_class[y]
                fh.write(struct.pack("<I", len(entries)))
                for _, file_off in entries:
                    fh.write(struct.pack("<Q", file_off))
            fh.write(struct.pack("<Q", fh.tell() - footer_start))
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str) -> "FingerprintDB":
        with open(path, "rb") as fh:
            raw = fh.read()
        if raw[:4] != DB_MAGIC:
            raise FileFormatError(f"{path}: not a fingerprint database")
        version, num_classes, dim, count = struct.unpack_from("<HHII", raw, 4)
        if version != DB_VERSION:
            raise FileFormatError(f"{path}: unsupported version {version}")
        db = cls(num_classes, dim)
        off = 4 + 12
        for _ in range(count):
            fp = np.frombuffer(raw, dtype="<f4", count=dim, offset=off).copy()
            off += 4 * dim
            label, srclen = struct.unpack_from("<HH", raw, off)
            off += 4
            source = raw[off : off + srclen].decode("utf-8")
            off += srclen
            digest = raw[off : off + 32]
            off += 32
            db.add(LinkageRecord(fp, label, source, digest))
        (footer_len,) = struct.unpack_from("<Q", raw, len(raw) - 8)
        if off + footer_len + 8 != len(raw):
            raise FileFormatError(f"{path}: inconsistent footer")
        return db


# ----- fingerprint extraction -------------------------------------------------------


def penultimate_index(net: Network) -> int:
    """Index of the layer feeding the softmax (the fingerprint layer)."""
    for li in range(1, net.spec.num_layers + 1):
        if net.spec.layers[li - 1].kind == SOFTMAX:
            return li - 1
    raise ShapeError("network has no softmax layer")


def extract_fingerprint(net: Network, instance_u8: np.ndarray):
    """(F, predicted label) for one un-augmented (3,32,32) instance.

    F is the softmax input scaled to unit L2 norm; preprocessing is the
    deterministic center crop.
    """
    xs = center_crop(instance_u8[None])
    last = penultimate_index(net)
    embed = net.forward_range(xs, 1, last, train=False)[0]
    norm = float(np.linalg.norm(embed.astype(np.float64)))
    if norm == 0.0:
        raise ZeroEmbeddingError("penultimate activation is the zero vector")
    fp = (embed.astype(np.float64) / norm).astype(np.float32)
    probs = net.forward_range(embed[None], last + 1, last + 1, train=False)
    return fp, int(np.argmax(probs[0]))


def fingerprint_dim(net: Network) -> int:
    return net.spec.shape_after(penultimate_index(net))[0]


def verify_hash(instance_bytes: bytes, digest: bytes | str) -> bool:
    """True iff SHA-256(instance_bytes) equals the linkage digest."""
    if isinstance(digest, str):
        digest = bytes.fromhex(digest)
    return hashlib.sha256(instance_bytes).digest() == digest
