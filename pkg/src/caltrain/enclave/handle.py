"""Host-side handle for the enclave worker process.

Spawns the worker with a pinned single-threaded math environment, drives
the framed protocol over its stdin/stdout, optionally records a transcript
of every frame (tests inspect it for leaked plaintext or key material), and
maps ERROR frames back onto the exception hierarchy.
"""

from __future__ import annotations

import json
import os
import subprocess
import sys
from dataclasses import dataclass

import numpy as np
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.hashes import SHA256
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .. import protocol as proto
from ..attestation import (
    NONCE_LEN,
    Quote,
    enclave_code_digest,
    fresh_nonce,
    verify_quote,
)
from ..errors import (
    AuthenticationError,
    BudgetExceededError,
    CaltrainError,
    EnclaveStartupError,
    OutMigrationError,
    ProtocolError,
    QuoteRejectedError,
    ReplayError,
    ShapeError,
    UnknownSourceError,
)
from ..network import Hyperparams

_ERROR_CLASSES = {
    "UNKNOWN_SOURCE": UnknownSourceError,
    "TAG_MISMATCH": AuthenticationError,
    "REPLAY": ReplayError,
    "BUDGET_EXCEEDED": BudgetExceededError,
    "BUDGET_TOO_SMALL": BudgetExceededError,
    "OUT_MIGRATION_FORBIDDEN": OutMigrationError,
    "SHAPE": ShapeError,
}

PROVISION_INFO = b"caltrain-key-provision-v1"


class EnclaveWireError(CaltrainError):
    """An ERROR frame whose code has no dedicated exception class."""

    code = "E104"

    def __init__(self, wire_code: str, message: str):
        self.wire_code = wire_code
        super().__init__(f"{wire_code}: {message}")


def _raise_wire_error(code: str, message: str):
    cls = _ERROR_CLASSES.get(code)
    if cls is not None:
        raise cls(message)
    raise EnclaveWireError(code, message)


@dataclass
class EnclaveConfig:
    memory_budget_bytes: int = 128 * 2**20
    mode: str = "training"
    deterministic: bool = True

    def to_json(self) -> str:
        return json.dumps(
            {
                "memory_budget_bytes": self.memory_budget_bytes,
                "mode": self.mode,
                "deterministic": self.deterministic,
            }
        )


@dataclass
class IRBatch:
    ids: np.ndarray
    labels: np.ndarray
    rejections: list[proto.Rejection]
    ir: np.ndarray

    @property
    def accepted_count(self) -> int:
        return int(self.ids.shape[0])

    @property
    def rejected_count(self) -> int:
        return len(self.rejections)


@dataclass
class TranscriptFrame:
    direction: str  # "out" (host->enclave) or "in"
    tag: int
    payload: bytes


_WORKER_ENV_PINS = {
    "OPENBLAS_NUM_THREADS": "1",
    "OMP_NUM_THREADS": "1",
    "MKL_NUM_THREADS": "1",
    "NUMEXPR_NUM_THREADS": "1",
}


class Enclave:
    """One worker process; requests are serialized (one in-flight batch)."""

    def __init__(self, config: EnclaveConfig | None = None, record_transcript: bool = False):
        self.config = config or EnclaveConfig()
        self.transcript: list[TranscriptFrame] = [] if record_transcript else None
        self._proc: subprocess.Popen | None = None

    # ----- lifecycle ---------------------------------------------------------

    def start(self) -> "Enclave":
        env = dict(os.environ)
        env.update(_WORKER_ENV_PINS)
        self._proc = subprocess.Popen(
            [sys.executable, "-m", "caltrain.enclave.worker", self.config.to_json()],
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=None,
            env=env,
        )
        try:
            frame = proto.recv_frame(self._proc.stdout)
        except ProtocolError as e:
            raise EnclaveStartupError(f"worker produced no ready frame: {e}") from None
        if frame is None:
            raise EnclaveStartupError("worker exited before becoming ready")
        tag, payload = frame
        if tag == proto.ERROR:
            code, message = proto.unpack_error(proto.Reader(payload))
            self.close()
            raise EnclaveStartupError(f"{code}: {message}")
        if tag != proto.UPDATE_ACK:
            raise EnclaveStartupError(f"unexpected ready tag {tag:#x}")
        return self

    def close(self) -> None:
        if self._proc is None:
            return
        try:
            self._proc.stdin.close()
        except OSError:
            pass
        try:
            self._proc.wait(timeout=10)
        except subprocess.TimeoutExpired:
            self._proc.kill()
            self._proc.wait()
        self._proc = None

    def __enter__(self) -> "Enclave":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.close()

    # ----- request plumbing ----------------------------------------------------

    def _record(self, direction: str, tag: int, payload: bytes) -> None:
        if self.transcript is not None:
            self.transcript.append(TranscriptFrame(direction, tag, payload))

    def request(self, tag: int, payload: bytes, expect: tuple[int, ...]) -> tuple[int, bytes]:
        if self._proc is None:
            raise ProtocolError("enclave not started")
        self._record("out", tag, payload)
        proto.send_frame(self._proc.stdin, tag, payload)
        frame = proto.recv_frame(self._proc.stdout)
        if frame is None:
            raise ProtocolError("enclave closed the channel")
        rtag, rpayload = frame
        self._record("in", rtag, rpayload)
        if rtag == proto.ERROR:
            code, message = proto.unpack_error(proto.Reader(rpayload))
            _raise_wire_error(code, message)
        if rtag not in expect:
            raise ProtocolError(f"expected {[hex(t) for t in expect]}, got {rtag:#x}")
        return rtag, rpayload

    # ----- operations ------------------------------------------------------------

    def attest(self, nonce: bytes, client_public: bytes) -> tuple[Quote, bytes]:
        """One attestation round trip; returns the quote and worker DH key."""
        _, payload = self.request(proto.ATTEST, nonce + client_public, (proto.ATTEST,))
        r = proto.Reader(payload)
        quote = Quote.from_bytes(r.take(32 + NONCE_LEN + 64))
        worker_pub = r.take(32)
        r.done()
        return quote, worker_pub

    def provision_wrapped(self, nonce: bytes, source_id: str, wrap_nonce: bytes, wrapped: bytes) -> int:
        _, payload = self.request(
            proto.PROVISION_KEY,
            nonce + proto.pack_string(source_id) + wrap_nonce + proto.pack_blob32(wrapped),
            (proto.PROVISION_KEY,),
        )
        return int.from_bytes(payload[:4], "little")

    def load_model(
        self,
        network_text: str,
        partition: int,
        hyper: Hyperparams,
        seed: int,
        mode: str = "training",
        plain_weights: bytes | None = None,
        sealed_frontnet: bytes | None = None,
        frontnet_owner: str | None = None,
    ) -> None:
        header = {
            "network": network_text,
            "partition": partition,
            "hyper": hyper.to_dict(),
            "seed": seed,
            "mode": mode,
        }
        if frontnet_owner is not None:
            header["frontnet_owner"] = frontnet_owner
        blobs = []
        if plain_weights is not None:
            blobs.append((proto.BLOB_PLAIN_WEIGHTS, plain_weights))
        if sealed_frontnet is not None:
            blobs.append((proto.BLOB_SEALED_FRONTNET, sealed_frontnet))
        self.request(proto.LOAD_MODEL, proto.pack_load_model(header, blobs), (proto.LOAD_MODEL,))

    def repartition(self, new_partition: int, plain_weights: bytes | None = None) -> bytes | None:
        """Move the partition boundary; returns released weights when shrinking."""
        header = {"repartition": True, "partition": new_partition}
        blobs = []
        if plain_weights is not None:
            blobs.append((proto.BLOB_PLAIN_WEIGHTS, plain_weights))
        _, payload = self.request(
            proto.LOAD_MODEL, proto.pack_load_model(header, blobs), (proto.LOAD_MODEL,)
        )
        _, reply_blobs = proto.unpack_load_model(proto.Reader(payload))
        for kind, blob in reply_blobs:
            if kind == proto.BLOB_PLAIN_WEIGHTS:
                return blob
        return None

    def train_batch(self, epoch: int, batch_index: int, entries: list[proto.BatchRecord]) -> IRBatch:
        _, payload = self.request(
            proto.TRAIN_BATCH, proto.pack_batch(epoch, batch_index, entries), (proto.IR_OUT,)
        )
        ids, labels, rejections, ir = proto.unpack_ir_out(proto.Reader(payload))
        return IRBatch(ids, labels, rejections, ir)

    def send_delta(self, delta: np.ndarray) -> None:
        self.request(proto.DELTA_IN, proto.pack_tensor(delta), (proto.UPDATE_ACK,))

    def export_frontnet(self, source_id: str) -> tuple[list[bytes], bytes]:
        """Returns (per-layer digests of the FrontNet, sealed weights blob)."""
        _, payload = self.request(
            proto.EXPORT_FRONTNET, proto.pack_string(source_id), (proto.EXPORT_FRONTNET,)
        )
        r = proto.Reader(payload)
        n = r.u32()
        digests = [r.take(32) for _ in range(n)]
        blob = r.blob32()
        r.done()
        return digests, blob

    def fingerprint_batch(self, entries: list[proto.BatchRecord]):
        _, payload = self.request(
            proto.FINGERPRINT_BATCH, proto.pack_batch(0, 0, entries), (proto.LINKAGE_OUT,)
        )
        return proto.unpack_linkage_out(proto.Reader(payload))


def provision_key(
    enclave: Enclave,
    source_id: str,
    key: bytes,
    expected_code_digest: bytes | None = None,
    public_key=None,
) -> int:
    """Full participant-side provisioning flow.

    Attest with a fresh nonce, verify the quote against the expected enclave
    build digest, derive the session key from an ephemeral X25519 exchange,
    and ship the participant key wrapped under it.  Raises QuoteRejectedError
    (and provisions nothing) if the quote does not verify.
    """
    expected = expected_code_digest if expected_code_digest is not None else enclave_code_digest()
    nonce = fresh_nonce()
    eph = X25519PrivateKey.generate()
    client_pub = eph.public_key().public_bytes_raw()
    quote, worker_pub = enclave.attest(nonce, client_pub)
    if not verify_quote(quote, expected, nonce, public_key):
        raise QuoteRejectedError("enclave quote failed verification; refusing to provision")
    shared = eph.exchange(X25519PublicKey.from_public_bytes(worker_pub))
    session_key = HKDF(algorithm=SHA256(), length=16, salt=nonce, info=PROVISION_INFO).derive(shared)
    wrap_nonce = os.urandom(12)
    wrapped = AESGCM(session_key).encrypt(wrap_nonce, key, source_id.encode("utf-8"))
    return enclave.provision_wrapped(nonce, source_id, wrap_nonce, wrapped)
