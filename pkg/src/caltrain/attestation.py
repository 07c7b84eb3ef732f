"""Stub remote attestation for the simulated enclave.

A development Ed25519 key stands in for the platform quoting key: the worker
signs (code_digest || nonce) and clients verify against the published public
key plus their own expectation of the enclave build digest.  The code digest
is a SHA-256 over the source files that run inside the worker process, so a
modified enclave build produces a different digest.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

_DEV_SEED = bytes.fromhex(
    "7fb0e939fca6fa4b254371b4a23e1224b350fa87ca19e10837924f1d85333a7b"
)

NONCE_LEN = 16
DIGEST_LEN = 32
SIGNATURE_LEN = 64

# source files whose bytes define the enclave build (order-independent)
_ENCLAVE_MODULES = (
    "__init__.py",
    "errors.py",
    "rng.py",
    "netspec.py",
    "layers.py",
    "network.py",
    "data.py",
    "sealing.py",
    "attestation.py",
    "protocol.py",
    os.path.join("enclave", "__init__.py"),
    os.path.join("enclave", "meter.py"),
    os.path.join("enclave", "worker.py"),
)


def _signing_seed() -> bytes:
    env = os.environ.get("CALTRAIN_ATTESTATION_SEED")
    if env:
        seed = bytes.fromhex(env)
        if len(seed) != 32:
            raise ValueError("CALTRAIN_ATTESTATION_SEED must be 32 hex bytes")
        return seed
    return _DEV_SEED


def signing_key() -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(_signing_seed())


def attestation_public_key() -> Ed25519PublicKey:
    return signing_key().public_key()


def enclave_code_digest() -> bytes:
    """SHA-256 over the enclave-side source files of this installation."""
    root = os.path.dirname(os.path.abspath(__file__))
    h = hashlib.sha256()
    for rel in sorted(_ENCLAVE_MODULES):
        path = os.path.join(root, rel)
        h.update(rel.encode("utf-8"))
        h.update(b"\x00")
        with open(path, "rb") as fh:
            h.update(fh.read())
        h.update(b"\x00")
    return h.digest()


@dataclass(frozen=True)
class Quote:
    code_digest: bytes
    nonce: bytes
    signature: bytes

    def to_bytes(self) -> bytes:
        return self.code_digest + self.nonce + self.signature

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Quote":
        if len(raw) != DIGEST_LEN + NONCE_LEN + SIGNATURE_LEN:
            raise ValueError("malformed quote")
        return cls(
            raw[:DIGEST_LEN],
            raw[DIGEST_LEN : DIGEST_LEN + NONCE_LEN],
            raw[DIGEST_LEN + NONCE_LEN :],
        )


def make_quote(nonce: bytes, code_digest: bytes | None = None) -> Quote:
    if len(nonce) != NONCE_LEN:
        raise ValueError(f"nonce must be {NONCE_LEN} bytes")
    digest = code_digest if code_digest is not None else enclave_code_digest()
    sig = signing_key().sign(digest + nonce)
    return Quote(digest, nonce, sig)


def verify_quote(
    quote: Quote,
    expected_code_digest: bytes,
    nonce: bytes,
    public_key: Ed25519PublicKey | None = None,
) -> bool:
    """Accept iff the signature verifies, the digest matches, the nonce echoes."""
    pk = public_key if public_key is not None else attestation_public_key()
    if quote.code_digest != expected_code_digest or quote.nonce != nonce:
        return False
    try:
        pk.verify(quote.signature, quote.code_digest + quote.nonce)
    except InvalidSignature:
        return False
    return True


def fresh_nonce() -> bytes:
    return os.urandom(NONCE_LEN)
