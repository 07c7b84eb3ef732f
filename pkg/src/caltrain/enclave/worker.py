"""The enclave worker program.

Runs as a separate OS process (``python -m caltrain.enclave.worker <json>``)
with no shared memory; the only channel to the host is the framed protocol
on stdin/stdout.  Participant keys live exclusively in this process.
Logging goes to stderr; stdout carries frames only.

In deterministic mode the worker computes with the same per-instance
float32 kernels as the host, enabling bit-exact partitioned/monolithic
equivalence.  Otherwise it uses the strict float64-accumulation kernels,
reflecting that in-enclave arithmetic enjoys none of the host's fast-math
style acceleration.
"""

from __future__ import annotations

import hashlib
import json
import os
import sys

import numpy as np
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.hashes import SHA256
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .. import protocol as proto
from ..attestation import NONCE_LEN, make_quote
from ..data import augment, center_crop, image_bytes
from ..errors import (
    AuthenticationError,
    BudgetExceededError,
    CaltrainError,
    OutMigrationError,
    ProtocolError,
    ReplayError,
    ShapeError,
    UnknownSourceError,
)
from ..layers import ARITH_DET, ARITH_STRICT
from ..netspec import CONV, DROPOUT, MAXPOOL, SOFTMAX, parse_network_spec
from ..network import Hyperparams, Network
from ..rng import DeterministicRng
from ..sealing import KEY_LEN, open_record
from .meter import MemoryMeter

PROVISION_INFO = b"caltrain-key-provision-v1"
FRONTNET_AAD = b"CTFN"

MODE_TRAINING = "training"
MODE_FINGERPRINTING = "fingerprinting"


class WorkerError(CaltrainError):
    """Wraps a protocol-level error code string for the ERROR frame."""

    def __init__(self, code: str, message: str):
        self.wire_code = code
        super().__init__(message)


class EnclaveWorker:
    def __init__(self, config: dict, stdin, stdout):
        self.stdin = stdin
        self.stdout = stdout
        self.mode = config.get("mode", MODE_TRAINING)
        if self.mode not in (MODE_TRAINING, MODE_FINGERPRINTING):
            raise WorkerError("CONFIG", f"unknown mode {self.mode!r}")
        self.deterministic = bool(config.get("deterministic", True))
        self.meter = MemoryMeter(int(config.get("memory_budget_bytes", 128 * 2**20)))
        self.keys: dict[str, tuple[bytes, int]] = {}
        self.sessions: dict[bytes, tuple[X25519PrivateKey, bytes]] = {}
        self.consumed_nonces: set[bytes] = set()
        self.net: Network | None = None
        self.partition = 0
        self.hyper: Hyperparams | None = None
        self.rng: DeterministicRng | None = None
        self.pending_batch = False
        self.enclave_layers: set[int] = set()

    # ----- plumbing ----------------------------------------------------------

    def send(self, tag: int, payload: bytes) -> None:
        proto.send_frame(self.stdout, tag, payload)

    def send_error(self, code: str, message: str) -> None:
        self.send(proto.ERROR, proto.pack_error(code, message))

    def serve(self) -> None:
        self.send(proto.UPDATE_ACK, b"\x01\x00\x00\x00")  # ready
        handlers = {
            proto.ATTEST: self.on_attest,
            proto.PROVISION_KEY: self.on_provision,
            proto.LOAD_MODEL: self.on_load_model,
            proto.TRAIN_BATCH: self.on_train_batch,
            proto.DELTA_IN: self.on_delta,
            proto.EXPORT_FRONTNET: self.on_export,
            proto.FINGERPRINT_BATCH: self.on_fingerprint,
        }
        while True:
            try:
                frame = proto.recv_frame(self.stdin)
            except ProtocolError as e:
                self.send_error("PROTOCOL", str(e))
                return
            if frame is None:
                return
            tag, payload = frame
            handler = handlers.get(tag)
            try:
                if handler is None:
                    raise WorkerError("PROTOCOL", f"unexpected tag {tag:#x}")
                handler(proto.Reader(payload))
            except WorkerError as e:
                self.send_error(e.wire_code, str(e))
            except BudgetExceededError as e:
                self.send_error("BUDGET_EXCEEDED", str(e))
            except (UnknownSourceError, AuthenticationError, ReplayError,
                    OutMigrationError, ProtocolError, ShapeError) as e:
                codes = {
                    UnknownSourceError: "UNKNOWN_SOURCE",
                    AuthenticationError: "TAG_MISMATCH",
                    ReplayError: "REPLAY",
                    OutMigrationError: "OUT_MIGRATION_FORBIDDEN",
                    ProtocolError: "PROTOCOL",
                    ShapeError: "SHAPE",
                }
                self.send_error(codes[type(e)], str(e))
            except Exception as e:  # never crash the channel
                self.send_error("INTERNAL", f"{type(e).__name__}: {e}")

    # ----- attestation & provisioning ----------------------------------------

    def on_attest(self, r: proto.Reader) -> None:
        nonce = r.take(NONCE_LEN)
        client_pub = r.take(32)
        r.done()
        if nonce in self.consumed_nonces or nonce in self.sessions:
            raise ReplayError("attestation nonce reused")
        eph = X25519PrivateKey.generate()
        self.sessions[nonce] = (eph, client_pub)
        quote = make_quote(nonce)
        pub = eph.public_key().public_bytes_raw()
        self.send(proto.ATTEST, quote.to_bytes() + pub)

    def _session_key(self, nonce: bytes) -> bytes:
        eph, client_pub = self.sessions[nonce]
        shared = eph.exchange(X25519PublicKey.from_public_bytes(client_pub))
        return HKDF(algorithm=SHA256(), length=KEY_LEN, salt=nonce, info=PROVISION_INFO).derive(shared)

    def on_provision(self, r: proto.Reader) -> None:
        nonce = r.take(NONCE_LEN)
        source_id = r.string()
        wrap_nonce = r.take(12)
        wrapped = r.blob32()
        r.done()
        if nonce not in self.sessions:
            raise ReplayError("no open session for this nonce (replayed or unknown transcript)")
        session_key = self._session_key(nonce)
        del self.sessions[nonce]
        self.consumed_nonces.add(nonce)
        try:
            key = AESGCM(session_key).decrypt(wrap_nonce, wrapped, source_id.encode("utf-8"))
        except InvalidTag:
            raise AuthenticationError("key unwrap failed") from None
        if len(key) != KEY_LEN:
            raise WorkerError("PROTOCOL", "unwrapped key has wrong length")
        epoch = self.keys[source_id][1] + 1 if source_id in self.keys else 1
        self.keys[source_id] = (key, epoch)
        self.send(proto.PROVISION_KEY, epoch.to_bytes(4, "little"))

    # ----- model management ---------------------------------------------------

    def _arith(self) -> str:
        return ARITH_DET if self.deterministic else ARITH_STRICT

    def on_load_model(self, r: proto.Reader) -> None:
        header, blobs = proto.unpack_load_model(r)
        if header.get("repartition"):
            self._repartition(header, dict(blobs))
            return
        spec = parse_network_spec(header["network"])
        partition = int(header["partition"])
        spec = spec.with_partition(partition)
        self.hyper = Hyperparams.from_dict(header["hyper"])
        self.rng = DeterministicRng(int(header["seed"]))
        self.partition = partition
        net = Network(spec, arith=self._arith())
        blob_map = dict(blobs)
        if self.mode == MODE_TRAINING:
            if partition:
                net.init_range(1, partition, self.rng)
            self.enclave_layers = set(range(1, partition + 1))
        else:
            # fingerprinting: the whole trained network must become resident
            if proto.BLOB_PLAIN_WEIGHTS in blob_map:
                net.load_range(blob_map[proto.BLOB_PLAIN_WEIGHTS])
            if proto.BLOB_SEALED_FRONTNET in blob_map:
                owner = header.get("frontnet_owner", "")
                if owner not in self.keys:
                    raise UnknownSourceError(f"no key provisioned for {owner!r}")
                blob = blob_map[proto.BLOB_SEALED_FRONTNET]
                nonce, ct = blob[:12], blob[12:]
                try:
                    plain = AESGCM(self.keys[owner][0]).decrypt(
                        nonce, ct, FRONTNET_AAD + owner.encode("utf-8")
                    )
                except InvalidTag:
                    raise AuthenticationError("sealed network blob failed authentication") from None
                net.load_range(plain)
            missing = [
                li
                for li in range(1, spec.num_layers + 1)
                if spec.layers[li - 1].kind == CONV and not net.states[li - 1].resident
            ]
            if missing:
                raise WorkerError("PROTOCOL", f"layers {missing} have no weights")
            self.enclave_layers = set(range(1, spec.num_layers + 1))
        for li in self.enclave_layers:
            net.states[li - 1].enclave_born = self.mode == MODE_TRAINING
        self.meter.release_persistent(self.meter.persistent)
        self.meter.charge_persistent(net.param_bytes(1, spec.num_layers))
        self.net = net
        self.pending_batch = False
        self.send(proto.LOAD_MODEL, proto.pack_load_model({"ok": True}))

    def _repartition(self, header: dict, blob_map: dict) -> None:
        if self.net is None:
            raise WorkerError("PROTOCOL", "no model loaded")
        if self.pending_batch:
            raise WorkerError("PROTOCOL", "repartition mid-batch is forbidden")
        new_l = int(header["partition"])
        old_l = self.partition
        spec = self.net.spec
        if not 0 <= new_l <= spec.num_layers or new_l == spec.num_layers - 1:
            raise WorkerError("PROTOCOL", f"invalid partition {new_l}")
        reply_blobs: list[tuple[int, bytes]] = []
        if new_l > old_l:
            blob = blob_map.get(proto.BLOB_PLAIN_WEIGHTS)
            if any(spec.layers[li - 1].kind == CONV for li in range(old_l + 1, new_l + 1)):
                if blob is None:
                    raise WorkerError("PROTOCOL", "missing weights for migrated layers")
                self.net.load_range(blob, expect_first=old_l + 1)
            for li in range(old_l + 1, new_l + 1):
                self.net.states[li - 1].enclave_born = False  # host supplied these
            self.enclave_layers |= set(range(old_l + 1, new_l + 1))
        elif new_l < old_l:
            for li in range(new_l + 1, old_l + 1):
                if self.net.states[li - 1].enclave_born:
                    raise OutMigrationError(
                        f"layer {li} was initialized inside the enclave and may not leave"
                    )
            released = self.net.serialize_range(new_l + 1, old_l)
            self.net.drop_range(new_l + 1, old_l)
            self.enclave_layers -= set(range(new_l + 1, old_l + 1))
            reply_blobs.append((proto.BLOB_PLAIN_WEIGHTS, released))
        self.partition = new_l
        self.net.spec = spec.with_partition(new_l)
        self.meter.release_persistent(self.meter.persistent)
        self.meter.charge_persistent(self.net.param_bytes(1, spec.num_layers))
        self.send(proto.LOAD_MODEL, proto.pack_load_model({"ok": True, "partition": new_l}, reply_blobs))

    # ----- batch working-set estimate ------------------------------------------

    def _batch_bytes(self, count: int, last_layer: int) -> int:
        spec = self.net.spec
        c, h, w = spec.input_dims
        total = count * c * h * w * 4  # decrypted+augmented input
        largest = total
        for li in range(1, last_layer + 1):
            oc, oh, ow = spec.shape_after(li)
            out = count * oc * oh * ow * 4
            total += out
            largest = max(largest, out)
            kind = spec.layers[li - 1].kind
            if kind == MAXPOOL:
                total += out // 4  # uint8 winner map
            elif kind == DROPOUT:
                total += out // 4  # bool keep mask
        # backward holds one delta per adjacent layer pair plus im2col scratch
        total += 2 * largest
        if last_layer >= 1:
            total += self.net.conv_scratch_bytes(1, last_layer)
        return total

    # ----- data path ------------------------------------------------------------

    def _open_batch(self, entries):
        accepted, rejections = [], []
        for e in entries:
            if e.source_id not in self.keys:
                rejections.append(proto.Rejection(e.global_id, proto.REJECT_UNKNOWN_SOURCE))
                continue
            c, h, w = e.record.dims
            if len(e.record.ciphertext) != c * h * w:
                rejections.append(proto.Rejection(e.global_id, proto.REJECT_MALFORMED))
                continue
            try:
                pixels = open_record(self.keys[e.source_id][0], e.source_id, e.record)
            except AuthenticationError:
                rejections.append(proto.Rejection(e.global_id, proto.REJECT_TAG_MISMATCH))
                continue
            accepted.append((e, pixels))
        return accepted, rejections

    def on_train_batch(self, r: proto.Reader) -> None:
        if self.net is None or self.mode != MODE_TRAINING:
            raise WorkerError("PROTOCOL", "no training model loaded")
        if self.pending_batch:
            raise WorkerError("PROTOCOL", "previous batch still awaiting its delta")
        epoch, batch_index, entries = proto.unpack_batch(r)
        r.done()
        accepted, rejections = self._open_batch(entries)
        if not accepted:
            raise WorkerError("BATCH_EMPTY", "all records of the batch were rejected")
        self.meter.require_transient(self._batch_bytes(len(accepted), self.partition))
        xs = np.empty((len(accepted), *self.net.spec.input_dims), dtype=np.float32)
        labels = np.empty(len(accepted), dtype=np.uint16)
        ids = np.empty(len(accepted), dtype=np.uint32)
        for j, (e, pixels) in enumerate(accepted):
            img = np.frombuffer(pixels, dtype=np.uint8).reshape(e.record.dims)
            gen = self.rng.generator("augment", e.source_id, epoch, e.record.record_index)
            xs[j] = augment(img, gen)
            labels[j] = e.record.label
            ids[j] = e.global_id
        if self.partition:
            ir = self.net.forward_range(
                xs, 1, self.partition, train=True, rng=self.rng,
                epoch=epoch, batch_index=batch_index,
            )
        else:
            ir = xs
        self.pending_batch = True
        self.send(proto.IR_OUT, proto.pack_ir_out(ids, labels, rejections, ir))

    def on_delta(self, r: proto.Reader) -> None:
        if not self.pending_batch:
            raise WorkerError("NO_PENDING_BATCH", "no forward pass awaits a delta")
        delta = proto.unpack_tensor(r)
        r.done()
        try:
            if self.partition:
                self.net.backward_range(delta, 1, self.partition)
                self.net.apply_updates(1, self.partition, self.hyper)
        finally:
            self.pending_batch = False
            if self.net is not None:
                self.net.clear_caches()
            self.meter.release_transient()
        self.send(proto.UPDATE_ACK, b"\x00\x00\x00\x00")

    def on_export(self, r: proto.Reader) -> None:
        source_id = r.string()
        r.done()
        if self.net is None:
            raise WorkerError("PROTOCOL", "no model loaded")
        if source_id not in self.keys:
            raise UnknownSourceError(f"no key provisioned for {source_id!r}")
        if self.pending_batch:
            raise WorkerError("PROTOCOL", "cannot export mid-batch")
        plain = self.net.serialize_range(1, self.partition)
        digests = self.net.range_digests(1, self.partition)
        nonce = os.urandom(12)
        sealed = AESGCM(self.keys[source_id][0]).encrypt(
            nonce, plain, FRONTNET_AAD + source_id.encode("utf-8")
        )
        payload = len(digests).to_bytes(4, "little") + b"".join(digests)
        payload += proto.pack_blob32(nonce + sealed)
        self.send(proto.EXPORT_FRONTNET, payload)

    def on_fingerprint(self, r: proto.Reader) -> None:
        if self.net is None or self.mode != MODE_FINGERPRINTING:
            raise WorkerError("PROTOCOL", "no fingerprinting model loaded")
        _, _, entries = proto.unpack_batch(r)
        r.done()
        accepted, rejections = self._open_batch(entries)
        spec = self.net.spec
        softmax_index = next(
            li for li in range(1, spec.num_layers + 1) if spec.layers[li - 1].kind == SOFTMAX
        )
        records = []
        if accepted:
            self.meter.require_transient(self._batch_bytes(len(accepted), spec.num_layers))
            imgs = np.stack(
                [np.frombuffer(p, dtype=np.uint8).reshape(e.record.dims) for e, p in accepted]
            )
            xs = center_crop(imgs)
            embed = self.net.forward_range(xs, 1, softmax_index - 1, train=False)
            norms = np.linalg.norm(embed.astype(np.float64), axis=1)
            for j, (e, pixels) in enumerate(accepted):
                if norms[j] == 0.0:
                    rejections.append(proto.Rejection(e.global_id, proto.REJECT_ZERO_EMBEDDING))
                    continue
                fp = (embed[j].astype(np.float64) / norms[j]).astype(np.float32)
                records.append(
                    proto.WireLinkage(
                        e.global_id,
                        e.record.label,
                        e.source_id,
                        hashlib.sha256(pixels).digest(),
                        fp,
                    )
                )
            self.meter.release_transient()
        self.send(proto.LINKAGE_OUT, proto.pack_linkage_out(records, rejections))


def main(argv: list[str]) -> int:
    if len(argv) != 2:
        print("usage: python -m caltrain.enclave.worker <config-json>", file=sys.stderr)
        return 2
    stdin = sys.stdin.buffer
    stdout = sys.stdout.buffer
    try:
        config = json.loads(argv[1])
        worker = EnclaveWorker(config, stdin, stdout)
    except BudgetExceededError as e:
        proto.send_frame(stdout, proto.ERROR, proto.pack_error("BUDGET_TOO_SMALL", str(e)))
        return 1
    except Exception as e:
        proto.send_frame(stdout, proto.ERROR, proto.pack_error("CONFIG", f"{type(e).__name__}: {e}"))
        return 1
    worker.serve()
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv))
