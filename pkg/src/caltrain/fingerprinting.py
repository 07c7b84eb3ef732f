"""Fingerprinting stage: run every sealed record through a dedicated enclave.

A fingerprinting enclave receives the full trained network (plaintext
BackNet plus the owner's encrypted FrontNet blob, opened with the owner's
provisioned key), authenticates each sealed record, and emits linkage
records; no plaintext pixels and no FrontNet weights ever reach the host.
"""

from __future__ import annotations

import os

from .enclave.handle import Enclave, EnclaveConfig, provision_key
from .errors import FileFormatError
from .linkage import FingerprintDB, LinkageRecord
from .netspec import parse_network_spec
from .network import Hyperparams
from .protocol import Rejection
from .training import PackageSource, _Corpus, load_model_dir


def build_fingerprint_db(
    run_dir: str,
    packages: list[PackageSource],
    owner: str | None = None,
    batch_size: int = 128,
    memory_budget_bytes: int = 512 * 2**20,
    deterministic: bool = False,
) -> tuple[FingerprintDB, list[Rejection]]:
    """Fingerprint every record of every package with the trained model.

    ``owner`` names the participant whose FrontNet blob unlocks a
    partitioned model; monolithic models need none.  Returns the database
    and any per-record rejections.
    """
    network_text, manifest, back = load_model_dir(run_dir)
    partition = manifest["partition_index"]
    corpus = _Corpus.load(packages, need_keys=True)
    if owner is None and partition > 0:
        owner = sorted(corpus.keys)[0]

    spec = parse_network_spec(network_text)
    softmax_li = next(
        li for li in range(1, spec.num_layers + 1) if spec.layers[li - 1].kind == "softmax"
    )
    dim = spec.shape_after(softmax_li - 1)[0]
    db = FingerprintDB(spec.num_classes, dim)

    sealed_frontnet = None
    if partition > 0:
        path = os.path.join(run_dir, f"frontnet.{owner}.enc")
        if not os.path.exists(path):
            raise FileFormatError(f"no FrontNet blob for owner {owner!r}")
        with open(path, "rb") as fh:
            sealed_frontnet = fh.read()

    config = EnclaveConfig(
        memory_budget_bytes=memory_budget_bytes,
        mode="fingerprinting",
        deterministic=deterministic,
    )
    rejections: list[Rejection] = []
    with Enclave(config) as enclave:
        for source_id, key in sorted(corpus.keys.items()):
            provision_key(enclave, source_id, key)
        enclave.load_model(
            network_text,
            partition,
            Hyperparams(),
            seed=manifest.get("seed", 0),
            mode="fingerprinting",
            plain_weights=back.serialize_range(partition + 1, spec.num_layers),
            sealed_frontnet=sealed_frontnet,
            frontnet_owner=owner if sealed_frontnet is not None else None,
        )
        entries = corpus.entries
        for off in range(0, len(entries), batch_size):
            chunk = entries[off : off + batch_size]
            records, rejected = enclave.fingerprint_batch(chunk)
            rejections.extend(rejected)
            for wire in records:
                db.add(LinkageRecord(wire.fingerprint, wire.label, wire.source_id, wire.digest))
    return db, rejections


def fingerprint_packages_to_file(
    run_dir: str,
    packages: list[PackageSource],
    out_path: str,
    **kwargs,
) -> tuple[FingerprintDB, list[Rejection]]:
    db, rejections = build_fingerprint_db(run_dir, packages, **kwargs)
    db.save(out_path)
    return db, rejections
