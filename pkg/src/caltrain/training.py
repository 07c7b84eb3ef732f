"""Training orchestration across the enclave boundary, plus the monolithic
reference path, model packaging, evaluation and the partition-depth
benchmark.

Deterministic mode pins both sides of the boundary to identical
per-instance float32 arithmetic and a single BLAS thread, so a partitioned
run and a monolithic run with the same seed produce bit-identical weights.
The non-deterministic mode lets the host use the batched fast path while
the enclave worker stays on strict unaccelerated arithmetic, which is what
the partition-depth overhead benchmark measures.
"""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import data as D
from .enclave.handle import Enclave, EnclaveConfig, EnclaveWireError, provision_key
from .errors import DivergenceError, FileFormatError, UsageError
from .layers import ARITH_DET, ARITH_FAST
from .netspec import NetworkSpec, load_network_text, parse_network_spec
from .network import Hyperparams, Network, loss_and_delta, model_digest
from .protocol import BatchRecord
from .rng import DeterministicRng
from .sealing import DatasetPackage, load_key, open_record, read_package

FRONTNET_AAD = b"CTFN"

MODE_PARTITIONED = "partitioned"
MODE_MONOLITHIC = "monolithic"


@dataclass
class PackageSource:
    path: str
    key_path: str | None = None  # required for provisioning / local decrypt


@dataclass
class TrainRunConfig:
    network: str  # builtin name or architecture file path
    partition_index: int
    hyper: Hyperparams
    packages: list[PackageSource]
    mode: str = MODE_PARTITIONED
    deterministic: bool = True
    enclave: EnclaveConfig = field(default_factory=EnclaveConfig)
    eval_data: str | None = None
    eval_limit: int | None = None
    assessment_report: str | None = None  # enforces a recommended minimum L

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainRunConfig":
        known = {
            "network",
            "partition_index",
            "hyperparams",
            "packages",
            "mode",
            "deterministic",
            "enclave",
            "eval_data",
            "eval_limit",
            "assessment_report",
        }
        unknown = set(doc) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        packages = [
            PackageSource(p["path"], p.get("key")) if isinstance(p, dict) else PackageSource(p)
            for p in doc.get("packages", [])
        ]
        enclave_doc = doc.get("enclave", {})
        enclave = EnclaveConfig(
            memory_budget_bytes=int(enclave_doc.get("memory_budget_bytes", 128 * 2**20)),
            deterministic=bool(doc.get("deterministic", True)),
        )
        return cls(
            network=doc["network"],
            partition_index=int(doc.get("partition_index", 0)),
            hyper=Hyperparams.from_dict(doc.get("hyperparams", {})),
            packages=packages,
            mode=doc.get("mode", MODE_PARTITIONED),
            deterministic=bool(doc.get("deterministic", True)),
            enclave=enclave,
            eval_data=doc.get("eval_data"),
            eval_limit=doc.get("eval_limit"),
            assessment_report=doc.get("assessment_report"),
        )

    @classmethod
    def from_json_file(cls, path: str) -> "TrainRunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class EpochLog:
    epoch: int
    loss: float
    top1: float | None
    top2: float | None
    seconds: float
    rejected: int = 0


@dataclass
class TrainedModel:
    network_text: str
    spec: NetworkSpec
    network: Network  # resident layers: BackNet only in partitioned mode
    partition_index: int
    mode: str
    seed: int
    front_digests: list[bytes]
    front_blobs: dict[str, bytes]
    log: list[EpochLog]

    def model_digest(self) -> str:
        back = self.network.range_digests(self.partition_index + 1, self.spec.num_layers)
        return model_digest(list(self.front_digests) + back)

    def save(self, run_dir: str) -> None:
        os.makedirs(run_dir, exist_ok=True)
        _atomic_write(os.path.join(run_dir, "arch.txt"), self.network_text.encode("utf-8"))
        back = self.network.serialize_range(self.partition_index + 1, self.spec.num_layers)
        _atomic_write(os.path.join(run_dir, "backnet.ctwt"), back)
        for source, blob in self.front_blobs.items():
            _atomic_write(os.path.join(run_dir, f"frontnet.{source}.enc"), blob)
        manifest = {
            "mode": self.mode,
            "partition_index": self.partition_index,
            "seed": self.seed,
            "num_classes": self.spec.num_classes,
            "front_digests": [d.hex() for d in self.front_digests],
            "model_digest": self.model_digest(),
            "sources": sorted(self.front_blobs),
        }
        _atomic_write(
            os.path.join(run_dir, "manifest.json"),
            json.dumps(manifest, indent=2, sort_keys=True).encode("utf-8"),
        )
        with open(os.path.join(run_dir, "log.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", "top1", "top2", "seconds"])
            for e in self.log:
                w.writerow(
                    [
                        e.epoch,
                        f"{e.loss:.6f}",
                        "" if e.top1 is None else f"{e.top1:.4f}",
                        "" if e.top2 is None else f"{e.top2:.4f}",
                        f"{e.seconds:.3f}",
                    ]
                )


def _atomic_write(path: str, payload: bytes) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def load_model_dir(run_dir: str):
    """Read a saved run: (network_text, manifest dict, backnet Network)."""
    with open(os.path.join(run_dir, "arch.txt"), "r", encoding="utf-8") as fh:
        network_text = fh.read()
    with open(os.path.join(run_dir, "manifest.json"), "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    spec = parse_network_spec(network_text).with_partition(manifest["partition_index"])
    net = Network(spec)
    with open(os.path.join(run_dir, "backnet.ctwt"), "rb") as fh:
        net.load_range(fh.read())
    return network_text, manifest, net


def assemble_full_network(run_dir: str, key: bytes | None = None, source: str | None = None) -> Network:
    """Participant-side reconstruction of the complete network.

    Monolithic runs load directly; partitioned runs need the participant's
    key to open their encrypted FrontNet blob.
    """
    from cryptography.exceptions import InvalidTag
    from cryptography.hazmat.primitives.ciphers.aead import AESGCM

    network_text, manifest, net = load_model_dir(run_dir)
    partition = manifest["partition_index"]
    if partition == 0:
        return net
    if key is None or source is None:
        raise UsageError("partitioned model: need the participant key and source id")
    path = os.path.join(run_dir, f"frontnet.{source}.enc")
    if not os.path.exists(path):
        raise FileFormatError(f"no FrontNet blob for source {source!r}")
    with open(path, "rb") as fh:
        blob = fh.read()
    nonce, ct = blob[:12], blob[12:]
    try:
        plain = AESGCM(key).decrypt(nonce, ct, FRONTNET_AAD + source.encode("utf-8"))
    except InvalidTag:
        raise FileFormatError("FrontNet blob failed authentication under this key") from None
    net.load_range(plain, expect_first=1)
    return net


def release_model(run_dir: str, out_dir: str) -> None:
    """Package the release artifact: plaintext BackNet + per-participant blobs."""
    import shutil

    os.makedirs(out_dir, exist_ok=True)
    for name in os.listdir(run_dir):
        if name in ("arch.txt", "backnet.ctwt", "manifest.json") or name.startswith("frontnet."):
            shutil.copyfile(os.path.join(run_dir, name), os.path.join(out_dir, name))


# ----- shared data handling ----------------------------------------------------


@dataclass
class _Corpus:
    """Sealed records of every package in canonical (package, record) order."""

    entries: list[BatchRecord]
    packages: dict[str, DatasetPackage]
    keys: dict[str, bytes]

    @classmethod
    def load(cls, sources: list[PackageSource], need_keys: bool) -> "_Corpus":
        entries: list[BatchRecord] = []
        packages: dict[str, DatasetPackage] = {}
        keys: dict[str, bytes] = {}
        gid = 0
        for src in sources:
            pkg = read_package(src.path)
            if pkg.source_id in packages:
                raise UsageError(f"duplicate source id {pkg.source_id!r}")
            packages[pkg.source_id] = pkg
            if src.key_path is not None:
                keys[pkg.source_id] = load_key(src.key_path)
            elif need_keys:
                raise UsageError(f"package {src.path} has no key configured")
            for rec in pkg.records:
                entries.append(BatchRecord(gid, pkg.source_id, rec))
                gid += 1
        if not entries:
            raise UsageError("no records in any package")
        return cls(entries, packages, keys)


def _epoch_batches(rng: DeterministicRng, epoch: int, count: int, batch_size: int):
    perm = rng.generator("shuffle", epoch).permutation(count)
    return [perm[i : i + batch_size] for i in range(0, count, batch_size)]


def _load_eval_set(config: TrainRunConfig):
    if config.eval_data is None:
        return None
    return D.load_dataset(config.eval_data, limit=config.eval_limit)


def _check_assessment_minimum(config: TrainRunConfig) -> None:
    if config.assessment_report is None:
        return
    with open(config.assessment_report, "r", encoding="utf-8") as fh:
        report = json.load(fh)
    minimum = int(report.get("recommended_partition", 0))
    if config.partition_index < minimum:
        raise UsageError(
            f"partition {config.partition_index} is below the assessed minimum {minimum}"
        )


# ----- partitioned training -----------------------------------------------------


class PartitionedTrainer:
    """Drives {enclave forward -> BackNet -> loss -> BackNet backward ->
    enclave backward -> updates} with record-level shuffling across sources."""

    def __init__(self, config: TrainRunConfig, record_transcript: bool = False):
        if config.mode != MODE_PARTITIONED:
            raise UsageError("PartitionedTrainer requires partitioned mode")
        _check_assessment_minimum(config)
        self.config = config
        self.network_text = load_network_text(config.network)
        self.spec = parse_network_spec(self.network_text).with_partition(config.partition_index)
        self.partition = config.partition_index
        self.hyper = config.hyper
        self.rng = DeterministicRng(self.hyper.seed)
        self.corpus = _Corpus.load(config.packages, need_keys=True)
        self.eval_set = _load_eval_set(config)
        self.log: list[EpochLog] = []
        self._mid_epoch = False

        enclave_config = EnclaveConfig(
            memory_budget_bytes=config.enclave.memory_budget_bytes,
            mode="training",
            deterministic=config.deterministic,
        )
        self.enclave = Enclave(enclave_config, record_transcript=record_transcript).start()
        try:
            for source_id, key in self.corpus.keys.items():
                provision_key(self.enclave, source_id, key)
            self.enclave.load_model(
                self.network_text, self.partition, self.hyper, seed=self.hyper.seed
            )
        except Exception:
            self.enclave.close()
            raise
        arith = ARITH_DET if config.deterministic else ARITH_FAST
        self.host = Network(self.spec, arith=arith)
        if self.partition < self.spec.num_layers:
            self.host.init_range(self.partition + 1, self.spec.num_layers, self.rng)

    # -- epoch ------------------------------------------------------------------

    def run_epoch(self, epoch: int) -> EpochLog:
        started = time.perf_counter()
        losses, weights = [], []
        rejected = 0
        self._mid_epoch = True
        n = self.spec.num_layers
        limits = 1 if self.config.deterministic else None
        with threadpool_limits(limits=limits):
            for bidx, batch in enumerate(_epoch_batches(self.rng, epoch, len(self.corpus.entries), self.hyper.batch_size)):
                entries = [self.corpus.entries[i] for i in batch]
                try:
                    ir_batch = self.enclave.train_batch(epoch, bidx, entries)
                except EnclaveWireError as e:
                    if e.wire_code == "BATCH_EMPTY":
                        rejected += len(entries)
                        continue
                    raise
                rejected += ir_batch.rejected_count
                probs = self.host.forward_range(
                    ir_batch.ir, self.partition + 1, n,
                    train=True, rng=self.rng, epoch=epoch, batch_index=bidx,
                )
                loss, delta = loss_and_delta(probs, ir_batch.labels.astype(np.int64))
                if not np.isfinite(loss):
                    raise DivergenceError(f"non-finite loss in epoch {epoch}, batch {bidx}")
                boundary_delta = self.host.backward_range(delta, self.partition + 1, n)
                self.enclave.send_delta(boundary_delta)
                self.host.apply_updates(self.partition + 1, n, self.hyper)
                self.host.clear_caches()
                losses.append(loss)
                weights.append(ir_batch.accepted_count)
        self._mid_epoch = False
        mean_loss = float(np.average(losses, weights=weights)) if losses else float("nan")
        top1 = top2 = None
        if self.eval_set is not None:
            top1, top2 = self._evaluate_released()
        entry = EpochLog(epoch, mean_loss, top1, top2, time.perf_counter() - started, rejected)
        self.log.append(entry)
        return entry

    def _evaluate_released(self):
        """Evaluate as a participant would: export, decrypt with own key, assemble."""
        source_id = next(iter(sorted(self.corpus.keys)))
        full = self._assembled_network(source_id)
        images, labels = self.eval_set
        return evaluate(full, images, labels)

    def _assembled_network(self, source_id: str) -> Network:
        from cryptography.hazmat.primitives.ciphers.aead import AESGCM

        _, blob = self.enclave.export_frontnet(source_id)
        nonce, ct = blob[:12], blob[12:]
        plain = AESGCM(self.corpus.keys[source_id]).decrypt(
            nonce, ct, FRONTNET_AAD + source_id.encode("utf-8")
        )
        full = Network(self.spec, arith=ARITH_FAST)
        full.load_range(plain)
        back = self.host.serialize_range(self.partition + 1, self.spec.num_layers)
        full.load_range(back)
        return full

    # -- repartition ---------------------------------------------------------------

    def repartition(self, new_partition: int) -> None:
        """Move the boundary between epochs, preserving weights exactly."""
        if self._mid_epoch:
            raise UsageError("repartition is only legal between epochs")
        if new_partition == self.partition:
            return
        if new_partition > self.partition:
            has_conv = any(
                self.spec.layers[li - 1].kind == "conv"
                for li in range(self.partition + 1, new_partition + 1)
            )
            blob = (
                self.host.serialize_range(self.partition + 1, new_partition) if has_conv else None
            )
            self.enclave.repartition(new_partition, plain_weights=blob)
            self.host.drop_range(self.partition + 1, new_partition)
        else:
            released = self.enclave.repartition(new_partition)
            if released is not None:
                self.host.load_range(released, expect_first=new_partition + 1)
        self.partition = new_partition
        self.spec = self.spec.with_partition(new_partition)
        self.host.spec = self.spec

    # -- completion ------------------------------------------------------------------

    def finish(self) -> TrainedModel:
        front_digests: list[bytes] = []
        front_blobs: dict[str, bytes] = {}
        for source_id in sorted(self.corpus.keys):
            digests, blob = self.enclave.export_frontnet(source_id)
            front_digests = digests
            front_blobs[source_id] = blob
        self.close()
        return TrainedModel(
            self.network_text,
            self.spec,
            self.host,
            self.partition,
            MODE_PARTITIONED,
            self.hyper.seed,
            front_digests,
            front_blobs,
            self.log,
        )

    def close(self) -> None:
        self.enclave.close()


# ----- monolithic training --------------------------------------------------------


class MonolithicTrainer:
    """Reference path: same pipeline, every layer host-side, plaintext data."""

    def __init__(self, config: TrainRunConfig):
        if config.mode != MODE_MONOLITHIC:
            raise UsageError("MonolithicTrainer requires monolithic mode")
        self.config = config
        self.network_text = load_network_text(config.network)
        self.spec = parse_network_spec(self.network_text)
        self.hyper = config.hyper
        self.rng = DeterministicRng(self.hyper.seed)
        self.corpus = _Corpus.load(config.packages, need_keys=True)
        self.eval_set = _load_eval_set(config)
        self.log: list[EpochLog] = []

        # test-only plaintext path: decrypt everything up front
        self.plain: list[tuple[str, int, int, np.ndarray]] = []
        for e in self.corpus.entries:
            pixels = open_record(self.corpus.keys[e.source_id], e.source_id, e.record)
            img = np.frombuffer(pixels, dtype=np.uint8).reshape(e.record.dims)
            self.plain.append((e.source_id, e.record.record_index, e.record.label, img))

        arith = ARITH_DET if config.deterministic else ARITH_FAST
        self.net = Network(self.spec, arith=arith)
        self.net.init_range(1, self.spec.num_layers, self.rng)

    def run_epoch(self, epoch: int) -> EpochLog:
        started = time.perf_counter()
        losses, weights = [], []
        n = self.spec.num_layers
        limits = 1 if self.config.deterministic else None
        with threadpool_limits(limits=limits):
            for bidx, batch in enumerate(_epoch_batches(self.rng, epoch, len(self.plain), self.hyper.batch_size)):
                xs = np.empty((len(batch), *self.spec.input_dims), dtype=np.float32)
                labels = np.empty(len(batch), dtype=np.int64)
                for j, i in enumerate(batch):
                    source_id, record_index, label, img = self.plain[i]
                    gen = self.rng.generator("augment", source_id, epoch, record_index)
                    xs[j] = D.augment(img, gen)
                    labels[j] = label
                probs = self.net.forward_range(
                    xs, 1, n, train=True, rng=self.rng, epoch=epoch, batch_index=bidx
                )
                loss, delta = loss_and_delta(probs, labels)
                if not np.isfinite(loss):
                    raise DivergenceError(f"non-finite loss in epoch {epoch}, batch {bidx}")
                self.net.backward_range(delta, 1, n)
                self.net.apply_updates(1, n, self.hyper)
                self.net.clear_caches()
                losses.append(loss)
                weights.append(len(batch))
        mean_loss = float(np.average(losses, weights=weights)) if losses else float("nan")
        top1 = top2 = None
        if self.eval_set is not None:
            images, eval_labels = self.eval_set
            top1, top2 = evaluate(self.net, images, eval_labels)
        entry = EpochLog(epoch, mean_loss, top1, top2, time.perf_counter() - started, 0)
        self.log.append(entry)
        return entry

    def finish(self) -> TrainedModel:
        return TrainedModel(
            self.network_text,
            self.spec,
            self.net,
            0,
            MODE_MONOLITHIC,
            self.hyper.seed,
            [],
            {},
            self.log,
        )

    def close(self) -> None:  # symmetry with PartitionedTrainer
        pass


def train(config: TrainRunConfig, record_transcript: bool = False):
    """One-shot training run; returns (TrainedModel, trainer) for inspection."""
    if config.mode == MODE_MONOLITHIC:
        trainer = MonolithicTrainer(config)
    else:
        trainer = PartitionedTrainer(config, record_transcript=record_transcript)
    try:
        for epoch in range(config.hyper.epochs):
            trainer.run_epoch(epoch)
        model = trainer.finish()
    finally:
        trainer.close()
    return model, trainer


def train_monolithic(config: TrainRunConfig) -> TrainedModel:
    cfg = config
    if cfg.mode != MODE_MONOLITHIC:
        cfg = TrainRunConfig(**{**cfg.__dict__, "mode": MODE_MONOLITHIC})
    model, _ = train(cfg)
    return model


# ----- evaluation ------------------------------------------------------------------


def evaluate(net: Network, images_u8: np.ndarray, labels, batch: int = 256):
    """Top-1/top-2 accuracy with deterministic center-crop preprocessing."""
    labels = np.asarray(labels)
    if images_u8.shape[0] == 0:
        raise UsageError("empty test set")
    n_layers = net.spec.num_layers
    hits1 = hits2 = 0
    for i in range(0, images_u8.shape[0], batch):
        xs = D.center_crop(images_u8[i : i + batch])
        probs = net.forward_range(xs, 1, n_layers, train=False)
        order = np.argsort(-probs, axis=1, kind="stable")
        want = labels[i : i + batch]
        hits1 += int((order[:, 0] == want).sum())
        hits2 += int(((order[:, 0] == want) | (order[:, 1] == want)).sum())
    total = images_u8.shape[0]
    return hits1 / total, hits2 / total


# ----- partition-depth benchmark ----------------------------------------------------


@dataclass
class BenchmarkRow:
    partition_index: int
    conv_layers: int
    seconds: float
    overhead: float


@dataclass
class BenchmarkResult:
    monolithic_seconds: float
    monolithic_runs: list[float]
    rows: list[BenchmarkRow]

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["partition_index", "conv_layers", "seconds", "overhead"])
            for r in self.rows:
                w.writerow([r.partition_index, r.conv_layers, f"{r.seconds:.3f}", f"{r.overhead:.4f}"])


def benchmark_epoch(config: TrainRunConfig, partition_indices: list[int], runs: int = 3) -> BenchmarkResult:
    """Median single-epoch time per partition depth vs the monolithic path.

    Uses the non-deterministic (production) arithmetic on both sides: fast
    batched math on the host, strict unaccelerated math in the worker.
    """
    if runs < 3:
        raise UsageError("benchmark needs at least 3 runs per point")
    base = {**config.__dict__, "deterministic": False}

    mono_cfg = TrainRunConfig(**{**base, "mode": MODE_MONOLITHIC})
    mono = MonolithicTrainer(mono_cfg)
    mono_times = []
    mono.run_epoch(0)  # warm the caches before timing
    for e in range(runs):
        entry = mono.run_epoch(e + 1)
        mono_times.append(entry.seconds)
    t_mono = float(np.median(mono_times))

    rows = []
    spec = parse_network_spec(load_network_text(config.network))
    for L in partition_indices:
        cfg = TrainRunConfig(**{**base, "mode": MODE_PARTITIONED, "partition_index": L})
        trainer = PartitionedTrainer(cfg)
        try:
            times = [trainer.run_epoch(e).seconds for e in range(runs)]
        finally:
            trainer.close()
        t = float(np.median(times))
        convs = sum(1 for li in range(1, L + 1) if spec.layers[li - 1].kind == "conv")
        rows.append(BenchmarkRow(L, convs, t, t / t_mono - 1.0))
    return BenchmarkResult(t_mono, mono_times, rows)
