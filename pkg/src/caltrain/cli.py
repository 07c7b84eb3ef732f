"""Single entry point: ``caltrain <subcommand>``.

Subcommands cover the whole pipeline: keygen/seal (participants), train
(server + enclave), assess (exposure report), release (model packaging),
fingerprint (linkage database), query/serve (forensics), poison/evaluate
(the backdoor lab), and bench (partition-depth overhead).

Exit codes: 0 success, 1 usage error, 2 operational error, 3 evaluate-gate
failure.  Errors print to stderr as ``CT-Exxx: message``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import data as D
from .assessment import assess
from .enclave.handle import EnclaveConfig
from .errors import AcceptanceFailure, CaltrainError, UsageError
from .fingerprinting import fingerprint_packages_to_file
from .linkage import DEFAULT_K, FingerprintDB, extract_fingerprint
from .poison import (
    PoisonManifest,
    TriggerSpec,
    build_poisoned_participant,
    evaluate_accountability,
    stamp_trigger,
)
from .rng import DeterministicRng
from .sealing import generate_key, load_key, seal_dataset, write_package
from .service import serve_queries
from .training import (
    MODE_MONOLITHIC,
    PackageSource,
    TrainRunConfig,
    assemble_full_network,
    benchmark_epoch,
    release_model,
    train,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors must exit 1, not argparse's 2
        raise UsageError(message)


def _seed_override(seed: int) -> int:
    env = os.environ.get("CALTRAIN_SEED")
    return int(env) if env else seed


def _apply_overrides(doc: dict, overrides: list[str]) -> dict:
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        node = doc
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = parsed
    return doc


def _package_sources(package_paths, key_paths) -> list[PackageSource]:
    if len(package_paths) != len(key_paths):
        raise UsageError("--package and --key must be given in matching pairs")
    return [PackageSource(p, k) for p, k in zip(package_paths, key_paths)]


# ----- subcommand implementations ------------------------------------------------


def cmd_keygen(args) -> int:
    generate_key(args.out)
    print(f"wrote key {args.out}")
    return 0


def cmd_seal(args) -> int:
    images, labels = D.load_dataset(args.input, limit=args.limit)
    if args.offset:
        images, labels = images[args.offset :], labels[args.offset :]
        if args.limit is not None:
            images, labels = images[: args.limit], labels[: args.limit]
    key = load_key(args.key)
    pkg = seal_dataset(images, labels, key, args.source)
    write_package(pkg, args.out)
    print(f"sealed {pkg.record_count} records from {args.source} into {args.out}")
    return 0


def cmd_train(args) -> int:
    with open(args.config, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    doc = _apply_overrides(doc, args.set)
    config = TrainRunConfig.from_dict(doc)
    config.hyper.seed = _seed_override(config.hyper.seed)
    model, _ = train(config)
    model.save(args.out)
    print(f"trained {config.mode} model; digest {model.model_digest()}")
    print(f"run artifacts in {args.out}")
    return 0


def cmd_assess(args) -> int:
    generator = assemble_full_network(args.model, _maybe_key(args.key), args.source)
    validator = assemble_full_network(
        args.validator, _maybe_key(args.validator_key), args.validator_source
    )
    images, _ = D.load_dataset(args.data, limit=args.samples)
    report = assess(generator, validator, images[: args.samples], threshold_scale=args.scale)
    report.save_json(args.out)
    if args.csv:
        report.save_csv(args.csv)
    flag = " (no safe partition)" if report.no_safe_partition else ""
    print(f"recommended partition: {report.recommended_partition}{flag}")
    print(f"report written to {args.out}")
    return 0


def _maybe_key(path):
    return load_key(path) if path else None


def cmd_release(args) -> int:
    release_model(args.run, args.out)
    print(f"release artifacts in {args.out}")
    return 0


def cmd_fingerprint(args) -> int:
    sources = _package_sources(args.package, args.key)
    db, rejections = fingerprint_packages_to_file(
        args.model,
        sources,
        args.out,
        owner=args.owner,
        batch_size=args.batch,
        memory_budget_bytes=args.budget_mib * 2**20,
    )
    print(f"fingerprinted {len(db)} records into {args.out} ({len(rejections)} rejected)")
    return 0


def cmd_query(args) -> int:
    db = FingerprintDB.load(args.db)
    net = assemble_full_network(args.model, _maybe_key(args.key), args.source)
    image = D.load_image_file(args.image)
    fingerprint, predicted = extract_fingerprint(net, image)
    label = predicted if args.label is None else args.label
    neighbors = db.query_knn(fingerprint, label, args.k)
    print(f"predicted label {predicted}; querying class {label}")
    for rank, n in enumerate(neighbors, start=1):
        print(f"{rank:2d}  d={n.distance:.6f}  source={n.source_id}  hash={n.digest_hex}")
    return 0


def cmd_serve(args) -> int:
    host, _, port = args.bind.rpartition(":")
    db = FingerprintDB.load(args.db)
    server = serve_queries(db, host or "127.0.0.1", int(port))
    addr = server.server_address
    print(f"serving fingerprint queries on {addr[0]}:{addr[1]} (Ctrl-C stops)")
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        server.shutdown()
    return 0


def cmd_poison(args) -> int:
    images, labels = D.load_dataset(args.input, limit=args.limit)
    rng = DeterministicRng(_seed_override(args.seed))
    trigger = TriggerSpec(patch_size=args.patch, corner_offset=args.corner_offset)
    key = load_key(args.key)
    package, manifest, _, _ = build_poisoned_participant(
        images, labels, args.target, args.fraction, trigger, key, args.source, rng
    )
    write_package(package, args.out)
    manifest.save(args.manifest)
    count = len(manifest.poisoned[args.source])
    print(f"poisoned {count} of {package.record_count} records toward class {args.target}")
    return 0


def cmd_evaluate(args) -> int:
    with open(args.config, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    net = assemble_full_network(
        doc["model"],
        load_key(doc["key"]) if doc.get("key") else None,
        doc.get("source"),
    )
    db = FingerprintDB.load(doc["db"])
    manifest = PoisonManifest.load(doc["manifest"])
    images, labels = D.load_dataset(doc["test_data"], limit=doc.get("test_limit"))
    trigger = TriggerSpec(
        patch_size=doc.get("trigger_patch", 4), corner_offset=doc.get("trigger_offset", 4)
    )
    k = int(doc.get("k", DEFAULT_K))
    triggered = np.stack([stamp_trigger(img, trigger) for img in images])
    attack = evaluate_accountability(net, db, triggered, labels, manifest, k=k, mode="attack")
    control = evaluate_accountability(net, db, images, labels, manifest, k=k, mode="control")
    out = {
        "attack": attack.to_dict(),
        "control": control.to_dict(),
    }
    if doc.get("out"):
        with open(doc["out"], "w", encoding="utf-8") as fh:
            json.dump(out, fh, indent=2)
    print(f"attack success rate: {attack.attack_success_rate:.3f}")
    print(f"mean precision@{k} (attack): {attack.mean_precision}")
    print(f"mean precision@{k} (control): {control.mean_precision}")
    gates = doc.get("thresholds", {})
    failures = []
    if "min_mean_precision" in gates:
        if attack.mean_precision is None or attack.mean_precision < gates["min_mean_precision"]:
            failures.append(
                f"attack precision {attack.mean_precision} < {gates['min_mean_precision']}"
            )
    if "max_control_precision" in gates and control.mean_precision is not None:
        if control.mean_precision > gates["max_control_precision"]:
            failures.append(
                f"control precision {control.mean_precision} > {gates['max_control_precision']}"
            )
    if failures:
        raise AcceptanceFailure("; ".join(failures))
    return 0


def cmd_bench(args) -> int:
    import tempfile

    partitions = [int(x) for x in args.partitions.split(",") if x]
    with tempfile.TemporaryDirectory() as tmp:
        images, labels = D.load_dataset(args.data, limit=args.limit)
        key_path = os.path.join(tmp, "bench.key")
        key = generate_key(key_path)
        pkg_path = os.path.join(tmp, "bench.ctds")
        write_package(seal_dataset(images, labels, key, "bench"), pkg_path)
        hyper_seed = _seed_override(args.seed)
        from .network import Hyperparams

        config = TrainRunConfig(
            network=args.network,
            partition_index=0,
            hyper=Hyperparams(batch_size=args.batch, epochs=1, seed=hyper_seed),
            packages=[PackageSource(pkg_path, key_path)],
            mode=MODE_MONOLITHIC,
            deterministic=False,
            enclave=EnclaveConfig(memory_budget_bytes=args.budget_mib * 2**20),
        )
        result = benchmark_epoch(config, partitions, runs=args.runs)
    result.write_csv(args.out)
    print(f"monolithic epoch: {result.monolithic_seconds:.2f}s (median of {len(result.monolithic_runs)})")
    for row in result.rows:
        print(
            f"L={row.partition_index:3d} ({row.conv_layers} convs)  "
            f"{row.seconds:7.2f}s  overhead {row.overhead*100:6.1f}%"
        )
    print(f"table written to {args.out}")
    return 0


# ----- parser wiring -----------------------------------------------------------------


def build_parser() -> _Parser:
    p = _Parser(prog="caltrain", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("keygen", help="generate a participant sealing key")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_keygen)

    sp = sub.add_parser("seal", help="seal a dataset into a .ctds package")
    sp.add_argument("--key", required=True)
    sp.add_argument("--source", required=True)
    sp.add_argument("--in", dest="input", required=True,
                    help=".npz file, CIFAR-10 binary dir, or synthetic:<count>:<seed>")
    sp.add_argument("--out", required=True)
    sp.add_argument("--limit", type=int, default=None)
    sp.add_argument("--offset", type=int, default=0)
    sp.set_defaults(func=cmd_seal)

    sp = sub.add_parser("train", help="run a training job from a JSON config")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("assess", help="score per-layer information exposure")
    sp.add_argument("--model", required=True)
    sp.add_argument("--validator", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--samples", type=int, default=64)
    sp.add_argument("--scale", type=float, default=1.0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--csv", default=None)
    sp.add_argument("--key", default=None)
    sp.add_argument("--source", default=None)
    sp.add_argument("--validator-key", dest="validator_key", default=None)
    sp.add_argument("--validator-source", dest="validator_source", default=None)
    sp.set_defaults(func=cmd_assess)

    sp = sub.add_parser("release", help="package the released model artifacts")
    sp.add_argument("--run", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_release)

    sp = sub.add_parser("fingerprint", help="build the linkage database")
    sp.add_argument("--model", required=True)
    sp.add_argument("--package", action="append", required=True)
    sp.add_argument("--key", action="append", required=True)
    sp.add_argument("--owner", default=None)
    sp.add_argument("--out", required=True)
    sp.add_argument("--batch", type=int, default=128)
    sp.add_argument("--budget-mib", type=int, default=512)
    sp.set_defaults(func=cmd_fingerprint)

    sp = sub.add_parser("query", help="nearest-neighbor forensics for one image")
    sp.add_argument("--db", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--k", type=int, default=DEFAULT_K)
    sp.add_argument("--label", type=int, default=None)
    sp.add_argument("--key", default=None)
    sp.add_argument("--source", default=None)
    sp.set_defaults(func=cmd_query)

    sp = sub.add_parser("serve", help="serve fingerprint queries over TCP")
    sp.add_argument("--db", required=True)
    sp.add_argument("--bind", default="127.0.0.1:7077")
    sp.set_defaults(func=cmd_serve)

    sp = sub.add_parser("poison", help="build a poisoned participant package")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--target", type=int, required=True)
    sp.add_argument("--fraction", type=float, default=0.1)
    sp.add_argument("--patch", type=int, default=4)
    sp.add_argument("--corner-offset", dest="corner_offset", type=int, default=4)
    sp.add_argument("--key", required=True)
    sp.add_argument("--source", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--seed", type=int, default=42)
    sp.add_argument("--limit", type=int, default=None)
    sp.set_defaults(func=cmd_poison)

    sp = sub.add_parser("evaluate", help="score accountability gates (exit 3 on failure)")
    sp.add_argument("--config", required=True)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("bench", help="partition-depth overhead benchmark")
    sp.add_argument("--network", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--partitions", required=True, help="comma-separated partition indices")
    sp.add_argument("--runs", type=int, default=3)
    sp.add_argument("--batch", type=int, default=8)
    sp.add_argument("--budget-mib", dest="budget_mib", type=int, default=128)
    sp.add_argument("--limit", type=int, default=512)
    sp.add_argument("--seed", type=int, default=42)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_bench)

    return p


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"CT-{e.code}: {e}", file=sys.stderr)
        return 1
    except AcceptanceFailure as e:
        print(f"CT-{e.code}: {e}", file=sys.stderr)
        return 3
    except CaltrainError as e:
        print(f"CT-{e.code}: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"CT-E002: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
