"""Synthetic data-poisoning lab and accountability scoring.

A malicious participant stamps a fixed trigger patch onto a slice of its
records, relabels them to a target class, and seals the result exactly like
honest data.  A separate helper injects plain mislabeling.  The evaluator
replays triggered queries against the fingerprint database and scores how
many of the nearest neighbors trace back to the manifest of known-bad
records.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .data import image_bytes
from .errors import UsageError
from .linkage import FingerprintDB, extract_fingerprint
from .network import Network
from .rng import DeterministicRng
from .sealing import DatasetPackage, seal_dataset


@dataclass(frozen=True)
class TriggerSpec:
    """Opaque pixel patch stamped into the bottom-right corner region.

    ``corner_offset`` keeps the patch a few pixels inside the edge so random
    training crops cannot cut it off.
    """

    patch_size: int = 4
    corner_offset: int = 4

    def patch(self) -> np.ndarray:
        """Full-contrast checkerboard, (3, P, P) uint8."""
        p = self.patch_size
        yy, xx = np.mgrid[0:p, 0:p]
        checker = ((yy + xx) % 2 * 255).astype(np.uint8)
        return np.repeat(checker[None, :, :], 3, axis=0)

    def region(self, h: int, w: int) -> tuple[slice, slice]:
        p, off = self.patch_size, self.corner_offset
        y0 = h - off - p
        x0 = w - off - p
        if y0 < 0 or x0 < 0:
            raise UsageError("trigger patch does not fit inside the image")
        return slice(y0, y0 + p), slice(x0, x0 + p)


def stamp_trigger(image_u8: np.ndarray, spec: TriggerSpec) -> np.ndarray:
    """Overwrite the corner region with the patch; all other pixels unchanged."""
    c, h, w = image_u8.shape
    ys, xs = spec.region(h, w)
    out = image_u8.copy()
    out[:, ys, xs] = spec.patch()
    return out


@dataclass
class PoisonManifest:
    target_label: int
    # per source id: record indices and the plaintext hashes sealed into the db
    poisoned: dict[str, list[int]] = field(default_factory=dict)
    mislabeled: dict[str, list[int]] = field(default_factory=dict)
    hashes: dict[str, str] = field(default_factory=dict)  # hex digest -> kind

    def all_hashes(self) -> set[str]:
        return set(self.hashes)

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(
                {
                    "target_label": self.target_label,
                    "poisoned": self.poisoned,
                    "mislabeled": self.mislabeled,
                    "hashes": self.hashes,
                },
                fh,
                indent=2,
                sort_keys=True,
            )

    @classmethod
    def load(cls, path: str) -> "PoisonManifest":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        return cls(doc["target_label"], doc["poisoned"], doc["mislabeled"], doc["hashes"])


def build_poisoned_participant(
    images: np.ndarray,
    labels: np.ndarray,
    target_label: int,
    fraction: float,
    trigger: TriggerSpec,
    key: bytes,
    source_id: str,
    rng: DeterministicRng,
) -> tuple[DatasetPackage, PoisonManifest, np.ndarray, np.ndarray]:
    """Trigger-stamp and relabel a slice of non-target records, then seal.

    Returns the package, the manifest, and the modified arrays (the sealed
    bytes are what the training server ever sees; the arrays let tests
    inspect the plaintexts).
    """
    if not 0.0 < fraction <= 1.0:
        raise UsageError("fraction must be in (0, 1]")
    labels = np.asarray(labels).astype(np.uint16)
    candidates = np.flatnonzero(labels != target_label)
    count = int(round(fraction * labels.shape[0]))
    if count == 0 or candidates.size == 0:
        raise UsageError("empty poison selection")
    count = min(count, candidates.size)
    gen = rng.generator("poison-pick", source_id)
    picked = np.sort(gen.choice(candidates, size=count, replace=False))

    poisoned_images = images.copy()
    poisoned_labels = labels.copy()
    manifest = PoisonManifest(target_label)
    manifest.poisoned[source_id] = [int(i) for i in picked]
    for i in picked:
        poisoned_images[i] = stamp_trigger(images[i], trigger)
        poisoned_labels[i] = target_label
        digest = hashlib.sha256(image_bytes(poisoned_images[i])).hexdigest()
        manifest.hashes[digest] = "poisoned"
    package = seal_dataset(poisoned_images, poisoned_labels, key, source_id)
    return package, manifest, poisoned_images, poisoned_labels


def inject_mislabeled(
    images: np.ndarray,
    labels: np.ndarray,
    fraction: float,
    rng: DeterministicRng,
    num_classes: int,
    source_id: str = "",
) -> tuple[np.ndarray, PoisonManifest]:
    """Give a slice of records a uniformly random wrong label."""
    if num_classes < 2:
        raise UsageError("mislabeling needs at least two classes")
    if fraction < 0.0 or fraction > 1.0:
        raise UsageError("fraction must be in [0, 1]")
    labels = np.asarray(labels).astype(np.uint16)
    out = labels.copy()
    manifest = PoisonManifest(-1)
    count = int(round(fraction * labels.shape[0]))
    if count == 0:
        manifest.mislabeled[source_id] = []
        return out, manifest
    gen = rng.generator("mislabel-pick", source_id)
    picked = np.sort(gen.choice(labels.shape[0], size=count, replace=False))
    for i in picked:
        wrong = int(gen.integers(0, num_classes - 1))
        if wrong >= labels[i]:
            wrong += 1  # uniform over the 9 wrong labels
        out[i] = wrong
        digest = hashlib.sha256(image_bytes(images[i])).hexdigest()
        manifest.hashes[digest] = "mislabeled"
    manifest.mislabeled[source_id] = [int(i) for i in picked]
    return out, manifest


def merge_manifests(target_label: int, *manifests: PoisonManifest) -> PoisonManifest:
    merged = PoisonManifest(target_label)
    for m in manifests:
        for src, idx in m.poisoned.items():
            merged.poisoned.setdefault(src, []).extend(idx)
        for src, idx in m.mislabeled.items():
            merged.mislabeled.setdefault(src, []).extend(idx)
        merged.hashes.update(m.hashes)
    return merged


# ----- accountability scoring ---------------------------------------------------


@dataclass
class QueryOutcome:
    true_label: int
    predicted_label: int
    precision: float | None  # None when the query was excluded
    neighbor_sources: list[str]
    neighbor_hashes: list[str]
    manifest_hits: int


@dataclass
class AccountabilityReport:
    mode: str  # "attack" or "control"
    k: int
    total_queries: int
    effective_queries: int
    attack_success_rate: float
    mean_precision: float | None
    outcomes: list[QueryOutcome]

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "k": self.k,
            "total_queries": self.total_queries,
            "effective_queries": self.effective_queries,
            "attack_success_rate": self.attack_success_rate,
            "mean_precision": self.mean_precision,
            "per_query_precision": [
                o.precision for o in self.outcomes if o.precision is not None
            ],
        }

    def save_json(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def save_csv(self, path: str) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["true_label", "predicted_label", "precision", "manifest_hits"])
            for o in self.outcomes:
                if o.precision is None:
                    continue
                w.writerow([o.true_label, o.predicted_label, f"{o.precision:.4f}", o.manifest_hits])


def evaluate_accountability(
    net: Network,
    db: FingerprintDB,
    test_images: np.ndarray,
    test_labels: np.ndarray,
    manifest: PoisonManifest,
    k: int = 9,
    mode: str = "attack",
) -> AccountabilityReport:
    """Score manifest hits among the k nearest neighbors of each query.

    ``attack`` mode keeps triggered cross-class queries that the model
    classifies as the manifest's target label (the backdoor firing);
    ``control`` mode keeps correctly-classified queries (the clean
    baseline).  Queries failing the filter count toward the attack success
    rate but are excluded from precision.
    """
    if mode not in ("attack", "control"):
        raise UsageError("mode must be 'attack' or 'control'")
    bad_hashes = manifest.all_hashes()
    target = manifest.target_label
    outcomes: list[QueryOutcome] = []
    effective = 0
    fired = 0
    for i in range(test_images.shape[0]):
        true_label = int(test_labels[i])
        fingerprint, predicted = extract_fingerprint(net, test_images[i])
        if mode == "attack":
            if true_label == target:
                continue  # target-class identity case: not a cross-class attack
            keep = predicted == target
            fired += int(keep)
        else:
            keep = predicted == true_label
        if not keep:
            outcomes.append(QueryOutcome(true_label, predicted, None, [], [], 0))
            continue
        neighbors = db.query_knn(fingerprint, predicted, k)
        hits = sum(1 for n in neighbors if n.digest_hex in bad_hashes)
        precision = hits / len(neighbors) if neighbors else 0.0
        effective += 1
        outcomes.append(
            QueryOutcome(
                true_label,
                predicted,
                precision,
                [n.source_id for n in neighbors],
                [n.digest_hex for n in neighbors],
                hits,
            )
        )
    considered = [o for o in outcomes if o.precision is not None]
    mean_precision = (
        float(np.mean([o.precision for o in considered])) if considered else None
    )
    total = len(outcomes)
    success = fired / max(1, total) if mode == "attack" else float("nan")
    return AccountabilityReport(mode, k, total, effective, success, mean_precision, outcomes)
