"""Information-exposure assessment of intermediate representations.

A validator network classifies each feature map of the model under
assessment (projected to an image) and the original input; the KL
divergence between the two class distributions scores how much of the
input's content survives in that map.  The per-sample baseline is the KL
divergence between the validator's distribution on the original input and
the discrete uniform distribution: a map at or above the baseline tells an
observer no more than a blind uniform guess would.

A layer is safe when every sample's worst (minimum over feature maps)
divergence clears the baseline.  The recommended partition encloses every
unsafe layer, so the tensor that actually crosses the boundary, and
everything derivable after it, is itself safe.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .data import center_crop
from .errors import ShapeError, UsageError
from .network import Network

KL_EPSILON = 1e-10


def kl_divergence(p, q) -> float:
    """Kullback-Leibler divergence in nats with epsilon smoothing.

    Both arguments must be probability vectors of the same length; each is
    smoothed by 1e-10 and renormalized, so zero entries never produce an
    infinite score.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ShapeError(f"length mismatch: {p.shape} vs {q.shape}")
    if abs(p.sum() - 1.0) > 1e-5 or abs(q.sum() - 1.0) > 1e-5:
        raise UsageError("inputs must each sum to 1 (within 1e-5)")
    if (p < 0).any() or (q < 0).any():
        raise UsageError("probabilities must be non-negative")
    ps = (p + KL_EPSILON) / (p + KL_EPSILON).sum()
    qs = (q + KL_EPSILON) / (q + KL_EPSILON).sum()
    return float(np.sum(ps * np.log(ps / qs)))


def _kl_rows(p: np.ndarray, q_rows: np.ndarray) -> np.ndarray:
    """kl_divergence(p, q) for every row q of q_rows (same smoothing)."""
    ps = (p.astype(np.float64) + KL_EPSILON)
    ps /= ps.sum()
    qs = q_rows.astype(np.float64) + KL_EPSILON
    qs /= qs.sum(axis=1, keepdims=True)
    return np.sum(ps * (np.log(ps) - np.log(qs)), axis=1)


def project_ir_images(ir: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Feature maps (C,H,W) -> validator-ready images (C,3,H',W') in [0,1].

    Each map is min-max normalized (a constant map becomes all zeros),
    nearest-neighbor resized, and replicated across three channels.
    """
    if ir.ndim == 1:  # flat vector: treat each unit as a 1x1 map
        ir = ir[:, None, None]
    if ir.ndim != 3:
        raise ShapeError(f"expected (C,H,W) feature maps, got {ir.shape}")
    c, h, w = ir.shape
    th, tw = out_hw
    mn = ir.reshape(c, -1).min(axis=1)[:, None, None]
    mx = ir.reshape(c, -1).max(axis=1)[:, None, None]
    span = mx - mn
    flat = span[:, 0, 0] <= 1e-12
    safe_span = np.where(span <= 1e-12, 1.0, span)
    norm = (ir - mn) / safe_span
    norm[flat] = 0.0
    if (h, w) != (th, tw):
        ys = np.floor((np.arange(th) + 0.5) * h / th).astype(np.int64)
        xs = np.floor((np.arange(tw) + 0.5) * w / tw).astype(np.int64)
        norm = norm[:, ys][:, :, xs]
    return np.repeat(norm[:, None, :, :], 3, axis=1).astype(np.float32)


@dataclass
class LayerAssessment:
    index: int
    kind: str
    depth: int
    per_sample_min: list[float]
    per_sample_max: list[float]

    @property
    def min_delta(self) -> float:
        return min(self.per_sample_min)

    @property
    def max_delta(self) -> float:
        return max(self.per_sample_max)


@dataclass
class AssessmentReport:
    num_layers: int
    num_classes: int
    threshold_scale: float
    delta_mu: list[float]  # per assessment sample
    layers: list[LayerAssessment]
    recommended_partition: int = 0
    no_safe_partition: bool = False

    def layer_safe(self, index: int) -> bool:
        la = self.layers[index - 1]
        return all(
            lo >= self.threshold_scale * mu
            for lo, mu in zip(la.per_sample_min, self.delta_mu)
        )

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "num_classes": self.num_classes,
            "threshold_scale": self.threshold_scale,
            "delta_mu": self.delta_mu,
            "layers": [
                {
                    "index": la.index,
                    "kind": la.kind,
                    "depth": la.depth,
                    "min_delta": la.min_delta,
                    "max_delta": la.max_delta,
                    "per_sample_min": la.per_sample_min,
                    "per_sample_max": la.per_sample_max,
                    "safe": self.layer_safe(la.index),
                }
                for la in self.layers
            ],
            "recommended_partition": self.recommended_partition,
            "no_safe_partition": self.no_safe_partition,
        }

    def save_json(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def save_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "kind", "depth", "min_delta", "max_delta", "mean_delta_mu"])
            mu = float(np.mean(self.delta_mu))
            for la in self.layers:
                w.writerow([la.index, la.kind, la.depth, f"{la.min_delta:.6f}", f"{la.max_delta:.6f}", f"{mu:.6f}"])

    @classmethod
    def from_dict(cls, doc: dict) -> "AssessmentReport":
        layers = [
            LayerAssessment(
                d["index"], d["kind"], d["depth"], d["per_sample_min"], d["per_sample_max"]
            )
            for d in doc["layers"]
        ]
        return cls(
            doc["num_layers"],
            doc["num_classes"],
            doc.get("threshold_scale", 1.0),
            doc["delta_mu"],
            layers,
            doc.get("recommended_partition", 0),
            doc.get("no_safe_partition", False),
        )


def assess(
    generator: Network,
    validator: Network,
    samples_u8: np.ndarray,
    threshold_scale: float = 1.0,
    validator_batch: int = 256,
) -> AssessmentReport:
    """Score every (sample, layer, feature map) triple of the generator.

    ``samples_u8`` are plaintext (S,3,32,32) instances held by the assessing
    participant.  The validator must share the generator's label space.
    """
    gspec, vspec = generator.spec, validator.spec
    if gspec.num_classes != vspec.num_classes:
        raise UsageError("generator and validator class counts differ")
    val_hw = vspec.input_dims[1:]
    xs = center_crop(samples_u8)
    n_layers = gspec.num_layers
    s = xs.shape[0]

    reference = validator.forward_range(xs, 1, vspec.num_layers, train=False)
    uniform = np.full(vspec.num_classes, 1.0 / vspec.num_classes)
    delta_mu = [kl_divergence(reference[i], uniform) for i in range(s)]

    layers = [
        LayerAssessment(li, gspec.layers[li - 1].kind, gspec.shape_after(li)[0], [], [])
        for li in range(1, n_layers + 1)
    ]
    for i in range(s):
        act = xs[i : i + 1]
        for li in range(1, n_layers + 1):
            act = generator.forward_range(act, li, li, train=False)
            ir_maps = act[0]
            images = project_ir_images(np.asarray(ir_maps), val_hw)
            scores = np.empty(images.shape[0])
            for off in range(0, images.shape[0], validator_batch):
                chunk = images[off : off + validator_batch]
                probs = validator.forward_range(chunk, 1, vspec.num_layers, train=False)
                scores[off : off + chunk.shape[0]] = _kl_rows(reference[i], probs)
            layers[li - 1].per_sample_min.append(float(scores.min()))
            layers[li - 1].per_sample_max.append(float(scores.max()))

    report = AssessmentReport(
        n_layers, gspec.num_classes, threshold_scale, delta_mu, layers
    )
    recommend_partition(report)
    return report


def recommend_partition(report: AssessmentReport) -> int:
    """Smallest partition whose crossing IR and all deeper IRs are safe.

    Enclosing layers 1..L exposes the output of layer L and everything the
    host derives after it, so L must be past every unsafe layer.  L = 0
    (nothing enclosed) is returned when every layer is safe.  When even the
    deepest layer is unsafe there is no safe partition; the full depth is
    returned with ``no_safe_partition`` set.
    """
    unsafe = [li for li in range(1, report.num_layers + 1) if not report.layer_safe(li)]
    if not unsafe:
        report.recommended_partition = 0
        report.no_safe_partition = False
    elif max(unsafe) >= report.num_layers:
        report.recommended_partition = report.num_layers
        report.no_safe_partition = True
    else:
        level = max(unsafe) + 1
        if level == report.num_layers - 1:
            level = report.num_layers  # never split softmax from cost
        report.recommended_partition = level
        report.no_safe_partition = False
    return report.recommended_partition
