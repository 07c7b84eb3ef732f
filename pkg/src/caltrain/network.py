"""Layer state, forward/backward over layer ranges, and SGD updates.

Layers are addressed 1-based to match partition indices: a partition index L
means layers 1..L live inside the enclave and L+1..n outside.  A Network can
hold weights for only a sub-range of layers (the host side of a partitioned
run never materializes FrontNet weights).

The delta returned by :func:`loss_and_delta` is taken with respect to the
softmax *input*; softmax and cost layers therefore propagate deltas
unchanged, which is the usual fused softmax/cross-entropy arrangement.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from . import layers as K
from .errors import (
    MissingCacheError,
    NonFiniteError,
    ShapeError,
)
from .netspec import AVGPOOL, CONV, COST, DROPOUT, MAXPOOL, SOFTMAX, LayerSpec, NetworkSpec, conv_padding
from .rng import DeterministicRng

WEIGHTS_MAGIC = b"CTWT"
WEIGHTS_VERSION = 1


@dataclass
class Hyperparams:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32
    epochs: int = 12
    seed: int = 42

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0,1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size >= 1 and epochs >= 0 required")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        return cls(**d)


@dataclass
class LayerState:
    spec: LayerSpec
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None
    weight_grad: np.ndarray | None = None
    bias_grad: np.ndarray | None = None
    weight_momentum: np.ndarray | None = None
    bias_momentum: np.ndarray | None = None
    cached_input: np.ndarray | None = None
    cached_output: np.ndarray | None = None
    dropout_mask: np.ndarray | None = None
    pool_winner: np.ndarray | None = None
    enclave_born: bool = False

    @property
    def resident(self) -> bool:
        """True when this layer's parameters (if any) are materialized here."""
        return self.spec.kind != CONV or self.weights is not None

    def param_bytes(self) -> int:
        total = 0
        for a in (self.weights, self.bias, self.weight_grad, self.bias_grad,
                  self.weight_momentum, self.bias_momentum):
            if a is not None:
                total += a.nbytes
        return total

    def cache_bytes(self) -> int:
        total = 0
        for a in (self.cached_output, self.dropout_mask, self.pool_winner):
            if a is not None:
                total += a.nbytes
        return total


def _array_chw(shape: tuple) -> tuple[int, int, int]:
    """Map an activation array shape (minus batch) onto logical (C,H,W)."""
    if len(shape) == 3:
        return shape
    if len(shape) == 1:
        return (shape[0], 1, 1)
    raise ShapeError(f"unsupported activation rank {len(shape)}")


class Network:
    """A CNN instance over a NetworkSpec, holding weights for a layer range."""

    def __init__(self, spec: NetworkSpec, arith: str = K.ARITH_FAST):
        if arith not in K.ARITH_MODES:
            raise ValueError(f"unknown arithmetic mode {arith!r}")
        self.spec = spec
        self.arith = arith
        self.states = [LayerState(l) for l in spec.layers]

    # ----- initialization ---------------------------------------------------

    def init_range(self, first: int, last: int, rng: DeterministicRng) -> None:
        """He-normal conv weights, zero biases and momentum, for layers first..last.

        Each layer draws from its own (seed, "init", index) stream so the
        result is independent of which process initializes which range.
        """
        for li in range(first, last + 1):
            st = self.states[li - 1]
            if st.spec.kind != CONV:
                continue
            c_in = self.spec.shape_after(li - 1)[0]
            k = st.spec.size
            f = st.spec.filters
            fan_in = k * k * c_in
            gen = rng.generator("init", li)
            std = float(np.sqrt(2.0 / fan_in))
            st.weights = gen.normal(0.0, std, size=(f, c_in, k, k)).astype(np.float32)
            st.bias = np.zeros(f, dtype=np.float32)
            st.weight_grad = np.zeros_like(st.weights)
            st.bias_grad = np.zeros_like(st.bias)
            st.weight_momentum = np.zeros_like(st.weights)
            st.bias_momentum = np.zeros_like(st.bias)

    def drop_range(self, first: int, last: int) -> None:
        """Forget parameters for layers first..last (used after migration)."""
        for li in range(first, last + 1):
            st = self.states[li - 1]
            self.states[li - 1] = LayerState(st.spec, enclave_born=st.enclave_born)

    # ----- forward / backward ----------------------------------------------

    def forward_range(
        self,
        x: np.ndarray,
        first: int,
        last: int,
        train: bool = False,
        rng: DeterministicRng | None = None,
        epoch: int = 0,
        batch_index: int = 0,
    ) -> np.ndarray:
        """Run layers first..last (inclusive, 1-based); returns the activation.

        Caches per-layer inputs/outputs when ``train`` so a matching
        backward_range can follow.  Dropout draws its mask from
        (seed, "dropout", layer, epoch, batch) and is a no-op when not
        training.
        """
        n = self.spec.num_layers
        if not (0 <= first - 1 <= last <= n):
            raise ShapeError(f"bad layer range {first}..{last}")
        if x.dtype != np.float32:
            x = x.astype(np.float32)
        expect = self.spec.shape_after(first - 1)
        got = _array_chw(x.shape[1:])
        if got != expect:
            raise ShapeError(f"layer {first} expects input {expect}, got {got}")

        out = x
        for li in range(first, last + 1):
            st = self.states[li - 1]
            kind = st.spec.kind
            if kind == CONV:
                if not st.resident:
                    raise MissingCacheError(f"layer {li} weights not resident")
                pad = conv_padding(st.spec.size)
                y = K.conv_forward(out, st.weights, st.bias, st.spec.stride, pad, self.arith)
            elif kind == MAXPOOL:
                y, winner = K.maxpool_forward(out, st.spec.size, st.spec.stride)
                if train:
                    st.pool_winner = winner
            elif kind == AVGPOOL:
                y = K.global_avgpool_forward(out)
            elif kind == DROPOUT:
                if train:
                    if rng is None:
                        raise ValueError("training dropout requires an rng")
                    gen = rng.generator("dropout", li, epoch, batch_index)
                    y, keep = K.dropout_forward(out, st.spec.dropout_p, gen)
                    st.dropout_mask = keep
                else:
                    y = out
            elif kind == SOFTMAX:
                y = K.softmax_forward(out)
            elif kind == COST:
                y = out
            else:  # pragma: no cover - parser rejects unknown kinds
                raise ShapeError(f"unknown layer kind {kind}")
            if train:
                st.cached_input = out
                st.cached_output = y
            out = y
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(f"non-finite activation leaving layer {last}")
        return out

    def backward_range(self, delta: np.ndarray, first: int, last: int) -> np.ndarray:
        """Backpropagate through layers last..first, accumulating conv gradients."""
        n = self.spec.num_layers
        if first == last + 1:  # empty range: nothing on this side
            return delta
        if not (1 <= first <= last <= n):
            raise ShapeError(f"bad layer range {first}..{last}")
        for li in range(last, first - 1, -1):
            st = self.states[li - 1]
            kind = st.spec.kind
            if kind in (SOFTMAX, COST):
                # delta already w.r.t. softmax input; nothing to do
                if st.cached_output is None:
                    raise MissingCacheError(f"layer {li} has no cached forward pass")
                continue
            if st.cached_output is None or st.cached_input is None:
                raise MissingCacheError(f"layer {li} has no cached forward pass")
            if delta.shape != st.cached_output.shape:
                raise ShapeError(
                    f"layer {li} delta shape {delta.shape} != output {st.cached_output.shape}"
                )
            if kind == CONV:
                pad = conv_padding(st.spec.size)
                delta = K.conv_backward(
                    st.cached_input,
                    st.cached_output,
                    st.weights,
                    delta,
                    st.spec.stride,
                    pad,
                    self.arith,
                    st.weight_grad,
                    st.bias_grad,
                    need_dx=True,
                )
            elif kind == MAXPOOL:
                delta = K.maxpool_backward(
                    delta, st.pool_winner, st.cached_input.shape, st.spec.size, st.spec.stride
                )
            elif kind == AVGPOOL:
                delta = K.global_avgpool_backward(delta, st.cached_input.shape)
            elif kind == DROPOUT:
                delta = K.dropout_backward(delta, st.dropout_mask, st.spec.dropout_p)
        return delta

    def apply_updates(self, first: int, last: int, hyper: Hyperparams) -> None:
        """Momentum SGD: v <- m*v - lr*(g + decay*w); w <- w + v; grads cleared.

        Weight decay is applied to kernels only, not biases.  Updates touch
        only each layer's own buffers, so the order across layers is
        irrelevant.
        """
        lr = np.float32(hyper.learning_rate)
        mom = np.float32(hyper.momentum)
        decay = np.float32(hyper.weight_decay)
        for li in range(first, last + 1):
            st = self.states[li - 1]
            if st.spec.kind != CONV or not st.resident:
                continue
            st.weight_momentum *= mom
            st.weight_momentum -= lr * (st.weight_grad + decay * st.weights)
            st.weights += st.weight_momentum
            st.bias_momentum *= mom
            st.bias_momentum -= lr * st.bias_grad
            st.bias += st.bias_momentum
            st.weight_grad[:] = 0
            st.bias_grad[:] = 0

    def clear_caches(self, first: int = 1, last: int | None = None) -> None:
        last = self.spec.num_layers if last is None else last
        for li in range(first, last + 1):
            st = self.states[li - 1]
            st.cached_input = None
            st.cached_output = None
            st.dropout_mask = None
            st.pool_winner = None

    # ----- accounting -------------------------------------------------------

    def param_bytes(self, first: int, last: int) -> int:
        return sum(self.states[li - 1].param_bytes() for li in range(first, last + 1))

    def cache_bytes(self, first: int, last: int) -> int:
        return sum(self.states[li - 1].cache_bytes() for li in range(first, last + 1))

    def conv_scratch_bytes(self, first: int, last: int) -> int:
        """Upper bound on per-instance im2col scratch for layers in range."""
        worst = 0
        for li in range(first, last + 1):
            st = self.states[li - 1]
            if st.spec.kind != CONV:
                continue
            c_in, h, w = self.spec.shape_after(li - 1)
            pad = conv_padding(st.spec.size)
            oh, ow = K.conv_out_hw(h, w, st.spec.size, st.spec.stride, pad)
            cols = oh * ow * c_in * st.spec.size * st.spec.size * 4
            if self.arith == K.ARITH_STRICT:
                cols *= 3  # float64 copy of cols dominates
            worst = max(worst, cols)
        return worst

    # ----- serialization ----------------------------------------------------

    def serialize_range(self, first: int, last: int) -> bytes:
        """Length-prefixed little-endian dump of layer parameters in range."""
        out = [WEIGHTS_MAGIC, struct.pack("<HII", WEIGHTS_VERSION, first, last)]
        for li in range(first, last + 1):
            st = self.states[li - 1]
            if st.spec.kind != CONV:
                out.append(struct.pack("<B", 0))
                continue
            if not st.resident:
                raise MissingCacheError(f"layer {li} weights not resident")
            wb = st.weights.astype("<f4", copy=False).tobytes()
            bb = st.bias.astype("<f4", copy=False).tobytes()
            out.append(struct.pack("<BII", 1, len(wb), len(bb)))
            out.append(wb)
            out.append(bb)
        return b"".join(out)

    def load_range(self, blob: bytes, expect_first: int | None = None) -> tuple[int, int]:
        """Load a serialize_range blob; returns the (first, last) range loaded."""
        if blob[:4] != WEIGHTS_MAGIC:
            raise ShapeError("bad weights magic")
        version, first, last = struct.unpack_from("<HII", blob, 4)
        if version != WEIGHTS_VERSION:
            raise ShapeError(f"unsupported weights version {version}")
        if expect_first is not None and first != expect_first:
            raise ShapeError(f"expected weights starting at layer {expect_first}, got {first}")
        off = 4 + 10
        for li in range(first, last + 1):
            st = self.states[li - 1]
            (has,) = struct.unpack_from("<B", blob, off)
            off += 1
            if not has:
                if st.spec.kind == CONV:
                    raise ShapeError(f"layer {li}: missing conv parameters")
                continue
            if st.spec.kind != CONV:
                raise ShapeError(f"layer {li}: unexpected parameters")
            wlen, blen = struct.unpack_from("<II", blob, off)
            off += 8
            c_in = self.spec.shape_after(li - 1)[0]
            shape = (st.spec.filters, c_in, st.spec.size, st.spec.size)
            expect_w = int(np.prod(shape)) * 4
            if wlen != expect_w or blen != st.spec.filters * 4:
                raise ShapeError(f"layer {li}: parameter size mismatch")
            st.weights = np.frombuffer(blob[off : off + wlen], dtype="<f4").reshape(shape).copy()
            off += wlen
            st.bias = np.frombuffer(blob[off : off + blen], dtype="<f4").copy()
            off += blen
            st.weight_grad = np.zeros_like(st.weights)
            st.bias_grad = np.zeros_like(st.bias)
            st.weight_momentum = np.zeros_like(st.weights)
            st.bias_momentum = np.zeros_like(st.bias)
        if off != len(blob):
            raise ShapeError("trailing bytes in weights blob")
        return first, last

    def layer_digest(self, li: int) -> bytes:
        """SHA-256 over a layer's parameter bytes (empty for parameterless)."""
        st = self.states[li - 1]
        h = hashlib.sha256()
        if st.spec.kind == CONV:
            if not st.resident:
                raise MissingCacheError(f"layer {li} weights not resident")
            h.update(st.weights.astype("<f4", copy=False).tobytes())
            h.update(st.bias.astype("<f4", copy=False).tobytes())
        return h.digest()

    def range_digests(self, first: int, last: int) -> list[bytes]:
        return [self.layer_digest(li) for li in range(first, last + 1)]


def model_digest(layer_digests: list[bytes]) -> str:
    """Hex digest over the concatenated per-layer digests, in layer order."""
    h = hashlib.sha256()
    for d in layer_digests:
        h.update(d)
    return h.hexdigest()


def loss_and_delta(probs: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and the batch-normalized delta (p - onehot)/N.

    ``probs`` are softmax outputs (N,C); the returned delta is with respect
    to the softmax input.
    """
    if probs.ndim != 2:
        raise ShapeError("probabilities must be (N, C)")
    n, c = probs.shape
    if n < 1:
        raise ShapeError("empty batch")
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError("labels must match the batch size")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError("label out of range")
    picked = probs[np.arange(n), labels]
    loss = float(-np.log(picked.astype(np.float64)).mean())
    delta = probs.astype(np.float32, copy=True)
    delta[np.arange(n), labels] -= np.float32(1.0)
    delta /= np.float32(n)
    return loss, delta


def init_weights(spec: NetworkSpec, rng: DeterministicRng, arith: str = K.ARITH_FAST) -> Network:
    """Fresh network with all layers initialized."""
    net = Network(spec, arith=arith)
    if spec.num_layers:
        net.init_range(1, spec.num_layers, rng)
    return net
