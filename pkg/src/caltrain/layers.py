"""Numerical kernels for the CNN layers.

Three arithmetic paths are provided for convolution:

* ``fast`` — one im2col GEMM over the whole batch (host-side training).
* ``deterministic`` — per-instance im2col GEMMs in fixed order.  Every
  instance's result is independent of the batch it rides in, which is the
  contract the bit-exact partitioned/monolithic equivalence rests on; both
  sides of the boundary run this exact code path in deterministic mode.
* ``strict`` — per-instance GEMMs with full float64 accumulation, then a
  single rounding back to float32.  This is the enclave's arithmetic when
  not in deterministic mode: plain IEEE math with none of the fast-math
  style acceleration the host enjoys, so in-enclave layers cost measurably
  more per FLOP.

Pooling, dropout and softmax are elementwise or per-instance reductions and
are identical on every path.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

ARITH_FAST = "fast"
ARITH_DET = "deterministic"
ARITH_STRICT = "strict"
ARITH_MODES = (ARITH_FAST, ARITH_DET, ARITH_STRICT)

LEAKY_SLOPE = np.float32(0.1)


def leaky_relu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, LEAKY_SLOPE * x)


def leaky_relu_grad_from_output(y: np.ndarray) -> np.ndarray:
    # leaky ReLU is sign-preserving, so the cached output determines the slope
    return np.where(y > 0, np.float32(1.0), LEAKY_SLOPE)


def conv_out_hw(h: int, w: int, size: int, stride: int, pad: int) -> tuple[int, int]:
    return (h + 2 * pad - size) // stride + 1, (w + 2 * pad - size) // stride + 1


def _pad_chw(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad)))


def im2col(x: np.ndarray, size: int, stride: int, pad: int) -> np.ndarray:
    """(C,H,W) -> (oh*ow, C*size*size), patch elements ordered (c, ky, kx)."""
    c, h, w = x.shape
    oh, ow = conv_out_hw(h, w, size, stride, pad)
    xp = _pad_chw(x, pad)
    cols = np.empty((oh, ow, c, size, size), dtype=x.dtype)
    for ky in range(size):
        for kx in range(size):
            patch = xp[:, ky : ky + stride * oh : stride, kx : kx + stride * ow : stride]
            cols[:, :, :, ky, kx] = patch.transpose(1, 2, 0)
    return cols.reshape(oh * ow, c * size * size)


def col2im(dcols: np.ndarray, chw: tuple[int, int, int], size: int, stride: int, pad: int) -> np.ndarray:
    """Scatter-add (oh*ow, C*size*size) gradients back onto the (C,H,W) input."""
    c, h, w = chw
    oh, ow = conv_out_hw(h, w, size, stride, pad)
    dx = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    dc = dcols.reshape(oh, ow, c, size, size)
    for ky in range(size):
        for kx in range(size):
            dx[:, ky : ky + stride * oh : stride, kx : kx + stride * ow : stride] += dc[
                :, :, :, ky, kx
            ].transpose(2, 0, 1)
    if pad == 0:
        return dx
    return dx[:, pad:-pad, pad:-pad]


def _im2col_batch(x: np.ndarray, size: int, stride: int, pad: int) -> np.ndarray:
    """(N,C,H,W) -> (N*oh*ow, C*size*size); fast path only."""
    n, c, h, w = x.shape
    oh, ow = conv_out_hw(h, w, size, stride, pad)
    xp = x if pad == 0 else np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, oh, ow, c, size, size), dtype=x.dtype)
    for ky in range(size):
        for kx in range(size):
            patch = xp[:, :, ky : ky + stride * oh : stride, kx : kx + stride * ow : stride]
            cols[:, :, :, :, ky, kx] = patch.transpose(0, 2, 3, 1)
    return cols.reshape(n * oh * ow, c * size * size)


def conv_forward(x, weights, bias, stride, pad, arith) -> np.ndarray:
    """Convolution + leaky ReLU. x (N,C,H,W), weights (F,C,k,k) -> (N,F,oh,ow)."""
    n, c, h, w = x.shape
    f, wc, size, _ = weights.shape
    if wc != c:
        raise ShapeError(f"conv expects {wc} input channels, got {c}")
    oh, ow = conv_out_hw(h, w, size, stride, pad)
    wmat = weights.reshape(f, -1)
    if arith == ARITH_FAST:
        cols = _im2col_batch(x, size, stride, pad)
        pre = cols @ wmat.T
        pre += bias
        pre = pre.reshape(n, oh, ow, f).transpose(0, 3, 1, 2)
    elif arith == ARITH_DET:
        pre = np.empty((n, f, oh, ow), dtype=np.float32)
        for i in range(n):
            cols = im2col(x[i], size, stride, pad)
            pre[i] = (cols @ wmat.T + bias).T.reshape(f, oh, ow)
    elif arith == ARITH_STRICT:
        wmat64 = wmat.astype(np.float64)
        bias64 = bias.astype(np.float64)
        pre = np.empty((n, f, oh, ow), dtype=np.float32)
        for i in range(n):
            cols64 = im2col(x[i], size, stride, pad).astype(np.float64)
            pre[i] = (cols64 @ wmat64.T + bias64).astype(np.float32).T.reshape(f, oh, ow)
    else:
        raise ValueError(f"unknown arithmetic mode {arith!r}")
    return leaky_relu(pre)


def conv_backward(x, y, weights, delta, stride, pad, arith, weight_grad, bias_grad, need_dx=True):
    """Accumulate weight/bias gradients and return the input gradient.

    ``x``/``y`` are the cached input and (post-activation) output of the
    forward pass; ``delta`` is dL/dy.
    """
    n, c, h, w = x.shape
    f, _, size, _ = weights.shape
    oh, ow = conv_out_hw(h, w, size, stride, pad)
    wmat = weights.reshape(f, -1)
    dpre = (delta * leaky_relu_grad_from_output(y)).astype(np.float32, copy=False)
    dx = np.empty_like(x) if need_dx else None

    if arith == ARITH_FAST:
        cols = _im2col_batch(x, size, stride, pad)
        dpre2 = dpre.transpose(0, 2, 3, 1).reshape(n * oh * ow, f)
        weight_grad += (dpre2.T @ cols).reshape(weights.shape)
        bias_grad += dpre2.sum(axis=0)
        if need_dx:
            dcols = dpre2 @ wmat
            dcols = dcols.reshape(n, oh * ow, -1)
            for i in range(n):
                dx[i] = col2im(dcols[i], (c, h, w), size, stride, pad)
        return dx

    if arith == ARITH_DET:
        for i in range(n):
            cols = im2col(x[i], size, stride, pad)
            dpre_i = dpre[i].reshape(f, oh * ow)
            weight_grad += (dpre_i @ cols).reshape(weights.shape)
            bias_grad += dpre_i.sum(axis=1)
            if need_dx:
                dx[i] = col2im(dpre_i.T @ wmat, (c, h, w), size, stride, pad)
        return dx

    if arith == ARITH_STRICT:
        wmat64 = wmat.astype(np.float64)
        for i in range(n):
            cols64 = im2col(x[i], size, stride, pad).astype(np.float64)
            dpre64 = dpre[i].reshape(f, oh * ow).astype(np.float64)
            weight_grad += (dpre64 @ cols64).astype(np.float32).reshape(weights.shape)
            bias_grad += dpre64.sum(axis=1).astype(np.float32)
            if need_dx:
                dcols = (dpre64.T @ wmat64).astype(np.float32)
                dx[i] = col2im(dcols, (c, h, w), size, stride, pad)
        return dx

    raise ValueError(f"unknown arithmetic mode {arith!r}")


def maxpool_forward(x, size, stride):
    """Windowed max with first-maximum tie routing. Returns (y, winner_index)."""
    n, c, h, w = x.shape
    oh, ow = conv_out_hw(h, w, size, stride, pad=0)
    best = None
    winner = None
    for ky in range(size):
        for kx in range(size):
            cand = x[:, :, ky : ky + stride * oh : stride, kx : kx + stride * ow : stride]
            if best is None:
                best = cand.copy()
                winner = np.zeros((n, c, oh, ow), dtype=np.uint8)
            else:
                better = cand > best
                np.copyto(best, cand, where=better)
                winner[better] = ky * size + kx
    return best, winner


def maxpool_backward(delta, winner, in_shape, size, stride):
    n, c, h, w = in_shape
    oh, ow = conv_out_hw(h, w, size, stride, pad=0)
    dx = np.zeros(in_shape, dtype=delta.dtype)
    for ky in range(size):
        for kx in range(size):
            sel = winner == ky * size + kx
            dx[:, :, ky : ky + stride * oh : stride, kx : kx + stride * ow : stride] += np.where(
                sel, delta, np.float32(0.0)
            )
    return dx


def global_avgpool_forward(x):
    """(N,C,H,W) -> (N,C)."""
    return x.mean(axis=(2, 3), dtype=np.float32)


def global_avgpool_backward(delta, in_shape):
    n, c, h, w = in_shape
    scale = np.float32(1.0 / (h * w))
    return np.broadcast_to((delta * scale)[:, :, None, None], in_shape).astype(np.float32)


def dropout_forward(x, p, generator):
    """Inverted dropout: scaled at train time so inference is the identity."""
    if p <= 0.0:
        return x, np.ones(x.shape, dtype=bool)
    keep = generator.random(x.shape, dtype=np.float32) >= np.float32(p)
    if p >= 1.0:
        return np.zeros_like(x), keep
    scale = np.float32(1.0 / (1.0 - p))
    return np.where(keep, x * scale, np.float32(0.0)), keep


def dropout_backward(delta, keep, p):
    if p <= 0.0:
        return delta
    if p >= 1.0:
        return np.zeros_like(delta)
    scale = np.float32(1.0 / (1.0 - p))
    return np.where(keep, delta * scale, np.float32(0.0))


def softmax_forward(x):
    """(N,C) logits -> per-instance probability simplex."""
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)
