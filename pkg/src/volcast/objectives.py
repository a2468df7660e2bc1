"""Training objectives on predicted frames.

Every loss returns ``(value, grad)`` with ``grad`` shaped like the
prediction, ready to be fed to the model's backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, ndtr, softmax

from volcast.preprocess import ClampRange
from volcast.segtrace import NeuronIndex


class EmptyMaskError(ValueError):
    pass


def _sign(x: np.ndarray) -> np.ndarray:
    # np.sign already maps 0 -> 0, which is the subgradient chosen at the kink
    return np.sign(x)


def trace_mae(pred_frame: np.ndarray, target_frame: np.ndarray, idx: NeuronIndex):
    """Mean over non-empty neurons of |mean_pred - mean_target|.

    Gradient at a voxel of neuron n is sign(diff_n) / (N_valid * |seg(n)|),
    zero on background and on empty neurons.
    """
    if pred_frame.shape != target_frame.shape:
        raise ValueError(f"shape mismatch {pred_frame.shape} vs {target_frame.shape}")
    n_valid = idx.n_valid
    if n_valid == 0:
        raise EmptyMaskError("every neuron is empty")
    diff = idx.means(pred_frame.reshape(-1)) - idx.means(target_frame.reshape(-1))
    diff = np.where(idx.valid, diff, 0.0)
    loss = float(np.abs(diff).sum() / n_valid)
    grad = idx.means_adjoint(_sign(diff) / n_valid).reshape(pred_frame.shape)
    return loss, grad.astype(pred_frame.dtype, copy=False)


def voxel_mae(pred: np.ndarray, target: np.ndarray):
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    d = pred.astype(np.float64) - target
    return float(np.abs(d).mean()), (_sign(d) / d.size).astype(pred.dtype, copy=False)


def direct_mae(pred_frames: np.ndarray, target_frames: np.ndarray, idx: NeuronIndex):
    """Trace MAE averaged over the trailing horizon axis of (X, Y, Z, H)."""
    if pred_frames.shape != target_frames.shape:
        raise ValueError(f"shape mismatch {pred_frames.shape} vs {target_frames.shape}")
    H = pred_frames.shape[-1]
    grad = np.empty_like(pred_frames)
    total = 0.0
    for h in range(H):
        l, g = trace_mae(pred_frames[..., h], target_frames[..., h], idx)
        total += l
        grad[..., h] = g / H
    return total / H, grad


# HL-Gauss -------------------------------------------------------------------


@dataclass(frozen=True)
class BinSpec:
    n_bins: int = 32
    range: ClampRange = ClampRange(-0.25, 1.5)
    sigma: float | None = None  # default: 0.75 bin widths

    def __post_init__(self):
        if self.n_bins < 2:
            raise ValueError("n_bins must be >= 2")
        if self.sigma is not None and not self.sigma > 0:
            raise ValueError("sigma must be positive")

    @property
    def width(self) -> float:
        return (self.range.hi - self.range.lo) / self.n_bins

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(self.range.lo, self.range.hi, self.n_bins + 1)

    @property
    def centers(self) -> np.ndarray:
        e = self.edges
        return 0.5 * (e[:-1] + e[1:])

    @property
    def std(self) -> float:
        return 0.75 * self.width if self.sigma is None else self.sigma


def hl_gauss_encode(y, bins: BinSpec) -> np.ndarray:
    """Gaussian(y, sigma) mass per bin, renormalized over the bin range.

    ``y`` may be a scalar or an array; the bin axis is appended last.
    """
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise ValueError("HL-Gauss targets must be finite")
    y = np.clip(y, bins.range.lo, bins.range.hi)
    cdf = ndtr((bins.edges - y[..., None]) / bins.std)
    mass = np.diff(cdf, axis=-1)
    return mass / mass.sum(axis=-1, keepdims=True)


def hl_gauss_loss(logits: np.ndarray, y, bins: BinSpec):
    """Mean cross-entropy between softmax(logits) and the encoded targets.

    ``logits`` is (..., n_bins); ``y`` matches its leading shape.
    """
    target = hl_gauss_encode(y, bins)
    lp = log_softmax(logits.astype(np.float64), axis=-1)
    n = int(np.prod(logits.shape[:-1])) if logits.ndim > 1 else 1
    loss = float(-(target * lp).sum() / n)
    grad = (np.exp(lp) - target) / n
    return loss, grad.astype(logits.dtype, copy=False)


def hl_gauss_decode(logits: np.ndarray, bins: BinSpec) -> np.ndarray:
    return softmax(logits.astype(np.float64), axis=-1) @ bins.centers


def hl_gauss_decode_backward(dout: np.ndarray, logits: np.ndarray, bins: BinSpec) -> np.ndarray:
    p = softmax(logits.astype(np.float64), axis=-1)
    c = bins.centers
    mean = p @ c
    return (p * (c - mean[..., None]) * np.asarray(dout)[..., None]).astype(logits.dtype)


def hl_gauss_trace_loss(logits: np.ndarray, target_frame: np.ndarray, idx: NeuronIndex, bins: BinSpec):
    """HL-Gauss cross-entropy restricted to segmented voxels, each neuron
    weighted like in the trace MAE (1 / (N_valid * |seg(n)|))."""
    if idx.n_valid == 0:
        raise EmptyMaskError("every neuron is empty")
    flat_logits = logits.reshape(-1, logits.shape[-1])
    vox = idx.voxels
    counts = np.repeat(idx.counts, idx.counts).astype(np.float64)
    weight = 1.0 / (idx.n_valid * counts)
    target = hl_gauss_encode(target_frame.reshape(-1)[vox], bins)
    lp = log_softmax(flat_logits[vox].astype(np.float64), axis=-1)
    loss = float(-(weight[:, None] * target * lp).sum())
    grad = np.zeros(flat_logits.shape, dtype=np.float64)
    grad[vox] = weight[:, None] * (np.exp(lp) - target)
    return loss, grad.reshape(logits.shape).astype(logits.dtype, copy=False)
