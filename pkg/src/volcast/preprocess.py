"""Turn raw recordings into model inputs.

All transforms stream over x-slabs of the input so that peak memory is a
few slabs rather than the whole recording.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from volcast.segtrace import SegmentationMask
from volcast.volstore import Box4, VolumeHandle


class PreprocessError(ValueError):
    pass


@dataclass(frozen=True)
class BaselineConfig:
    percentile: float = 5.0
    window: int | str = "global"
    epsilon: float = 1e-3

    def __post_init__(self):
        if not 0 < self.percentile < 100:
            raise PreprocessError(f"percentile must be in (0, 100), got {self.percentile}")
        if self.window != "global" and (not isinstance(self.window, int) or self.window < 1):
            raise PreprocessError(f"window must be 'global' or a positive int, got {self.window!r}")
        if not self.epsilon > 0:
            raise PreprocessError("epsilon must be positive")


@dataclass(frozen=True)
class ClampRange:
    lo: float = -0.25
    hi: float = 1.5

    def __post_init__(self):
        if not self.lo < self.hi:
            raise PreprocessError(f"clamp range needs lo < hi, got [{self.lo}, {self.hi}]")


def nearest_rank(values: np.ndarray, percentile: float, axis: int = -1) -> np.ndarray:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest value."""
    n = values.shape[axis]
    k = max(1, math.ceil(percentile / 100.0 * n)) - 1
    return np.take(np.partition(values, k, axis=axis), k, axis=axis)


def baseline(trace_block: np.ndarray, cfg: BaselineConfig) -> np.ndarray:
    """Per-voxel baseline for a (..., T) block, broadcastable against it."""
    if cfg.window == "global":
        return nearest_rank(trace_block, cfg.percentile)[..., None]
    T = trace_block.shape[-1]
    w = cfg.window
    out = np.empty_like(trace_block)
    for t in range(T):
        a = max(0, t - w // 2)
        b = min(T, a + w)
        a = max(0, b - w)
        out[..., t] = nearest_rank(trace_block[..., a:b], cfg.percentile)
    return out


def dff(raw: np.ndarray, cfg: BaselineConfig, clamp: ClampRange | None = None) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size and raw.min() < 0:
        raise PreprocessError("raw fluorescence must be non-negative")
    f = baseline(raw, cfg)
    out = (raw - f) / (f + cfg.epsilon)
    if clamp is not None:
        out = np.clip(out, clamp.lo, clamp.hi)
    return out


def _slabs(extent: int, step: int):
    for a in range(0, extent, step):
        yield a, min(a + step, extent)


def dff_normalize(
    raw: VolumeHandle,
    cfg: BaselineConfig,
    clamp: ClampRange,
    out: VolumeHandle,
) -> None:
    if tuple(raw.dims) != tuple(out.dims):
        raise PreprocessError(f"dims mismatch: {raw.dims} vs {out.dims}")
    X, Y, Z, T = raw.dims
    step = out.meta.chunk_shape[0]
    for a, b in _slabs(X, step):
        box = Box4((a, 0, 0, 0), (b, Y, Z, T))
        out.write(box, dff(raw.read(box), cfg, clamp).astype(out.dtype))


def crop_offset(extent: int, size: int) -> int:
    if size > extent:
        raise PreprocessError(f"crop size {size} exceeds axis extent {extent}")
    if size < 1:
        raise PreprocessError("crop size must be positive")
    return (extent - size) // 2


def center_crop(v: VolumeHandle, axis: int, size: int, out: VolumeHandle) -> None:
    off = crop_offset(v.dims[axis], size)
    want = list(v.dims)
    want[axis] = size
    if tuple(out.dims) != tuple(want):
        raise PreprocessError(f"output dims {out.dims} != expected {tuple(want)}")
    step = out.meta.chunk_shape[0]
    for a, b in _slabs(want[0], step):
        lo = [a, 0, 0, 0]
        hi = [b, *want[1:]]
        src_lo, src_hi = list(lo), list(hi)
        src_lo[axis] += off
        src_hi[axis] += off
        out.write(Box4(lo, hi), v.read(Box4(src_lo, src_hi)))


def _check_factors(dims: Sequence[int], factors: Sequence[int]) -> tuple[int, int, int]:
    factors = tuple(int(f) for f in factors)
    if len(factors) != 3 or any(f < 1 for f in factors):
        raise PreprocessError(f"need 3 positive factors, got {factors}")
    for d, f in zip(dims[:3], factors):
        if d % f:
            raise PreprocessError(f"dims {tuple(dims[:3])} not divisible by factors {factors}")
    return factors


def block_mean(arr: np.ndarray, factors: Sequence[int]) -> np.ndarray:
    """Average non-overlapping blocks over the first three axes."""
    fx, fy, fz = factors
    X, Y, Z = arr.shape[:3]
    rest = arr.shape[3:]
    r = arr.reshape(X // fx, fx, Y // fy, fy, Z // fz, fz, *rest)
    return r.mean(axis=(1, 3, 5))


def downsample_avg(v: VolumeHandle, factors: Sequence[int], out: VolumeHandle) -> None:
    factors = _check_factors(v.dims, factors)
    want = tuple(d // f for d, f in zip(v.dims[:3], factors)) + (v.dims[3],)
    if tuple(out.dims) != want:
        raise PreprocessError(f"output dims {out.dims} != expected {want}")
    fx = factors[0]
    # slab height is a multiple of fx so blocks never straddle slabs
    step = max(1, out.meta.chunk_shape[0]) * fx
    Y, Z, T = v.dims[1:]
    for a, b in _slabs(v.dims[0], step):
        block = v.read(Box4((a, 0, 0, 0), (b, Y, Z, T))).astype(np.float64)
        out.write(
            Box4((a // fx, 0, 0, 0), (b // fx, *want[1:])),
            block_mean(block, factors).astype(out.dtype),
        )


def downsample_mask_stride(mask: SegmentationMask, factors: Sequence[int]) -> SegmentationMask:
    """Keep every ``factors``-th voxel; neuron ids stay stable, so neurons
    missed by the stride become empty rather than renumbered."""
    fx, fy, fz = _check_factors(mask.dims, factors)
    return SegmentationMask(mask.labels[::fx, ::fy, ::fz].copy(), n_neurons=mask.n_neurons)
