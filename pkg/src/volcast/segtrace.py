"""Segmentation masks, per-neuron trace extraction and trace rendering.

A mask is a 3D integer label volume (0 is background, ``n >= 1`` a neuron).
Traces are per-neuron spatial means of the activity volume at each frame.
"""

from __future__ import annotations

import csv
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from volcast import volstore
from volcast.volstore import Box4, VolumeHandle


class DimsMismatchError(ValueError):
    pass


@dataclass
class SegmentationMask:
    labels: np.ndarray
    n_neurons: int | None = None
    # original id -> contiguous id; identity when ``labels`` is already 1..N
    remap: dict[int, int] | None = None

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise ValueError(f"mask must be 3D, got shape {labels.shape}")
        if labels.size and labels.min() < 0:
            raise ValueError("mask labels must be non-negative")
        labels = labels.astype(np.uint32, copy=False)
        present = np.unique(labels)
        present = present[present > 0]
        top = int(present[-1]) if present.size else 0
        if self.n_neurons is None:
            if present.size != top:
                # ids have gaps; compact to 1..N and keep the table
                self.remap = {int(old): i + 1 for i, old in enumerate(present)}
                lut = np.zeros(top + 1, dtype=np.uint32)
                lut[present] = np.arange(1, present.size + 1, dtype=np.uint32)
                labels = lut[labels]
                top = int(present.size)
            self.n_neurons = top
        elif top > self.n_neurons:
            raise ValueError(f"label {top} exceeds n_neurons={self.n_neurons}")
        self.labels = labels

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)

    def save(self, root: str | os.PathLike) -> VolumeHandle:
        h = volstore.save_array(
            self.labels[..., None], root, chunk_shape=(*self.dims, 1), scalar_kind="u32le"
        )
        extra = {"n_neurons": self.n_neurons}
        if self.remap:
            extra["remap"] = {str(k): v for k, v in self.remap.items()}
        with open(Path(root) / "labels.json", "w", encoding="utf-8") as f:
            json.dump(extra, f, indent=2)
        return h

    @classmethod
    def load(cls, root: str | os.PathLike) -> "SegmentationMask":
        h = volstore.open_volume(root)
        labels = h.read_all()[..., 0]
        extra_path = Path(root) / "labels.json"
        n = remap = None
        if extra_path.exists():
            with open(extra_path, encoding="utf-8") as f:
                extra = json.load(f)
            n = extra.get("n_neurons")
            if "remap" in extra:
                remap = {int(k): int(v) for k, v in extra["remap"].items()}
        return cls(labels, n_neurons=n, remap=remap)


@dataclass
class NeuronIndex:
    """Voxel membership of every neuron.

    ``voxels`` holds flat (x-major) voxel indices grouped by neuron; neuron
    ``n`` (1-based) owns ``voxels[offsets[n-1]:offsets[n]]``.
    """

    dims: tuple[int, int, int]
    voxels: np.ndarray
    offsets: np.ndarray
    counts: np.ndarray
    _matrix: sp.csr_matrix | None = field(default=None, repr=False)

    @property
    def n_neurons(self) -> int:
        return int(self.counts.size)

    @property
    def valid(self) -> np.ndarray:
        return self.counts > 0

    @property
    def n_valid(self) -> int:
        return int(np.count_nonzero(self.counts))

    def voxel_coords(self, n: int) -> np.ndarray:
        flat = self.voxels[self.offsets[n - 1] : self.offsets[n]]
        return np.stack(np.unravel_index(flat, self.dims), axis=1)

    @property
    def matrix(self) -> sp.csr_matrix:
        """Sparse (N, V) 0/1 membership matrix."""
        if self._matrix is None:
            n = self.n_neurons
            rows = np.repeat(np.arange(n), self.counts)
            ones = np.ones(self.voxels.size)
            self._matrix = sp.csr_matrix((ones, (rows, self.voxels)), shape=(n, int(np.prod(self.dims))))
        return self._matrix

    def means(self, flat: np.ndarray) -> np.ndarray:
        """Per-neuron means of ``flat`` (V,) or (V, T); empty neurons give 0.

        Sums first, then divides, so a uniformly filled neuron returns its
        fill value exactly.
        """
        sums = self.matrix @ np.asarray(flat, dtype=np.float64)
        denom = np.maximum(self.counts, 1).astype(np.float64)
        return sums / (denom if sums.ndim == 1 else denom[:, None])

    def means_adjoint(self, grad: np.ndarray) -> np.ndarray:
        """Transpose of :meth:`means`, returned as a flat (V,) array."""
        return self.matrix.T @ (np.asarray(grad, dtype=np.float64) / np.maximum(self.counts, 1))

    @property
    def labels_flat(self) -> np.ndarray:
        out = np.zeros(int(np.prod(self.dims)), dtype=np.int64)
        out[self.voxels] = np.repeat(np.arange(1, self.n_neurons + 1), self.counts)
        return out


def build_index(mask: SegmentationMask) -> NeuronIndex:
    flat = mask.labels.reshape(-1).astype(np.int64)
    fg = np.flatnonzero(flat)
    order = np.argsort(flat[fg], kind="stable")
    voxels = fg[order]
    counts = np.bincount(flat[fg], minlength=mask.n_neurons + 1)[1:]
    offsets = np.concatenate([[0], np.cumsum(counts)])
    return NeuronIndex(mask.dims, voxels, offsets, counts)


@dataclass
class TraceMatrix:
    values: np.ndarray
    # False marks neurons with no voxels; those rows are zero and ignored downstream
    valid: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ValueError("trace matrix must be 2D (neurons x time)")
        if self.valid is None:
            self.valid = np.ones(self.values.shape[0], dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool)

    @property
    def neurons(self) -> int:
        return self.values.shape[0]

    @property
    def timesteps(self) -> int:
        return self.values.shape[1]

    def save(self, path: str | os.PathLike) -> None:
        save_traces(self, path)

    def to_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["neuron", "valid"] + [f"t{t}" for t in range(self.timesteps)])
            for n in range(self.neurons):
                w.writerow([n + 1, int(self.valid[n])] + [f"{v:.7g}" for v in self.values[n]])


def save_traces(tm: TraceMatrix, path: str | os.PathLike) -> None:
    """``traces.bin``: N and T as u64le, then N*T f32le row-major."""
    with open(path, "wb") as f:
        f.write(struct.pack("<QQ", tm.neurons, tm.timesteps))
        f.write(np.ascontiguousarray(tm.values, dtype="<f4").tobytes())


def load_traces(path: str | os.PathLike) -> TraceMatrix:
    with open(path, "rb") as f:
        n, t = struct.unpack("<QQ", f.read(16))
        values = np.frombuffer(f.read(), dtype="<f4")
    if values.size != n * t:
        raise ValueError(f"{path}: expected {n * t} values, found {values.size}")
    return TraceMatrix(values.reshape(n, t).copy())


def _check_spatial(dims, idx: NeuronIndex) -> None:
    if tuple(dims[:3]) != tuple(idx.dims):
        raise DimsMismatchError(f"volume dims {tuple(dims[:3])} != mask dims {idx.dims}")


def extract_traces(
    v: VolumeHandle | np.ndarray,
    idx: NeuronIndex,
    t_range: tuple[int, int] | None = None,
    t_block: int = 64,
) -> TraceMatrix:
    """Per-neuron mean activity for frames ``t_range`` (default: all)."""
    dims = v.dims if isinstance(v, VolumeHandle) else v.shape
    _check_spatial(dims, idx)
    t0, t1 = t_range or (0, dims[3])
    out = np.zeros((idx.n_neurons, t1 - t0), dtype=np.float64)
    for a in range(t0, t1, t_block):
        b = min(a + t_block, t1)
        if isinstance(v, VolumeHandle):
            block = v.read(Box4((0, 0, 0, a), (*dims[:3], b)))
        else:
            block = v[..., a:b]
        out[:, a - t0 : b - t0] = idx.means(block.reshape(-1, b - a))
    return TraceMatrix(out, valid=idx.valid.copy())


def mask_frame(frame: np.ndarray, idx: NeuronIndex) -> np.ndarray:
    """Per-neuron means of a single (x, y, z) frame; empty neurons give 0."""
    _check_spatial(frame.shape, idx)
    return idx.means(frame.reshape(-1))


def mask_frame_grad(grad_traces: np.ndarray, idx: NeuronIndex) -> np.ndarray:
    """Adjoint of :func:`mask_frame`: spread per-neuron grads over voxels."""
    return idx.means_adjoint(grad_traces).reshape(idx.dims)


def render_traces(
    idx: NeuronIndex, traces: TraceMatrix, out: VolumeHandle | None = None
) -> np.ndarray | None:
    """Fill every voxel of neuron ``n`` with ``y_n(t)``; background is 0.

    Returns the dense movie when ``out`` is None, else writes into ``out``.
    """
    if traces.neurons != idx.n_neurons:
        raise DimsMismatchError(f"{traces.neurons} traces for {idx.n_neurons} neurons")
    dims = (*idx.dims, traces.timesteps)
    if out is not None and tuple(out.dims) != dims:
        raise DimsMismatchError(f"output dims {out.dims} != {dims}")
    flat = np.zeros((int(np.prod(idx.dims)), traces.timesteps), dtype=np.float32)
    owner = np.repeat(np.arange(idx.n_neurons), idx.counts)
    flat[idx.voxels] = traces.values[owner]
    movie = flat.reshape(dims)
    if out is None:
        return movie
    out.write_all(movie)
    return None


def permute_assignment(traces: TraceMatrix, seed: int) -> tuple[TraceMatrix, np.ndarray]:
    """Randomly reassign traces to neurons; returns the permuted matrix and
    ``perm`` such that new row ``i`` is old row ``perm[i]``."""
    if traces.neurons < 2:
        raise ValueError("need at least two neurons to permute")
    perm = np.random.default_rng(seed).permutation(traces.neurons)
    return TraceMatrix(traces.values[perm].copy(), valid=traces.valid[perm].copy()), perm


def zero_unsegmented(
    v: VolumeHandle | np.ndarray, mask: SegmentationMask, out: VolumeHandle | None = None
):
    dims = v.dims if isinstance(v, VolumeHandle) else v.shape
    if tuple(dims[:3]) != mask.dims:
        raise DimsMismatchError(f"volume dims {tuple(dims[:3])} != mask dims {mask.dims}")
    data = v.read_all() if isinstance(v, VolumeHandle) else np.asarray(v)
    result = np.where((mask.labels > 0)[..., None], data, np.zeros((), dtype=data.dtype))
    if out is None:
        return result
    out.write_all(result)
    return None
