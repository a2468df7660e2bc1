"""Synthetic calcium movies with known cells and traces.

Cells are non-overlapping axis-aligned ellipsoids.  Their activity follows a
stable recurrence ``x(t+1) = tanh(A x(t)) + eps`` whose coupling matrix ``A``
has spectral radius 0.9; traces are then mapped affinely into the usual
normalized range [-0.25, 1.5].  Movies come in four variants:

``full``       cells rendered with the chosen texture plus voxel noise
``masked_bg``  ``full`` with every unsegmented voxel set to 0
``rendered``   each cell filled uniformly with its trace extracted from ``full``
``shuffled``   like ``rendered`` but with traces reassigned to random cells
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from volcast import segtrace, volstore
from volcast.data import SplitSpec, contiguous_splits
from volcast.segtrace import NeuronIndex, SegmentationMask, TraceMatrix

log = logging.getLogger(__name__)

VARIANTS = ("full", "masked_bg", "rendered", "shuffled")
TRACE_RANGE = (-0.25, 1.5)


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    dims: tuple = (64, 48, 8, 2000)
    n_cells: int = 30
    radius: tuple = (2.5, 4.0)  # xy semi-axis range in voxels
    z_radius: tuple = (1.0, 1.5)
    # physical size of a z step relative to xy, used for coupling distances
    z_scale: float = 2.0
    coupling_density: float = 0.2
    coupling_scale: float = 2.5
    # "wave": spatially structured rotation, "random": sparse signed Gaussian
    coupling_kind: str = "wave"
    coupling_range: tuple = (10.0, 30.0)
    self_weight: float = 0.5  # diagonal of A for coupling_kind="random"
    voxel_noise: float = 0.0
    trace_noise: float = 0.1
    texture: str = "uniform"
    falloff: float = 0.5
    burn_in: int = 200
    n_conditions: int = 1
    split_fractions: tuple = (0.7, 0.15, 0.15)
    seed: int = 0

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 4 or any(d < 1 for d in dims):
            raise SynthError(f"dims must be 4 positive integers, got {self.dims}")
        object.__setattr__(self, "dims", dims)
        for name in ("radius", "z_radius", "coupling_range", "split_fractions"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if self.n_cells < 1:
            raise SynthError("n_cells must be >= 1")
        if not 0.0 <= self.coupling_density <= 1.0:
            raise SynthError("coupling_density must be in [0, 1]")
        if self.coupling_kind not in ("wave", "random"):
            raise SynthError(f"unknown coupling_kind {self.coupling_kind!r}")
        if self.texture not in ("uniform", "radial"):
            raise SynthError(f"unknown texture {self.texture!r}")
        if self.voxel_noise < 0 or self.trace_noise < 0:
            raise SynthError("noise levels must be non-negative")
        if self.radius[0] > self.radius[1] or self.z_radius[0] > self.z_radius[1]:
            raise SynthError("radius ranges must be (lo, hi) with lo <= hi")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SynthError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)


def _rng(cfg: SynthConfig, stream: str) -> np.random.Generator:
    tag = {"cells": 1, "coupling": 2, "dynamics": 3, "noise": 4, "shuffle": 5}[stream]
    return np.random.default_rng([cfg.seed, tag])


@dataclass
class Cells:
    centers: np.ndarray  # (K, 3) voxel coordinates
    radii: np.ndarray  # (K, 3) semi-axes in voxels
    labels: np.ndarray = field(repr=False)


def place_cells(cfg: SynthConfig, max_tries: int = 20000) -> Cells:
    """Rejection-sample non-overlapping ellipsoids; deterministic per seed."""
    rng = _rng(cfg, "cells")
    X, Y, Z = cfg.dims[:3]
    labels = np.zeros((X, Y, Z), dtype=np.uint32)
    grid = np.stack(np.meshgrid(np.arange(X), np.arange(Y), np.arange(Z), indexing="ij"), axis=-1)
    centers, radii = [], []
    tries = 0
    while len(centers) < cfg.n_cells:
        tries += 1
        if tries > max_tries:
            raise SynthError(
                f"placed only {len(centers)} of {cfg.n_cells} cells in {cfg.dims[:3]}; volume too small"
            )
        r = np.array([rng.uniform(*cfg.radius), rng.uniform(*cfg.radius), rng.uniform(*cfg.z_radius)])
        r = np.minimum(r, np.array([X, Y, Z]) / 2.0)
        lo = np.maximum(r - 0.5, 0.0)
        hi = np.maximum(np.array([X, Y, Z]) - 1 - lo, lo)
        c = rng.uniform(lo, hi)
        inside = (((grid - c) / r) ** 2).sum(axis=-1) <= 1.0
        if not inside.any():
            continue
        # one voxel of clearance so cells never touch
        grown = (((grid - c) / (r + 1.0)) ** 2).sum(axis=-1) <= 1.0
        if np.any(labels[grown]):
            continue
        labels[inside] = len(centers) + 1
        centers.append(c)
        radii.append(r)
    return Cells(np.array(centers), np.array(radii), labels)


def gen_mask(cfg: SynthConfig) -> SegmentationMask:
    return SegmentationMask(place_cells(cfg).labels, n_neurons=cfg.n_cells)


def coupling_matrix(cfg: SynthConfig, centers: np.ndarray | None = None) -> np.ndarray:
    """Recurrent weights with spectral radius 0.9.

    ``wave``: pairs of cells whose distance lies in ``coupling_range`` are
    coupled with probability ``coupling_density``; the coupling is
    antisymmetric with its sign set by the x offset, so activity rotates
    between cells.  ``A = 0.9 expm(scale * S / rho(S))`` keeps every mode
    equally persistent.  ``random``: sparse Gaussian off-diagonal entries
    plus ``self_weight`` on the diagonal, rescaled to spectral radius 0.9.
    """
    K = cfg.n_cells
    rng = _rng(cfg, "coupling")
    if cfg.coupling_kind == "random":
        A = rng.standard_normal((K, K)) * cfg.coupling_scale
        A *= rng.random((K, K)) < cfg.coupling_density
        np.fill_diagonal(A, cfg.self_weight)
        rho = np.max(np.abs(np.linalg.eigvals(A)))
        return A * (0.9 / rho) if rho > 0 else A

    if centers is None:
        centers = place_cells(cfg).centers
    d = centers[None, :, :] - centers[:, None, :]
    dist = np.linalg.norm(d * np.array([1.0, 1.0, cfg.z_scale]), axis=-1)
    lo, hi = cfg.coupling_range
    keep = np.triu((dist >= lo) & (dist <= hi) & (rng.random((K, K)) < cfg.coupling_density), 1)
    keep = keep | keep.T
    S = np.where(keep, np.sign(d[..., 0]), 0.0)
    rho = np.max(np.abs(np.linalg.eigvals(S))) if keep.any() else 0.0
    if rho == 0:
        return 0.9 * np.eye(K)
    return 0.9 * scipy.linalg.expm(cfg.coupling_scale * S / rho)


def simulate(cfg: SynthConfig, A: np.ndarray | None = None) -> np.ndarray:
    """Raw (unmapped) activity, shape (K, T)."""
    if A is None:
        A = coupling_matrix(cfg)
    rng = _rng(cfg, "dynamics")
    K, T = cfg.n_cells, cfg.dims[3]
    x = rng.normal(0.0, 0.5, K)
    out = np.empty((K, T))
    for t in range(cfg.burn_in + T):
        x = np.tanh(A @ x) + rng.normal(0.0, 1.0, K) * cfg.trace_noise
        if t >= cfg.burn_in:
            out[:, t - cfg.burn_in] = x
    return out


def map_to_range(raw: np.ndarray, lo: float = TRACE_RANGE[0], hi: float = TRACE_RANGE[1]) -> np.ndarray:
    a, b = raw.min(), raw.max()
    if b == a:
        return np.full_like(raw, 0.5 * (lo + hi))
    return lo + (raw - a) * ((hi - lo) / (b - a))


def gen_traces(cfg: SynthConfig) -> TraceMatrix:
    cells = place_cells(cfg)
    raw = simulate(cfg, coupling_matrix(cfg, cells.centers))
    return TraceMatrix(map_to_range(raw).astype(np.float32))


def _texture_weights(cfg: SynthConfig, cells: Cells, idx: NeuronIndex) -> np.ndarray:
    """Per-voxel multiplier for every segmented voxel, in ``idx.voxels`` order."""
    if cfg.texture == "uniform":
        return np.ones(idx.voxels.size, dtype=np.float64)
    coords = np.stack(np.unravel_index(idx.voxels, idx.dims), axis=1).astype(np.float64)
    owner = np.repeat(np.arange(idx.n_neurons), idx.counts)
    r = np.sqrt((((coords - cells.centers[owner]) / cells.radii[owner]) ** 2).sum(axis=1))
    return 1.0 - cfg.falloff * np.clip(r, 0.0, 1.0)


def render_movie(mask: SegmentationMask, traces: TraceMatrix, cfg: SynthConfig,
                 out: volstore.VolumeHandle | None = None, t_block: int = 64):
    """Render the ``full`` movie; returns the array when ``out`` is None."""
    dims = (*mask.dims, traces.timesteps)
    if out is not None and tuple(out.dims) != dims:
        raise segtrace.DimsMismatchError(f"output dims {out.dims} != {dims}")
    if mask.n_neurons != traces.neurons:
        raise segtrace.DimsMismatchError("mask and traces disagree on the number of cells")
    cells = place_cells(cfg) if cfg.texture == "radial" else None
    idx = segtrace.build_index(mask)
    weights = _texture_weights(cfg, cells, idx) if cells is not None else np.ones(idx.voxels.size)
    owner = np.repeat(np.arange(idx.n_neurons), idx.counts)
    rng = _rng(cfg, "noise")
    V = int(np.prod(mask.dims))
    full = None if out is not None else np.empty(dims, dtype=np.float32)
    for a in range(0, dims[3], t_block):
        b = min(a + t_block, dims[3])
        flat = np.zeros((V, b - a), dtype=np.float64)
        flat[idx.voxels] = traces.values[owner, a:b] * weights[:, None]
        if cfg.voxel_noise > 0:
            flat += rng.normal(0.0, cfg.voxel_noise, flat.shape)
        block = flat.reshape(*mask.dims, b - a).astype(np.float32)
        if out is None:
            full[..., a:b] = block
        else:
            out.write(volstore.Box4((0, 0, 0, a), (*mask.dims, b)), block)
    return full


def make_dataset(cfg: SynthConfig, out_dir: str | os.PathLike,
                 variants=VARIANTS, t_chunk: int = 16) -> Path:
    """Write a dataset directory::

        movie_<variant>/  volumes     mask/  label volume
        traces.bin        generating traces
        traces_extracted.bin  traces extracted from the full movie
        splits.json  synth_config.json
    """
    variants = tuple(variants)
    bad = set(variants) - set(VARIANTS)
    if bad or not variants:
        raise SynthError(f"invalid variant set {variants}; choose from {VARIANTS}")
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()):
        raise volstore.RootOccupiedError(f"{out_dir} is not empty")
    out_dir.mkdir(parents=True, exist_ok=True)

    cells = place_cells(cfg)
    mask = SegmentationMask(cells.labels, n_neurons=cfg.n_cells)
    idx = segtrace.build_index(mask)
    traces = TraceMatrix(map_to_range(simulate(cfg, coupling_matrix(cfg, cells.centers))).astype(np.float32))
    mask.save(out_dir / "mask")
    segtrace.save_traces(traces, out_dir / "traces.bin")

    chunks = volstore.default_chunks(cfg.dims, t_chunk)
    log.info("rendering full movie %s", cfg.dims)
    full = render_movie(mask, traces, cfg)
    extracted = segtrace.extract_traces(full, idx)
    extracted.values = extracted.values.astype(np.float32)
    segtrace.save_traces(extracted, out_dir / "traces_extracted.bin")

    def save(name, arr):
        volstore.save_array(arr, out_dir / f"movie_{name}", chunk_shape=chunks)

    if "full" in variants:
        save("full", full)
    if "masked_bg" in variants:
        save("masked_bg", segtrace.zero_unsegmented(full, mask))
    del full
    if "rendered" in variants:
        save("rendered", segtrace.render_traces(idx, extracted))
    if "shuffled" in variants:
        shuffled, perm = segtrace.permute_assignment(extracted, int(_rng(cfg, "shuffle").integers(2**31)))
        save("shuffled", segtrace.render_traces(idx, shuffled))
        with open(out_dir / "shuffle_perm.json", "w") as f:
            json.dump([int(p) for p in perm], f)

    splits = contiguous_splits(cfg.dims[3], cfg.n_conditions, cfg.split_fractions)
    splits.save(out_dir / "splits.json")
    with open(out_dir / "synth_config.json", "w") as f:
        json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
    return out_dir
