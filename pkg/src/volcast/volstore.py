"""Chunked on-disk storage for 4D (x, y, z, t) volumes.

A volume is a directory holding ``meta.json`` and one binary file per chunk,
``c{ix}_{iy}_{iz}_{it}.bin``.  Each chunk file stores the full chunk (edge
chunks are padded with ``fill_value``) as little-endian scalars in row-major
order with x slowest and t fastest.  Absent chunks read as ``fill_value``.
"""

from __future__ import annotations

import itertools
import json
import math
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

META_FILE = "meta.json"

SCALAR_DTYPES = {
    "f32le": np.dtype("<f4"),
    "u32le": np.dtype("<u4"),
}

PADDING_MODES = ("error", "fill", "clamp")


class VolumeError(Exception):
    """Base class for storage errors."""


class InvalidMetaError(VolumeError, ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"invalid {field_name}: {message}")
        self.field = field_name


class RootOccupiedError(VolumeError, FileExistsError):
    pass


class OutOfBoundsError(VolumeError, IndexError):
    pass


class ShapeMismatchError(VolumeError, ValueError):
    pass


class ConcurrentWriteError(VolumeError, RuntimeError):
    """Raised when two writers touch the same chunk at the same time."""


def _four(name: str, values: Sequence, kind=int) -> tuple:
    try:
        out = tuple(kind(v) for v in values)
    except (TypeError, ValueError) as exc:
        raise InvalidMetaError(name, f"expected 4 numbers, got {values!r}") from exc
    if len(out) != 4:
        raise InvalidMetaError(name, f"expected 4 components, got {len(out)}")
    return out


@dataclass(frozen=True)
class VolumeMeta:
    dims: tuple[int, int, int, int]
    chunk_shape: tuple[int, int, int, int]
    voxel_size: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    scalar_kind: str = "f32le"
    fill_value: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "dims", _four("dims", self.dims))
        object.__setattr__(self, "chunk_shape", _four("chunk_shape", self.chunk_shape))
        object.__setattr__(self, "voxel_size", _four("voxel_size", self.voxel_size, float))
        if any(d < 1 for d in self.dims):
            raise InvalidMetaError("dims", f"components must be >= 1, got {self.dims}")
        for c, d in zip(self.chunk_shape, self.dims):
            if c < 1 or c > d:
                raise InvalidMetaError(
                    "chunk_shape", f"{self.chunk_shape} must lie within 1..{self.dims}"
                )
        if self.scalar_kind not in SCALAR_DTYPES:
            raise InvalidMetaError("scalar_kind", f"unsupported {self.scalar_kind!r}")
        if not math.isfinite(self.fill_value):
            raise InvalidMetaError("fill_value", "must be finite")

    @property
    def grid(self) -> tuple[int, int, int, int]:
        return tuple(-(-d // c) for d, c in zip(self.dims, self.chunk_shape))

    @property
    def dtype(self) -> np.dtype:
        return SCALAR_DTYPES[self.scalar_kind]

    def to_json(self) -> dict:
        return {
            "dims": list(self.dims),
            "voxel_size": list(self.voxel_size),
            "chunk_shape": list(self.chunk_shape),
            "scalar_kind": self.scalar_kind,
            "fill_value": self.fill_value,
        }

    @classmethod
    def from_json(cls, d: dict) -> "VolumeMeta":
        missing = {"dims", "chunk_shape"} - set(d)
        if missing:
            raise InvalidMetaError(sorted(missing)[0], "missing")
        return cls(
            dims=d["dims"],
            chunk_shape=d["chunk_shape"],
            voxel_size=d.get("voxel_size", (1.0, 1.0, 1.0, 1.0)),
            scalar_kind=d.get("scalar_kind", "f32le"),
            fill_value=float(d.get("fill_value", 0.0)),
        )


@dataclass(frozen=True)
class Box4:
    """Half-open 4D box: ``lo`` inclusive, ``hi`` exclusive."""

    lo: tuple[int, int, int, int]
    hi: tuple[int, int, int, int]

    def __post_init__(self):
        lo = tuple(int(v) for v in self.lo)
        hi = tuple(int(v) for v in self.hi)
        if len(lo) != 4 or len(hi) != 4:
            raise ValueError("Box4 needs 4 components on each side")
        if any(a >= b for a, b in zip(lo, hi)):
            raise ValueError(f"empty box lo={lo} hi={hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(b - a for a, b in zip(self.lo, self.hi))

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def within(self, dims: Sequence[int]) -> bool:
        return all(0 <= a and b <= d for a, b, d in zip(self.lo, self.hi, dims))

    def intersect(self, other: "Box4") -> "Box4 | None":
        lo = tuple(max(a, b) for a, b in zip(self.lo, other.lo))
        hi = tuple(min(a, b) for a, b in zip(self.hi, other.hi))
        if any(a >= b for a, b in zip(lo, hi)):
            return None
        return Box4(lo, hi)

    @classmethod
    def full(cls, dims: Sequence[int]) -> "Box4":
        return cls((0, 0, 0, 0), tuple(dims))


@dataclass
class IOCounter:
    chunks_read: int = 0
    chunks_written: int = 0
    voxels_read: int = 0
    touched: set = field(default_factory=set)

    def reset(self) -> None:
        self.chunks_read = 0
        self.chunks_written = 0
        self.voxels_read = 0
        self.touched = set()


class VolumeHandle:
    """Open chunked volume.

    Reads are thread safe.  A write claims each chunk it touches for the
    duration of the merge; a second writer hitting a claimed chunk gets
    :class:`ConcurrentWriteError` instead of silently interleaving.
    """

    def __init__(self, root: Path, meta: VolumeMeta):
        self.root = Path(root)
        self.meta = meta
        self.io = IOCounter()
        self._lock = threading.Lock()
        self._writing: set[tuple[int, ...]] = set()

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.meta.dims

    @property
    def dtype(self) -> np.dtype:
        return self.meta.dtype

    def __repr__(self) -> str:
        return f"VolumeHandle({str(self.root)!r}, dims={self.dims})"

    # chunk level -----------------------------------------------------------

    def chunk_path(self, idx: Sequence[int]) -> Path:
        return self.root / "c{}_{}_{}_{}.bin".format(*idx)

    def chunk_box(self, idx: Sequence[int]) -> Box4:
        cs = self.meta.chunk_shape
        lo = tuple(i * c for i, c in zip(idx, cs))
        return Box4(lo, tuple(a + c for a, c in zip(lo, cs)))

    def chunks_for(self, box: Box4) -> Iterator[tuple[int, int, int, int]]:
        """Indices of chunks intersecting ``box`` (clipped to the volume)."""
        cs = self.meta.chunk_shape
        ranges = []
        for a, b, c, d in zip(box.lo, box.hi, cs, self.dims):
            a, b = max(a, 0), min(b, d)
            if a >= b:
                return iter(())
            ranges.append(range(a // c, (b - 1) // c + 1))
        return itertools.product(*ranges)

    def _load_chunk(self, idx) -> np.ndarray:
        path = self.chunk_path(idx)
        cs = self.meta.chunk_shape
        with self._lock:
            self.io.chunks_read += 1
            self.io.touched.add(tuple(idx))
        if not path.exists():
            return np.full(cs, self.meta.fill_value, dtype=self.dtype)
        data = np.fromfile(path, dtype=self.dtype)
        if data.size != int(np.prod(cs)):
            raise VolumeError(f"corrupt chunk {path.name}: {data.size} values")
        return data.reshape(cs)

    def _store_chunk(self, idx, arr: np.ndarray) -> None:
        path = self.chunk_path(idx)
        tmp = path.with_suffix(".tmp")
        np.ascontiguousarray(arr, dtype=self.dtype).tofile(tmp)
        os.replace(tmp, path)
        with self._lock:
            self.io.chunks_written += 1

    # voxel level -----------------------------------------------------------

    def write(self, box: Box4, block: np.ndarray) -> None:
        """Write ``block`` into ``box``; partially covered chunks are merged."""
        if not box.within(self.dims):
            raise OutOfBoundsError(f"{box} outside dims {self.dims}")
        block = np.asarray(block)
        if block.shape != box.shape:
            raise ShapeMismatchError(f"block shape {block.shape} != box shape {box.shape}")
        idxs = list(self.chunks_for(box))
        with self._lock:
            busy = self._writing.intersection(idxs)
            if busy:
                raise ConcurrentWriteError(f"chunks {sorted(busy)} are being written")
            self._writing.update(idxs)
        try:
            for idx in idxs:
                cbox = self.chunk_box(idx)
                part = cbox.intersect(box)
                src = tuple(slice(a - o, b - o) for a, b, o in zip(part.lo, part.hi, box.lo))
                dst = tuple(slice(a - o, b - o) for a, b, o in zip(part.lo, part.hi, cbox.lo))
                if part == cbox:
                    chunk = np.empty(self.meta.chunk_shape, dtype=self.dtype)
                else:
                    chunk = self._load_chunk(idx).copy()
                chunk[dst] = block[src]
                self._store_chunk(idx, chunk)
        finally:
            with self._lock:
                self._writing.difference_update(idxs)

    def read(self, box: Box4, padding: str = "error") -> np.ndarray:
        """Read ``box``; ``padding`` decides how out-of-bounds voxels behave."""
        if padding not in PADDING_MODES:
            raise ValueError(f"padding must be one of {PADDING_MODES}")
        inside = box.within(self.dims)
        if not inside and padding == "error":
            raise OutOfBoundsError(f"{box} outside dims {self.dims}")
        if padding == "clamp" and not inside:
            axes = [np.clip(np.arange(a, b), 0, d - 1) for a, b, d in zip(box.lo, box.hi, self.dims)]
            region = Box4(tuple(int(ax[0]) for ax in axes), tuple(int(ax[-1]) + 1 for ax in axes))
            src = self.read(region, "error")
            return src[np.ix_(*[ax - a for ax, a in zip(axes, region.lo)])]

        out = np.full(box.shape, self.meta.fill_value, dtype=self.dtype)
        for idx in self.chunks_for(box):
            cbox = self.chunk_box(idx)
            part = cbox.intersect(box)
            chunk = self._load_chunk(idx)
            src = tuple(slice(a - o, b - o) for a, b, o in zip(part.lo, part.hi, cbox.lo))
            dst = tuple(slice(a - o, b - o) for a, b, o in zip(part.lo, part.hi, box.lo))
            out[dst] = chunk[src]
        with self._lock:
            self.io.voxels_read += box.size
        return out

    def read_all(self) -> np.ndarray:
        return self.read(Box4.full(self.dims))

    def write_all(self, block: np.ndarray) -> None:
        self.write(Box4.full(self.dims), block)


def create_volume(meta: VolumeMeta, root: str | os.PathLike) -> VolumeHandle:
    root = Path(root)
    if (root / META_FILE).exists() or (root.exists() and any(root.iterdir())):
        raise RootOccupiedError(f"{root} already contains data")
    root.mkdir(parents=True, exist_ok=True)
    with open(root / META_FILE, "w", encoding="utf-8") as f:
        json.dump(meta.to_json(), f, indent=2)
        f.write("\n")
    return VolumeHandle(root, meta)


def open_volume(root: str | os.PathLike) -> VolumeHandle:
    root = Path(root)
    try:
        with open(root / META_FILE, encoding="utf-8") as f:
            meta = VolumeMeta.from_json(json.load(f))
    except FileNotFoundError as exc:
        raise VolumeError(f"no volume at {root}") from exc
    return VolumeHandle(root, meta)


def default_chunks(dims: Sequence[int], t_chunk: int = 16) -> tuple[int, int, int, int]:
    """Whole xyz frames per chunk, ``t_chunk`` frames deep."""
    return (dims[0], dims[1], dims[2], min(t_chunk, dims[3]))


def save_array(
    arr: np.ndarray,
    root: str | os.PathLike,
    chunk_shape: Sequence[int] | None = None,
    scalar_kind: str = "f32le",
    voxel_size: Sequence[float] = (1.0, 1.0, 1.0, 1.0),
    fill_value: float = 0.0,
) -> VolumeHandle:
    """Create a volume at ``root`` holding the 4D array ``arr``."""
    if arr.ndim != 4:
        raise ShapeMismatchError(f"expected a 4D array, got shape {arr.shape}")
    meta = VolumeMeta(
        dims=arr.shape,
        chunk_shape=chunk_shape or default_chunks(arr.shape),
        voxel_size=voxel_size,
        scalar_kind=scalar_kind,
        fill_value=fill_value,
    )
    h = create_volume(meta, root)
    h.write_all(arr.astype(meta.dtype, copy=False))
    return h
