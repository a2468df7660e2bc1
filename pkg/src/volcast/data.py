"""Time splits and in-memory datasets for training and evaluation."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from volcast import segtrace, volstore
from volcast.segtrace import NeuronIndex, SegmentationMask

SPLIT_NAMES = ("train", "val", "test", "holdout")


class SplitError(ValueError):
    pass


def _intervals(raw) -> list[tuple[int, int]]:
    out = []
    for iv in raw:
        lo, hi = (int(v) for v in iv)
        if not 0 <= lo < hi:
            raise SplitError(f"interval [{lo}, {hi}) is empty or negative")
        out.append((lo, hi))
    return sorted(out)


@dataclass
class SplitSpec:
    """Frame ranges ``[t_lo, t_hi)`` per condition and split name."""

    conditions: dict[str, dict[str, list[tuple[int, int]]]] = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        any_train = False
        for cond, splits in self.conditions.items():
            unknown = set(splits) - set(SPLIT_NAMES)
            if unknown:
                raise SplitError(f"condition {cond!r}: unknown split names {sorted(unknown)}")
            parts = {name: _intervals(splits.get(name, [])) for name in SPLIT_NAMES}
            flat = sorted(iv for ivs in parts.values() for iv in ivs)
            for (a0, a1), (b0, b1) in zip(flat, flat[1:]):
                if b0 < a1:
                    raise SplitError(f"condition {cond!r}: intervals [{a0},{a1}) and [{b0},{b1}) overlap")
            any_train |= bool(parts["train"])
            clean[cond] = parts
        if not any_train:
            raise SplitError("no train intervals")
        self.conditions = clean

    def intervals(self, split: str, condition: str | None = None) -> list[tuple[str, int, int]]:
        if split not in SPLIT_NAMES:
            raise SplitError(f"unknown split {split!r}")
        if condition is not None and condition not in self.conditions:
            raise SplitError(f"unknown condition {condition!r}")
        conds = [condition] if condition else list(self.conditions)
        return [(c, lo, hi) for c in conds for lo, hi in self.conditions[c][split]]

    @property
    def end(self) -> int:
        return max(hi for parts in self.conditions.values() for ivs in parts.values() for _, hi in ivs)

    def to_dict(self) -> dict:
        return {"conditions": {c: {k: [list(iv) for iv in v] for k, v in parts.items() if v}
                               for c, parts in self.conditions.items()}}

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SplitSpec":
        if "conditions" not in d:
            raise SplitError("splits file needs a 'conditions' object")
        return cls(d["conditions"])

    @classmethod
    def load(cls, path: str | os.PathLike) -> "SplitSpec":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def contiguous_splits(T: int, n_conditions: int = 1, fractions=(0.7, 0.15, 0.15)) -> SplitSpec:
    """Cut ``T`` frames into equal conditions, each split train/val/test in order."""
    if n_conditions < 1 or T < 3 * n_conditions:
        raise SplitError(f"cannot split {T} frames into {n_conditions} conditions")
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr <= 0):
        raise SplitError("fractions must be three positive numbers")
    fr = fr / fr.sum()
    bounds = np.linspace(0, T, n_conditions + 1).round().astype(int)
    conds = {}
    for i in range(n_conditions):
        lo, hi = int(bounds[i]), int(bounds[i + 1])
        n = hi - lo
        a = lo + int(round(fr[0] * n))
        b = a + int(round(fr[1] * n))
        conds[f"cond{i}"] = {"train": [(lo, a)], "val": [(a, b)], "test": [(b, hi)]}
    return SplitSpec(conds)


@dataclass
class Dataset:
    """A movie held in memory with its segmentation.

    ``movie`` is (X, Y, Z, T) float32; ``inputs`` is the same movie at the
    model's input resolution (identical unless the model super-resolves).
    """

    movie: np.ndarray
    mask: SegmentationMask
    splits: SplitSpec
    inputs: np.ndarray | None = None
    index: NeuronIndex = field(init=False)
    _traces: np.ndarray | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.movie.ndim != 4 or self.movie.shape[:3] != self.mask.dims:
            raise segtrace.DimsMismatchError(f"movie {self.movie.shape} vs mask {self.mask.dims}")
        if self.splits.end > self.movie.shape[3]:
            raise SplitError(f"splits reach frame {self.splits.end} but the movie has {self.movie.shape[3]}")
        if self.inputs is None:
            self.inputs = self.movie
        self.index = segtrace.build_index(self.mask)

    @property
    def T(self) -> int:
        return self.movie.shape[3]

    def context(self, t: int, C: int) -> np.ndarray:
        """Frames t-C+1 .. t as channels."""
        if t - C + 1 < 0:
            raise SplitError(f"context of {C} frames ending at {t} starts before frame 0")
        return np.ascontiguousarray(self.inputs[..., t - C + 1 : t + 1])

    def frame(self, t: int) -> np.ndarray:
        return self.movie[..., t]

    @property
    def traces(self) -> np.ndarray:
        """(N, T) traces of the target movie, computed once."""
        if self._traces is None:
            self._traces = segtrace.extract_traces(self.movie, self.index).values
        return self._traces

    def for_model(self, up_factor) -> "Dataset":
        """Copy whose inputs are block-averaged by the model's upsampling factor."""
        up = tuple(int(u) for u in up_factor)
        if up == (1, 1, 1):
            return self
        from volcast.preprocess import block_mean

        inputs = block_mean(self.movie, up)
        return Dataset(self.movie, self.mask, self.splits, inputs.astype(np.float32))


def load_dataset(root: str | os.PathLike, variant: str = "full", mask_dir: str = "mask",
                 splits_file: str = "splits.json") -> Dataset:
    """Load ``<root>/movie_<variant>`` (or ``<root>`` itself if it is a volume)."""
    root = Path(root)
    if not root.exists():
        raise FileNotFoundError(f"dataset {root} does not exist")
    vol_dir = root / f"movie_{variant}"
    if not vol_dir.exists():
        if (root / volstore.META_FILE).exists():
            vol_dir = root
        else:
            raise FileNotFoundError(f"no movie_{variant} volume under {root}")
    movie = volstore.open_volume(vol_dir).read_all().astype(np.float32)
    mask = SegmentationMask.load(root / mask_dir)
    splits = SplitSpec.load(root / splits_file)
    return Dataset(movie, mask, splits)
