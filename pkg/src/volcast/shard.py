"""Spatial xy sharding of input loading and model execution.

The volume is cut into a grid of equal xy core boxes.  Each shard loads its
core plus a halo (clamped to the volume), runs the model on that padded
box and keeps the output voxels of its core.  When the halo covers the
model's reach and every layer is local (convolutions, pointwise ops and
group norm in frozen mode) the stitched frame equals the unsharded one.
With real group statistics the result is only approximate, because each
shard normalizes with statistics of its own padded box.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from volcast.unet.model import ModelConfig, ModelState, forward, receptive_field
from volcast.volstore import Box4, VolumeHandle


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class Box3:
    lo: tuple[int, int, int]
    hi: tuple[int, int, int]

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(b - a for a, b in zip(self.lo, self.hi))

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def slices(self, origin=(0, 0, 0)) -> tuple[slice, ...]:
        return tuple(slice(a - o, b - o) for a, b, o in zip(self.lo, self.hi, origin))

    def to_dict(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi)}


def model_reach(cfg: ModelConfig) -> tuple[int, int, int]:
    """Upper bound on how far (input voxels, per axis) an input change can
    move an output voxel.  A 3^3 conv at cumulative factor f reaches f voxels,
    block pooling and repeat upsampling by s at the finer factor f reach
    (s - 1) * f more."""
    reach = []
    for ax in range(3):
        f = 1.0
        r = 1.0  # embedding conv
        for s in cfg.stages:
            r += 2 * f  # block before pooling
            r += (s[ax] - 1) * f
            f *= s[ax]
        r += 2 * cfg.blocks_low * f
        for s in reversed(cfg.stages):
            f /= s[ax]
            r += (s[ax] - 1) * f  # repeat upsample
            r += f  # upsample conv
            r += 2 * (cfg.blocks_other - 1) * f
        if cfg.superres_stages:
            r += 1
            for s in cfg.superres_stages:
                f /= s[ax]
                r += 3 * f  # upsample conv + one block
        r += f  # output conv
        reach.append(int(math.ceil(r - 1e-9)))
    return tuple(reach)


def default_halo(cfg: ModelConfig) -> tuple[int, int, int]:
    """(RF - 1) / 2 per axis, raised to the exact reach where the nominal
    receptive field is only an approximation, then rounded up to a multiple
    of the downsampling factor so pooling grids stay aligned."""
    rf = receptive_field(cfg).as_tuple()
    reach = model_reach(cfg)
    out = []
    for r, n, f in zip(rf, reach, cfg.down_factor):
        h = max(int(math.ceil((r - 1) / 2)), n)
        out.append(int(math.ceil(h / f) * f))
    return tuple(out)


@dataclass
class ShardPlan:
    dims: tuple[int, int, int]
    grid: tuple[int, int]
    halo: tuple[int, int, int]
    cores: list[Box3] = field(default_factory=list)
    padded: list[Box3] = field(default_factory=list)

    @property
    def n_shards(self) -> int:
        return len(self.cores)

    @property
    def voxels_loaded(self) -> int:
        return sum(b.size for b in self.padded)

    @property
    def overhead(self) -> float:
        """Voxels loaded by all shards over voxels of one unsharded load."""
        return self.voxels_loaded / int(np.prod(self.dims))

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "grid": list(self.grid),
            "halo": list(self.halo),
            "shards": [{"core": c.to_dict(), "padded": p.to_dict()} for c, p in zip(self.cores, self.padded)],
            "voxels_loaded": self.voxels_loaded,
            "load_overhead": self.overhead,
        }


def make_plan(dims: Sequence[int], grid: Sequence[int], model_cfg: ModelConfig | None = None,
              halo: Sequence[int] | None = None) -> ShardPlan:
    """Tile the xy extent of ``dims`` into ``grid`` core boxes with halos.

    ``halo`` defaults to :func:`default_halo` of ``model_cfg``; the z axis is
    never split, so its halo only matters for reporting.
    """
    X, Y, Z = (int(d) for d in dims[:3])
    gx, gy = (int(g) for g in grid)
    if gx < 1 or gy < 1:
        raise PlanError(f"grid must be positive, got {(gx, gy)}")
    if X % gx or Y % gy:
        raise PlanError(f"grid {(gx, gy)} does not divide xy extent {(X, Y)}")
    if halo is None:
        if model_cfg is None:
            raise PlanError("need a model config or an explicit halo")
        halo = default_halo(model_cfg)
    halo = tuple(int(h) for h in halo)
    if len(halo) != 3 or any(h < 0 for h in halo):
        raise PlanError(f"halo must be 3 non-negative integers, got {halo}")
    if halo[0] > X or halo[1] > Y:
        raise PlanError(f"halo {halo[:2]} exceeds the xy extent {(X, Y)}")
    cx, cy = X // gx, Y // gy
    if model_cfg is not None:
        fx, fy, fz = model_cfg.down_factor
        if cx % fx or cy % fy or Z % fz:
            raise PlanError(f"core {(cx, cy, Z)} not divisible by the model's downsampling {model_cfg.down_factor}")
    plan = ShardPlan((X, Y, Z), (gx, gy), halo)
    for i in range(gx):
        for j in range(gy):
            core = Box3((i * cx, j * cy, 0), ((i + 1) * cx, (j + 1) * cy, Z))
            lo = (max(core.lo[0] - halo[0], 0), max(core.lo[1] - halo[1], 0), 0)
            hi = (min(core.hi[0] + halo[0], X), min(core.hi[1] + halo[1], Y), Z)
            plan.cores.append(core)
            plan.padded.append(Box3(lo, hi))
    return plan


def _workers(requested: int | None) -> int:
    cap = os.environ.get("VOLCAST_THREADS")
    n = requested or (int(cap) if cap else 1)
    if cap:
        n = min(n, int(cap))
    return max(1, n)


@dataclass
class ShardResult:
    output: np.ndarray
    plan: ShardPlan
    loaded: list[Box4]
    voxels_read: int

    @property
    def manifest(self) -> list[dict]:
        return [{"core": c.to_dict(), "padded": p.to_dict(), "loaded_voxels": b.size}
                for c, p, b in zip(self.plan.cores, self.plan.padded, self.loaded)]


def sharded_forward(state: ModelState, plan: ShardPlan, context, h: int, t: int | None = None,
                    workers: int | None = None) -> ShardResult:
    """Run the model shard by shard and stitch the core outputs.

    ``context`` is either an (X, Y, Z, C) array or a volume handle; for a
    handle, frames ``t-C+1 .. t`` are loaded per shard, restricted to the
    shard's padded box.
    """
    cfg = state.config
    C = cfg.context
    if isinstance(context, VolumeHandle):
        if t is None:
            raise PlanError("reading from a volume needs the context end frame t")
        if tuple(context.dims[:3]) != plan.dims:
            raise PlanError(f"volume dims {context.dims[:3]} != plan dims {plan.dims}")
        if t - C + 1 < 0 or t >= context.dims[3]:
            raise PlanError(f"context ending at {t} falls outside the recording")
    else:
        context = np.asarray(context)
        if context.shape[:3] != plan.dims:
            raise PlanError(f"context dims {context.shape[:3]} != plan dims {plan.dims}")
    need = default_halo(cfg)
    if any(a < b for a, b in zip(plan.halo[:2], need[:2])):
        raise PlanError(f"halo {plan.halo} is smaller than the model needs {need}")
    up = cfg.up_factor

    def load(k):
        p = plan.padded[k]
        box = Box4((*p.lo, t - C + 1 if t is not None else 0), (*p.hi, (t + 1) if t is not None else C))
        if isinstance(context, VolumeHandle):
            return box, context.read(box)
        return box, context[p.slices()]

    def run(k, block):
        core, p = plan.cores[k], plan.padded[k]
        out = forward(state, np.asarray(block, dtype=np.float32), h)
        sl = tuple(slice((a - o) * u, (b - o) * u) for a, b, o, u in zip(core.lo, core.hi, p.lo, up))
        return out[sl]

    n = _workers(workers)
    before = context.io.voxels_read if isinstance(context, VolumeHandle) else 0
    with ThreadPoolExecutor(max_workers=n) as pool:
        loaded = list(pool.map(load, range(plan.n_shards)))  # barrier 1: all loads done
        outs = list(pool.map(lambda k: run(k, loaded[k][1]), range(plan.n_shards)))
    read = (context.io.voxels_read - before) if isinstance(context, VolumeHandle) else \
        sum(int(np.prod(b.shape)) for b, _ in loaded)

    # barrier 2: stitch
    X, Y, Z = plan.dims
    full_shape = (X * up[0], Y * up[1], Z * up[2])
    first = outs[0]
    result = np.empty(full_shape + first.shape[3:], dtype=first.dtype)
    for core, o in zip(plan.cores, outs):
        sl = tuple(slice(a * u, b * u) for a, b, u in zip(core.lo, core.hi, up))
        result[sl] = o
    return ShardResult(result, plan, [b for b, _ in loaded], int(read))
