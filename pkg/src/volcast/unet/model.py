"""Lead-time conditioned volumetric UNet with a fixed feature width.

Layout (channels-last, one sample):

    embed conv C -> F
    per stage l:   block, keep skip, block-mean downsample by stages[l]
    lowest level:  blocks_low blocks
    per stage l (reversed): repeat-upsample + conv, add skip, blocks_other-1 blocks
    super-resolution: conv F -> F', then per factor: repeat-upsample + conv, one block
    output conv -> 1 (lead-time head), H (direct head) or n_bins (HL-Gauss head)

Blocks are pre-activation residual blocks conditioned on the lead time
through FiLM (the direct head has no conditioning).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from volcast.unet import layers as L

HEADS = ("frame", "direct", "hl_gauss")


class ConfigError(ValueError):
    pass


def _triples(values, name) -> tuple[tuple[int, int, int], ...]:
    out = []
    for v in values:
        t = tuple(int(a) for a in v)
        if len(t) != 3 or any(a < 1 for a in t):
            raise ConfigError(f"{name}: every factor must be 3 integers >= 1, got {v!r}")
        out.append(t)
    return tuple(out)


@dataclass(frozen=True)
class ModelConfig:
    context: int
    horizon: int
    features: int = 128
    superres_features: int = 32
    groups: int = 16
    stages: tuple = ()
    blocks_low: int = 4
    blocks_other: int = 3
    superres_stages: tuple = ()
    dropout_rate: float = 0.0
    embed_dim: int = 32
    # averaging applied to the data before it reaches the model; only used to
    # express the receptive field at native resolution
    input_downsample: tuple = (1, 1, 1)
    head: str = "frame"
    n_bins: int = 32
    # "frozen" replaces group statistics by (0, 1), making every layer local
    norm: str = "group"

    def __post_init__(self):
        object.__setattr__(self, "stages", _triples(self.stages, "stages"))
        object.__setattr__(self, "superres_stages", _triples(self.superres_stages, "superres_stages"))
        ds = tuple(int(a) for a in self.input_downsample)
        if len(ds) != 3 or any(a < 1 for a in ds):
            raise ConfigError(f"input_downsample must be 3 integers >= 1, got {ds}")
        object.__setattr__(self, "input_downsample", ds)
        for name in ("context", "horizon", "features", "superres_features", "groups", "embed_dim"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.features % self.groups:
            raise ConfigError(f"features={self.features} not divisible by groups={self.groups}")
        if self.superres_stages and self.superres_features % self.groups:
            raise ConfigError(
                f"superres_features={self.superres_features} not divisible by groups={self.groups}"
            )
        if self.blocks_low < 0 or self.blocks_other < 1:
            raise ConfigError("blocks_low must be >= 0 and blocks_other >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")
        if self.embed_dim % 2:
            raise ConfigError("embed_dim must be even")
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}")
        if self.head == "hl_gauss" and self.n_bins < 2:
            raise ConfigError("n_bins must be >= 2")
        if self.norm not in ("group", "frozen"):
            raise ConfigError("norm must be 'group' or 'frozen'")

    @property
    def out_channels(self) -> int:
        return {"frame": 1, "direct": self.horizon, "hl_gauss": self.n_bins}[self.head]

    @property
    def conditioned(self) -> bool:
        return self.head != "direct"

    @property
    def down_factor(self) -> tuple[int, int, int]:
        return tuple(int(np.prod([s[i] for s in self.stages])) if self.stages else 1 for i in range(3))

    @property
    def up_factor(self) -> tuple[int, int, int]:
        return tuple(
            int(np.prod([s[i] for s in self.superres_stages])) if self.superres_stages else 1
            for i in range(3)
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [list(s) for s in self.stages]
        d["superres_stages"] = [list(s) for s in self.superres_stages]
        d["input_downsample"] = list(self.input_downsample)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def main_config(context: int = 4, horizon: int = 32, **overrides) -> ModelConfig:
    """The full-size short-context network: four downsampling stages and two
    2x super-resolution steps on 4x xy-averaged input."""
    base = dict(
        context=context,
        horizon=horizon,
        stages=[(2, 2, 1), (2, 2, 2), (2, 2, 2), (2, 2, 2)],
        superres_stages=[(2, 2, 1), (2, 2, 1)],
        input_downsample=(4, 4, 1),
    )
    base.update(overrides)
    return ModelConfig(**base)


# parameters ----------------------------------------------------------------


def _block_shapes(prefix: str, F: int, E: int, film: bool) -> dict:
    s = {
        f"{prefix}.gn1.scale": (F,),
        f"{prefix}.gn1.offset": (F,),
        f"{prefix}.conv1.k": (3, 3, 3, F, F),
        f"{prefix}.conv1.b": (F,),
        f"{prefix}.gn2.scale": (F,),
        f"{prefix}.gn2.offset": (F,),
        f"{prefix}.conv2.k": (3, 3, 3, F, F),
        f"{prefix}.conv2.b": (F,),
    }
    if film:
        s[f"{prefix}.film.w"] = (E, 2 * F)
        s[f"{prefix}.film.b"] = (2 * F,)
    return s


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Name -> shape for every learnable tensor; independent of input size."""
    F, Fs, E = cfg.features, cfg.superres_features, cfg.embed_dim
    film = cfg.conditioned
    s: dict[str, tuple] = {"embed.k": (3, 3, 3, cfg.context, F), "embed.b": (F,)}
    for l in range(len(cfg.stages)):
        s.update(_block_shapes(f"down{l}", F, E, film))
    for i in range(cfg.blocks_low):
        s.update(_block_shapes(f"low{i}", F, E, film))
    for l in reversed(range(len(cfg.stages))):
        s[f"up{l}.k"] = (3, 3, 3, F, F)
        s[f"up{l}.b"] = (F,)
        for i in range(cfg.blocks_other - 1):
            s.update(_block_shapes(f"up{l}.blk{i}", F, E, film))
    last = F
    if cfg.superres_stages:
        s["sr_in.k"] = (3, 3, 3, F, Fs)
        s["sr_in.b"] = (Fs,)
        for j in range(len(cfg.superres_stages)):
            s[f"sr{j}.k"] = (3, 3, 3, Fs, Fs)
            s[f"sr{j}.b"] = (Fs,)
            s.update(_block_shapes(f"sr{j}.blk", Fs, E, film))
        last = Fs
    s["out.k"] = (3, 3, 3, last, cfg.out_channels)
    s["out.b"] = (cfg.out_channels,)
    return s


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, np.ndarray]
    step: int = 0

    def astype(self, dtype) -> "ModelState":
        return ModelState(self.config, {k: v.astype(dtype) for k, v in self.params.items()}, self.step)

    def copy(self) -> "ModelState":
        return ModelState(self.config, {k: v.copy() for k, v in self.params.items()}, self.step)

    @property
    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def with_config(self, **changes) -> "ModelState":
        cfg = replace(self.config, **changes)
        if param_shapes(cfg) != {k: v.shape for k, v in self.params.items()}:
            raise ConfigError("config change alters parameter shapes")
        return ModelState(cfg, self.params, self.step)


def build_model(cfg: ModelConfig, seed: int = 0) -> ModelState:
    """Deterministic initialization: truncated-normal fan-in scaling for
    kernels, zero biases, unit/zero norm affines, zero FiLM projections."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "k":
            fan_in = 27 * shape[3]
            arr = L.truncated_normal(rng, shape, 1.0 / math.sqrt(fan_in))
        elif leaf == "scale":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = arr.astype(np.float32)
    return ModelState(cfg, params)


# forward / backward --------------------------------------------------------


def _sub(params: dict, prefix: str) -> dict:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def _check_inputs(cfg: ModelConfig, context: np.ndarray, h: int) -> None:
    if context.ndim != 4 or context.shape[-1] != cfg.context:
        raise ConfigError(f"context must be (X, Y, Z, {cfg.context}), got {context.shape}")
    if cfg.conditioned and not 1 <= h <= cfg.horizon:
        raise ConfigError(f"lead time {h} outside 1..{cfg.horizon}")
    for ext, f in zip(context.shape[:3], cfg.down_factor):
        if ext % f:
            raise ConfigError(f"spatial extent {context.shape[:3]} not divisible by {cfg.down_factor}")


class Forward:
    """One forward pass with everything needed for the backward pass."""

    def __init__(self, state: ModelState, context: np.ndarray, h: int,
                 train: bool = False, rng: np.random.Generator | None = None):
        cfg = state.config
        _check_inputs(cfg, context, h)
        p = state.params
        dtype = p["embed.k"].dtype
        x = np.asarray(context, dtype=dtype)
        self.state = state
        self.caches: list = []
        frozen = cfg.norm == "frozen"
        rate = cfg.dropout_rate if train else 0.0
        if cfg.conditioned:
            emb = L.sinusoidal_embed(h, cfg.embed_dim, dtype=dtype)
        else:
            emb = None
        self.emb = emb

        def block(prefix, hcur, groups):
            sp = _sub(p, prefix)
            if emb is None:
                out, c = _unconditioned_block(hcur, sp, groups, rate, train, rng, frozen)
            else:
                out, c = L.resblock(hcur, sp, emb, groups, rate, train, rng, frozen)
            self.caches.append(("block", prefix, c))
            return out

        def conv(prefix, hcur):
            out, c = L.conv3d(hcur, p[prefix + ".k"], p[prefix + ".b"])
            self.caches.append(("conv", prefix, c))
            return out

        hcur = conv("embed", x)
        skips = []
        for l, f in enumerate(cfg.stages):
            hcur = block(f"down{l}", hcur, cfg.groups)
            skips.append(hcur)
            self.caches.append(("skip_save", l, None))
            hcur, c = L.resample_down(hcur, f)
            self.caches.append(("down", l, c))
        for i in range(cfg.blocks_low):
            hcur = block(f"low{i}", hcur, cfg.groups)
        for l in reversed(range(len(cfg.stages))):
            hcur, c = L.resample_up(hcur, cfg.stages[l], p[f"up{l}.k"], p[f"up{l}.b"])
            self.caches.append(("up", f"up{l}", c))
            hcur = hcur + skips[l]
            self.caches.append(("skip_add", l, None))
            for i in range(cfg.blocks_other - 1):
                hcur = block(f"up{l}.blk{i}", hcur, cfg.groups)
        if cfg.superres_stages:
            hcur = conv("sr_in", hcur)
            for j, f in enumerate(cfg.superres_stages):
                hcur, c = L.resample_up(hcur, f, p[f"sr{j}.k"], p[f"sr{j}.b"])
                self.caches.append(("up", f"sr{j}", c))
                hcur = block(f"sr{j}.blk", hcur, cfg.groups)
        out = conv("out", hcur)
        self.raw = out
        self.output = out[..., 0] if cfg.head == "frame" else out

    def backward(self, dout: np.ndarray):
        """Gradients w.r.t. all parameters and the context input."""
        cfg = self.state.config
        g = np.asarray(dout, dtype=self.raw.dtype)
        if cfg.head == "frame":
            g = g[..., None]
        grads: dict[str, np.ndarray] = {}
        skip_grads: dict[int, np.ndarray] = {}
        for kind, name, c in reversed(self.caches):
            if kind == "conv":
                g, grads[name + ".k"], grads[name + ".b"] = L.conv3d_backward(g, c)
            elif kind == "block":
                if self.emb is None:
                    g, bg = _unconditioned_block_backward(g, c)
                else:
                    g, bg = L.resblock_backward(g, c)
                for k, v in bg.items():
                    grads[f"{name}.{k}"] = v
            elif kind == "up":
                g, grads[name + ".k"], grads[name + ".b"] = L.resample_up_backward(g, c)
            elif kind == "skip_add":
                skip_grads[name] = g
            elif kind == "down":
                g = L.resample_down_backward(g, c)
            elif kind == "skip_save":
                g = g + skip_grads.pop(name)
        return grads, g


def _unconditioned_block(x, p, groups, rate, train, rng, frozen):
    # same chain as resblock with FiLM removed (direct multi-frame head)
    h1, c1 = L.group_norm(x, p["gn1.scale"], p["gn1.offset"], groups, 1e-6, frozen)
    h2, c2 = L.swish(h1)
    h3, c3 = L.conv3d(h2, p["conv1.k"], p["conv1.b"])
    h4, c4 = L.group_norm(h3, p["gn2.scale"], p["gn2.offset"], groups, 1e-6, frozen)
    h6, c6 = L.swish(h4)
    h7, c7 = L.dropout(h6, rate, rng, train)
    h8, c8 = L.conv3d(h7, p["conv2.k"], p["conv2.b"])
    return x + h8, (c1, c2, c3, c4, c6, c7, c8)


def _unconditioned_block_backward(dout, cache):
    c1, c2, c3, c4, c6, c7, c8 = cache
    g = {}
    d7, g["conv2.k"], g["conv2.b"] = L.conv3d_backward(dout, c8)
    d6 = L.dropout_backward(d7, c7)
    d4 = L.swish_backward(d6, c6)
    d3, g["gn2.scale"], g["gn2.offset"] = L.group_norm_backward(d4, c4)
    d2, g["conv1.k"], g["conv1.b"] = L.conv3d_backward(d3, c3)
    d1 = L.swish_backward(d2, c2)
    dx, g["gn1.scale"], g["gn1.offset"] = L.group_norm_backward(d1, c1)
    return dout + dx, g


def forward(state: ModelState, context: np.ndarray, h: int,
            train: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
    """Predict one frame at lead time ``h`` from ``context`` (X, Y, Z, C)."""
    return Forward(state, context, h, train, rng).output


# receptive field and cost --------------------------------------------------


@dataclass(frozen=True)
class ReceptiveField:
    rx: int
    ry: int
    rz: int

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.rx, self.ry, self.rz)


def receptive_field(cfg: ModelConfig, native: bool = False) -> ReceptiveField:
    """Receptive field in voxels at model input resolution (or native
    resolution when ``native``, i.e. scaled by ``input_downsample``).

    Without downsampling stages every 3^3 convolution adds 2 voxels: the
    embedding conv, two per block and the output conv, plus the centre
    voxel.  With stages the cumulative downsampling factor times the number
    of lowest-resolution blocks times 4 is used.
    """
    if not cfg.stages:
        r = (1 + (cfg.blocks_low * 2 + 2) * 2,) * 3
    else:
        r = tuple(f * cfg.blocks_low * 4 for f in cfg.down_factor)
    if native:
        r = tuple(a * d for a, d in zip(r, cfg.input_downsample))
    return ReceptiveField(*r)


def conv_flops(cin: int, cout: int, voxels: int) -> int:
    return 2 * 27 * cin * cout * voxels


# per-element costs of the cheap layers
_GN, _SWISH, _FILM, _ADD = 8, 4, 2, 1


def _block_flops(F: int, V: int, E: int, film: bool) -> dict:
    d = {"conv": 2 * conv_flops(F, F, V)}
    other = 2 * _GN * V * F + 2 * _SWISH * V * F + _ADD * V * F + 2 * V * F  # 2 conv biases
    if film:
        other += _FILM * V * F + 2 * E * 2 * F
    d["other"] = other
    return d


def flops_breakdown(cfg: ModelConfig, input_extent: Sequence[int]) -> dict[str, int]:
    """Forward-pass FLOPS split into convolution and elementwise terms."""
    X, Y, Z = (int(a) for a in input_extent[:3])
    for ext, f in zip((X, Y, Z), cfg.down_factor):
        if ext % f:
            raise ConfigError(f"extent {(X, Y, Z)} not divisible by {cfg.down_factor}")
    F, Fs, E = cfg.features, cfg.superres_features, cfg.embed_dim
    tot = {"conv": 0, "other": 0}

    def add(d):
        for k, v in d.items():
            tot[k] += v

    V = X * Y * Z
    add({"conv": conv_flops(cfg.context, F, V), "other": V * F})
    vols = [V]
    for f in cfg.stages:
        add(_block_flops(F, vols[-1], E, cfg.conditioned))
        add({"other": vols[-1] * F})  # pooling
        vols.append(vols[-1] // int(np.prod(f)))
    for _ in range(cfg.blocks_low):
        add(_block_flops(F, vols[-1], E, cfg.conditioned))
    for l in reversed(range(len(cfg.stages))):
        Vl = vols[l]
        add({"conv": conv_flops(F, F, Vl), "other": 2 * Vl * F})  # bias + skip add
        for _ in range(cfg.blocks_other - 1):
            add(_block_flops(F, Vl, E, cfg.conditioned))
    last, Vc = F, V
    if cfg.superres_stages:
        add({"conv": conv_flops(F, Fs, V), "other": V * Fs})
        for f in cfg.superres_stages:
            Vc *= int(np.prod(f))
            add({"conv": conv_flops(Fs, Fs, Vc), "other": Vc * Fs})
            add(_block_flops(Fs, Vc, E, cfg.conditioned))
        last = Fs
    add({"conv": conv_flops(last, cfg.out_channels, Vc), "other": Vc * cfg.out_channels})
    return tot


def flops_estimate(cfg: ModelConfig, input_extent: Sequence[int]) -> int:
    b = flops_breakdown(cfg, input_extent)
    return b["conv"] + b["other"]


def block_flops(F: int, voxels: int, embed_dim: int = 32) -> int:
    d = _block_flops(F, voxels, embed_dim, True)
    return d["conv"] + d["other"]


def output_extent(cfg: ModelConfig, input_extent: Sequence[int]) -> tuple[int, int, int]:
    return tuple(int(a) * u for a, u in zip(input_extent[:3], cfg.up_factor))


# checkpoints ---------------------------------------------------------------

MAGIC = b"VCCKPT01"


def save_checkpoint(path, state: ModelState, extra_tensors: dict | None = None,
                    meta: dict | None = None) -> None:
    """Header: magic, u64le header length, UTF-8 JSON (config echo, step,
    manifest of name/shape/offset); then the f32le payload."""
    tensors = dict(state.params)
    if extra_tensors:
        tensors.update(extra_tensors)
    manifest, offset = [], 0
    for name in sorted(tensors):
        arr = tensors[name]
        nbytes = int(arr.size) * 4
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += nbytes
    header = {
        "config": state.config.to_dict(),
        "step": int(state.step),
        "params": sorted(state.params),
        "manifest": manifest,
        "meta": meta or {},
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(hb).to_bytes(8, "little"))
        f.write(hb)
        for name in sorted(tensors):
            f.write(np.ascontiguousarray(tensors[name], dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[ModelState, dict, dict]:
    """Returns (state, extra tensors, meta)."""
    with open(path, "rb") as f:
        if f.read(8) != MAGIC:
            raise ValueError(f"{path} is not a volcast checkpoint")
        n = int.from_bytes(f.read(8), "little")
        header = json.loads(f.read(n).decode("utf-8"))
        payload = f.read()
    cfg = ModelConfig.from_dict(header["config"])
    params, extra = {}, {}
    names = set(header["params"])
    for entry in header["manifest"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=entry["offset"])
        arr = arr.reshape(entry["shape"]).astype(np.float32)
        (params if entry["name"] in names else extra)[entry["name"]] = arr
    expected = param_shapes(cfg)
    for k, shape in expected.items():
        if k not in params or params[k].shape != tuple(shape):
            raise ValueError(f"checkpoint parameter {k} missing or mis-shaped")
    return ModelState(cfg, params, header["step"]), extra, header.get("meta", {})
