"""Sampling, optimization and the pre-train / fine-tune flow.

One optimization step draws a context end point ``t`` uniformly from the
training frames and a lead time ``h`` uniformly from 1..H, predicts frame
``t + h`` from frames ``t-C+1 .. t`` and takes an AdamW step on the loss.
The expected per-step loss is therefore the mean over all (t, h) pairs,
which :func:`expected_step_loss` computes by enumeration.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from volcast import metrics, objectives
from volcast.data import Dataset, SplitError, SplitSpec
from volcast.objectives import BinSpec
from volcast.unet.model import (
    ConfigError,
    Forward,
    ModelConfig,
    ModelState,
    build_model,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger(__name__)

LOSS_KINDS = ("trace_mae", "voxel_mae", "direct_mae", "hl_gauss")


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    context: int
    horizon: int
    steps: int = 250_000
    lr_init: float = 1e-4
    lr_final: float = 1e-7
    weight_decay: float = 1e-5
    batch_size: int = 1
    seed: int = 0
    loss_kind: str = "trace_mae"
    val_every: int = 1000
    # number of evenly spaced validation start points (each with all lead times)
    val_starts: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # dropout is only switched on for long-context models
    dropout_rate: float = 0.1
    dropout_min_context: int = 64

    def __post_init__(self):
        if self.context < 1 or self.horizon < 1:
            raise ConfigError("context and horizon must be >= 1")
        if self.steps < 0 or self.val_every < 1 or self.val_starts < 1:
            raise ConfigError("steps must be >= 0, val_every and val_starts >= 1")
        if not 0 < self.lr_final <= self.lr_init:
            raise ConfigError("need 0 < lr_final <= lr_init")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.batch_size != 1:
            raise ConfigError("only batch_size 1 is supported")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def effective_dropout(self) -> float:
        return self.dropout_rate if self.context >= self.dropout_min_context else 0.0


def check_compatible(model_cfg: ModelConfig, train_cfg: TrainConfig) -> None:
    if (model_cfg.context, model_cfg.horizon) != (train_cfg.context, train_cfg.horizon):
        raise ConfigError(
            f"model (C={model_cfg.context}, H={model_cfg.horizon}) and training "
            f"(C={train_cfg.context}, H={train_cfg.horizon}) disagree"
        )
    head_for = {"direct_mae": "direct", "hl_gauss": "hl_gauss"}
    want = head_for.get(train_cfg.loss_kind, "frame")
    if model_cfg.head != want:
        raise ConfigError(f"loss {train_cfg.loss_kind} needs head {want!r}, model has {model_cfg.head!r}")


# sampling ------------------------------------------------------------------


def valid_starts(splits: SplitSpec, split: str, C: int, H: int, condition: str | None = None) -> np.ndarray:
    """Every context end point t whose context and targets t+1..t+H stay
    inside one interval of ``split``."""
    out = []
    for _, lo, hi in splits.intervals(split, condition):
        a, b = lo + C - 1, hi - H - 1
        if b >= a:
            out.append(np.arange(a, b + 1))
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


def sample_example(splits: SplitSpec, C: int, H: int, rng: np.random.Generator) -> tuple[int, int]:
    starts = valid_starts(splits, "train", C, H)
    if starts.size == 0:
        raise SplitError(f"no train interval holds {C} context + {H} target frames")
    t = int(starts[rng.integers(starts.size)])
    h = int(rng.integers(1, H + 1))
    return t, h


# optimization --------------------------------------------------------------


def cosine_lr(step: int, cfg: TrainConfig) -> float:
    if cfg.steps == 0:
        return cfg.lr_init
    s = min(max(step, 0), cfg.steps)
    return cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (1.0 + math.cos(math.pi * s / cfg.steps))


@dataclass
class OptimState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, state: ModelState) -> "OptimState":
        return cls({k: np.zeros_like(p) for k, p in state.params.items()},
                   {k: np.zeros_like(p) for k, p in state.params.items()})


def adamw_step(state: ModelState, opt: OptimState, grads: dict, lr: float, weight_decay: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place AdamW update with decoupled weight decay and bias correction."""
    if set(grads) != set(state.params):
        missing = set(state.params) ^ set(grads)
        raise ConfigError(f"gradient/parameter names differ: {sorted(missing)[:5]}")
    opt.step += 1
    c1 = 1.0 - beta1**opt.step
    c2 = 1.0 - beta2**opt.step
    for name, w in state.params.items():
        g = grads[name]
        if g.shape != w.shape or opt.m[name].shape != w.shape:
            raise ConfigError(f"shape mismatch for {name}: param {w.shape}, grad {g.shape}")
        m, v = opt.m[name], opt.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        if weight_decay:
            w -= (lr * weight_decay) * w
        w -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# losses --------------------------------------------------------------------


def predict_frame(state: ModelState, context: np.ndarray, h: int) -> np.ndarray:
    """Frame prediction in activity units (HL-Gauss logits are decoded)."""
    out = Forward(state, context, h).output
    if state.config.head == "hl_gauss":
        return objectives.hl_gauss_decode(out, BinSpec(state.config.n_bins)).astype(np.float32)
    return out


def step_loss(state: ModelState, data: Dataset, t: int, h: int, loss_kind: str,
              train: bool = False, rng: np.random.Generator | None = None, need_grad: bool = True):
    """Loss of one (t, h) example; returns (loss, grads or None)."""
    cfg = state.config
    fw = Forward(state, data.context(t, cfg.context), h, train=train, rng=rng)
    pred = fw.output
    if loss_kind == "trace_mae":
        loss, g = objectives.trace_mae(pred, data.frame(t + h), data.index)
    elif loss_kind == "voxel_mae":
        loss, g = objectives.voxel_mae(pred, data.frame(t + h))
    elif loss_kind == "direct_mae":
        target = data.movie[..., t + 1 : t + 1 + cfg.horizon]
        loss, g = objectives.direct_mae(pred, target, data.index)
    elif loss_kind == "hl_gauss":
        loss, g = objectives.hl_gauss_trace_loss(pred, data.frame(t + h), data.index, BinSpec(cfg.n_bins))
    else:
        raise ConfigError(f"unknown loss kind {loss_kind!r}")
    if not need_grad:
        return loss, None
    grads, _ = fw.backward(g)
    return loss, grads


def expected_step_loss(state: ModelState, data: Dataset, loss_kind: str = "trace_mae",
                       split: str = "train") -> float:
    """Mean loss over every (t, h) pair the sampler can draw."""
    cfg = state.config
    starts = valid_starts(data.splits, split, cfg.context, cfg.horizon)
    if starts.size == 0:
        raise SplitError(f"no valid starts in split {split!r}")
    hs = [1] if loss_kind == "direct_mae" else range(1, cfg.horizon + 1)
    losses = [step_loss(state, data, int(t), h, loss_kind, need_grad=False)[0] for t in starts for h in hs]
    return float(np.mean(losses))


# prediction and evaluation -------------------------------------------------


def predict_traces(state: ModelState, data: Dataset, starts) -> np.ndarray:
    """(starts, H, N) trace predictions for every lead time."""
    cfg = state.config
    H, N = cfg.horizon, data.index.n_neurons
    out = np.empty((len(starts), H, N))
    for i, t in enumerate(starts):
        ctx = data.context(int(t), cfg.context)
        if cfg.head == "direct":
            frames = Forward(state, ctx, 1).output
            for h in range(H):
                out[i, h] = data.index.means(frames[..., h].reshape(-1))
        else:
            for h in range(1, H + 1):
                out[i, h - 1] = data.index.means(predict_frame(state, ctx, h).reshape(-1))
    return out


def target_traces(data: Dataset, starts, H: int) -> np.ndarray:
    tr = data.traces
    return np.stack([tr[:, int(t) + 1 : int(t) + 1 + H].T for t in starts])


def copy_last_traces(data: Dataset, starts, H: int) -> np.ndarray:
    tr = data.traces
    return np.stack([np.repeat(tr[:, int(t)][None], H, axis=0) for t in starts])


def evaluation_starts(splits: SplitSpec, split: str, C: int, H: int, condition: str | None = None,
                      max_starts: int | None = None) -> np.ndarray:
    starts = valid_starts(splits, split, C, H, condition)
    if starts.size == 0:
        raise SplitError(f"split {split!r} has no valid start points")
    return starts[:max_starts] if max_starts else starts


def evaluate(state: ModelState, data: Dataset, split: str = "test", max_starts: int | None = None,
             baseline: bool = False) -> list[metrics.ConditionResult]:
    """Per-condition metrics over consecutive start points of ``split``."""
    cfg = state.config
    results = []
    for cond in data.splits.conditions:
        if not data.splits.conditions[cond][split]:
            continue
        starts = evaluation_starts(data.splits, split, cfg.context, cfg.horizon, cond, max_starts)
        target = target_traces(data, starts, cfg.horizon)
        if baseline:
            pred = copy_last_traces(data, starts, cfg.horizon)
        else:
            pred = predict_traces(state, data, starts)
        results.append(metrics.evaluate_condition(cond, pred, target, data.index.valid))
    if not results:
        raise SplitError(f"no condition has a {split!r} split")
    return results


def _val_grid(splits: SplitSpec, cfg: ModelConfig, n: int) -> list[tuple[int, int]]:
    starts = valid_starts(splits, "val", cfg.context, cfg.horizon)
    if starts.size == 0:
        return []
    pick = starts[np.unique(np.linspace(0, starts.size - 1, min(n, starts.size)).round().astype(int))]
    return [(int(t), h) for t in pick for h in range(1, cfg.horizon + 1)]


def val_mae(state: ModelState, data: Dataset, grid: list[tuple[int, int]]) -> float:
    """Trace MAE averaged over a fixed (t, h) grid."""
    tr = data.traces
    valid = data.index.valid
    cfg = state.config
    errs = []
    for t in sorted({t for t, _ in grid}):
        hs = [h for tt, h in grid if tt == t]
        ctx = data.context(t, cfg.context)
        frames = Forward(state, ctx, 1).output if cfg.head == "direct" else None
        for h in hs:
            frame = frames[..., h - 1] if frames is not None else predict_frame(state, ctx, h)
            pred = data.index.means(frame.reshape(-1))
            errs.append(np.abs(pred - tr[:, t + h])[valid].mean())
    return float(np.mean(errs))


# training loop -------------------------------------------------------------


@dataclass
class TrainResult:
    best: ModelState
    final: ModelState
    best_val: float
    best_step: int
    log: list[dict] = field(default_factory=list)
    out_dir: Path | None = None


LOG_FIELDS = ("step", "lr", "train_loss", "val_mae")


def _opt_tensors(opt: OptimState) -> dict:
    out = {f"opt.m.{k}": v for k, v in opt.m.items()}
    out.update({f"opt.v.{k}": v for k, v in opt.v.items()})
    return out


def _opt_from_tensors(state: ModelState, extra: dict, step: int) -> OptimState:
    opt = OptimState.zeros_like(state)
    for k in state.params:
        if f"opt.m.{k}" in extra:
            opt.m[k] = extra[f"opt.m.{k}"].copy()
            opt.v[k] = extra[f"opt.v.{k}"].copy()
    opt.step = step
    return opt


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, data: Dataset, splits: SplitSpec | None = None,
          out_dir: str | os.PathLike | None = None, init: ModelState | None = None,
          opt: OptimState | None = None, run_meta: dict | None = None) -> TrainResult:
    """Run the optimization loop and keep the best-validation weights.

    ``out_dir`` (optional) receives ``config.json``, ``log.csv``,
    ``best.ckpt`` and ``final.ckpt`` (the latter with optimizer moments so a
    run can be resumed).
    """
    check_compatible(model_cfg, train_cfg)
    if splits is not None:
        data = Dataset(data.movie, data.mask, splits, data.inputs)
    model_cfg = replace(model_cfg, dropout_rate=train_cfg.effective_dropout)
    if init is None:
        state = build_model(model_cfg, train_cfg.seed)
    else:
        if init.config.to_dict() | {"dropout_rate": 0} != model_cfg.to_dict() | {"dropout_rate": 0}:
            raise ConfigError("initial state was built for a different model config")
        state = ModelState(model_cfg, {k: v.copy() for k, v in init.params.items()}, init.step)
    opt = opt or OptimState.zeros_like(state)
    rng = np.random.default_rng([train_cfg.seed, 7])
    grid = _val_grid(data.splits, model_cfg, train_cfg.val_starts)
    if valid_starts(data.splits, "train", model_cfg.context, model_cfg.horizon).size == 0:
        raise SplitError(f"no train interval holds {model_cfg.context} context + {model_cfg.horizon} targets")

    out = Path(out_dir) if out_dir is not None else None
    writer = logf = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "config.json", "w") as f:
            json.dump({"model": model_cfg.to_dict(), "train": train_cfg.to_dict(), "run": run_meta or {}},
                      f, indent=2, sort_keys=True)
        logf = open(out / "log.csv", "w", newline="")
        writer = csv.DictWriter(logf, fieldnames=LOG_FIELDS)
        writer.writeheader()

    rows: list[dict] = []
    start_step = state.step
    end_step = start_step + train_cfg.steps
    best, best_val, best_step = state.copy(), math.inf, state.step
    if grid and train_cfg.steps == 0:
        best_val = val_mae(state, data, grid)
    try:
        for s in range(train_cfg.steps):
            lr = cosine_lr(s, train_cfg)
            t, h = sample_example(data.splits, model_cfg.context, model_cfg.horizon, rng)
            loss, grads = step_loss(state, data, t, h, train_cfg.loss_kind, train=True, rng=rng)
            if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
                raise DivergenceError(
                    f"non-finite loss or gradient at step {state.step} (t={t}, h={h}, lr={lr:.3g}, loss={loss})"
                )
            adamw_step(state, opt, grads, lr, train_cfg.weight_decay,
                       train_cfg.beta1, train_cfg.beta2, train_cfg.eps)
            state.step += 1
            row = {"step": state.step, "lr": f"{lr:.10g}", "train_loss": f"{loss:.10g}", "val_mae": ""}
            if grid and ((s + 1) % train_cfg.val_every == 0 or state.step == end_step):
                v = val_mae(state, data, grid)
                row["val_mae"] = f"{v:.10g}"
                if v < best_val:
                    best, best_val, best_step = state.copy(), v, state.step
            rows.append(row)
            if writer is not None:
                writer.writerow(row)
    finally:
        if logf is not None:
            logf.close()
    if not grid and train_cfg.steps:
        best, best_step = state.copy(), state.step
    if out is not None:
        meta = {"best_step": best_step, "best_val_mae": None if math.isinf(best_val) else best_val}
        save_checkpoint(out / "best.ckpt", best, meta=meta)
        save_checkpoint(out / "final.ckpt", state, extra_tensors=_opt_tensors(opt),
                        meta={"opt_step": opt.step, **meta})
    return TrainResult(best, state, best_val, best_step, rows, out)


def resume(checkpoint: str | os.PathLike, train_cfg: TrainConfig, data: Dataset,
           out_dir: str | os.PathLike | None = None) -> TrainResult:
    """Continue from a ``final.ckpt``: step count and optimizer moments restored."""
    state, extra, meta = load_checkpoint(checkpoint)
    opt = _opt_from_tensors(state, extra, int(meta.get("opt_step", state.step)))
    return train(state.config, train_cfg, data, out_dir=out_dir, init=state, opt=opt,
                 run_meta={"resumed_from": str(checkpoint)})


def finetune(pretrained: ModelState | str | os.PathLike, train_cfg: TrainConfig, data: Dataset,
             model_cfg: ModelConfig | None = None, out_dir: str | os.PathLike | None = None) -> TrainResult:
    """Continue training pretrained weights with a fresh optimizer.

    The learning-rate schedule and loss kind come from ``train_cfg``; both are
    written to the run's config snapshot and log.
    """
    source = None
    if not isinstance(pretrained, ModelState):
        source = str(pretrained)
        pretrained, _, _ = load_checkpoint(pretrained)
    cfg = pretrained.config
    if model_cfg is not None and replace(model_cfg, dropout_rate=0) != replace(cfg, dropout_rate=0):
        raise ConfigError("fine-tuning config differs from the pretrained model")
    if train_cfg.loss_kind in ("trace_mae", "voxel_mae") and cfg.head != "frame":
        raise ConfigError(f"loss {train_cfg.loss_kind} needs a frame head")
    meta = {"finetune_from": source, "lr_init": train_cfg.lr_init, "lr_final": train_cfg.lr_final,
            "loss_kind": train_cfg.loss_kind}
    log.info("fine-tuning with lr %g -> %g on %s", train_cfg.lr_init, train_cfg.lr_final, train_cfg.loss_kind)
    return train(cfg, train_cfg, data, out_dir=out_dir, init=pretrained, run_meta=meta)
