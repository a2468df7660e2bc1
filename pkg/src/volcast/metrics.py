"""Evaluation metrics on predicted traces.

Predictions and targets are arrays shaped ``(starts, H, N)``: for every start
point ``t`` (the last context frame), the traces of all ``N`` neurons at lead
times ``h = 1..H``.  An optional boolean ``valid`` of shape ``(N,)`` drops
neurons without voxels.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class MetricError(ValueError):
    pass


@dataclass
class EvalGrid:
    starts: list[int]
    horizon: int
    condition: str = "all"

    def targets(self):
        return [(t, h) for t in self.starts for h in range(1, self.horizon + 1)]


def _prep(preds, targets, valid):
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape or preds.ndim != 3:
        raise MetricError(f"expected matching (starts, H, N) arrays, got {preds.shape} / {targets.shape}")
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        preds, targets = preds[..., valid], targets[..., valid]
    if preds.shape[-1] == 0 or preds.shape[0] == 0:
        raise MetricError("no starts or no valid neurons to evaluate")
    return preds, targets


def mae_per_horizon(preds, targets, valid=None) -> np.ndarray:
    preds, targets = _prep(preds, targets, valid)
    return np.abs(preds - targets).mean(axis=(0, 2))


def pearson(a: np.ndarray, b: np.ndarray, axis: int = -1) -> np.ndarray:
    """Pearson correlation along ``axis``; constant series correlate as 0."""
    flat = (np.ptp(a, axis=axis) == 0) | (np.ptp(b, axis=axis) == 0)
    a = a - a.mean(axis=axis, keepdims=True)
    b = b - b.mean(axis=axis, keepdims=True)
    num = (a * b).sum(axis=axis)
    den = np.sqrt((a * a).sum(axis=axis) * (b * b).sum(axis=axis))
    out = np.where(flat, 0.0, num / np.where(flat, 1.0, den))
    return np.clip(out, -1.0, 1.0)


def corr_h(preds, targets, valid=None) -> float:
    """Correlate each full predicted snippet (h = 1..H from one start) with
    the recording; average over starts, then over neurons."""
    preds, targets = _prep(preds, targets, valid)
    if preds.shape[1] < 2:
        raise MetricError("corr_h needs a horizon of at least 2")
    r = pearson(preds, targets, axis=1)  # (starts, N)
    return float(r.mean(axis=0).mean())


def corr_w(preds, targets, h: int, valid=None, window: int | None = None) -> float:
    """Correlate series assembled from predictions at a fixed lead time.

    Starts must be consecutive frames.  For lead ``h`` the per-neuron series
    over starts is cut into non-overlapping windows of ``window`` steps
    (default: the horizon H); each window is correlated with the recording,
    then averaged over windows and neurons.
    """
    preds, targets = _prep(preds, targets, valid)
    S, H, _ = preds.shape
    if not 1 <= h <= H:
        raise MetricError(f"lead time {h} outside 1..{H}")
    W = window or H
    if W < 2:
        raise MetricError("window must be at least 2")
    n_win = S // W
    if n_win == 0:
        raise MetricError(f"{S} starts cannot fill a window of {W}")
    p = preds[: n_win * W, h - 1].reshape(n_win, W, -1)
    t = targets[: n_win * W, h - 1].reshape(n_win, W, -1)
    r = pearson(p, t, axis=1)  # (windows, N)
    return float(r.mean(axis=0).mean())


def corr_w_curve(preds, targets, valid=None, window=None) -> np.ndarray:
    H = np.asarray(preds).shape[1]
    return np.array([corr_w(preds, targets, h, valid, window) for h in range(1, H + 1)])


@dataclass
class ConditionResult:
    condition: str
    mae: np.ndarray
    corr_w: np.ndarray | None = None
    corr_h: float | None = None
    n_starts: int = 0
    extra: dict = field(default_factory=dict)


def evaluate_condition(name, preds, targets, valid=None) -> ConditionResult:
    mae = mae_per_horizon(preds, targets, valid)
    S, H, _ = np.asarray(preds).shape
    cw = ch = None
    if H >= 2:
        ch = corr_h(preds, targets, valid)
        if S >= H:
            cw = corr_w_curve(preds, targets, valid)
    return ConditionResult(name, mae, cw, ch, S)


def aggregate(results: list[ConditionResult]) -> ConditionResult:
    """Unweighted mean over conditions, matching per-condition averaging."""
    if not results:
        raise MetricError("nothing to aggregate")
    mae = np.mean([r.mae for r in results], axis=0)
    cws = [r.corr_w for r in results if r.corr_w is not None]
    chs = [r.corr_h for r in results if r.corr_h is not None]
    return ConditionResult(
        "aggregate",
        mae,
        np.mean(cws, axis=0) if len(cws) == len(results) else None,
        float(np.mean(chs)) if len(chs) == len(results) else None,
        sum(r.n_starts for r in results),
    )


def report(results: list[ConditionResult], out_dir: str | os.PathLike, svg: bool = False) -> list[Path]:
    """Write ``<condition>.csv`` per condition plus ``aggregate.csv``.

    Columns: horizon, mae, corr_w (empty when not computable).  A
    ``summary.csv`` lists the scalar corr_h per condition.
    """
    if not results:
        raise MetricError("empty evaluation grid")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    allres = list(results) + [aggregate(results)]
    for r in allres:
        path = out_dir / f"{r.condition}.csv"
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["horizon", "mae", "corr_w"])
            for h, m in enumerate(r.mae, start=1):
                cw = "" if r.corr_w is None else f"{r.corr_w[h - 1]:.8g}"
                w.writerow([h, f"{m:.8g}", cw])
        written.append(path)
    path = out_dir / "summary.csv"
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["condition", "mean_mae", "corr_h", "n_starts"])
        for r in allres:
            ch = "" if r.corr_h is None else f"{r.corr_h:.8g}"
            w.writerow([r.condition, f"{float(np.mean(r.mae)):.8g}", ch, r.n_starts])
    written.append(path)
    if svg:
        written.append(_mae_svg(allres, out_dir / "mae_vs_horizon.svg"))
    return written


def _mae_svg(results: list[ConditionResult], path: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = len(results)
    cols = min(n, 3)
    rows = -(-n // cols)
    fig, axes = plt.subplots(rows, cols, figsize=(4 * cols, 3 * rows), squeeze=False)
    for ax, r in zip(axes.flat, results):
        ax.plot(np.arange(1, r.mae.size + 1), r.mae, marker="o", ms=3)
        ax.set_title(r.condition)
        ax.set_xlabel("steps predicted ahead")
        ax.set_ylabel("MAE")
    for ax in list(axes.flat)[n:]:
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path
