"""Acceptance criteria, one test per criterion.

Each test prints a PASS/FAIL line; the lines are repeated in a summary
section at the end of the pytest run.  Criteria 8 to 10 train models and
take tens of minutes on one CPU; they carry the ``slow`` marker so that
``-m "not slow"`` skips them.
"""

import json
import subprocess
import sys
import time
from contextlib import contextmanager

import numpy as np
import pytest

from oracles import (
    corr_h_bruteforce,
    corr_w_bruteforce,
    mae_per_horizon_bruteforce,
    numeric_grad,
    rel_err_norm,
    trace_mae_bruteforce,
    traces_bruteforce,
)
from volcast import cli, data, metrics, segtrace, shard, synth, trainer, volstore
from volcast.objectives import direct_mae, trace_mae, voxel_mae
from volcast.segtrace import SegmentationMask, TraceMatrix, build_index, extract_traces, render_traces
from volcast.unet import Forward, ModelConfig, block_flops, build_model, forward, receptive_field
from volcast.unet import layers as L

VERDICTS: list[str] = []

RF21 = {"features": 8, "groups": 4, "blocks_low": 4}
STAGED = {"features": 8, "groups": 4, "stages": [(2, 2, 1), (2, 2, 2)], "blocks_low": 2, "blocks_other": 2}


@contextmanager
def criterion(n: int, title: str, limit_s: float | None = None):
    """Run one criterion; record PASS or FAIL with details and runtime."""
    info: dict = {}
    t0 = time.time()
    ok, why = False, ""
    try:
        yield info
        ok = True
    except AssertionError as exc:
        why = str(exc).splitlines()[0] if str(exc) else "assertion failed"
        raise
    except Exception as exc:
        why = f"{type(exc).__name__}: {exc}"
        raise
    finally:
        dt = time.time() - t0
        if ok and limit_s is not None and dt > limit_s:
            ok, why = False, f"runtime {dt:.1f}s over {limit_s:g}s"
        detail = "; ".join(f"{k}={v}" for k, v in info.items())
        line = f"{'PASS' if ok else 'FAIL'} criterion {n:2d} ({title}): {detail}"
        line += f" [{dt:.1f}s]" + (f" {why}" if why else "")
        VERDICTS.append(line)
        print(line)
    assert dt <= (limit_s or float("inf")), f"runtime {dt:.1f}s over {limit_s}s"


def _randomize(state, seed, std):
    rng = np.random.default_rng(seed)
    for k in state.params:
        state.params[k] = state.params[k] + rng.normal(0, std, state.params[k].shape).astype(state.params[k].dtype)
    return state


def _se(x):
    x = np.asarray(x, float)
    return x.std(ddof=1) / np.sqrt(x.size)


def _test_mae_h1(state, ds):
    model = metrics.aggregate(trainer.evaluate(state, ds, "test")).mae[0]
    base = metrics.aggregate(trainer.evaluate(state, ds, "test", baseline=True)).mae[0]
    return float(model), float(base)


# 1 -------------------------------------------------------------------------


def test_criterion_01_receptive_field_report(capsys):
    want = {"rf21": ("receptive_field", [21, 21, 21]), "rf64": ("receptive_field", [64, 64, 32]),
            "rf256": ("receptive_field", [256, 256, 128]), "main": ("receptive_field_native", [1024, 1024, 128])}
    got = {}
    with criterion(1, "receptive-field report", limit_s=1.0) as info:
        for name, (key, _) in want.items():
            assert cli.main(["rf-report", "--model-config", name, "--json"]) == 0
            got[name] = json.loads(capsys.readouterr().out)[key]
        info.update({k: tuple(v) for k, v in got.items()})
        assert got == {k: v for k, (_, v) in want.items()}


# 2 -------------------------------------------------------------------------


def test_criterion_02_empirical_receptive_field():
    with criterion(2, "empirical receptive field", limit_s=60) as info:
        cfg = ModelConfig(4, 32, features=8, groups=4, blocks_low=4, norm="frozen")
        reach = (receptive_field(cfg).rx - 1) // 2
        state = _randomize(build_model(cfg, 0), 1, 0.3)
        n = 2 * reach + 5
        rng = np.random.default_rng(2)
        x = rng.standard_normal((n, n, n, 4)).astype(np.float32)
        o = np.array([n // 2] * 3)
        base = forward(state, x, 5)[tuple(o)]
        outside, inside = [], []
        while len(outside) < 30 or len(inside) < 30:
            p = rng.integers(0, n, 3)
            dist = np.abs(p - o).max()
            if dist > reach and len(outside) < 30:
                bucket = outside
            elif dist == reach and len(inside) < 30:
                bucket = inside
            else:
                continue
            x2 = x.copy()
            x2[tuple(p) + (int(rng.integers(0, 4)),)] += 2.0
            bucket.append(abs(float(forward(state, x2, 5)[tuple(o)] - base)))
        info.update(reach=reach, probes=len(outside) + len(inside), max_outside=max(outside),
                    min_inside=f"{min(inside):.3g}")
        assert max(outside) == 0.0 and min(inside) > 0.0


# 3 -------------------------------------------------------------------------


def _fd_layers(seed):
    """Worst relative error over every layer for one seed."""
    rng = np.random.default_rng(seed)
    errs = {}

    def check(name, f, analytic, arr):
        errs[name] = max(errs.get(name, 0.0), rel_err_norm(numeric_grad(f, arr), analytic))

    x = rng.standard_normal((3, 3, 2, 2))
    k, b = rng.standard_normal((3, 3, 3, 2, 3)), rng.standard_normal(3)
    w = rng.standard_normal((3, 3, 2, 3))
    dx, dk, db = L.conv3d_backward(w, L.conv3d(x, k, b)[1])
    f = lambda: float(np.sum(L.conv3d(x, k, b)[0] * w))
    for a, g in ((x, dx), (k, dk), (b, db)):
        check("conv3d", f, g, a)

    for frozen in (False, True):
        x = rng.standard_normal((3, 2, 2, 4))
        s, o = rng.standard_normal(4), rng.standard_normal(4)
        w = rng.standard_normal(x.shape)
        grads = L.group_norm_backward(w, L.group_norm(x, s, o, 2, frozen=frozen)[1])
        f = lambda: float(np.sum(L.group_norm(x, s, o, 2, frozen=frozen)[0] * w))
        for a, g in zip((x, s, o), grads):
            check("group_norm_frozen" if frozen else "group_norm", f, g, a)

    x, w = rng.normal(0, 3, 12), rng.standard_normal(12)
    check("swish", lambda: float(np.sum(L.swish(x)[0] * w)), L.swish_backward(w, L.swish(x)[1]), x)

    x, e = rng.standard_normal((2, 2, 2, 4)), rng.standard_normal(6)
    W, bb = rng.standard_normal((6, 8)), rng.standard_normal(8)
    w = rng.standard_normal(x.shape)
    grads = L.film_backward(w, L.film(x, e, W, bb)[1])
    f = lambda: float(np.sum(L.film(x, e, W, bb)[0] * w))
    for a, g in zip((x, W, bb), grads):
        check("film", f, g, a)

    x, w = rng.standard_normal((4, 2, 2, 2)), rng.standard_normal((2, 1, 2, 2))
    check("resample_down", lambda: float(np.sum(L.resample_down(x, (2, 2, 1))[0] * w)),
          L.resample_down_backward(w, L.resample_down(x, (2, 2, 1))[1]), x)
    y = rng.standard_normal((2, 1, 2, 2))
    k, b = rng.standard_normal((3, 3, 3, 2, 3)), rng.standard_normal(3)
    wu = rng.standard_normal((4, 2, 2, 3))
    grads = L.resample_up_backward(wu, L.resample_up(y, (2, 2, 1), k, b)[1])
    f = lambda: float(np.sum(L.resample_up(y, (2, 2, 1), k, b)[0] * wu))
    for a, g in zip((y, k, b), grads):
        check("resample_up", f, g, a)

    F, E = 4, 6
    p = {"gn1.scale": 1 + rng.normal(0, 0.3, F), "gn1.offset": rng.normal(0, 0.3, F),
         "conv1.k": rng.normal(0, 0.3, (3, 3, 3, F, F)), "conv1.b": rng.normal(0, 0.3, F),
         "gn2.scale": 1 + rng.normal(0, 0.3, F), "gn2.offset": rng.normal(0, 0.3, F),
         "film.w": rng.normal(0, 0.3, (E, 2 * F)), "film.b": rng.normal(0, 0.3, 2 * F),
         "conv2.k": rng.normal(0, 0.3, (3, 3, 3, F, F)), "conv2.b": rng.normal(0, 0.3, F)}
    x, e = rng.standard_normal((3, 3, 2, F)), rng.standard_normal(E)
    w = rng.standard_normal(x.shape)
    run = lambda: L.resblock(x, p, e, 2, 0.25, True, np.random.default_rng(seed + 99))
    dx, g = L.resblock_backward(w, run()[1])
    f = lambda: float(np.sum(run()[0] * w))
    check("resblock", f, dx, x)
    for name in p:
        if p[name].size <= 16:
            check("resblock", f, g[name], p[name])
        else:
            idx = [tuple(rng.integers(0, s) for s in p[name].shape) for _ in range(6)]
            sel = tuple(np.array(idx).T)
            errs["resblock"] = max(errs["resblock"],
                                   rel_err_norm(numeric_grad(f, p[name], idx=idx)[sel], g[name][sel]))
    return errs


def _fd_model(seed):
    cfg = ModelConfig(2, 3, features=4, groups=2, stages=[(2, 2, 1)], blocks_low=1, blocks_other=1,
                      superres_stages=[(2, 1, 1)], superres_features=2)
    state = _randomize(build_model(cfg, seed).astype(np.float64), seed + 1, 0.1)
    rng = np.random.default_rng(seed + 2)
    x = rng.standard_normal((4, 4, 2, 2))
    fw = Forward(state, x, 2)
    w = rng.standard_normal(fw.output.shape)
    grads, _ = fw.backward(w)
    f = lambda: float(np.sum(forward(state, x, 2) * w))
    num, an = [], []
    for name, p in state.params.items():
        idx = [tuple(rng.integers(0, s) for s in p.shape) for _ in range(2)]
        sel = tuple(np.array(idx).T)
        num.append(numeric_grad(f, p, idx=idx)[sel])
        an.append(grads[name][sel])
    return rel_err_norm(np.concatenate(num), np.concatenate(an))


def test_criterion_03_gradients():
    with criterion(3, "finite-difference gradients", limit_s=300) as info:
        seeds = range(20)
        worst: dict = {}
        for s in seeds:
            for k, v in _fd_layers(s).items():
                worst[k] = max(worst.get(k, 0.0), v)
        model = max(_fd_model(s) for s in seeds)
        info.update(seeds=len(seeds), worst_layer=f"{max(worst.values()):.2e}", model=f"{model:.2e}")
        bad = {k: v for k, v in worst.items() if v >= 1e-5}
        assert not bad, f"layer errors {bad}"
        assert model < 1e-4, f"model error {model}"


# 4 -------------------------------------------------------------------------


def test_criterion_04_trace_and_metric_oracles():
    with criterion(4, "trace, loss and metric oracles") as info:
        worst = 0.0
        for seed in range(10):
            rng = np.random.default_rng(seed)
            labels = rng.integers(0, 7, (6, 5, 3)).astype(np.uint32)
            labels[0, 0, 0], labels[-1, -1, -1] = 1, 6
            idx = build_index(SegmentationMask(labels, n_neurons=6))
            movie = rng.standard_normal((6, 5, 3, 9))
            ref = traces_bruteforce(movie, labels)
            got = extract_traces(movie, idx).values
            valid = idx.valid
            worst = max(worst, np.abs(got[valid] - ref[valid]).max())
            pred, tgt = rng.standard_normal((2, 6, 5, 3))
            worst = max(worst, abs(trace_mae(pred, tgt, idx)[0] - trace_mae_bruteforce(pred, tgt, labels)))
            vb = sum(abs(a - b) for a, b in zip(pred.ravel(), tgt.ravel())) / pred.size
            worst = max(worst, abs(voxel_mae(pred, tgt)[0] - vb))
            p4, t4 = rng.standard_normal((2, 6, 5, 3, 4))
            db = np.mean([trace_mae_bruteforce(p4[..., h], t4[..., h], labels) for h in range(4)])
            worst = max(worst, abs(direct_mae(p4, t4, idx)[0] - db))
            P, T = rng.standard_normal((2, 12, 4, 5))
            worst = max(worst, np.abs(metrics.mae_per_horizon(P, T) - mae_per_horizon_bruteforce(P, T)).max())
            worst = max(worst, abs(metrics.corr_h(P, T) - corr_h_bruteforce(P, T)))
            for h in range(1, 5):
                worst = max(worst, abs(metrics.corr_w(P, T, h) - corr_w_bruteforce(P, T, h, 4)))
            tr = TraceMatrix(rng.standard_normal((6, 7)).astype(np.float32))
            back = extract_traces(render_traces(idx, tr), idx).values
            assert np.array_equal(back[valid], tr.values[valid].astype(np.float64)), "render/extract not exact"
        info.update(cases=10, worst_abs_err=f"{worst:.2e}")
        assert worst <= 1e-6


# 5 -------------------------------------------------------------------------


def test_criterion_05_sampling_equivalence():
    with criterion(5, "exhaustive (t,h) enumeration") as info:
        cfg = synth.SynthConfig(dims=(12, 12, 4, 40), n_cells=5, radius=(1.2, 1.8), z_radius=(1.0, 1.0),
                                coupling_range=(2.0, 10.0), burn_in=10, seed=0)
        mask = synth.gen_mask(cfg)
        ds = data.Dataset(synth.render_movie(mask, synth.gen_traces(cfg), cfg), mask, data.contiguous_splits(40))
        model = ModelConfig(2, 3, features=4, groups=2, blocks_low=1)
        state = build_model(model, 3)
        starts = trainer.valid_starts(ds.splits, "train", 2, 3)
        pairs = [(int(t), h) for t in starts for h in (1, 2, 3)]
        brute = np.mean([trace_mae_bruteforce(forward(state, ds.movie[..., t - 1 : t + 1], h),
                                              ds.movie[..., t + h], mask.labels) for t, h in pairs])
        got = trainer.expected_step_loss(state, ds)
        # the sampler draws each pair with equal probability
        rng = np.random.default_rng(0)
        draws = [trainer.sample_example(ds.splits, 2, 3, rng) for _ in range(3000)]
        assert set(draws) == set(pairs)
        info.update(pairs=len(pairs), abs_err=f"{abs(got - brute):.2e}")
        assert abs(got - brute) < 1e-6


# 6 -------------------------------------------------------------------------


def test_criterion_06_flops_family():
    with criterion(6, "one high block = four low blocks") as info:
        V = 128 * 72 * 72  # a level of the main config after 4x input downsampling
        ratio = 4 * block_flops(128, V // 4) / block_flops(128, V)
        info.update(F=128, ratio=f"{ratio:.4f}")
        assert abs(ratio - 1) < 0.05


# 7 -------------------------------------------------------------------------


def test_criterion_07_sharded_equivalence(tmp_path):
    with criterion(7, "sharded forward", limit_s=60) as info:
        cfg = ModelConfig(2, 4, features=8, groups=4, stages=[(2, 2, 1)], blocks_low=2, blocks_other=2,
                          norm="frozen")
        state = _randomize(build_model(cfg, 0), 1, 0.2)
        movie = np.random.default_rng(2).standard_normal((48, 40, 4, 6)).astype(np.float32)
        h = volstore.save_array(movie, tmp_path / "v", chunk_shape=(8, 8, 4, 1))
        plan = shard.make_plan((48, 40, 4), (2, 2), cfg)
        h.io.reset()
        r = shard.sharded_forward(state, plan, h, 2, t=4)
        ref = forward(state, movie[..., 3:5], 2)
        err = float(np.abs(r.output - ref).max())
        inside = all(b.lo[:3] == p.lo and b.hi[:3] == p.hi for b, p in zip(r.loaded, plan.padded))
        info.update(halo=plan.halo, max_abs_err=f"{err:.2e}", voxels_read=r.voxels_read,
                    expected=plan.voxels_loaded * cfg.context)
        assert err <= 1e-6
        assert inside and r.voxels_read == plan.voxels_loaded * cfg.context


# 8 -------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_08_end_to_end_learning(tmp_path):
    with criterion(8, "trained model beats copy-last at h=1", limit_s=30 * 60) as info:
        root = synth.make_dataset(synth.SynthConfig(), tmp_path / "ds", variants=("full",))
        ds = data.load_dataset(root, "full")
        mc = ModelConfig(2, 1, **RF21)
        tc = trainer.TrainConfig(2, 1, steps=2000, lr_init=2e-3, lr_final=2e-5, val_every=250, val_starts=8)
        res = trainer.train(mc, tc, ds)
        model, base = _test_mae_h1(res.best, ds)
        gain = 1 - model / base
        info.update(model_mae=f"{model:.4f}", copy_last_mae=f"{base:.4f}", gain=f"{gain:.3f}")
        assert gain >= 0.20


# 9 -------------------------------------------------------------------------

VARIANT_DATA = dict(dims=(32, 32, 4, 1500), n_cells=16, radius=(1.5, 2.5), z_radius=(1.0, 1.0),
                    coupling_range=(3.0, 9.0), coupling_density=0.5, texture="radial", seed=1)


@pytest.mark.slow
def test_criterion_09_variant_directionality(tmp_path):
    with criterion(9, "rendered ~ masked_bg ~ full, shuffled worse", limit_s=2 * 3600) as info:
        root = synth.make_dataset(synth.SynthConfig(**VARIANT_DATA), tmp_path / "ds")
        mc = ModelConfig(2, 1, **RF21)
        maes = {}
        for variant in synth.VARIANTS:
            ds = data.load_dataset(root, variant)
            maes[variant] = []
            for seed in range(3):
                tc = trainer.TrainConfig(2, 1, steps=1000, lr_init=2e-3, lr_final=2e-5, val_every=250,
                                         val_starts=8, seed=seed)
                maes[variant].append(_test_mae_h1(trainer.train(mc, tc, ds).best, ds)[0])
        mean = {v: float(np.mean(m)) for v, m in maes.items()}
        se = {v: float(_se(m)) for v, m in maes.items()}
        info.update({v: f"{mean[v]:.4f}+-{se[v]:.4f}" for v in mean})
        for a, b in (("rendered", "masked_bg"), ("rendered", "full"), ("masked_bg", "full")):
            gap, cse = abs(mean[a] - mean[b]), np.hypot(se[a], se[b])
            assert gap < cse, f"{a} vs {b}: gap {gap:.4f} >= combined SE {cse:.4f}"
        gap, cse = mean["shuffled"] - mean["rendered"], np.hypot(se["shuffled"], se["rendered"])
        info["shuffle_gap_in_se"] = f"{gap / cse:.1f}"
        assert gap > 2 * cse


# 10 ------------------------------------------------------------------------

CONTEXT_DATA = dict(dims=(48, 48, 4, 1500), n_cells=20, radius=(1.5, 2.5), z_radius=(1.0, 1.0),
                    coupling_range=(12.0, 28.0), coupling_density=0.8, coupling_scale=4.0, seed=1)


@pytest.mark.slow
def test_criterion_10_spatial_context(tmp_path):
    with criterion(10, "larger receptive field helps at C=2", limit_s=3 * 3600) as info:
        root = synth.make_dataset(synth.SynthConfig(**CONTEXT_DATA), tmp_path / "ds", variants=("full",))
        ds = data.load_dataset(root, "full")
        maes = {"rf21": [], "staged": []}
        for name, spec in (("rf21", RF21), ("staged", STAGED)):
            mc = ModelConfig(2, 1, **spec)
            for seed in range(3):
                tc = trainer.TrainConfig(2, 1, steps=1000, lr_init=2e-3, lr_final=2e-5, val_every=250,
                                         val_starts=8, seed=seed)
                maes[name].append(_test_mae_h1(trainer.train(mc, tc, ds).best, ds)[0])
        rf = {n: receptive_field(ModelConfig(2, 1, **s)).rx for n, s in (("rf21", RF21), ("staged", STAGED))}
        mean = {n: float(np.mean(m)) for n, m in maes.items()}
        se = {n: float(_se(m)) for n, m in maes.items()}
        gap, cse = mean["rf21"] - mean["staged"], np.hypot(se["rf21"], se["staged"])
        info.update({f"{n}(rf {rf[n]})": f"{mean[n]:.4f}+-{se[n]:.4f}" for n in mean})
        info["gap_in_se"] = f"{gap / cse:.1f}"

        # long context, report only
        long = {}
        for name, spec in (("rf21", RF21), ("staged", STAGED)):
            mc = ModelConfig(64, 1, **spec)
            tc = trainer.TrainConfig(64, 1, steps=300, lr_init=2e-3, lr_final=2e-5, val_every=300, val_starts=8)
            long[name] = _test_mae_h1(trainer.train(mc, tc, ds).best, ds)[0]
        info["C64_report"] = f"rf21 {long['rf21']:.4f} staged {long['staged']:.4f}"
        assert gap > 2 * cse


# 11 ------------------------------------------------------------------------


def test_criterion_11_determinism(tmp_path):
    with criterion(11, "byte-identical reruns") as info:
        cfg = tmp_path / "synth.json"
        cfg.write_text(json.dumps({"dims": [16, 16, 4, 48], "n_cells": 5, "radius": [1.5, 2.0],
                                   "z_radius": [1.0, 1.0], "burn_in": 20, "seed": 4}))
        model = tmp_path / "model.json"
        model.write_text(json.dumps({"context": 2, "horizon": 3, "features": 4, "groups": 2, "blocks_low": 1}))
        assert cli.main(["synth-gen", "--config", str(cfg), "--out", str(tmp_path / "ds"),
                         "--variants", "full"]) == 0
        for run in ("a", "b"):
            # separate processes, so no state is shared between the two runs
            subprocess.run([sys.executable, "-m", "volcast.cli", "train", "--model-config", str(model),
                            "--data", str(tmp_path / "ds"), "--out", str(tmp_path / run), "--steps", "25",
                            "--val-every", "10", "--seed", "7"], check=True, capture_output=True)
        names = ["best.ckpt", "final.ckpt", "log.csv", "config.json"]
        same = {n: (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes() for n in names}
        info.update(same)
        assert all(same.values())


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
