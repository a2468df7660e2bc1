import json
import shutil

import numpy as np
import pytest

from volcast import cli, segtrace, synth, volstore
from volcast.unet import load_checkpoint

SMALL = {"dims": [16, 16, 4, 48], "n_cells": 5, "radius": [1.5, 2.0], "z_radius": [1.0, 1.0],
         "coupling_range": [3.0, 10.0], "burn_in": 20, "seed": 5}
MODEL = {"context": 2, "horizon": 3, "features": 4, "groups": 2, "blocks_low": 1}


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def _tree(root, skip=("manifest.json",)):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name not in skip}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = _write(d / "synth.json", SMALL)
    assert cli.main(["synth-gen", "--config", cfg, "--out", str(d / "ds")]) == 0
    return d / "ds"


def test_synth_gen_variants_and_manifest(dataset):
    names = {p.name for p in dataset.iterdir()}
    assert {f"movie_{v}" for v in synth.VARIANTS} <= names
    man = json.loads((dataset / "manifest.json").read_text())
    assert man["command"] == "synth-gen" and man["seed"] == 5
    assert man["input_hashes"]["config"] == cli.hash_path(dataset.parent / "synth.json")


def test_synth_gen_deterministic(dataset, tmp_path):
    cfg = _write(tmp_path / "synth.json", SMALL)
    assert cli.main(["synth-gen", "--config", cfg, "--out", str(tmp_path / "again")]) == 0
    assert _tree(tmp_path / "again") == _tree(dataset)


def test_synth_gen_usage_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["synth-gen", "--out", str(tmp_path / "x"), "--variants", "full,blurred"])
    assert exc.value.code == 2
    bad = _write(tmp_path / "bad.json", {"n_cells": 0})
    assert cli.main(["synth-gen", "--config", bad, "--out", str(tmp_path / "y")]) == 2
    assert "n_cells" in capsys.readouterr().err


def test_refuses_to_overwrite_without_force(dataset, tmp_path):
    cfg = _write(tmp_path / "synth.json", SMALL | {"dims": [12, 12, 4, 20]})
    out = str(tmp_path / "ds")
    assert cli.main(["synth-gen", "--config", cfg, "--out", out, "--variants", "full"]) == 0
    first = _tree(tmp_path / "ds")
    assert cli.main(["synth-gen", "--config", cfg, "--out", out, "--variants", "full"]) == 2
    assert _tree(tmp_path / "ds") == first
    assert cli.main(["synth-gen", "--config", cfg, "--out", out, "--variants", "full", "--force"]) == 0
    assert _tree(tmp_path / "ds") == first


def test_preprocess_copy_and_chain(dataset, tmp_path):
    assert cli.main(["preprocess", "--in", str(dataset), "--out", str(tmp_path / "copy")]) == 0
    src = volstore.open_volume(dataset / "movie_full").read_all()
    assert np.array_equal(volstore.open_volume(tmp_path / "copy" / "movie_full").read_all(), src)

    args = ["preprocess", "--in", str(dataset), "--out", str(tmp_path / "p"), "--crop", "x=12",
            "--downsample", "2,2,1"]
    assert cli.main(args) == 0
    out = volstore.open_volume(tmp_path / "p" / "movie_full")
    assert out.dims == (6, 8, 4, 48)
    np.testing.assert_allclose(out.read_all(), src[2:14].reshape(6, 2, 8, 2, 4, 48).mean(axis=(1, 3)),
                               atol=1e-6)
    mask = segtrace.SegmentationMask.load(tmp_path / "p" / "mask")
    assert mask.labels.shape == (6, 8, 4)
    assert (tmp_path / "p" / "splits.json").exists()


def test_preprocess_dff_on_raw_volume(tmp_path):
    rng = np.random.default_rng(0)
    raw = (1 + rng.uniform(0, 1, (8, 8, 2, 40))).astype(np.float32)
    volstore.save_array(raw, tmp_path / "raw")
    assert cli.main(["preprocess", "--in", str(tmp_path / "raw"), "--out", str(tmp_path / "p"), "--dff",
                     "--percentile", "10", "--crop", "y=4"]) == 0
    got = volstore.open_volume(tmp_path / "p" / "movie_full").read_all()
    f0 = np.sort(raw[:, 2:6], axis=-1)[..., 3:4]  # nearest rank: ceil(0.1 * 40) = 4th smallest
    np.testing.assert_allclose(got, (raw[:, 2:6] - f0) / (f0 + 1e-3), rtol=1e-4, atol=1e-5)
    neg = volstore.save_array(-raw, tmp_path / "neg")
    assert cli.main(["preprocess", "--in", str(neg.root), "--out", str(tmp_path / "q"), "--dff"]) == 3


def test_preprocess_z_untouched_by_unit_factor(dataset, tmp_path):
    assert cli.main(["preprocess", "--in", str(dataset), "--out", str(tmp_path / "p"),
                     "--downsample", "4,4,1"]) == 0
    assert volstore.open_volume(tmp_path / "p" / "movie_full").dims == (4, 4, 4, 48)


def test_preprocess_errors(dataset, tmp_path):
    assert cli.main(["preprocess", "--in", str(dataset), "--out", str(tmp_path / "a"), "--crop", "x=99"]) == 3
    assert cli.main(["preprocess", "--in", str(dataset), "--out", str(tmp_path / "b"),
                     "--downsample", "3,3,1"]) == 3
    assert cli.main(["preprocess", "--in", str(tmp_path / "nope"), "--out", str(tmp_path / "c")]) == 3
    with pytest.raises(SystemExit) as exc:
        cli.main(["preprocess", "--in", str(dataset), "--out", str(tmp_path / "d"), "--crop", "w=4"])
    assert exc.value.code == 2


def test_train_eval_resume_finetune(dataset, tmp_path, capsys):
    model = _write(tmp_path / "model.json", MODEL)
    run = tmp_path / "run"
    common = ["--data", str(dataset), "--val-every", "5", "--lr", "3e-3", "--lr-final", "1e-4"]
    assert cli.main(["train", "--model-config", model, "--out", str(run), "--steps", "10", *common]) == 0
    assert {"best.ckpt", "final.ckpt", "log.csv", "manifest.json"} <= {p.name for p in run.iterdir()}
    assert "best val trace-MAE" in capsys.readouterr().out

    ev = tmp_path / "eval"
    assert cli.main(["eval", "--checkpoint", str(run / "best.ckpt"), "--data", str(dataset),
                     "--out", str(ev), "--max-starts", "4", "--baseline", "--svg"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "horizon,mae" and len(lines) == 4
    assert (ev / "aggregate.csv").exists() and (ev / "copy_last" / "aggregate.csv").exists()
    assert (ev / "mae_vs_horizon.svg").exists()

    res = tmp_path / "resumed"
    assert cli.main(["train", "--resume", str(run / "final.ckpt"), "--out", str(res), "--steps", "4",
                     *common]) == 0
    state, _, meta = load_checkpoint(res / "final.ckpt")
    assert state.step == 14 and meta["opt_step"] == 14

    ft = tmp_path / "ft"
    assert cli.main(["finetune", "--from", str(run / "best.ckpt"), "--out", str(ft), "--steps", "3",
                     "--data", str(dataset), "--variant", "rendered", "--val-every", "3"]) == 0
    assert "1e-07" in capsys.readouterr().out


def test_train_errors(dataset, tmp_path):
    model = _write(tmp_path / "model.json", MODEL)
    assert cli.main(["train", "--model-config", model, "--data", str(tmp_path / "missing"),
                     "--out", str(tmp_path / "a")]) == 3
    assert cli.main(["train", "--data", str(dataset), "--out", str(tmp_path / "b")]) == 2
    bad = _write(tmp_path / "bad.json", MODEL | {"groups": 3})
    assert cli.main(["train", "--model-config", bad, "--data", str(dataset), "--out", str(tmp_path / "c")]) == 2


def test_train_divergence_exit_code(tmp_path):
    cfg = synth.SynthConfig(dims=(12, 12, 4, 30), n_cells=3, radius=(1.2, 1.5), z_radius=(1.0, 1.0),
                            burn_in=5, seed=1)
    root = synth.make_dataset(cfg, tmp_path / "ds", variants=("full",))
    h = volstore.open_volume(root / "movie_full")
    movie = h.read_all()
    movie[..., 3] = np.nan
    volstore.save_array(movie, tmp_path / "nan" / "movie_full", chunk_shape=h.meta.chunk_shape)
    for name in ("mask", "splits.json"):
        src = root / name
        dst = tmp_path / "nan" / name
        if src.is_dir():
            shutil.copytree(src, dst)
        else:
            dst.write_bytes(src.read_bytes())
    model = _write(tmp_path / "model.json", MODEL)
    assert cli.main(["train", "--model-config", model, "--data", str(tmp_path / "nan"),
                     "--out", str(tmp_path / "run"), "--steps", "30"]) == 4


def test_eval_missing_split(dataset, tmp_path):
    model = _write(tmp_path / "model.json", MODEL)
    run = tmp_path / "run"
    assert cli.main(["train", "--model-config", model, "--data", str(dataset), "--out", str(run),
                     "--steps", "0"]) == 0
    sp = json.loads((dataset / "splits.json").read_text())
    for c in sp["conditions"].values():
        c["test"] = []
    alt = tmp_path / "alt"
    shutil.copytree(dataset, alt)
    (alt / "splits.json").write_text(json.dumps(sp))
    assert cli.main(["eval", "--checkpoint", str(run / "best.ckpt"), "--data", str(alt),
                     "--out", str(tmp_path / "ev")]) == 3


def test_rf_report_presets(capsys):
    expect = {"rf21": [21, 21, 21], "rf64": [64, 64, 32], "rf256": [256, 256, 128]}
    for name, rf in expect.items():
        assert cli.main(["rf-report", "--model-config", name, "--json"]) == 0
        assert json.loads(capsys.readouterr().out)["receptive_field"] == rf
    assert cli.main(["rf-report", "--model-config", "main", "--json"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["receptive_field_native"] == [1024, 1024, 128]
    assert rep["parameters"] > 0 and rep["flops"] > 0
    assert cli.main(["rf-report", "--model-config", "rf21"]) == 0
    assert "21 x 21 x 21" in capsys.readouterr().out


def test_rf_report_invalid_config(tmp_path):
    bad = _write(tmp_path / "m.json", {"context": 4})
    assert cli.main(["rf-report", "--model-config", bad]) == 2
    assert cli.main(["rf-report", "--model-config", str(tmp_path / "none.json")]) == 3


def test_shard_plan(tmp_path, capsys):
    assert cli.main(["shard-plan", "--dims", "512,288,72", "--grid", "4,2", "--model-config", "rf21"]) == 0
    plan = json.loads(capsys.readouterr().out)
    assert plan["halo"] == [10, 10, 10] and len(plan["shards"]) == 8
    out = tmp_path / "plan"
    assert cli.main(["shard-plan", "--dims", "512,288,72", "--grid", "4,2", "--model-config", "rf21",
                     "--out", str(out)]) == 0
    assert json.loads((out / "plan.json").read_text()) == plan
    assert cli.main(["shard-plan", "--dims", "30,24,4", "--grid", "4,2", "--model-config", "rf21"]) == 2
