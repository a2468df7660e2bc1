"""``volcast`` command line.

Exit codes: 0 success, 2 usage or config error, 3 data error,
4 numerical failure.  Every command writing to ``--out`` refuses a
non-empty directory unless ``--force`` is given, and leaves a
``manifest.json`` describing the run.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from volcast import __version__, config, data, metrics, preprocess, segtrace, shard, synth, trainer, volstore
from volcast.unet import model as unet_model

log = logging.getLogger("volcast")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


# run manifest --------------------------------------------------------------


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def hash_path(path: str | os.PathLike) -> str:
    """sha256 over a file, or over every file of a directory (sorted by
    relative path, names included)."""
    path = Path(path)
    h = hashlib.sha256()
    files = [path] if path.is_file() else sorted(p for p in path.rglob("*") if p.is_file())
    for p in files:
        if path.is_dir():
            h.update(str(p.relative_to(path)).encode())
        with open(p, "rb") as f:
            for block in iter(lambda: f.read(1 << 20), b""):
                h.update(block)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config_paths: dict[str, str | None] = field(default_factory=dict)
    seed: int | None = None
    input_hashes: dict[str, str] = field(default_factory=dict)
    output_hashes: dict[str, str] = field(default_factory=dict)
    started: str = field(default_factory=_now)
    finished: str | None = None
    version: str = __version__

    def add_input(self, name: str, path) -> None:
        if path is not None and Path(path).exists():
            self.input_hashes[name] = hash_path(path)

    def write(self, out_dir: Path) -> Path:
        self.finished = _now()
        for p in sorted(out_dir.iterdir()):
            if p.name != "manifest.json":
                self.output_hashes[p.name] = hash_path(p)
        path = out_dir / "manifest.json"
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True)
        return path


def prepare_out(out: str | os.PathLike, force: bool) -> Path:
    out = Path(out)
    if out.exists() and not out.is_dir():
        raise UsageError(f"--out {out} exists and is not a directory")
    if out.exists() and any(out.iterdir()):
        if not force:
            raise UsageError(f"--out {out} is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# argument helpers ----------------------------------------------------------


def _ints(text: str, n: int | None = None) -> tuple[int, ...]:
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc
    if n is not None and len(vals) != n:
        raise argparse.ArgumentTypeError(f"expected {n} integers, got {text!r}")
    return vals


def _triple(text):
    return _ints(text, 3)


def _pair(text):
    return _ints(text, 2)


def _variants(text: str) -> tuple[str, ...]:
    vals = tuple(v.strip() for v in text.split(",") if v.strip())
    bad = [v for v in vals if v not in synth.VARIANTS]
    if bad or not vals:
        raise argparse.ArgumentTypeError(f"unknown variant(s) {bad}; choose from {','.join(synth.VARIANTS)}")
    return vals


def _crop(text: str) -> tuple[int, int]:
    axes = {"x": 0, "y": 1, "z": 2}
    try:
        name, size = text.split("=")
        return axes[name.strip().lower()], int(size)
    except (ValueError, KeyError) as exc:
        raise argparse.ArgumentTypeError(f"--crop expects AXIS=SIZE with AXIS in x,y,z, got {text!r}") from exc


# commands ------------------------------------------------------------------


def cmd_synth_gen(args) -> int:
    cfg = config.load_synth_config(args.config, {"seed": args.seed})
    out = prepare_out(args.out, args.force)
    man = RunManifest("synth-gen", sys.argv[1:], {"config": args.config}, cfg.seed)
    man.add_input("config", args.config)
    synth.make_dataset(cfg, out, variants=args.variants)
    man.write(out)
    print(f"wrote {', '.join(args.variants)} to {out}")
    return EXIT_OK


def _source_dataset(path: Path, variant: str) -> tuple[Path, Path | None]:
    """Volume dir to read plus the dataset dir it belongs to (if any)."""
    if (path / volstore.META_FILE).exists():
        return path, None
    vol = path / f"movie_{variant}"
    if not vol.exists():
        raise FileNotFoundError(f"{path} is neither a volume nor a dataset with movie_{variant}/")
    return vol, path


def cmd_preprocess(args) -> int:
    src = Path(args.inp)
    if not src.exists():
        raise FileNotFoundError(f"--in {src} does not exist")
    vol_dir, ds_dir = _source_dataset(src, args.variant)
    out = prepare_out(args.out, args.force)
    man = RunManifest("preprocess", sys.argv[1:])
    man.add_input("volume", vol_dir)
    tmp = Path(tempfile.mkdtemp(prefix=".stage", dir=out))
    try:
        cur = volstore.open_volume(vol_dir)
        chunks = cur.meta.chunk_shape
        stage = 0

        def new_volume(dims):
            nonlocal stage
            stage += 1
            cs = tuple(min(c, d) for c, d in zip(chunks, dims))
            return volstore.create_volume(volstore.VolumeMeta(dims, cs, cur.meta.voxel_size), tmp / f"s{stage}")

        # fixed order: normalize, crop, downsample
        if args.dff:
            nxt = new_volume(cur.dims)
            cfg = preprocess.BaselineConfig(args.percentile, args.window or "global", args.epsilon)
            preprocess.dff_normalize(cur, cfg, preprocess.ClampRange(), nxt)
            cur = nxt
        crops = list(args.crop or [])
        for axis, size in crops:
            dims = list(cur.dims)
            if size > dims[axis]:
                raise preprocess.PreprocessError(f"crop of {size} exceeds axis extent {dims[axis]}")
            dims[axis] = size
            nxt = new_volume(tuple(dims))
            preprocess.center_crop(cur, axis, size, nxt)
            cur = nxt
        if args.downsample:
            f = args.downsample
            preprocess._check_factors(cur.dims, f)
            dims = tuple(d // s for d, s in zip(cur.dims[:3], f)) + (cur.dims[3],)
            nxt = new_volume(dims)
            preprocess.downsample_avg(cur, f, nxt)
            cur = nxt
        final = out / f"movie_{args.variant}"
        if cur.root == vol_dir:
            shutil.copytree(vol_dir, final)
        else:
            shutil.move(str(cur.root), final)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)

    if ds_dir is not None and (ds_dir / "mask").exists():
        mask = segtrace.SegmentationMask.load(ds_dir / "mask")
        labels = mask.labels
        for axis, size in args.crop or []:
            off = preprocess.crop_offset(labels.shape[axis], size)
            labels = np.take(labels, np.arange(off, off + size), axis=axis)
        mask = segtrace.SegmentationMask(labels, n_neurons=mask.n_neurons)
        if args.downsample:
            mask = preprocess.downsample_mask_stride(mask, args.downsample)
        mask.save(out / "mask")
        if (ds_dir / "splits.json").exists():
            shutil.copy(ds_dir / "splits.json", out / "splits.json")
    man.write(out)
    print(f"wrote {out / f'movie_{args.variant}'}")
    return EXIT_OK


def _train_overrides(args) -> dict:
    return {"steps": args.steps, "seed": args.seed, "lr_init": args.lr, "lr_final": args.lr_final,
            "loss_kind": args.loss_kind, "val_every": args.val_every}


def _load_data(args) -> data.Dataset:
    path = Path(args.data)
    if not path.exists():
        raise FileNotFoundError(f"--data {path} does not exist")
    return data.load_dataset(path, args.variant)


def cmd_train(args) -> int:
    if args.resume:
        state, _, _ = unet_model.load_checkpoint(args.resume)
        model_cfg = state.config
    else:
        if not args.model_config:
            raise UsageError("train needs --model-config (or --resume)")
        model_cfg = config.load_model_config(args.model_config)
    train_cfg = config.load_train_config(args.train_config, model_cfg, _train_overrides(args))
    ds = _load_data(args).for_model(model_cfg.up_factor)
    out = prepare_out(args.out, args.force)
    man = RunManifest("train", sys.argv[1:],
                      {"model_config": args.model_config, "train_config": args.train_config}, train_cfg.seed)
    man.add_input("model_config", args.model_config)
    man.add_input("train_config", args.train_config)
    man.add_input("data", Path(args.data) / f"movie_{args.variant}")
    if args.resume:
        man.add_input("resume", args.resume)
        res = trainer.resume(args.resume, train_cfg, ds, out_dir=out)
    else:
        res = trainer.train(model_cfg, train_cfg, ds, out_dir=out)
    man.write(out)
    print(f"best val trace-MAE {res.best_val:.6g} at step {res.best_step}; checkpoint {out / 'best.ckpt'}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    state, _, _ = unet_model.load_checkpoint(args.from_ckpt)
    model_cfg = state.config
    if args.model_config:
        want = config.load_model_config(args.model_config)
        if want.to_dict() | {"dropout_rate": 0} != model_cfg.to_dict() | {"dropout_rate": 0}:
            raise unet_model.ConfigError("--model-config differs from the pretrained checkpoint")
    train_cfg = config.load_train_config(args.train_config, model_cfg, _train_overrides(args))
    ds = _load_data(args).for_model(model_cfg.up_factor)
    out = prepare_out(args.out, args.force)
    man = RunManifest("finetune", sys.argv[1:], {"train_config": args.train_config}, train_cfg.seed)
    man.add_input("pretrained", args.from_ckpt)
    man.add_input("train_config", args.train_config)
    res = trainer.finetune(args.from_ckpt, train_cfg, ds, out_dir=out)
    man.write(out)
    print(f"fine-tuned (lr {train_cfg.lr_init:g} -> {train_cfg.lr_final:g}); best val trace-MAE "
          f"{res.best_val:.6g}; checkpoint {out / 'best.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    state, _, _ = unet_model.load_checkpoint(args.checkpoint)
    ds = _load_data(args).for_model(state.config.up_factor)
    if not any(p[args.split] for p in ds.splits.conditions.values()):
        raise data.SplitError(f"dataset has no {args.split!r} split")
    out = prepare_out(args.out, args.force)
    man = RunManifest("eval", sys.argv[1:])
    man.add_input("checkpoint", args.checkpoint)
    man.add_input("data", Path(args.data) / f"movie_{args.variant}")
    results = trainer.evaluate(state, ds, args.split, args.max_starts)
    metrics.report(results, out, svg=args.svg)
    if args.baseline:
        base = trainer.evaluate(state, ds, args.split, args.max_starts, baseline=True)
        metrics.report(base, out / "copy_last", svg=False)
    man.write(out)
    agg = metrics.aggregate(results)
    print("horizon,mae")
    for h, m in enumerate(agg.mae, start=1):
        print(f"{h},{m:.6g}")
    return EXIT_OK


def rf_report(cfg: unet_model.ModelConfig, extent) -> dict:
    return {
        "receptive_field": list(unet_model.receptive_field(cfg).as_tuple()),
        "receptive_field_native": list(unet_model.receptive_field(cfg, native=True).as_tuple()),
        "parameters": int(sum(int(np.prod(s)) for s in unet_model.param_shapes(cfg).values())),
        "input_extent": list(extent),
        "flops": int(unet_model.flops_estimate(cfg, extent)),
    }


def cmd_rf_report(args) -> int:
    cfg = config.load_model_config(args.model_config)
    rep = rf_report(cfg, args.extent)
    if args.json:
        print(json.dumps(rep, sort_keys=True))
    else:
        print("receptive field:        " + " x ".join(str(v) for v in rep["receptive_field"]))
        print("receptive field native: " + " x ".join(str(v) for v in rep["receptive_field_native"]))
        print(f"parameters:             {rep['parameters']}")
        print(f"forward FLOPS at {'x'.join(map(str, rep['input_extent']))}: {rep['flops']:.4g}")
    return EXIT_OK


def cmd_shard_plan(args) -> int:
    cfg = config.load_model_config(args.model_config)
    plan = shard.make_plan(args.dims, args.grid, cfg)
    text = json.dumps(plan.to_dict(), indent=2)
    if args.out:
        out = prepare_out(args.out, args.force)
        (out / "plan.json").write_text(text)
        man = RunManifest("shard-plan", sys.argv[1:], {"model_config": args.model_config})
        man.add_input("model_config", args.model_config)
        man.write(out)
    print(text)
    return EXIT_OK


# parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="volcast", description="Volumetric forecasting of neural activity.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_out(sp, required=True):
        sp.add_argument("--out", required=required)
        sp.add_argument("--force", action="store_true", help="overwrite a non-empty --out")

    s = sub.add_parser("synth-gen", help="generate a synthetic dataset")
    s.add_argument("--config")
    s.add_argument("--variants", type=_variants, default=synth.VARIANTS)
    s.add_argument("--seed", type=int)
    with_out(s)
    s.set_defaults(func=cmd_synth_gen)

    s = sub.add_parser("preprocess", help="dF/F, center crop and downsample a volume")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--variant", default="full")
    s.add_argument("--dff", action="store_true")
    s.add_argument("--percentile", type=float, default=5.0)
    s.add_argument("--window", type=int)
    s.add_argument("--epsilon", type=float, default=1e-3)
    s.add_argument("--crop", type=_crop, action="append", metavar="AXIS=SIZE")
    s.add_argument("--downsample", type=_triple, metavar="FX,FY,FZ")
    with_out(s)
    s.set_defaults(func=cmd_preprocess)

    def train_flags(sp):
        sp.add_argument("--data", required=True)
        sp.add_argument("--variant", default="full")
        sp.add_argument("--train-config")
        sp.add_argument("--steps", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--lr-final", type=float)
        sp.add_argument("--loss-kind", choices=trainer.LOSS_KINDS)
        sp.add_argument("--val-every", type=int)
        with_out(sp)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--model-config")
    s.add_argument("--resume", help="final.ckpt of an earlier run")
    train_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("finetune", help="fine-tune a pretrained checkpoint")
    s.add_argument("--from", dest="from_ckpt", required=True)
    s.add_argument("--model-config")
    train_flags(s)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--variant", default="full")
    s.add_argument("--split", default="test", choices=data.SPLIT_NAMES)
    s.add_argument("--max-starts", type=int)
    s.add_argument("--svg", action="store_true")
    s.add_argument("--baseline", action="store_true", help="also report the copy-last-frame baseline")
    with_out(s)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("rf-report", help="receptive field, parameters and FLOPS of a config")
    s.add_argument("--model-config", required=True, help="JSON file or preset: " + ", ".join(config.PRESETS))
    s.add_argument("--extent", type=_triple, default=(512, 288, 72))
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_rf_report)

    s = sub.add_parser("shard-plan", help="print a spatial sharding plan")
    s.add_argument("--dims", type=_triple, required=True)
    s.add_argument("--grid", type=_pair, required=True)
    s.add_argument("--model-config", required=True)
    with_out(s, required=False)
    s.set_defaults(func=cmd_shard_plan)
    return p


USAGE_ERRORS = (UsageError, config.ConfigFileError, unet_model.ConfigError, synth.SynthError,
                shard.PlanError, argparse.ArgumentTypeError)
DATA_ERRORS = (FileNotFoundError, volstore.VolumeError, segtrace.DimsMismatchError, preprocess.PreprocessError,
               data.SplitError, metrics.MetricError)
NUMERIC_ERRORS = (trainer.DivergenceError, FloatingPointError)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NUMERIC_ERRORS as exc:
        print(f"volcast: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except USAGE_ERRORS as exc:
        print(f"volcast: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        print(f"volcast: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
