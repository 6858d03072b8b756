"""Batch entry points: dataset generation, training, sampling, evaluation,
and the gradient check.

Every command resolves its configuration as defaults < config file < explicit
command-line flags, and persists the fully resolved config next to its outputs
so a run is reproducible from (config.json, seed) alone.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import figures, metrics
from .checkpoint import load_checkpoint, save_checkpoint
from .data import BoxPrompt, GenConfig, gen_synthetic, load_dataset, save_dataset
from .losses import corrupt_dice_grad
from .model import ModelConfig, ProbSegModel
from .training import TrainConfig, fit, grad_check, write_evals_csv, write_history_csv

GEN_DEFAULTS = {
    "n": 200,
    "height": 64,
    "width": 64,
    "annotators": 4,
    "p_miss": 0.1,
    "spread": 0.25,
    "noise_sigma": 0.05,
    "jitter": 2,
    "seed": 0,
}

TRAIN_DEFAULTS = {
    "channels": 64,
    "downscale": 8,
    "latent_dim": 6,
    "heads": 4,
    "freqs": 6,
    "dropout_p": 0.5,
    "beta": 10.0,
    "lr": 1e-4,
    "steps": 1500,
    "batch_size": 16,
    "freeze_decoder": False,
    "eval_every": 0,
    "seed": 0,
}

SAMPLE_DEFAULTS = {"m": 4, "seed": 0}

EVAL_DEFAULTS = {"split": "test", "m": 16, "mode": "prior", "baseline": None, "seed": 0}

GRADCHECK_DEFAULTS = {"seed": 0, "single_precision": False, "corrupt_dice_grad": 1.0}


def _resolve(defaults: dict, config_path: str | None, cli: dict) -> dict:
    merged = dict(defaults)
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        file_cfg = json.loads(path.read_text())
        unknown = sorted(set(file_cfg) - set(defaults))
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        merged.update(file_cfg)
    merged.update({k: v for k, v in cli.items() if v is not None})
    return merged


def _write_resolved(out_dir: Path, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.json", "w") as f:
        json.dump(resolved, f, indent=1, sort_keys=True)
        f.write("\n")


def _cli_values(args: argparse.Namespace, keys: dict) -> dict:
    return {k: getattr(args, k) for k in keys}


# -- commands ----------------------------------------------------------------


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = _resolve(GEN_DEFAULTS, args.config, _cli_values(args, GEN_DEFAULTS))
    gen_cfg = GenConfig(
        n_samples=cfg["n"],
        height=cfg["height"],
        width=cfg["width"],
        annotators=cfg["annotators"],
        p_miss=cfg["p_miss"],
        threshold_spread=cfg["spread"],
        noise_sigma=cfg["noise_sigma"],
        box_jitter=cfg["jitter"],
    )
    bundle = gen_synthetic(gen_cfg, cfg["seed"])
    out = Path(args.out)
    _write_resolved(out, cfg)
    save_dataset(bundle, out)
    counts = {name: len(ds) for name, ds in bundle.splits.items()}
    print(f"wrote {sum(counts.values())} samples to {out} (splits: {counts})")
    return 0


def _load_split_or_fail(data_dir: str, split: str):
    ds = load_dataset(data_dir, split=split)
    return ds


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _resolve(TRAIN_DEFAULTS, args.config, _cli_values(args, TRAIN_DEFAULTS))
    bundle = load_dataset(args.data)
    if "train" not in bundle.splits:
        raise ValueError(f"dataset at {args.data} has no train split")
    ds_train = bundle["train"]
    ds_val = bundle.splits.get("val")
    h, w = ds_train.samples[0].shape

    model_cfg = ModelConfig(
        height=h,
        width=w,
        channels=cfg["channels"],
        downscale=cfg["downscale"],
        latent_dim=cfg["latent_dim"],
        num_heads=cfg["heads"],
        num_freqs=cfg["freqs"],
        dropout_p=cfg["dropout_p"],
    )
    train_cfg = TrainConfig(
        beta=cfg["beta"],
        lr=cfg["lr"],
        steps=cfg["steps"],
        batch_size=cfg["batch_size"],
        seed=cfg["seed"],
        freeze_decoder=cfg["freeze_decoder"],
        eval_every=cfg["eval_every"],
    )
    out = Path(args.out)
    _write_resolved(out, cfg)

    model = ProbSegModel(model_cfg, seed=train_cfg.seed)
    model, history = fit(model, ds_train, ds_val, train_cfg)

    save_checkpoint(out / "model.ckpt", model)
    write_history_csv(history, out / "history.csv")
    if history.evals:
        write_evals_csv(history, out / "evals.csv")
    figures.save_loss_curve(history, out / "loss_curve.png")
    last = history.steps[-1]
    print(
        f"trained {train_cfg.steps} steps; final total={last.total:.4f} "
        f"(bce={last.bce:.4f} dice={last.dice:.4f} kl={last.kl:.4f})"
    )
    print(f"checkpoint: {out / 'model.ckpt'}")
    return 0


def _parse_box(text: str) -> BoxPrompt:
    parts = text.split(",")
    if len(parts) != 4:
        raise ValueError(f"box must be 'x1,y1,x2,y2', got '{text}'")
    return BoxPrompt(*(int(p) for p in parts))


def _load_image_file(path: str) -> np.ndarray:
    arr = np.asarray(Image.open(path))
    if arr.dtype == np.uint16:
        return (arr.astype(np.float32) / np.float32(65535.0)).astype(np.float32)
    if arr.dtype == np.uint8:
        return (arr.astype(np.float32) / np.float32(255.0)).astype(np.float32)
    raise ValueError(f"unsupported image dtype {arr.dtype} in {path}")


def cmd_sample(args: argparse.Namespace) -> int:
    cfg = _resolve(SAMPLE_DEFAULTS, args.config, _cli_values(args, SAMPLE_DEFAULTS))
    model = load_checkpoint(args.checkpoint)

    annotations = None
    if args.image is not None:
        if args.box is None:
            raise ValueError("--image requires --box x1,y1,x2,y2")
        image = _load_image_file(args.image)
        box = _parse_box(args.box)
    elif args.data is not None and args.id is not None:
        bundle = load_dataset(args.data)
        matches = [s for s in bundle.all_samples() if s.sample_id == args.id]
        if not matches:
            raise ValueError(f"sample id '{args.id}' not found in {args.data}")
        sample = matches[0]
        image, box, annotations = sample.image, sample.box, sample.annotations
        if args.box is not None:
            box = _parse_box(args.box)
    else:
        raise ValueError("need either --image + --box or --data + --id")

    box.validate(model.cfg.height, model.cfg.width)
    out = Path(args.out)
    resolved = dict(cfg)
    resolved["box"] = box.as_list()
    _write_resolved(out, resolved)

    masks = model.forward_sample(image, box, cfg["m"], cfg["seed"])
    for i, mask in enumerate(masks):
        Image.fromarray(mask.astype(np.uint8) * 255).save(out / f"sample_{i:02d}.png")
    figures.save_sample_grid(image, box, annotations, masks, out / "grid.png")
    print(f"wrote {len(masks)} masks and grid.png to {out}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _resolve(EVAL_DEFAULTS, args.config, _cli_values(args, EVAL_DEFAULTS))
    model = load_checkpoint(args.checkpoint)
    ds = _load_split_or_fail(args.data, cfg["split"])
    out = Path(args.out)
    _write_resolved(out, cfg)

    report = metrics.evaluate(
        model, ds, m=cfg["m"], seed=cfg["seed"], mode=cfg["mode"], baseline=cfg["baseline"]
    )
    report.save(out / "report.json")
    agg = report.aggregates
    print(
        f"split={cfg['split']} mode={cfg['mode']} M={cfg['m']} n={len(report.per_sample)}  "
        f"ged2={agg['ged2']:.4f} dsc={agg['dsc']:.4f} iou={agg['iou']:.4f} "
        f"diversity={agg['diversity']:.4f}"
    )
    if report.comparison is not None:
        c = report.comparison
        print(
            f"vs baseline '{c['baseline']}': baseline_ged2={c['baseline_ged2_mean']:.4f} "
            f"t={c['t_stat']:.4f} p={c['p_value']:.4g}"
        )
    print(f"report: {out / 'report.json'}")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    cfg = _resolve(GRADCHECK_DEFAULTS, args.config, _cli_values(args, GRADCHECK_DEFAULTS))
    tiny = ModelConfig(
        height=16, width=16, channels=8, downscale=8,
        latent_dim=2, num_heads=2, num_freqs=4,
    )
    model = ProbSegModel(tiny, seed=cfg["seed"])
    bundle = gen_synthetic(
        GenConfig(n_samples=1, height=16, width=16, box_jitter=1), seed=cfg["seed"]
    )
    sample = bundle["train"].samples[0]

    # float32 finite differences are dominated by forward-pass round-off
    # (measured ~2e-2), so that mode only catches gross gradient errors.
    if cfg["single_precision"]:
        threshold, step_size = 1e-1, 1e-2
    else:
        threshold, step_size = 1e-4, 1e-3

    with corrupt_dice_grad(cfg["corrupt_dice_grad"]):
        err = grad_check(
            model, sample, step_size=step_size, noise_seed=cfg["seed"],
            double_precision=not cfg["single_precision"],
        )
    precision = "float32" if cfg["single_precision"] else "float64"
    print(f"max relative gradient error ({precision}): {err:.3e} (threshold {threshold:g})")
    if err >= threshold:
        print("gradient check FAILED", file=sys.stderr)
        return 1
    return 0


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="probseg",
        description="Prompt-conditioned probabilistic segmentation, desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic multi-annotator dataset")
    g.add_argument("--config", help="JSON config file (flags override it)")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--n", type=int)
    g.add_argument("--height", type=int)
    g.add_argument("--width", type=int)
    g.add_argument("--annotators", type=int)
    g.add_argument("--p-miss", dest="p_miss", type=float)
    g.add_argument("--spread", type=float, help="annotator threshold spread")
    g.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    g.add_argument("--jitter", type=int, help="box jitter in pixels")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a generated dataset")
    t.add_argument("--config")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="run output directory")
    t.add_argument("--channels", type=int)
    t.add_argument("--downscale", type=int)
    t.add_argument("--latent-dim", dest="latent_dim", type=int)
    t.add_argument("--heads", type=int)
    t.add_argument("--freqs", type=int)
    t.add_argument("--dropout-p", dest="dropout_p", type=float)
    t.add_argument("--beta", type=float)
    t.add_argument("--lr", type=float)
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--freeze-decoder", dest="freeze_decoder",
                   action=argparse.BooleanOptionalAction, default=None)
    t.add_argument("--eval-every", dest="eval_every", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw segmentation samples from a checkpoint")
    s.add_argument("--config")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--data", help="dataset directory (with --id)")
    s.add_argument("--id", help="sample id from the dataset manifest")
    s.add_argument("--image", help="standalone image file (with --box)")
    s.add_argument("--box", help="x1,y1,x2,y2 prompt box")
    s.add_argument("--m", type=int, help="number of samples to draw")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="evaluate a checkpoint with uncertainty metrics")
    e.add_argument("--config")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--split", choices=("train", "val", "test"))
    e.add_argument("--m", type=int, help="samples per image")
    e.add_argument("--mode", choices=metrics.SAMPLING_MODES)
    e.add_argument("--baseline", choices=metrics.SAMPLING_MODES)
    e.add_argument("--seed", type=int)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of the loss gradients")
    c.add_argument("--config")
    c.add_argument("--seed", type=int)
    c.add_argument("--single-precision", dest="single_precision",
                   action=argparse.BooleanOptionalAction, default=None)
    c.add_argument("--corrupt-dice-grad", dest="corrupt_dice_grad", type=float,
                   help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    torch.use_deterministic_algorithms(True)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
