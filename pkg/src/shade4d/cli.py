"""Command-line interface.

Subcommands: gen, pretrain, train, render, eval, gradcheck.
Exit codes: 0 success, 1 usage error, 2 runtime or numerics error.
"""

from __future__ import annotations

import os

# single-threaded BLAS keeps float reductions bit-deterministic run to run;
# must be in place before numpy loads
for _v in (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
):
    os.environ.setdefault(_v, "1")

import argparse
import json
import sys
from pathlib import Path


class UsageError(Exception):
    """Bad command-line input; maps to exit code 1."""


def _parse_size(text: str):
    try:
        w, h = text.lower().split("x")
        w, h = int(w), int(h)
    except ValueError:
        raise UsageError(f"--size expects WxH (e.g. 64x64), got {text!r}")
    if w < 1 or h < 1:
        raise UsageError(f"--size dimensions must be positive, got {text!r}")
    return w, h


def _load_json(path, what: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"{what} {p} is not valid JSON: {e}")


def _load_config(args) -> "TrainConfig":
    from .config import apply_overrides, train_config_from_dict

    data = _load_json(args.config, "config file")
    overrides = {}
    for key in ("data_dir", "out_dir", "steps", "seed"):
        flag = getattr(args, key, None)
        if flag is not None:
            overrides[key] = flag
    try:
        return train_config_from_dict(apply_overrides(data, overrides))
    except (ValueError, TypeError) as e:
        raise UsageError(f"bad config: {e}")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="JSON config (TrainConfig schema)")
    p.add_argument("--data", dest="data_dir", help="override config data_dir")
    p.add_argument("--out", dest="out_dir", help="override config out_dir")
    p.add_argument("--steps", type=int, help="override config steps")
    p.add_argument("--seed", type=int, help="override config seed")


def cmd_gen(args) -> int:
    from . import scenegen as sg

    if args.spec == "toy":
        spec = sg.toy_scene_spec()
    else:
        try:
            spec = sg.spec_from_dict(_load_json(args.spec, "scene spec"))
        except (KeyError, ValueError, TypeError) as e:
            raise UsageError(f"bad scene spec: {e}")
    size = _parse_size(args.size)
    ds = sg.generate_dataset(
        spec,
        n_views=args.views,
        n_times=args.times,
        image_size=size,
        seed=args.seed,
        out_dir=args.out,
    )
    print(f"wrote {len(ds)} train frames (+test split) to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    from . import pipeline as pl

    cfg = _load_config(args)
    if not cfg.data_dir:
        raise UsageError("config has no data_dir (set it or pass --data)")
    _, metrics = pl.pretrain_diffusion(cfg)
    print(
        f"pretrained {cfg.pretrain_steps} steps: held-out diffusion loss "
        f"{metrics['probe_loss_start']:.3f} -> {metrics['probe_loss_end']:.3f}; "
        f"checkpoint in {cfg.out_dir}"
    )
    return 0


def cmd_train(args) -> int:
    from . import pipeline as pl
    from .checkpoint import model_from_checkpoint

    cfg = _load_config(args)
    if not cfg.data_dir:
        raise UsageError("config has no data_dir (set it or pass --data)")
    if args.no_deformation:
        cfg.no_deformation = True
    if args.no_diffusion:
        cfg.no_diffusion = True
    model = None
    if args.resume:
        if not Path(args.resume).exists():
            raise UsageError(f"checkpoint not found: {args.resume}")
        model, _ = model_from_checkpoint(args.resume)
    model, metrics = pl.train(cfg, model=model)
    last = metrics["steps"][-1]
    print(
        f"trained {cfg.steps} steps in {metrics['wall_seconds']:.0f}s; "
        f"final loss {last['total']:.5f} (rec {last['rec']:.5f}); "
        f"checkpoint in {cfg.out_dir}"
    )
    return 0


def cmd_render(args) -> int:
    from .checkpoint import model_from_checkpoint
    from .renderer import render_image, write_png
    from .scenegen import load_dataset

    if not Path(args.ckpt).exists():
        raise UsageError(f"checkpoint not found: {args.ckpt}")
    model, header = model_from_checkpoint(args.ckpt)
    data_dir = args.data_dir or header["config"].get("data_dir", "")
    if not data_dir or not Path(data_dir).exists():
        raise UsageError(
            "dataset directory not found (checkpoint config has "
            f"data_dir={data_dir!r}; pass --data to override)"
        )
    ds = load_dataset(data_dir, split=args.split)
    if not 0 <= args.pose < len(ds):
        raise UsageError(f"--pose {args.pose} outside [0, {len(ds) - 1}]")
    img = render_image(
        model,
        ds.camera(args.pose),
        args.time,
        n_samples=model.cfg.n_samples_per_ray,
        near=model.cfg.near,
        far=model.cfg.far,
        background=model.cfg.background,
    ).rgb
    write_png(args.out, img)
    print(f"rendered pose {args.pose} at t={args.time} -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    from . import pipeline as pl
    from .checkpoint import model_from_checkpoint
    from .config import train_config_from_dict
    from .scenegen import load_dataset, spec_from_dict

    if not Path(args.ckpt).exists():
        raise UsageError(f"checkpoint not found: {args.ckpt}")
    if not Path(args.data).exists():
        raise UsageError(f"dataset directory not found: {args.data}")
    model, header = model_from_checkpoint(args.ckpt)
    if args.view_sweep:
        cfg = train_config_from_dict(header["config"])
        spec = spec_from_dict(
            _load_json(Path(args.data) / "scene_spec.json", "scene spec")
        )
        train_ds = load_dataset(args.data, split="train")
        cam = train_ds.camera(0)
        rows = pl.view_sweep(
            cfg,
            spec,
            n_times=len(train_ds.times()),
            image_size=(cam.width, cam.height),
            workdir=Path(cfg.out_dir) / "sweep",
        )
        for row in rows:
            print(
                f"views {row['n_views']:3d}: PSNR {row['mean_psnr']:.2f} dB "
                f"SSIM {row['mean_ssim']:.4f}"
            )
        out = Path(cfg.out_dir) / "sweep" / "sweep.json"
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(rows, indent=2, sort_keys=True))
        print(f"wrote {out}")
        return 0
    ds = load_dataset(args.data, split=args.split)
    out = args.out or (Path(args.data) / f"eval_{args.split}.json")
    report = pl.evaluate(model, ds, out_path=out)
    print(
        f"{args.split}: mean PSNR {report['mean_psnr']:.2f} dB, "
        f"mean SSIM {report['mean_ssim']:.4f}, "
        f"temporal PSNR {report['temporal_psnr']}"
    )
    print(f"wrote {out}")
    return 0


def cmd_gradcheck(args) -> int:
    from . import pipeline as pl

    try:
        reports = pl.gradient_suite(
            seed=args.seed, max_coords=args.max_coords, modules=args.module
        )
    except ValueError as e:
        raise UsageError(str(e))
    failed = []
    for name, rep in reports.items():
        print(f"{name:20s} {rep}")
        if not rep.passed:
            failed.append(name)
    if failed:
        raise FloatingPointError(f"gradient check failed: {', '.join(failed)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shade4d",
        description="4D scene reconstruction: generate data, train, render, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("gen", help="render a synthetic multi-view dataset")
    p.add_argument("--spec", required=True, help="scene spec JSON, or 'toy'")
    p.add_argument("--views", type=int, required=True, help="training view count")
    p.add_argument("--times", type=int, required=True, help="timestep count")
    p.add_argument("--size", default="64x64", help="image size WxH")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("pretrain", help="stage one: diffusion-loss-only training")
    _add_config_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="stage two: joint optimization")
    _add_config_flags(p)
    p.add_argument("--no-deformation", action="store_true", help="ablate warping")
    p.add_argument("--no-diffusion", action="store_true", help="ablate latent path")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render one frame from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--time", type=float, required=True)
    p.add_argument("--pose", type=int, required=True, help="camera index in dataset")
    p.add_argument("--out", required=True, help="output PNG path")
    p.add_argument("--data", dest="data_dir", help="dataset dir (default: from ckpt)")
    p.add_argument("--split", default="train", choices=("train", "test"))
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="metrics over a dataset split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--out", help="metrics JSON path")
    p.add_argument(
        "--view-sweep",
        action="store_true",
        help="retrain at 3/5/10/20 views and report one row each",
    )
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument(
        "--module",
        action="append",
        help="check only this component (repeatable)",
    )
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-coords", type=int, default=12)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    if not getattr(args, "command", None):
        parser.print_help(sys.stderr)
        return 1
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 2
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
