"""Throwaway calibration: 4 ablation arms at the desk config, 5k steps each.

Writes calib/progress.json incrementally. Not part of the package.
"""

import json
import time
from pathlib import Path

from shade4d import pipeline as pl
from shade4d import scenegen as sg
from shade4d.config import desk_train_config

ROOT = Path("/root/pkg/calib")
DATA = ROOT / "data"
PROGRESS = ROOT / "progress.json"

ARMS = [
    ("full", dict(no_deformation=False, no_diffusion=False)),
    ("no_diff", dict(no_deformation=False, no_diffusion=True)),
    ("no_defo", dict(no_deformation=True, no_diffusion=False)),
    ("no_both", dict(no_deformation=True, no_diffusion=True)),
]


def save(progress):
    PROGRESS.write_text(json.dumps(progress, indent=1))


def main():
    if not (DATA / "scene_spec.json").exists():
        sg.generate_dataset(
            sg.toy_scene_spec(), n_views=5, n_times=8, image_size=64, seed=7,
            out_dir=DATA,
        )
    train_ds = sg.load_dataset(DATA, split="train")
    test_ds = sg.load_dataset(DATA, split="test")
    progress = json.loads(PROGRESS.read_text()) if PROGRESS.exists() else {}
    progress = {}  # fresh round
    save(progress)

    for name, flags in ARMS:
        t0 = time.time()
        cfg = desk_train_config()
        cfg.data_dir = str(DATA)
        cfg.out_dir = str(ROOT / name)
        cfg.seed = 7
        cfg.steps = 5000
        cfg.pretrain_steps = 400
        cfg.metric_every = 500
        cfg.checkpoint_every = 0
        for k, v in flags.items():
            setattr(cfg, k, v)

        model = None
        if not cfg.no_diffusion:
            model, pre = pl.pretrain_diffusion(cfg, train_ds)
            print(name, "pretrain probe", pre["probe_loss_start"], "->",
                  pre["probe_loss_end"], flush=True)
        model, metrics = pl.train(cfg, train_ds, model=model)
        report = pl.evaluate(model, test_ds)
        row = {
            "test_psnr": round(report["mean_psnr"], 3),
            "test_ssim": round(report["mean_ssim"], 4),
            "train_probe_curve": [round(p["probe_psnr"], 2) for p in metrics["probes"]],
            "minutes": round((time.time() - t0) / 60, 1),
        }
        progress[name] = row
        save(progress)
        print(name, row, flush=True)


if __name__ == "__main__":
    main()
