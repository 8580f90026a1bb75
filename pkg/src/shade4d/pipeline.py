"""Loss assembly, Adam, the two-stage training loop, evaluation, and the
gradient verification suite.

Training batches are built from consecutive-time frame pairs (batch_size must
be even) so the temporal latent loss is always defined. Every step renders
rays from all batch frames in one fused query using per-frame refined planes,
then applies one Adam update over every trainable tensor; fixed buffers (the
deformation head, positional embeddings) never move.
"""

from __future__ import annotations

import json
import time as _time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import latentdiff as ld
from . import nn
from .autodiff import ShapeError, Tensor
from .checkpoint import save_checkpoint
from .config import TrainConfig, config_to_dict, train_config_from_dict
from .model import Shade4DModel, build_model
from .renderer import (
    composite,
    generate_rays,
    psnr,
    render_image,
    sample_points,
    ssim,
)
from .scenegen import SceneDataset, load_dataset


@dataclass
class LossWeights:
    lambda_rec: float = 1.0
    lambda_diff: float = 0.1
    lambda_temporal: float = 0.01

    def validate(self) -> None:
        if min(self.lambda_rec, self.lambda_diff, self.lambda_temporal) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lambda_rec <= 0:
            raise ValueError("lambda_rec must be positive")


def reconstruction_loss(pred, gt) -> Tensor:
    """Mean squared error over a matched pixel batch."""
    pred_t = pred if isinstance(pred, Tensor) else Tensor(np.asarray(pred, dtype=float))
    gt_arr = np.asarray(gt, dtype=float)
    if pred_t.shape != gt_arr.shape:
        raise ShapeError(
            f"reconstruction_loss: prediction {pred_t.shape} vs target {gt_arr.shape}"
        )
    d = pred_t - Tensor(gt_arr)
    return ad.mean(d * d)


def total_loss(parts: dict, w: LossWeights, no_diffusion: bool = False):
    """Weighted loss sum. Returns (total, logged parts as plain floats).

    Under no_diffusion the diffusion and temporal terms are forced to
    exactly 0 regardless of what was passed in.
    """
    w.validate()

    def value(x):
        return float(x.data) if isinstance(x, Tensor) else float(x)

    for name in ("rec", "diff", "temporal"):
        if name in parts and value(parts[name]) < 0:
            raise ValueError(f"loss part {name!r} is negative: {value(parts[name])}")
    rec = parts["rec"]
    if no_diffusion:
        total = w.lambda_rec * rec
        logged = {"rec": value(rec), "diff": 0.0, "temporal": 0.0}
    else:
        diff = parts.get("diff", 0.0)
        temporal = parts.get("temporal", 0.0)
        total = w.lambda_rec * rec + w.lambda_diff * diff + w.lambda_temporal * temporal
        logged = {"rec": value(rec), "diff": value(diff), "temporal": value(temporal)}
    logged["total"] = float(total.data) if isinstance(total, Tensor) else float(total)
    return total, logged


class Adam:
    """Adam over an ordered (name, tensor) list; order fixes determinism."""

    def __init__(self, named_params, lr=5e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.named = sorted(named_params, key=lambda kv: kv[0])
        self.params = [t for _, t in self.named]
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads) -> None:
        if len(grads) != len(self.params):
            raise ShapeError("Adam.step: gradient count mismatch")
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            update = (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.data = p.data - self.lr * update


# ---------------------------------------------------------------------------
# batching


def _lr_at(cfg: TrainConfig, step: int) -> float:
    """Learning rate for a given step under the configured schedule."""
    if cfg.lr_schedule == "constant" or cfg.steps <= 1:
        return cfg.learning_rate
    # half cosine down to a 5% floor; the tail of a short high-lr run
    # otherwise oscillates around the optimum instead of settling
    frac = step / (cfg.steps - 1)
    # plain float: a np.float64 lr would upcast float32 parameter updates
    return float(cfg.learning_rate * (0.05 + 0.95 * 0.5 * (1.0 + np.cos(np.pi * frac))))


class _FrameIndex:
    """Groups dataset frames by time for consecutive-pair sampling."""

    def __init__(self, ds: SceneDataset):
        self.times = sorted({fr.time for fr in ds.frames})
        self.by_time = {t: [] for t in self.times}
        for i, fr in enumerate(ds.frames):
            self.by_time[fr.time].append(i)

    def sample_pairs(self, rng: np.random.Generator, n_pairs: int):
        frames = []
        for _ in range(n_pairs):
            if len(self.times) >= 2:
                k = int(rng.integers(len(self.times) - 1))
                ta, tb = self.times[k], self.times[k + 1]
            else:
                ta = tb = self.times[0]
            group_a, group_b = self.by_time[ta], self.by_time[tb]
            j = int(rng.integers(len(group_a)))
            frames.append(group_a[j])
            frames.append(group_b[min(j, len(group_b) - 1)])
        return frames


class _ImageCache:
    def __init__(self, ds: SceneDataset):
        self.ds = ds
        self.cache = {}

    def flat(self, i: int) -> np.ndarray:
        if i not in self.cache:
            self.cache[i] = self.ds.load_image(i).reshape(-1, 3)
        return self.cache[i]


def _stack_refined(model: Shade4DModel, slot_groups: list) -> dict:
    """Per-group stacked (F,H,W,C) plane tensors from per-slot group dicts."""
    stacked = {}
    for name in slot_groups[0]:
        stacked[name] = [
            ad.concat(
                [
                    ad.reshape(g[name][i], (1,) + g[name][i].shape)
                    for g in slot_groups
                ],
                axis=0,
            )
            for i in range(3)
        ]
    return stacked


def train_step(
    model: Shade4DModel,
    ds: SceneDataset,
    index: _FrameIndex,
    images: _ImageCache,
    cfg: TrainConfig,
    rng: np.random.Generator,
    optimizer: Adam,
    step: int = 0,
):
    """One fused optimization step. Returns the logged loss parts.

    With refined_render on, rendering alternates by step parity: even steps
    composite the shared planes directly, odd steps composite the per-time
    refined copies. The raw steps keep the scene content in the planes and
    the motion in the deformation field; the refined steps train the decoder
    to correct, not to carry. Rendering only refined planes lets the
    per-time residuals memorize each training time and leaves the shared
    representation empty, which falls apart on undertrained times.
    """
    weights = LossWeights(cfg.lambda_rec, cfg.lambda_diff, cfg.lambda_temporal)
    slots = index.sample_pairs(rng, cfg.batch_size // 2)
    n_frames = len(slots)
    r, s = cfg.rays_per_frame, cfg.model.n_samples_per_ray

    origins, dirs, gts = [], [], []
    for f in slots:
        cam = ds.camera(f)
        pix = rng.integers(0, cam.height * cam.width, size=r)
        pixels = np.stack([pix // cam.width, pix % cam.width], axis=1)
        o, d = generate_rays(cam, pixels)
        origins.append(o)
        dirs.append(d)
        gts.append(images.flat(f)[pix])
    origins = np.concatenate(origins, axis=0)
    dirs = np.concatenate(dirs, axis=0)
    gt = np.concatenate(gts, axis=0)
    ts = np.array([ds.frames[f].time for f in slots])
    frame_ids = np.repeat(np.arange(n_frames), r * s)

    with ad.Tape() as tape:
        use_latent = not model.no_diffusion
        use_refined = use_latent and model.refined_render and step % 2 == 1
        groups = None
        zs = []
        if use_latent:
            planes = model.concat_planes()
            if use_refined:
                slot_groups = []
                for t in ts:
                    z, refined = ld.refine_planes(model.diffusion, planes, float(t))
                    zs.append(z)
                    slot_groups.append(model.split_planes(refined))
                groups = _stack_refined(model, slot_groups)
            else:
                # latents still feed L_diff and L_temporal on raw steps
                zs = [
                    ld.encode_planes(model.diffusion, planes, float(t)) for t in ts
                ]

        batch = sample_points(
            origins, dirs, cfg.model.near, cfg.model.far, s, cfg.stratified, rng
        )
        sigma, rgb, res = model.query_points(
            batch.flat_points(),
            np.repeat(dirs, s, axis=0),
            ts,
            frame_ids=frame_ids,
            groups=groups,
        )
        if model.no_deformation and not np.array_equal(
            res.x_c.data, batch.flat_points()
        ):
            raise AssertionError("no_deformation: warped points differ from inputs")
        sigma2 = ad.reshape(sigma, (n_frames * r, s))
        rgb3 = ad.reshape(rgb, (n_frames * r, s, 3))
        pixel, _, _ = composite(sigma2, rgb3, batch.deltas, cfg.model.background)
        parts = {"rec": reconstruction_loss(pixel, gt)}

        if use_latent:
            # latents are training data for the prior here: detach them (and
            # the schedule's plane stats) so the diffusion term trains the
            # denoiser and beta-scale MLP without pushing the scene toward
            # whatever is easiest to denoise
            planes_detached = [Tensor(p.data) for p in planes]
            _, alpha_bars = ld.scene_noise_scale(
                model.diffusion.scale_mlp, planes_detached, model.diffusion.base
            )
            z0 = Tensor(zs[int(rng.integers(len(zs)))].data)
            parts["diff"] = ld.diffusion_loss(
                z0,
                alpha_bars,
                lambda z_s, st: ld.denoiser_apply(model.diffusion.denoiser, z_s, st),
                rng,
            )
            t_parts = [
                ld.temporal_loss(zs[2 * i], zs[2 * i + 1])
                for i in range(n_frames // 2)
            ]
            acc = t_parts[0]
            for tp in t_parts[1:]:
                acc = acc + tp
            parts["temporal"] = acc * (1.0 / len(t_parts))

        total, logged = total_loss(parts, weights, model.no_diffusion)
        if not np.isfinite(total.data):
            raise ad.NonFiniteError(f"training loss is non-finite: {total.data}")
        grads = tape.gradient(total, optimizer.params)

    optimizer.step(grads)
    return logged


# ---------------------------------------------------------------------------
# training loops


def _named_trainable(model) -> list:
    return [(n, t) for n, t in nn.named_tensors(model) if t.requires_grad]


def _json_dump(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True))


def _probe_psnr(model: Shade4DModel, ds: SceneDataset, frame: int = 0) -> float:
    model.clear_cache()
    img = render_image(
        model,
        ds.camera(frame),
        ds.frames[frame].time,
        n_samples=model.cfg.n_samples_per_ray,
        near=model.cfg.near,
        far=model.cfg.far,
        background=model.cfg.background,
    ).rgb
    model.clear_cache()
    return psnr(img, ds.load_image(frame))


def _apply_flags(model: Shade4DModel, cfg: TrainConfig) -> None:
    model.no_deformation = cfg.no_deformation
    model.no_diffusion = cfg.no_diffusion
    model.refined_render = cfg.refined_render
    model.inference_sampling = cfg.inference_sampling
    model.ddim_steps = cfg.ddim_steps
    model.eval_seed = cfg.seed


def pretrain_diffusion(
    cfg: TrainConfig, ds: SceneDataset | None = None, model: Shade4DModel | None = None
):
    """Stage one: train the latent path alone with the diffusion loss.

    Returns (model, metrics). Scene planes are frozen; only latentdiff
    parameters move. The held-out probe is the last dataset time with a
    pinned noise draw, evaluated before and after.
    """
    cfg.validate()
    prev = ad.default_dtype().name
    prev_checks = ad.set_finite_checks(False)  # loss finiteness checked per step
    ad.set_default_dtype(cfg.dtype)
    try:
        if ds is None:
            ds = load_dataset(cfg.data_dir)
        if model is None:
            model = build_model(cfg.model, seed=cfg.seed)
        _apply_flags(model, cfg)
        times = sorted({fr.time for fr in ds.frames})
        probe_t = times[-1]
        train_times = times[:-1] if len(times) > 1 else times
        rng = np.random.default_rng([cfg.seed, 0xD1FF])
        optimizer = Adam(_named_trainable(model.diffusion), lr=cfg.learning_rate)

        def probe_loss() -> float:
            probe_rng = np.random.default_rng([cfg.seed, 0xBEEF])
            total = 0.0
            planes = model.concat_planes()
            z0 = ld.encode_planes(model.diffusion, planes, probe_t)
            _, alpha_bars = ld.scene_noise_scale(
                model.diffusion.scale_mlp, planes, model.diffusion.base
            )
            for _ in range(8):
                s = int(probe_rng.integers(model.diffusion.base.n_steps))
                eps = probe_rng.standard_normal(model.diffusion.latent_dim)
                total += float(
                    ld.diffusion_loss(
                        z0,
                        alpha_bars,
                        lambda z_s, st: ld.denoiser_apply(
                            model.diffusion.denoiser, z_s, st
                        ),
                        probe_rng,
                        s=s,
                        eps=eps,
                    ).data
                )
            return total / 8.0

        start = probe_loss()
        losses = []
        for step in range(cfg.pretrain_steps):
            t = train_times[int(rng.integers(len(train_times)))]
            with ad.Tape() as tape:
                planes = model.concat_planes()
                z0 = ld.encode_planes(model.diffusion, planes, float(t))
                _, alpha_bars = ld.scene_noise_scale(
                    model.diffusion.scale_mlp, planes, model.diffusion.base
                )
                loss = ld.diffusion_loss(
                    z0,
                    alpha_bars,
                    lambda z_s, st: ld.denoiser_apply(model.diffusion.denoiser, z_s, st),
                    rng,
                )
                if not np.isfinite(loss.data):
                    raise ad.NonFiniteError(f"pretrain loss non-finite at step {step}")
                grads = tape.gradient(loss, optimizer.params)
            optimizer.step(grads)
            losses.append(float(loss.data))
        metrics = {
            "probe_loss_start": start,
            "probe_loss_end": probe_loss(),
            "losses": losses,
        }
        out = Path(cfg.out_dir)
        save_checkpoint(
            out / "pretrain.ckpt", model, step=cfg.pretrain_steps,
            config=config_to_dict(cfg),
        )
        _json_dump(out / "pretrain_metrics.json", metrics)
        return model, metrics
    finally:
        ad.set_default_dtype(prev)
        ad.set_finite_checks(prev_checks)


def train(
    cfg: TrainConfig,
    ds: SceneDataset | None = None,
    model: Shade4DModel | None = None,
):
    """Stage two: joint optimization of every trainable tensor.

    Returns (model, metrics dict). Writes model_final.ckpt, periodic
    last_good.ckpt, and metrics.json under cfg.out_dir. Aborts on a
    non-finite loss after dumping the last finite parameter state.
    """
    cfg.validate()
    prev = ad.default_dtype().name
    prev_checks = ad.set_finite_checks(False)  # loss finiteness checked per step
    ad.set_default_dtype(cfg.dtype)
    try:
        if ds is None:
            ds = load_dataset(cfg.data_dir)
        if model is None:
            model = build_model(cfg.model, seed=cfg.seed)
        _apply_flags(model, cfg)
        head_sum_before = model.defo_head.checksum()
        index = _FrameIndex(ds)
        images = _ImageCache(ds)
        rng = np.random.default_rng([cfg.seed, 0x7EA1])
        optimizer = Adam(_named_trainable(model), lr=cfg.learning_rate)
        out = Path(cfg.out_dir)
        cfg_dict = config_to_dict(cfg)
        step_log = []
        probe_log = []
        t0 = _time.time()
        for step in range(cfg.steps):
            model.clear_cache()
            optimizer.lr = _lr_at(cfg, step)
            try:
                logged = train_step(
                    model, ds, index, images, cfg, rng, optimizer, step=step
                )
            except ad.NonFiniteError:
                save_checkpoint(
                    out / "crash_last_good.ckpt", model, step=step, config=cfg_dict
                )
                raise
            logged["step"] = step
            step_log.append(logged)
            if cfg.metric_every and (step + 1) % cfg.metric_every == 0:
                probe_log.append(
                    {"step": step + 1, "probe_psnr": _probe_psnr(model, ds)}
                )
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(
                    out / "last_good.ckpt", model, step=step + 1, config=cfg_dict
                )
        head_sum_after = model.defo_head.checksum()
        if head_sum_before != head_sum_after:
            raise AssertionError("fixed deformation head changed during training")
        metrics = {
            "steps": step_log,
            "probes": probe_log,
            "head_checksum": head_sum_after,
            "config": cfg_dict,
        }
        model.clear_cache()
        save_checkpoint(out / "model_final.ckpt", model, step=cfg.steps, config=cfg_dict)
        _json_dump(out / "metrics.json", metrics)
        # wall time goes in the returned dict only; the JSON must be
        # byte-identical across same-seed runs
        metrics = dict(metrics, wall_seconds=_time.time() - t0)
        return model, metrics
    finally:
        ad.set_default_dtype(prev)
        ad.set_finite_checks(prev_checks)


# ---------------------------------------------------------------------------
# evaluation


def evaluate(
    model: Shade4DModel,
    ds: SceneDataset,
    out_path=None,
) -> dict:
    """Render every frame of the dataset; report per-frame and mean metrics.

    Also reports a temporal-stability number (mean PSNR between consecutive
    rendered frames, unthresholded)."""
    if len(ds) == 0:
        raise ValueError("evaluate: dataset has no frames")
    rows = []
    rendered = []
    for i in range(len(ds)):
        model.clear_cache()
        img = render_image(
            model,
            ds.camera(i),
            ds.frames[i].time,
            n_samples=model.cfg.n_samples_per_ray,
            near=model.cfg.near,
            far=model.cfg.far,
            background=model.cfg.background,
        ).rgb
        gt = ds.load_image(i)
        rows.append(
            {
                "index": i,
                "time": ds.frames[i].time,
                "psnr": psnr(img, gt),
                "ssim": ssim(img, gt),
            }
        )
        rendered.append(img)
    finite = [r["psnr"] for r in rows if np.isfinite(r["psnr"])]
    temporal = [
        psnr(a, b) for a, b in zip(rendered, rendered[1:]) if a.shape == b.shape
    ]
    temporal = [p for p in temporal if np.isfinite(p)]
    report = {
        "frames": rows,
        "mean_psnr": float(np.mean(finite)) if finite else float("inf"),
        "mean_ssim": float(np.mean([r["ssim"] for r in rows])),
        "temporal_psnr": float(np.mean(temporal)) if temporal else None,
        "n_frames": len(rows),
    }
    if out_path is not None:
        _json_dump(out_path, report)
    return report


def view_sweep(
    cfg: TrainConfig,
    scene_spec,
    n_times: int,
    image_size: int,
    views=(3, 5, 10, 20),
    workdir=None,
) -> list:
    """Retrain from scratch at several view counts; one metrics row each.

    All settings share the same held-out test cameras (the generator draws
    them from a view-count-independent stream)."""
    from . import scenegen as sg

    workdir = Path(workdir if workdir is not None else Path(cfg.out_dir) / "sweep")
    rows = []
    for v in views:
        vdir = workdir / f"views_{v}"
        sg.generate_dataset(
            scene_spec,
            n_views=v,
            n_times=n_times,
            image_size=image_size,
            seed=cfg.seed,
            out_dir=vdir,
        )
        run_cfg = train_config_from_dict(config_to_dict(cfg))
        run_cfg.data_dir = str(vdir)
        run_cfg.out_dir = str(vdir / "run")
        model, _ = train(run_cfg)
        test_ds = load_dataset(vdir, split="test")
        report = evaluate(model, test_ds, out_path=vdir / "run" / "eval.json")
        rows.append({"n_views": v, **{k: report[k] for k in ("mean_psnr", "mean_ssim")}})
    return rows


# ---------------------------------------------------------------------------
# gradient verification suite


def gradient_suite(seed: int = 0, max_coords: int = 12, modules=None) -> dict:
    """Finite-difference checks for every trainable component.

    Builds a tiny model, wires a probe loss that exercises rendering,
    diffusion, and the temporal term, and checks one representative tensor
    per component. Returns {component: GradCheckReport}."""
    from .config import ModelConfig

    cfg = ModelConfig(
        plane_resolution=32,
        defo_channels=4,
        sh_order=1,
        density_channels=4,
        patch_size=16,
        token_dim=32,
        latent_dim=24,
        denoiser_width=24,
        diffusion_steps=40,
        n_samples_per_ray=5,
    )
    model = build_model(cfg, seed=seed)
    rng = np.random.default_rng([seed, 0x6AAD])
    # move zero-initialized layers off their degenerate point so every path
    # carries gradient signal
    model.diffusion.decoder.out.w.data = rng.normal(
        0.0, 0.05, size=model.diffusion.decoder.out.w.shape
    )
    model.sh_head.mlp.layers[-1].w.data = rng.normal(
        0.0, 0.05, size=model.sh_head.mlp.layers[-1].w.shape
    )
    for maps in (model.defo.modulation.scale_maps, model.defo.modulation.shift_maps):
        for lin in maps:
            lin.w.data = rng.normal(0.0, 0.05, size=lin.w.shape)
    model.diffusion.scale_mlp.layers[-1].w.data = rng.normal(
        0.0, 0.2, size=model.diffusion.scale_mlp.layers[-1].w.shape
    )

    from .scenegen import _orbit_camera
    from .renderer import Camera

    cam = Camera(fov_x=0.8, width=3, height=2, c2w=_orbit_camera(0.4, 0.3, 4.0))
    origins, dirs = generate_rays(cam)
    batch = sample_points(origins, dirs, cfg.near, cfg.far, cfg.n_samples_per_ray)
    target = rng.uniform(0.0, 1.0, size=(batch.n_rays, 3))
    eps_draw = rng.standard_normal(cfg.latent_dim)
    s_draw = 17
    t_a, t_b = 0.3, 0.7

    def probe_loss() -> Tensor:
        from .renderer import composite

        planes = model.concat_planes()
        z_a, refined = ld.refine_planes(model.diffusion, planes, t_a)
        z_b = ld.encode_planes(model.diffusion, planes, t_b)
        groups = model.split_planes(refined)
        sigma, rgb, _ = model.query_points(
            batch.flat_points(),
            np.repeat(batch.dirs, batch.n_samples, axis=0),
            t_a,
            groups=groups,
        )
        sigma2 = ad.reshape(sigma, (batch.n_rays, batch.n_samples))
        rgb3 = ad.reshape(rgb, (batch.n_rays, batch.n_samples, 3))
        pixel, _, _ = composite(sigma2, rgb3, batch.deltas, cfg.background)
        rec = reconstruction_loss(pixel, target)
        _, alpha_bars = ld.scene_noise_scale(
            model.diffusion.scale_mlp, planes, model.diffusion.base
        )
        diff = ld.diffusion_loss(
            z_a,
            alpha_bars,
            lambda z_s, st: ld.denoiser_apply(model.diffusion.denoiser, z_s, st),
            rng,
            s=s_draw,
            eps=eps_draw,
        )
        # light weights keep |loss| near 1 so central differences retain
        # enough digits for the 1e-5 gate
        return rec + 0.01 * diff + 0.01 * ld.temporal_loss(z_a, z_b)

    targets = {
        "sh_planes": (model.sh.planes[0], "values"),
        "density_planes": (model.dens_head.field.planes[0], "values"),
        "deformation_planes": (model.defo.planes[0], "values"),
        "time_modulation": (model.defo.modulation.shift_maps[0], "w"),
        "attention_mlp": (model.sh_head.mlp.layers[-1], "w"),
        "encoder": (model.diffusion.encoder.blocks[0].attn.wq, "w"),
        "decoder": (model.diffusion.decoder.out, "w"),
        "denoiser": (model.diffusion.denoiser.blocks[0].lin, "w"),
        "beta_scale_mlp": (model.diffusion.scale_mlp.layers[0], "w"),
    }
    if modules is not None:
        unknown = sorted(set(modules) - set(targets))
        if unknown:
            raise ValueError(
                f"unknown gradcheck module(s): {', '.join(unknown)}; "
                f"choose from {', '.join(sorted(targets))}"
            )
        targets = {k: v for k, v in targets.items() if k in modules}

    # small eps keeps the step inside one bilinear texel cell (the loss is
    # only piecewise smooth in the deformation planes); the floor gates
    # coordinates whose gradients sit below the central-difference noise
    # |f| * machine_eps / fd_eps (see finite_diff_check)
    fd_eps, tol = 3e-6, 1e-5
    f0 = abs(float(probe_loss().data))
    floor = 10.0 * f0 * np.finfo(np.float64).eps / fd_eps / tol

    reports = {}
    for name, (owner, attr) in targets.items():
        original = getattr(owner, attr)

        def f(p, owner=owner, attr=attr):
            setattr(owner, attr, p)
            return probe_loss()

        reports[name] = ad.finite_diff_check(
            f,
            original,
            eps=fd_eps,
            tol=tol,
            max_coords=max_coords,
            rng=np.random.default_rng([seed, 0xC0DE]),
            floor=floor,
        )
        setattr(owner, attr, original)
    return reports
