"""Full scene model: deformation planes with a fixed linear head, canonical
SH radiance planes with view/time attention, a density field, and the latent
refinement path. Exposes the query(batch, t) protocol the renderer consumes,
plus batched per-frame queries for training.

Rendering wiring: with refinement enabled, the three per-orientation feature
planes (deformation | SH | density channels concatenated) are encoded to a
latent, residual-decoded, split back into groups, and sampled from. Ablation
flags bypass the deformation warp and the refinement path entirely.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import latentdiff as ld
from .autodiff import Tensor
from .config import ModelConfig
from .deformation import (
    DeformationHead,
    deform_frames,
    deform_identity,
    deformation_head_init,
)
from .radiance import (
    AttentionHead,
    DensityHead,
    attention_head_init,
    attention_weights,
    density,
    density_head_init,
    sh_basis,
    sh_coefficients,
    sh_color_from_parts,
)
from .triplane import TriPlaneSet, VoxelGrid, triplane_init, voxel_init


@dataclass
class Shade4DModel:
    cfg: ModelConfig
    defo: TriPlaneSet
    defo_head: DeformationHead
    sh: TriPlaneSet
    sh_head: AttentionHead
    dens_head: DensityHead
    diffusion: ld.LatentDiffusionParams
    no_deformation: bool = False
    no_diffusion: bool = False
    refined_render: bool = True
    inference_sampling: bool = False
    ddim_steps: int = 10
    eval_seed: int = 0
    _refine_cache: dict = field(default_factory=dict, repr=False)

    # -- construction --------------------------------------------------

    @property
    def group_slices(self):
        """Channel ranges of (defo, sh, density) inside a concatenated plane."""
        cd = self.cfg.defo_channels
        cs = self.cfg.sh_channels
        slices = {"defo": (0, cd), "sh": (cd, cd + cs)}
        if self.cfg.density_field == "triplane":
            slices["density"] = (cd + cs, cd + cs + self.cfg.density_channels)
        return slices

    def concat_planes(self):
        """Three (R, R, C_total) tensors feeding the tokenizer."""
        groups = [self.defo, self.sh]
        if self.cfg.density_field == "triplane":
            groups.append(self.dens_head.field)
        return [
            ad.concat([g.planes[i].values for g in groups], axis=2) for i in range(3)
        ]

    def split_planes(self, planes):
        """Inverse of concat_planes: per-group plane value lists."""
        out = {}
        for name, (lo, hi) in self.group_slices.items():
            out[name] = [ad.getitem(p, (Ellipsis, slice(lo, hi))) for p in planes]
        return out

    # -- refinement ----------------------------------------------------

    def refined_groups(self, t: float, rng: np.random.Generator | None = None):
        """(z, {group: plane list}) after the latent refinement path.

        Differentiable encode/decode by default; with rng given and
        inference_sampling set, the latent is partially noised and
        DDIM-denoised before decoding (inference behavior).
        """
        planes = self.concat_planes()
        if self.inference_sampling and rng is not None:
            z, refined = ld.refine_planes_sampled(
                self.diffusion, planes, t, rng, self.ddim_steps
            )
        else:
            z, refined = ld.refine_planes(self.diffusion, planes, t)
        return z, self.split_planes(refined)

    def _eval_refined(self, t: float):
        key = (round(float(t), 12), self.inference_sampling)
        if key not in self._refine_cache:
            self._refine_cache.clear()  # frames are rendered one at a time
            rng = np.random.default_rng([self.eval_seed, int(round(t * 1e9))])
            self._refine_cache[key] = self.refined_groups(t, rng)[1]
        return self._refine_cache[key]

    def clear_cache(self) -> None:
        self._refine_cache.clear()

    # -- queries ---------------------------------------------------------

    def query_points(
        self,
        points: np.ndarray,
        dirs: np.ndarray,
        ts,
        frame_ids=None,
        groups=None,
    ):
        """Density and color for flat sample points.

        points/dirs: (N,3); ts: scalar or (F,) with frame_ids (N,) mapping
        samples to frames; groups: optional refined plane values, as returned
        by refined_groups (single-frame) or stacked (F,H,W,C) per group for
        per-frame refinement.
        """
        x = points if isinstance(points, Tensor) else Tensor(np.asarray(points))
        g = groups or {}
        if self.no_deformation:
            res = deform_identity(x)
        else:
            res = deform_frames(
                self.defo, self.defo_head, x, ts, frame_ids, g.get("defo")
            )
        sigma = density(
            self.dens_head, res.x_c, frame_ids=frame_ids, stacked_values=g.get("density")
        )
        c_lm = sh_coefficients(
            self.sh, res.x_c, ts, frame_ids=frame_ids, stacked_values=g.get("sh")
        )
        alpha = attention_weights(self.sh_head, dirs, ts, frame_ids=frame_ids)
        basis = sh_basis(dirs, self.sh_head.order)
        rgb = sh_color_from_parts(c_lm, alpha, basis)
        return sigma, rgb, res

    def query(self, batch, t: float):
        """Renderer protocol: (sigma (R,S), rgb (R,S,3)) for one time."""
        r, s = batch.n_rays, batch.n_samples
        pts = batch.flat_points()
        dirs = np.repeat(batch.dirs, s, axis=0)
        groups = None
        if self.refined_render and not self.no_diffusion:
            groups = self._eval_refined(t)
        sigma, rgb, _ = self.query_points(pts, dirs, t, groups=groups)
        return ad.reshape(sigma, (r, s)), ad.reshape(rgb, (r, s, 3))


def build_model(cfg: ModelConfig, seed: int = 0) -> Shade4DModel:
    cfg.validate()
    rng = np.random.default_rng([seed, 0x51AD])
    defo = triplane_init(rng, cfg.plane_resolution, cfg.defo_channels, modulated=True)
    sh_set = triplane_init(rng, cfg.plane_resolution, cfg.sh_channels)
    if cfg.density_field == "voxel":
        dens_field = voxel_init(rng, cfg.voxel_resolution, cfg.density_channels)
    else:
        dens_field = triplane_init(rng, cfg.plane_resolution, cfg.density_channels)
    return Shade4DModel(
        cfg=cfg,
        defo=defo,
        defo_head=deformation_head_init(rng, cfg.defo_channels),
        sh=sh_set,
        sh_head=attention_head_init(rng, cfg.sh_order, cfg.attention_hidden),
        dens_head=density_head_init(rng, dens_field),
        diffusion=ld.latentdiff_init(
            rng,
            cfg.plane_resolution,
            cfg.token_channels,
            cfg.patch_size,
            cfg.token_dim,
            cfg.latent_dim,
            cfg.denoiser_width,
            cfg.diffusion_steps,
            cfg.inject_alpha_bar,
        ),
    )
