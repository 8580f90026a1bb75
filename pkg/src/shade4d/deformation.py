"""Explicit canonical-space warp: a fixed linear read-out of tri-plane features.

The offset is delta_x = W (f_xy + f_yz + f_xz) + b with W and b frozen at
construction; all learning happens in the deformation planes and their time
modulation. Gradients flow through the warped coordinates into whatever is
sampled at x_c downstream.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .triplane import TriPlaneSet, triplane_features_frames


@dataclass
class DeformationHead:
    """Fixed (non-learned) projection: stored as buffers, never optimized."""

    w: Tensor  # (C, 3) so features @ w is a plain matmul
    b: Tensor  # (3,)

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.w.data).tobytes())
        h.update(np.ascontiguousarray(self.b.data).tobytes())
        return h.hexdigest()


def deformation_head_init(
    rng: np.random.Generator, channels: int, scale: float = 1.0
) -> DeformationHead:
    # small random projection keeps initial warps near identity
    limit = 0.01 / np.sqrt(channels) * scale
    w = rng.uniform(-limit, limit, size=(channels, 3))
    return DeformationHead(
        w=Tensor(w, requires_grad=False),
        b=Tensor(np.zeros(3), requires_grad=False),
    )


@dataclass
class DeformResult:
    delta_x: Tensor  # (N,3) unclamped offset, kept for logging
    x_c: Tensor  # (N,3) canonical point, clamped to world bounds


def deform_frames(
    tp_deform: TriPlaneSet,
    head: DeformationHead,
    x,
    ts,
    frame_ids=None,
    stacked_values=None,
) -> DeformResult:
    """Warp points from several frames into canonical space in one call."""
    f_xy, f_yz, f_xz = triplane_features_frames(
        tp_deform, x, ts, frame_ids=frame_ids, stacked_values=stacked_values
    )
    summed = f_xy + f_yz + f_xz
    delta = summed @ head.w + head.b
    xt = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    lo, hi = tp_deform.bounds.data
    x_c = ad.clamp(xt + delta, lo, hi)
    return DeformResult(delta_x=delta, x_c=x_c)


def deform(tp_deform: TriPlaneSet, head: DeformationHead, x, t: float) -> DeformResult:
    """Single-time warp of (N,3) points, per the explicit offset formula."""
    return deform_frames(tp_deform, head, x, [t], frame_ids=None)


def deform_identity(x) -> DeformResult:
    """Ablation path: points are taken to lie in canonical space already."""
    xt = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    return DeformResult(
        delta_x=Tensor(np.zeros_like(xt.data)),
        x_c=xt,
    )
