"""Canonical appearance and density.

Color is a spherical-harmonic expansion whose bands are re-weighted by a
small MLP of view direction and time (attention over SH bands); density is
a linear read-out of a separate canonical field through a softplus. SH
values come from the scaled associated-Legendre recurrence, so no
hard-coded polynomial table is needed up to order 10.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import MlpParams, mlp_apply, mlp_init
from .triplane import (
    GAMMA_DIM,
    TriPlaneSet,
    VoxelGrid,
    gamma_embed_batch,
    sample_voxel,
    triplane_features_frames,
)

MAX_SH_ORDER = 10


def n_bands(order: int) -> int:
    return (order + 1) ** 2


def _normalize_dirs(d: np.ndarray) -> np.ndarray:
    d = np.atleast_2d(np.asarray(d, dtype=ad.default_dtype()))
    norms = np.linalg.norm(d, axis=1, keepdims=True)
    if np.any(norms == 0) or not np.isfinite(norms).all():
        raise ValueError("direction vectors must be nonzero and finite")
    return d / norms


def sh_basis(d, order: int) -> np.ndarray:
    """Real spherical harmonics Y_lm of unit directions, bands l=0..order.

    Band layout is l-major, m from -l to l. Uses the sin(theta)-scaled
    Legendre recurrence: the s^m factors of P_l^m and of cos/sin(m*phi)
    cancel, so poles need no special casing. Condon-Shortley phase is kept
    (matches the sign convention of the usual radiance-field SH tables).
    """
    if order < 0 or order > MAX_SH_ORDER:
        raise ValueError(f"sh_basis: order must be in [0, {MAX_SH_ORDER}]")
    d = _normalize_dirs(d)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    n = d.shape[0]
    out = np.empty((n, n_bands(order)))

    # A_m = s^m cos(m phi), B_m = s^m sin(m phi), built from x,y directly
    a = np.ones((order + 1, n))
    b = np.zeros((order + 1, n))
    for m in range(1, order + 1):
        a[m] = x * a[m - 1] - y * b[m - 1]
        b[m] = x * b[m - 1] + y * a[m - 1]

    # q[l][m] = P_l^m(z) / s^m (finite everywhere)
    q = [[None] * (order + 1) for _ in range(order + 1)]
    q[0][0] = np.ones(n)
    for m in range(order + 1):
        if m > 0:
            # (-1)^m (2m-1)!!
            q[m][m] = np.full(n, (-1.0) ** m * math.prod(range(1, 2 * m, 2)))
        if m + 1 <= order:
            q[m + 1][m] = z * (2 * m + 1) * q[m][m]
        for l in range(m + 2, order + 1):
            q[l][m] = ((2 * l - 1) * z * q[l - 1][m] - (l + m - 1) * q[l - 2][m]) / (
                l - m
            )

    for l in range(order + 1):
        base = l * l + l  # index of m=0 within the flat layout
        for m in range(l + 1):
            k = math.sqrt(
                (2 * l + 1)
                / (4.0 * math.pi)
                * (math.factorial(l - m) / math.factorial(l + m))
            )
            if m == 0:
                out[:, base] = k * q[l][0]
            else:
                sk = math.sqrt(2.0) * k
                out[:, base + m] = sk * a[m] * q[l][m]
                out[:, base - m] = sk * b[m] * q[l][m]
    return out


@dataclass
class AttentionHead:
    """Per-SH-band weights from view direction and time; zero-init final
    layer makes every weight exactly 1 (plain SH)."""

    mlp: MlpParams
    order: int


def attention_head_init(
    rng: np.random.Generator, order: int, hidden: int = 64
) -> AttentionHead:
    mlp = mlp_init(
        rng,
        [3 + GAMMA_DIM, hidden, n_bands(order)],
        hidden_activation="relu",
        zero_final=True,
    )
    return AttentionHead(mlp=mlp, order=order)


def attention_weights(head: AttentionHead, d, ts, frame_ids=None) -> Tensor:
    """alpha(d, t): softmax over bands scaled by the band count.

    d: (N,3) ray directions; ts: scalar time or (F,) per-frame times with
    frame_ids mapping each direction to its frame. The weights sum to
    (order+1)^2 and are all exactly 1 under a zero-init final layer.
    """
    d = _normalize_dirs(d)
    ts_arr = np.atleast_1d(np.asarray(ts, dtype=float))
    gammas = gamma_embed_batch(ts_arr)
    if frame_ids is None:
        if len(ts_arr) != 1:
            raise ValueError("attention_weights: multiple times need frame_ids")
        gam = np.broadcast_to(gammas[0], (d.shape[0], GAMMA_DIM))
    else:
        gam = gammas[np.asarray(frame_ids, dtype=np.int64)]
    inp = Tensor(np.concatenate([d, gam], axis=1))
    logits = mlp_apply(head.mlp, inp)
    bands = n_bands(head.order)
    return ad.softmax(logits, axis=-1) * float(bands)


def sh_color_from_parts(c_lm: Tensor, alpha: Tensor, basis: np.ndarray) -> Tensor:
    """sigmoid( sum_lm alpha_lm * c_lm * Y_lm ) per RGB channel.

    c_lm: (N, 3*B) RGB-major coefficients; alpha: (N,B); basis: (N,B).
    """
    n, b = basis.shape
    weighted = alpha * Tensor(basis)  # (N,B)
    c3 = ad.reshape(c_lm, (n, 3, b))
    raw = (c3 * ad.reshape(weighted, (n, 1, b))).sum(axis=2)
    return ad.sigmoid(raw)


def sh_coefficients(
    sh_set: TriPlaneSet, x_c, ts, frame_ids=None, stacked_values=None
) -> Tensor:
    """c_lm at canonical points: the sum of the three plane samples."""
    f_xy, f_yz, f_xz = triplane_features_frames(
        sh_set, x_c, ts, frame_ids=frame_ids, stacked_values=stacked_values
    )
    return f_xy + f_yz + f_xz


def sh_color(
    sh_set: TriPlaneSet,
    head: AttentionHead,
    x_c,
    d,
    t: float,
) -> Tensor:
    """Color of canonical points seen from per-point directions at time t."""
    c_lm = sh_coefficients(sh_set, x_c, [t])
    alpha = attention_weights(head, d, t)
    basis = sh_basis(d, head.order)
    return sh_color_from_parts(c_lm, alpha, basis)


@dataclass
class DensityHead:
    field: object  # TriPlaneSet or VoxelGrid
    w: Tensor  # (C,)
    b: Tensor  # scalar, init -2 keeps the scene nearly empty at start


def density_head_init(
    rng: np.random.Generator, field, bias_init: float = -2.0
) -> DensityHead:
    c = field.channels
    return DensityHead(
        field=field,
        w=Tensor(rng.normal(0.0, 1.0 / np.sqrt(c), size=c), requires_grad=True),
        b=Tensor(np.asarray(bias_init), requires_grad=True),
    )


def density(
    dh: DensityHead, x_c, frame_ids=None, stacked_values=None
) -> Tensor:
    """sigma(x_c) = softplus(w . features(x_c) + b) >= 0."""
    if isinstance(dh.field, VoxelGrid):
        feats = sample_voxel(dh.field, x_c)
    else:
        f_xy, f_yz, f_xz = triplane_features_frames(
            dh.field, x_c, [0.0], frame_ids=frame_ids, stacked_values=stacked_values
        )
        feats = f_xy + f_yz + f_xz
    pre = (feats * dh.w).sum(axis=1) + dh.b
    return ad.softplus(pre)
