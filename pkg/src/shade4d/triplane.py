"""Tri-plane feature grids: storage, bilinear sampling, time modulation.

A point's feature on each plane is the bilinear interpolation of the four
surrounding cells, differentiable with respect to both the cell values and
the query coordinates. Sampling is implemented as one fused primitive so
the backward pass can scatter into the plane with a single bincount instead
of thousands of tape records.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .nn import Linear, linear_apply, linear_init

GAMMA_DIM = 64
_N_FREQS = GAMMA_DIM // 2  # 32 frequencies, one sin and one cos each

AXIS_PAIRS = ((0, 1), (1, 2), (0, 2))  # xy, yz, xz
PLANE_NAMES = ("xy", "yz", "xz")


def gamma_embed(t: float) -> np.ndarray:
    """Sinusoidal embedding of scene time: sin/cos of 2^k*pi*t, 32 octaves."""
    t = float(t)
    if not np.isfinite(t):
        raise ValueError("gamma_embed: non-finite time")
    if t < 0.0 or t > 1.0:
        raise ValueError(f"gamma_embed: time {t} outside [0,1]")
    freqs = (2.0 ** np.arange(_N_FREQS)) * np.pi
    phase = freqs * t
    return np.concatenate([np.sin(phase), np.cos(phase)]).astype(
        ad.default_dtype()
    )


def gamma_embed_batch(ts) -> np.ndarray:
    return np.stack([gamma_embed(t) for t in np.asarray(ts).ravel()])


@dataclass
class PlaneGrid:
    values: Tensor  # (H, W, C)
    axis_pair: tuple

    @property
    def resolution(self):
        return self.values.shape[:2]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


@dataclass
class TimeModulation:
    """Per-plane FiLM maps from gamma(t) to channel scale s and shift h.

    Zero init makes the modulation the identity: f = (1+0)*f + 0.
    """

    scale_maps: list  # 3 x Linear(64 -> C)
    shift_maps: list


@dataclass
class TriPlaneSet:
    planes: list  # [PlaneGrid] covering xy, yz, xz exactly once
    modulation: TimeModulation | None
    bounds: Tensor  # (2,3) buffer: row 0 = per-axis lo, row 1 = hi

    @property
    def channels(self) -> int:
        return self.planes[0].channels

    @property
    def resolution(self):
        return self.planes[0].resolution


def default_bounds() -> np.ndarray:
    return np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])


def triplane_init(
    rng: np.random.Generator,
    resolution: int,
    channels: int,
    init_scale: float = 0.1,
    modulated: bool = False,
    bounds: np.ndarray | None = None,
) -> TriPlaneSet:
    if resolution < 2:
        raise ValueError("triplane_init: resolution must be >= 2")
    planes = [
        PlaneGrid(
            values=Tensor(
                rng.uniform(-init_scale, init_scale, size=(resolution, resolution, channels)),
                requires_grad=True,
            ),
            axis_pair=pair,
        )
        for pair in AXIS_PAIRS
    ]
    mod = None
    if modulated:
        mod = TimeModulation(
            scale_maps=[
                linear_init(rng, GAMMA_DIM, channels, zero=True) for _ in range(3)
            ],
            shift_maps=[
                linear_init(rng, GAMMA_DIM, channels, zero=True) for _ in range(3)
            ],
        )
    b = default_bounds() if bounds is None else np.asarray(bounds, dtype=float)
    if b.shape != (2, 3) or not np.all(b[1] > b[0]):
        raise ValueError(f"triplane_init: bad bounds {b!r}")
    return TriPlaneSet(planes=planes, modulation=mod, bounds=Tensor(b))


def sample_plane(values, u, v, lo=(-1.0, -1.0), hi=(1.0, 1.0), frame_ids=None):
    """Bilinear plane lookup, fused forward/backward.

    values: (H,W,C) tensor, or (F,H,W,C) with per-sample frame_ids when each
    frame carries its own refined copy of the plane. u, v are world
    coordinates (N,); out-of-range queries clamp to the boundary and get
    zero coordinate-gradient in the clamped direction (boundary itself
    counts as inside).
    """
    vals = values if isinstance(values, Tensor) else Tensor(values)
    ut = u if isinstance(u, Tensor) else Tensor(np.asarray(u, dtype=ad.default_dtype()))
    vt = v if isinstance(v, Tensor) else Tensor(np.asarray(v, dtype=ad.default_dtype()))
    data = vals.data
    if data.ndim == 3:
        n_frames = 1
        h, w, c = data.shape
        fid = None
    elif data.ndim == 4:
        n_frames, h, w, c = data.shape
        if frame_ids is None:
            raise ShapeError("sample_plane: stacked values need frame_ids")
        fid = np.asarray(frame_ids, dtype=np.int64)
    else:
        raise ShapeError(f"sample_plane: values must be 3-d or 4-d, got {data.shape}")
    if h < 2 or w < 2:
        raise ShapeError(f"sample_plane: grid {h}x{w} too small")
    uu, vv = ut.data, vt.data
    if uu.shape != vv.shape or uu.ndim != 1:
        raise ShapeError(f"sample_plane: coords {uu.shape} vs {vv.shape}")
    if not (np.isfinite(uu).all() and np.isfinite(vv).all()):
        raise ad.NonFiniteError("sample_plane: non-finite coordinates")

    su = (h - 1) / (hi[0] - lo[0])
    sv = (w - 1) / (hi[1] - lo[1])
    r = (uu - lo[0]) * su
    cc = (vv - lo[1]) * sv
    in_r = (r >= 0.0) & (r <= h - 1)
    in_c = (cc >= 0.0) & (cc <= w - 1)
    r = np.clip(r, 0.0, h - 1)
    cc = np.clip(cc, 0.0, w - 1)
    r0 = np.minimum(r.astype(np.int64), h - 2)
    c0 = np.minimum(cc.astype(np.int64), w - 2)
    # cast indices back before subtracting: float32 - int64 promotes to
    # float64, which would silently upcast the whole feature path
    fr = r - r0.astype(r.dtype)
    fc = cc - c0.astype(cc.dtype)

    flat = data.reshape(n_frames * h * w, c)
    base = (fid * (h * w)) if fid is not None else 0
    i00 = base + r0 * w + c0
    i01 = i00 + 1
    i10 = i00 + w
    i11 = i10 + 1
    f00, f01, f10, f11 = flat[i00], flat[i01], flat[i10], flat[i11]
    w00 = ((1 - fr) * (1 - fc))[:, None]
    w01 = ((1 - fr) * fc)[:, None]
    w10 = (fr * (1 - fc))[:, None]
    w11 = (fr * fc)[:, None]
    out = w00 * f00 + w01 * f01 + w10 * f10 + w11 * f11

    needs_vals = vals.requires_grad
    needs_u = ut.requires_grad
    needs_v = vt.requires_grad
    full_shape = data.shape

    def backward(g):
        gv = gu = gvv = None
        if needs_vals:
            idx = np.concatenate([i00, i01, i10, i11])
            contrib = np.concatenate([g * w00, g * w01, g * w10, g * w11])
            gv = ad._scatter_rows(contrib, idx, n_frames * h * w, (c,)).reshape(
                full_shape
            )
        if needs_u or needs_v:
            d_fr = (f10 - f00) * (1 - fc)[:, None] + (f11 - f01) * fc[:, None]
            d_fc = (f01 - f00) * (1 - fr)[:, None] + (f11 - f10) * fr[:, None]
            if needs_u:
                gu = (g * d_fr).sum(axis=1) * su * in_r
            if needs_v:
                gvv = (g * d_fc).sum(axis=1) * sv * in_c
        return gv, gu, gvv

    return ad.record_op("sample_plane", out, (vals, ut, vt), backward)


def _axis_column(x, axis: int):
    if isinstance(x, Tensor):
        return x[:, axis]
    return Tensor(np.ascontiguousarray(np.asarray(x)[:, axis]))


def triplane_features_frames(
    tp: TriPlaneSet,
    x,
    ts,
    frame_ids=None,
    stacked_values=None,
):
    """Per-plane features for samples drawn from several frames at once.

    ts: (F,) scene times; frame_ids: (N,) int per sample (None means F=1);
    stacked_values: optional list of three (F,H,W,C) tensors holding
    per-frame refined planes, defaulting to the shared plane values.
    Returns [f_xy, f_yz, f_xz], each (N,C) after time modulation.
    """
    ts = np.atleast_1d(np.asarray(ts, dtype=float))
    bounds = tp.bounds.data
    feats = []
    gammas = None
    if tp.modulation is not None:
        gammas = Tensor(gamma_embed_batch(ts))
    for i, pg in enumerate(tp.planes):
        a, b = pg.axis_pair
        u = _axis_column(x, a)
        v = _axis_column(x, b)
        values = stacked_values[i] if stacked_values is not None else pg.values
        f = sample_plane(
            values,
            u,
            v,
            lo=(bounds[0, a], bounds[0, b]),
            hi=(bounds[1, a], bounds[1, b]),
            frame_ids=frame_ids if values.ndim == 4 else None,
        )
        if tp.modulation is not None:
            s = linear_apply(tp.modulation.scale_maps[i], gammas)  # (F,C)
            hshift = linear_apply(tp.modulation.shift_maps[i], gammas)
            if frame_ids is not None and len(ts) > 1:
                s = ad.gather(s, np.asarray(frame_ids, dtype=np.int64))
                hshift = ad.gather(hshift, np.asarray(frame_ids, dtype=np.int64))
            else:
                s = ad.reshape(s, (s.shape[-1],))
                hshift = ad.reshape(hshift, (hshift.shape[-1],))
            f = f * (s + 1.0) + hshift
        feats.append(f)
    return feats


def triplane_features(tp: TriPlaneSet, x, t: float):
    """Single-time convenience wrapper: features of points x at time t."""
    return triplane_features_frames(tp, x, [t], frame_ids=None)


# -- optional voxel-grid density field -------------------------------------


@dataclass
class VoxelGrid:
    values: Tensor  # (R, R, R, C)
    bounds: Tensor

    @property
    def channels(self) -> int:
        return self.values.shape[3]


def voxel_init(
    rng: np.random.Generator,
    resolution: int,
    channels: int,
    init_scale: float = 0.1,
    bounds: np.ndarray | None = None,
) -> VoxelGrid:
    if resolution < 2:
        raise ValueError("voxel_init: resolution must be >= 2")
    b = default_bounds() if bounds is None else np.asarray(bounds, dtype=float)
    return VoxelGrid(
        values=Tensor(
            rng.uniform(-init_scale, init_scale, size=(resolution,) * 3 + (channels,)),
            requires_grad=True,
        ),
        bounds=Tensor(b),
    )


def sample_voxel(grid: VoxelGrid, x):
    """True trilinear lookup over a dense 3D grid (density-field alternative)."""
    vals = grid.values
    data = vals.data
    r0d, r1d, r2d, c = data.shape
    lo, hi = grid.bounds.data[0], grid.bounds.data[1]
    xt = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    pts = xt.data
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeError(f"sample_voxel: points must be (N,3), got {pts.shape}")

    res = np.array([r0d, r1d, r2d])
    scale = (res - 1) / (hi - lo)
    cell = (pts - lo) * scale
    inside = (cell >= 0.0) & (cell <= res - 1)
    cell = np.clip(cell, 0.0, res - 1)
    i0 = np.minimum(cell.astype(np.int64), res - 2)
    f = cell - i0

    flat = data.reshape(-1, c)
    stride = np.array([r1d * r2d, r2d, 1])
    corner_feats = []
    corner_idx = []
    weights = []
    for dz in (0, 1):
        for dy in (0, 1):
            for dx in (0, 1):
                off = np.array([dz, dy, dx])
                idx = ((i0 + off) * stride).sum(axis=1)
                wgt = np.prod(
                    np.where(off == 1, f, 1.0 - f), axis=1
                )
                corner_idx.append(idx)
                corner_feats.append(flat[idx])
                weights.append(wgt)
    out = np.zeros((pts.shape[0], c), dtype=data.dtype)
    for wgt, feat in zip(weights, corner_feats):
        out += wgt[:, None] * feat

    needs_vals = vals.requires_grad
    needs_x = xt.requires_grad

    def backward(g):
        gv = gx = None
        if needs_vals:
            idx = np.concatenate(corner_idx)
            contrib = np.concatenate([g * wgt[:, None] for wgt in weights])
            gv = ad._scatter_rows(contrib, idx, flat.shape[0], (c,)).reshape(
                data.shape
            )
        if needs_x:
            gx = np.zeros_like(pts)
            for k, off3 in enumerate(
                [(dz, dy, dx) for dz in (0, 1) for dy in (0, 1) for dx in (0, 1)]
            ):
                per_sample = (g * corner_feats[k]).sum(axis=1)
                for axis in range(3):
                    others = [a for a in range(3) if a != axis]
                    sign = 1.0 if off3[axis] == 1 else -1.0
                    partial = sign * np.prod(
                        np.stack(
                            [
                                np.where(off3[a] == 1, f[:, a], 1.0 - f[:, a])
                                for a in others
                            ]
                        ),
                        axis=0,
                    )
                    gx[:, axis] += per_sample * partial
            gx *= scale * inside
        return gv, gx

    return ad.record_op("sample_voxel", out, (vals, xt), backward)
