"""Camera rays, stratified sampling, volume compositing, image metrics.

The compositing path is the only differentiable part; ray generation and
depth sampling produce constants. Cameras follow the synthetic-NeRF
convention: OpenGL-style camera-to-world transforms with the camera looking
down its local -Z axis, intrinsics given as a horizontal field of view.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


@dataclass
class Camera:
    fov_x: float  # horizontal field of view, radians
    width: int
    height: int
    c2w: np.ndarray  # 4x4 camera-to-world, rows are world coords

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=float)
        if self.c2w.shape != (4, 4):
            raise ValueError(f"Camera: c2w must be 4x4, got {self.c2w.shape}")
        if not (0.0 < self.fov_x < np.pi):
            raise ValueError(f"Camera: fov {self.fov_x} outside (0, pi)")
        r = self.c2w[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
            raise ValueError("Camera: rotation block not orthonormal")

    @property
    def focal(self) -> float:
        return 0.5 * self.width / np.tan(0.5 * self.fov_x)


@dataclass
class RaySampleBatch:
    origins: np.ndarray  # (R,3)
    dirs: np.ndarray  # (R,3) unit
    depths: np.ndarray  # (R,S) strictly increasing
    points: np.ndarray  # (R,S,3)
    deltas: np.ndarray  # (R,S) positive; last is far - t_S

    @property
    def n_rays(self) -> int:
        return self.origins.shape[0]

    @property
    def n_samples(self) -> int:
        return self.depths.shape[1]

    def flat_points(self) -> np.ndarray:
        return self.points.reshape(-1, 3)


@dataclass
class RenderedImage:
    rgb: np.ndarray  # (H,W,3) in [0,1]
    opacity: np.ndarray | None = None  # (H,W) accumulated alpha


def generate_rays(cam: Camera, pixels: np.ndarray | None = None):
    """Rays through pixel centers. pixels: (M,2) int (row, col), or None
    for the full image in row-major order. Returns (origins, dirs)."""
    if pixels is None:
        rows, cols = np.meshgrid(
            np.arange(cam.height), np.arange(cam.width), indexing="ij"
        )
        rows, cols = rows.ravel(), cols.ravel()
    else:
        pixels = np.asarray(pixels)
        rows, cols = pixels[:, 0], pixels[:, 1]
        if (
            rows.min() < 0
            or cols.min() < 0
            or rows.max() >= cam.height
            or cols.max() >= cam.width
        ):
            raise ValueError("generate_rays: pixel indices out of bounds")
    f = cam.focal
    x = (cols + 0.5 - 0.5 * cam.width) / f
    y = -(rows + 0.5 - 0.5 * cam.height) / f
    dirs_cam = np.stack([x, y, -np.ones_like(x)], axis=1)
    dirs = dirs_cam @ cam.c2w[:3, :3].T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(cam.c2w[:3, 3], dirs.shape).copy()
    return origins, dirs


def sample_points(
    origins: np.ndarray,
    dirs: np.ndarray,
    near: float,
    far: float,
    n_samples: int,
    stratified: bool = False,
    rng: np.random.Generator | None = None,
) -> RaySampleBatch:
    """Depths per ray: bin midpoints, or one uniform jitter per bin."""
    if not near < far:
        raise ValueError(f"sample_points: near {near} must be < far {far}")
    if n_samples < 1:
        raise ValueError("sample_points: need at least one sample")
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    r = origins.shape[0]
    step = (far - near) / n_samples
    edges = near + np.arange(n_samples) * step
    if stratified:
        if rng is None:
            raise ValueError("sample_points: stratified sampling needs rng")
        jitter = rng.uniform(0.0, 1.0, size=(r, n_samples))
    else:
        jitter = np.full((r, n_samples), 0.5)
    depths = edges + jitter * step
    deltas = np.empty_like(depths)
    deltas[:, :-1] = np.diff(depths, axis=1)
    deltas[:, -1] = far - depths[:, -1]
    points = origins[:, None, :] + depths[:, :, None] * dirs[:, None, :]
    return RaySampleBatch(
        origins=origins, dirs=dirs, depths=depths, points=points, deltas=deltas
    )


def composite(sigmas, colors, deltas, background):
    """Alpha-composite per-sample fields along each ray.

    sigmas: (R,S) tensor, >=0; colors: (R,S,3) tensor; deltas: (R,S) array;
    background: (3,). Returns (pixel (R,3), weights (R,S), t_end (R,)),
    satisfying sum(w) + t_end = 1 per ray.
    """
    st = sigmas if isinstance(sigmas, Tensor) else Tensor(sigmas)
    ct = colors if isinstance(colors, Tensor) else Tensor(colors)
    if np.any(st.data < 0):
        raise ValueError("composite: negative density")
    if np.any(np.asarray(deltas) <= 0):
        raise ValueError("composite: non-positive interval length")
    r, s = st.shape
    if ct.shape != (r, s, 3):
        raise ShapeError(f"composite: colors {ct.shape} vs sigmas {st.shape}")
    bg = np.asarray(background, dtype=float)

    optical = st * Tensor(np.asarray(deltas))  # sigma_i * delta_i
    trans = ad.exp(-ad.cumsum(optical, axis=1, exclusive=True))  # T_i
    alpha = 1.0 - ad.exp(-optical)
    weights = trans * alpha
    t_end = ad.exp(-optical.sum(axis=1))
    pixel = (ad.reshape(weights, (r, s, 1)) * ct).sum(axis=1) + ad.reshape(
        t_end, (r, 1)
    ) * Tensor(bg)
    return pixel, weights, t_end


def render_image(
    model,
    cam: Camera,
    t: float,
    n_samples: int = 64,
    near: float = 2.0,
    far: float = 6.0,
    background=(1.0, 1.0, 1.0),
    ray_chunk: int = 16384,
    stratified: bool = False,
    rng: np.random.Generator | None = None,
) -> RenderedImage:
    """Full-frame render: rays -> samples -> model query -> composite.

    model must expose query(batch: RaySampleBatch, t) -> (sigma (R,S) tensor,
    rgb (R,S,3) tensor); ablation flags live inside the model.
    """
    origins, dirs = generate_rays(cam)
    n = origins.shape[0]
    out = np.empty((n, 3))
    acc = np.empty(n)
    for lo in range(0, n, ray_chunk):
        hi = min(lo + ray_chunk, n)
        batch = sample_points(
            origins[lo:hi], dirs[lo:hi], near, far, n_samples, stratified, rng
        )
        sigma, rgb = model.query(batch, t)
        pixel, _, t_end = composite(sigma, rgb, batch.deltas, background)
        out[lo:hi] = pixel.data
        acc[lo:hi] = 1.0 - t_end.data
    rgb_img = np.clip(out.reshape(cam.height, cam.width, 3), 0.0, 1.0)
    return RenderedImage(rgb=rgb_img, opacity=acc.reshape(cam.height, cam.width))


# -- image metrics ----------------------------------------------------------


def psnr(img: np.ndarray, ref: np.ndarray) -> float:
    img = np.asarray(img, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if img.shape != ref.shape:
        raise ShapeError(f"psnr: {img.shape} vs {ref.shape}")
    mse = float(np.mean((img - ref) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def _to_gray(img: np.ndarray) -> np.ndarray:
    if img.ndim == 3:
        return img @ np.array([0.2989, 0.5870, 0.1140])
    return img


def ssim(img: np.ndarray, ref: np.ndarray, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean local SSIM over valid 11x11 Gaussian windows, dynamic range 1."""
    img = np.asarray(img, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if img.shape != ref.shape:
        raise ShapeError(f"ssim: {img.shape} vs {ref.shape}")
    a = _to_gray(img)
    b = _to_gray(ref)
    kernel = _gaussian_kernel()
    size = kernel.shape[0]
    if a.shape[0] < size or a.shape[1] < size:
        raise ValueError(f"ssim: image {a.shape} smaller than {size}x{size} window")

    def filt(x):
        windows = np.lib.stride_tricks.sliding_window_view(x, (size, size))
        return np.tensordot(windows, kernel, axes=([2, 3], [0, 1]))

    mu_a = filt(a)
    mu_b = filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    c1 = k1**2
    c2 = k2**2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# -- 8-bit PNG I/O ----------------------------------------------------------


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Scale to [0,255] with round-half-away-from-zero."""
    scaled = np.clip(np.asarray(img, dtype=float), 0.0, 1.0) * 255.0
    return np.floor(scaled + 0.5).astype(np.uint8)


def write_png(path, img: np.ndarray) -> None:
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


def read_png(path, background=None) -> np.ndarray:
    """Decode to float RGB in [0,1]; alpha composites onto background."""
    with Image.open(path) as im:
        if im.mode == "RGBA":
            arr = np.asarray(im, dtype=float) / 255.0
            rgb, a = arr[..., :3], arr[..., 3:]
            bg = np.asarray(
                (1.0, 1.0, 1.0) if background is None else background, dtype=float
            )
            return rgb * a + bg * (1.0 - a)
        arr = np.asarray(im.convert("RGB"), dtype=float) / 255.0
        return arr
