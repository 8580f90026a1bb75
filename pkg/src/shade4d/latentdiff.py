"""Latent refinement path: plane tokenizer, transformer encoder to a compact
latent, residual decoder back to plane features, and a DDPM/DDIM denoising
model with a scene-adaptive noise schedule.

Shapes at the reference configuration: three 256x256 feature planes split into
16x16 patches give 3*(256/16)^2 = 768 spatial tokens of width 128, plus one
temporal token; the pooled latent is 512-d. The decoder is residual with a
zero-initialized output layer, so refinement is an exact identity at init.

The diffusion step variable is named s everywhere; t always means scene time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .triplane import GAMMA_DIM, gamma_embed

TOKEN_DIM = 128
LATENT_DIM = 512
DEFAULT_PATCH = 16
N_PLANES = 3
STATS_DIM = 12  # mean, std, mean|.|, max|.| for each of three planes


# ---------------------------------------------------------------------------
# noise schedule


@dataclass
class NoiseSchedule:
    """Linear-beta DDPM schedule; alpha_bars[s] = prod_{u<=s} (1 - beta_u)."""

    betas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def n_steps(self) -> int:
        return int(self.betas.shape[0])

    def validate(self) -> None:
        if np.any(self.betas <= 0.0) or np.any(self.betas >= 1.0):
            raise ValueError("NoiseSchedule: betas must lie strictly in (0, 1)")
        if np.any(np.diff(self.alpha_bars) >= 0.0):
            raise ValueError("NoiseSchedule: alpha_bars must be strictly decreasing")

    def scaled(self, m: float) -> "NoiseSchedule":
        """Plain-numpy rescale (inference path; no gradients)."""
        betas = np.clip(m * self.betas, 1e-6, 0.999)
        sched = NoiseSchedule(betas=betas, alpha_bars=np.cumprod(1.0 - betas))
        sched.validate()
        return sched


def noise_schedule(
    n_steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02
) -> NoiseSchedule:
    if n_steps < 1:
        raise ValueError("noise_schedule: n_steps must be >= 1")
    betas = np.linspace(beta_start, beta_end, n_steps)
    sched = NoiseSchedule(betas=betas, alpha_bars=np.cumprod(1.0 - betas))
    sched.validate()
    return sched


def scene_stats(planes) -> Tensor:
    """12-d summary of three planes: mean, std, mean |v|, max |v| each."""
    if len(planes) != N_PLANES:
        raise ValueError(f"scene_stats: expected {N_PLANES} planes, got {len(planes)}")
    parts = []
    for p in planes:
        flat = ad.reshape(p, (-1,))
        mu = ad.mean(flat, keepdims=True)
        centered = flat - ad.mean(flat)
        var = ad.mean(centered * centered, keepdims=True)
        absv = ad.relu(flat) + ad.relu(-flat)
        parts.extend(
            [
                mu,
                ad.sqrt(var + 1e-12),
                ad.mean(absv, keepdims=True),
                ad.reshape(ad.amax(absv), (1,)),
            ]
        )
    return ad.concat(parts, axis=0)


def scale_mlp_init(rng: np.random.Generator, hidden: int = 32) -> nn.MlpParams:
    """2-layer MLP over plane statistics; zero final layer => multiplier 1.25."""
    return nn.mlp_init(rng, [STATS_DIM, hidden, 1], zero_final=True)


def scene_noise_scale(params: nn.MlpParams, planes, base: NoiseSchedule):
    """Scene-adaptive schedule: m in (0.5, 2), beta' = clamp(m*beta, 1e-6, 0.999).

    Returns (m, alpha_bars) as graph tensors so the statistics MLP (and the
    planes, through their statistics) receive gradients from the diffusion loss.
    """
    stats = scene_stats(planes)
    raw = nn.mlp_apply(params, stats)
    m = ad.reshape(0.5 + 1.5 * ad.sigmoid(raw), ())
    betas = ad.clamp(m * Tensor(base.betas), 1e-6, 0.999)
    alpha_bars = ad.exp(ad.cumsum(ad.log(1.0 - betas)))
    return m, alpha_bars


# ---------------------------------------------------------------------------
# forward process and losses


def _alpha_bar_at(alpha_bars, s: int) -> Tensor:
    if not isinstance(alpha_bars, Tensor):
        alpha_bars = Tensor(np.asarray(alpha_bars, dtype=float))
    n = alpha_bars.shape[0]
    if not 0 <= s < n:
        raise ValueError(f"diffusion step {s} outside schedule of length {n}")
    return ad.getitem(alpha_bars, s)


def q_sample(z0, s: int, eps, alpha_bars) -> Tensor:
    """Forward noising: z_s = sqrt(ab_s) z0 + sqrt(1 - ab_s) eps."""
    ab = _alpha_bar_at(alpha_bars, s)
    z0 = z0 if isinstance(z0, Tensor) else Tensor(np.asarray(z0, dtype=float))
    eps = eps if isinstance(eps, Tensor) else Tensor(np.asarray(eps, dtype=float))
    return ad.sqrt(ab) * z0 + ad.sqrt(1.0 - ab) * eps


def diffusion_loss(
    z0,
    alpha_bars,
    denoiser_fn,
    rng: np.random.Generator,
    s: int | None = None,
    eps: np.ndarray | None = None,
) -> Tensor:
    """|eps - eps_hat(z_s, s)|^2 with s uniform and eps standard normal.

    s and eps may be pinned for deterministic tests; denoiser_fn(z_s, s)
    returns the noise prediction as a Tensor.
    """
    n = alpha_bars.shape[0] if isinstance(alpha_bars, Tensor) else len(alpha_bars)
    if s is None:
        s = int(rng.integers(n))
    dim = z0.shape[0] if isinstance(z0, Tensor) else np.asarray(z0).shape[0]
    if eps is None:
        eps = rng.standard_normal(dim)
    z_s = q_sample(z0, s, eps, alpha_bars)
    diff = Tensor(np.asarray(eps, dtype=float)) - denoiser_fn(z_s, s)
    return ad.sum_(diff * diff)


def temporal_loss(z_a: Tensor, z_b: Tensor) -> Tensor:
    """Squared L2 norm of the frame-to-frame latent offset."""
    d = z_b - z_a
    return ad.sum_(d * d)


# ---------------------------------------------------------------------------
# denoiser: FiLM-conditioned residual MLP over the latent


@dataclass
class FilmBlock:
    lin: nn.Linear
    scale: nn.Linear
    shift: nn.Linear


@dataclass
class DenoiserParams:
    in_proj: nn.Linear
    blocks: list[FilmBlock]
    out: nn.Linear
    n_steps: int


def denoiser_init(
    rng: np.random.Generator,
    latent_dim: int = LATENT_DIM,
    width: int = 512,
    n_blocks: int = 4,
    n_steps: int = 1000,
) -> DenoiserParams:
    """Residual MLP; FiLM scale/shift layers start at zero (identity film)."""
    blocks = [
        FilmBlock(
            lin=nn.linear_init(rng, width, width),
            scale=nn.linear_init(rng, GAMMA_DIM, width, zero=True),
            shift=nn.linear_init(rng, GAMMA_DIM, width, zero=True),
        )
        for _ in range(n_blocks)
    ]
    return DenoiserParams(
        in_proj=nn.linear_init(rng, latent_dim, width),
        blocks=blocks,
        out=nn.linear_init(rng, width, latent_dim),
        n_steps=n_steps,
    )


def denoiser_apply(p: DenoiserParams, z, s: int) -> Tensor:
    """Noise prediction for latent z at diffusion step s."""
    if not 0 <= s < p.n_steps:
        raise ValueError(f"diffusion step {s} outside schedule of length {p.n_steps}")
    frac = s / (p.n_steps - 1) if p.n_steps > 1 else 0.0
    emb = Tensor(gamma_embed(frac))
    z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=float))
    h = ad.relu(nn.linear_apply(p.in_proj, z))
    for blk in p.blocks:
        a = nn.linear_apply(blk.lin, h)
        g = nn.linear_apply(blk.scale, emb)
        b = nn.linear_apply(blk.shift, emb)
        h = h + ad.relu((1.0 + g) * a + b)
    return nn.linear_apply(p.out, h)


# ---------------------------------------------------------------------------
# DDIM inference


def ddim_steps(start: int, n: int) -> np.ndarray:
    """Evenly spaced descending step subset from start down to 0."""
    if n < 1:
        raise ValueError("ddim_steps: need at least one step")
    if n == 1:
        return np.array([start])
    subset = np.round(np.linspace(start, 0, n)).astype(int)
    keep = np.concatenate([[True], np.diff(subset) < 0])
    return subset[keep]


def ddim_sample(
    z_init: np.ndarray,
    sched: NoiseSchedule,
    denoiser_fn,
    steps: int = 10,
    start_step: int | None = None,
) -> np.ndarray:
    """Deterministic (eta = 0) DDIM refinement of a latent.

    denoiser_fn(z: np.ndarray, s: int) -> np.ndarray. Pure function of its
    inputs: rerunning with identical arguments is bit-identical.
    """
    start = sched.n_steps - 1 if start_step is None else start_step
    if not 0 <= start < sched.n_steps:
        raise ValueError(f"start step {start} outside schedule of length {sched.n_steps}")
    z = np.asarray(z_init, dtype=float).copy()
    subset = ddim_steps(start, steps)
    for i, s in enumerate(subset):
        ab = sched.alpha_bars[s]
        eps_hat = np.asarray(denoiser_fn(z, int(s)), dtype=float)
        z0_hat = (z - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
        if i + 1 < len(subset):
            ab_next = sched.alpha_bars[subset[i + 1]]
            z = np.sqrt(ab_next) * z0_hat + np.sqrt(1.0 - ab_next) * eps_hat
        else:
            z = z0_hat
    return z


def inject_noise(
    z: np.ndarray,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    target_alpha_bar: float = 0.7,
):
    """Partial forward noising for inference-time refinement.

    Picks the step whose alpha_bar is closest to the target and returns
    (noised latent, that step) so DDIM can denoise from there.
    """
    s_star = int(np.argmin(np.abs(sched.alpha_bars - target_alpha_bar)))
    ab = sched.alpha_bars[s_star]
    eps = rng.standard_normal(z.shape[0])
    return np.sqrt(ab) * z + np.sqrt(1.0 - ab) * eps, s_star


# ---------------------------------------------------------------------------
# tokenizer


def n_spatial_tokens(resolution: int, patch: int = DEFAULT_PATCH) -> int:
    return N_PLANES * (resolution // patch) ** 2


def _pos_embed_2d(grid: int, dim: int) -> np.ndarray:
    """Fixed sinusoidal row/column embedding, one row per patch location."""
    if dim % 4 != 0:
        raise ValueError("token dim must be divisible by 4 for 2-d embeddings")
    quarter = dim // 4
    freqs = 1.0 / (10000.0 ** (np.arange(quarter) / quarter))
    rows, cols = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    out = np.empty((grid * grid, dim))
    for i, coord in enumerate((rows.ravel(), cols.ravel())):
        phase = coord[:, None] * freqs[None, :]
        out[:, 2 * i * quarter : (2 * i + 1) * quarter] = np.sin(phase)
        out[:, (2 * i + 1) * quarter : (2 * i + 2) * quarter] = np.cos(phase)
    return out


@dataclass
class TokenizerParams:
    proj: nn.Linear
    plane_embed: Tensor
    time_proj: nn.Linear
    pos_embed: Tensor  # fixed buffer
    patch: int
    grid: int
    channels: int
    dim: int


def tokenizer_init(
    rng: np.random.Generator,
    resolution: int,
    channels: int,
    patch: int = DEFAULT_PATCH,
    dim: int = TOKEN_DIM,
) -> TokenizerParams:
    if resolution % patch != 0:
        raise ValueError(
            f"plane resolution {resolution} not divisible by patch size {patch}"
        )
    grid = resolution // patch
    return TokenizerParams(
        proj=nn.linear_init(rng, patch * patch * channels, dim),
        plane_embed=Tensor(rng.normal(0.0, 0.02, size=(N_PLANES, dim)), requires_grad=True),
        time_proj=nn.linear_init(rng, GAMMA_DIM, dim),
        pos_embed=Tensor(_pos_embed_2d(grid, dim), requires_grad=False),
        patch=patch,
        grid=grid,
        channels=channels,
        dim=dim,
    )


def _patchify(x: Tensor, grid: int, patch: int, channels: int) -> Tensor:
    x = ad.reshape(x, (grid, patch, grid, patch, channels))
    x = ad.transpose(x, (0, 2, 1, 3, 4))
    return ad.reshape(x, (grid * grid, patch * patch * channels))


def _unpatchify(x: Tensor, grid: int, patch: int, channels: int) -> Tensor:
    x = ad.reshape(x, (grid, grid, patch, patch, channels))
    x = ad.transpose(x, (0, 2, 1, 3, 4))
    return ad.reshape(x, (grid * patch, grid * patch, channels))


def tokenize(tk: TokenizerParams, planes, t: float) -> Tensor:
    """Patch tokens for three feature planes plus one trailing temporal token.

    planes: three (R, R, C) tensors sharing resolution and channel count.
    Returns (3 * grid^2 + 1, dim); the temporal token is the last row.
    """
    if len(planes) != N_PLANES:
        raise ValueError(f"tokenize: expected {N_PLANES} planes, got {len(planes)}")
    res = tk.grid * tk.patch
    rows = []
    for i, plane in enumerate(planes):
        if plane.shape != (res, res, tk.channels):
            raise ValueError(
                f"tokenize: plane {i} has shape {plane.shape}, "
                f"expected {(res, res, tk.channels)}"
            )
        tok = nn.linear_apply(tk.proj, _patchify(plane, tk.grid, tk.patch, tk.channels))
        tok = tok + ad.reshape(ad.getitem(tk.plane_embed, i), (1, tk.dim))
        rows.append(tok + tk.pos_embed)
    tau = nn.linear_apply(tk.time_proj, Tensor(gamma_embed(t)))
    rows.append(ad.reshape(tau, (1, tk.dim)))
    return ad.concat(rows, axis=0)


# ---------------------------------------------------------------------------
# encoder and residual decoder


@dataclass
class EncoderParams:
    blocks: list[nn.TransformerBlockParams]
    pool: nn.Linear


def encoder_init(
    rng: np.random.Generator,
    dim: int = TOKEN_DIM,
    n_heads: int = 4,
    n_blocks: int = 4,
    latent_dim: int = LATENT_DIM,
) -> EncoderParams:
    return EncoderParams(
        blocks=[nn.transformer_block_init(rng, dim, n_heads) for _ in range(n_blocks)],
        pool=nn.linear_init(rng, dim, latent_dim),
    )


def encode(enc: EncoderParams, tokens: Tensor) -> Tensor:
    """Transformer blocks, mean-pool over tokens, project to the latent."""
    h = tokens
    for blk in enc.blocks:
        h = nn.transformer_block_apply(blk, h)
    return nn.linear_apply(enc.pool, ad.mean(h, axis=0))


@dataclass
class DecoderParams:
    queries: Tensor
    z_proj: nn.Linear
    hidden: nn.Linear
    out: nn.Linear
    patch: int
    grid: int
    channels: int


def decoder_init(
    rng: np.random.Generator,
    resolution: int,
    channels: int,
    patch: int = DEFAULT_PATCH,
    dim: int = TOKEN_DIM,
    latent_dim: int = LATENT_DIM,
) -> DecoderParams:
    if resolution % patch != 0:
        raise ValueError(
            f"plane resolution {resolution} not divisible by patch size {patch}"
        )
    grid = resolution // patch
    return DecoderParams(
        queries=Tensor(
            rng.normal(0.0, 0.02, size=(N_PLANES * grid * grid, dim)),
            requires_grad=True,
        ),
        z_proj=nn.linear_init(rng, latent_dim, dim),
        hidden=nn.linear_init(rng, dim, dim),
        out=nn.linear_init(rng, dim, patch * patch * channels, zero=True),
        patch=patch,
        grid=grid,
        channels=channels,
    )


# bound on the per-value correction the decoder may apply; a global latent
# basis with unbounded reach can bury local grid structure (e.g. saturate the
# density head everywhere) before the planes have carved the scene
CORRECTION_SCALE = 0.25


def decode(dec: DecoderParams, z: Tensor, planes_in) -> list[Tensor]:
    """Residual plane refinement: planes + bounded correction from z.

    The output layer starts at zero, so decode(z, planes) == planes at init.
    Corrections saturate at CORRECTION_SCALE through a tanh.
    """
    cond = ad.reshape(nn.linear_apply(dec.z_proj, z), (1, -1))
    h = ad.relu(dec.queries + cond)
    h = ad.relu(nn.linear_apply(dec.hidden, h))
    res = CORRECTION_SCALE * ad.tanh(nn.linear_apply(dec.out, h))
    per = dec.grid * dec.grid
    refined = []
    for i, plane in enumerate(planes_in):
        block = ad.getitem(res, slice(i * per, (i + 1) * per))
        refined.append(plane + _unpatchify(block, dec.grid, dec.patch, dec.channels))
    return refined


# ---------------------------------------------------------------------------
# bundled parameters


@dataclass
class LatentDiffusionParams:
    tokenizer: TokenizerParams
    encoder: EncoderParams
    decoder: DecoderParams
    denoiser: DenoiserParams
    scale_mlp: nn.MlpParams
    base: NoiseSchedule = field(repr=False)
    inject_alpha_bar: float = 0.7

    @property
    def latent_dim(self) -> int:
        return self.encoder.pool.n_out


def latentdiff_init(
    rng: np.random.Generator,
    resolution: int,
    channels: int,
    patch: int = DEFAULT_PATCH,
    dim: int = TOKEN_DIM,
    latent_dim: int = LATENT_DIM,
    denoiser_width: int = 512,
    n_diffusion_steps: int = 1000,
    inject_alpha_bar: float = 0.7,
) -> LatentDiffusionParams:
    return LatentDiffusionParams(
        tokenizer=tokenizer_init(rng, resolution, channels, patch, dim),
        encoder=encoder_init(rng, dim, 4, 4, latent_dim),
        decoder=decoder_init(rng, resolution, channels, patch, dim, latent_dim),
        denoiser=denoiser_init(rng, latent_dim, denoiser_width, 4, n_diffusion_steps),
        scale_mlp=scale_mlp_init(rng),
        base=noise_schedule(n_diffusion_steps),
        inject_alpha_bar=inject_alpha_bar,
    )


def encode_planes(params: LatentDiffusionParams, planes, t: float) -> Tensor:
    return encode(params.encoder, tokenize(params.tokenizer, planes, t))


def refine_planes(params: LatentDiffusionParams, planes, t: float):
    """Training-path refinement: encode then residual-decode.

    Returns (z, refined plane list); gradients flow to every submodule.
    """
    z = encode_planes(params, planes, t)
    return z, decode(params.decoder, z, planes)


def refine_planes_sampled(
    params: LatentDiffusionParams,
    planes,
    t: float,
    rng: np.random.Generator,
    steps: int = 10,
):
    """Inference-path refinement: encode, partially noise the latent, DDIM
    back, then residual-decode. The schedule uses the trained scene scale."""
    z = encode_planes(params, planes, t)
    m, _ = scene_noise_scale(params.scale_mlp, planes, params.base)
    sched = params.base.scaled(float(m.data))
    z_s, s_star = inject_noise(z.data, sched, rng, params.inject_alpha_bar)

    def denoiser_fn(zv, s):
        return denoiser_apply(params.denoiser, Tensor(zv), s).data

    z_ref = Tensor(ddim_sample(z_s, sched, denoiser_fn, steps, s_star))
    return z_ref, decode(params.decoder, z_ref, planes)
