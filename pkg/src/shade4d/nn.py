"""Neural building blocks on top of the autodiff engine.

Linear layers, MLPs with per-layer activations, layer norm, scaled
dot-product multi-head attention, and pre-norm transformer blocks. All
parameter containers are dataclasses whose Tensor fields are discovered
generically by ``named_tensors`` for checkpointing and optimization.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def named_tensors(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Walk dataclass fields / lists / dicts, yielding (dotted name, Tensor).

    Field order is declaration order, so iteration is deterministic and
    stable across runs; this ordering defines checkpoint record order.
    """
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            if f.name.startswith("_"):  # ephemeral caches are not state
                continue
            child = getattr(obj, f.name)
            sub = f"{prefix}.{f.name}" if prefix else f.name
            yield from named_tensors(child, sub)
    elif isinstance(obj, (list, tuple)):
        for i, child in enumerate(obj):
            yield from named_tensors(child, f"{prefix}.{i}")
    elif isinstance(obj, dict):
        for key in obj:
            yield from named_tensors(obj[key], f"{prefix}.{key}")
    # scalars / strings / None are config, not state


def parameters(obj) -> list[Tensor]:
    """All trainable tensors (requires_grad) under obj, in stable order."""
    return [t for _, t in named_tensors(obj) if t.requires_grad]


@dataclass
class Linear:
    w: Tensor  # (n_in, n_out)
    b: Tensor  # (n_out,)

    @property
    def n_in(self) -> int:
        return self.w.shape[0]

    @property
    def n_out(self) -> int:
        return self.w.shape[1]


def linear_init(
    rng: np.random.Generator,
    n_in: int,
    n_out: int,
    scale: float | None = None,
    zero: bool = False,
    bias: bool = True,
) -> Linear:
    """Gaussian fan-in init (std 1/sqrt(n_in)) unless zero or scale given."""
    if zero:
        w = np.zeros((n_in, n_out))
    else:
        std = scale if scale is not None else 1.0 / np.sqrt(n_in)
        w = rng.normal(0.0, std, size=(n_in, n_out))
    return Linear(
        w=Tensor(w, requires_grad=True),
        b=Tensor(np.zeros(n_out), requires_grad=bias),
    )


def linear_apply(p: Linear, x: Tensor) -> Tensor:
    if x.ndim == 1:
        return ad.reshape(ad.reshape(x, (1, -1)) @ p.w + p.b, (p.n_out,))
    return x @ p.w + p.b


def gelu(x: Tensor) -> Tensor:
    # sigmoid approximation; smooth everywhere, good enough at this scale
    return x * ad.sigmoid(x * 1.702)


ACTIVATIONS = {
    "relu": ad.relu,
    "gelu": gelu,
    "sigmoid": ad.sigmoid,
    "softplus": ad.softplus,
    "none": lambda x: x,
}


@dataclass
class MlpParams:
    layers: list[Linear]
    activations: list[str]

    def __post_init__(self):
        if len(self.layers) != len(self.activations):
            raise ValueError("MlpParams: one activation per layer required")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.n_out != b.n_in:
                raise ValueError(
                    f"MlpParams: layer dims do not chain ({a.n_out} -> {b.n_in})"
                )
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"MlpParams: unknown activation {act!r}")


def mlp_init(
    rng: np.random.Generator,
    dims: list[int],
    hidden_activation: str = "relu",
    final_activation: str = "none",
    zero_final: bool = False,
) -> MlpParams:
    """dims = [in, h1, ..., out]; optionally zero the last layer."""
    if len(dims) < 2:
        raise ValueError("mlp_init: need at least input and output dims")
    layers, acts = [], []
    for i in range(len(dims) - 1):
        last = i == len(dims) - 2
        layers.append(linear_init(rng, dims[i], dims[i + 1], zero=zero_final and last))
        acts.append(final_activation if last else hidden_activation)
    return MlpParams(layers=layers, activations=acts)


def mlp_apply(p: MlpParams, x: Tensor) -> Tensor:
    for layer, act in zip(p.layers, p.activations):
        x = ACTIVATIONS[act](linear_apply(layer, x))
    return x


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor


def layer_norm_init(dim: int) -> LayerNormParams:
    return LayerNormParams(
        gamma=Tensor(np.ones(dim), requires_grad=True),
        beta=Tensor(np.zeros(dim), requires_grad=True),
    )


def layer_norm(p: LayerNormParams, x: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / ad.sqrt(var + eps) * p.gamma + p.beta


@dataclass
class AttentionParams:
    wq: Linear
    wk: Linear
    wv: Linear
    wo: Linear
    n_heads: int


def attention_init(rng: np.random.Generator, dim: int, n_heads: int) -> AttentionParams:
    if dim % n_heads != 0:
        raise ValueError(f"attention_init: dim {dim} not divisible by {n_heads} heads")
    return AttentionParams(
        wq=linear_init(rng, dim, dim),
        wk=linear_init(rng, dim, dim),
        wv=linear_init(rng, dim, dim),
        wo=linear_init(rng, dim, dim),
        n_heads=n_heads,
    )


def attention_apply(p: AttentionParams, x: Tensor) -> Tensor:
    """Scaled dot-product self-attention over (n_tokens, dim) sequences."""
    n, dim = x.shape
    h = p.n_heads
    dh = dim // h
    # (n, dim) -> (h, n, dh)
    def split(t):
        return ad.transpose(ad.reshape(t, (n, h, dh)), (1, 0, 2))

    q = split(linear_apply(p.wq, x))
    k = split(linear_apply(p.wk, x))
    v = split(linear_apply(p.wv, x))
    scores = q @ ad.transpose(k, (0, 2, 1)) * (1.0 / np.sqrt(dh))
    weights = ad.softmax(scores, axis=-1)
    mixed = weights @ v  # (h, n, dh)
    merged = ad.reshape(ad.transpose(mixed, (1, 0, 2)), (n, dim))
    return linear_apply(p.wo, merged)


@dataclass
class TransformerBlockParams:
    ln1: LayerNormParams
    attn: AttentionParams
    ln2: LayerNormParams
    fc1: Linear
    fc2: Linear


def transformer_block_init(
    rng: np.random.Generator, dim: int, n_heads: int, mlp_ratio: int = 4
) -> TransformerBlockParams:
    return TransformerBlockParams(
        ln1=layer_norm_init(dim),
        attn=attention_init(rng, dim, n_heads),
        ln2=layer_norm_init(dim),
        fc1=linear_init(rng, dim, dim * mlp_ratio),
        fc2=linear_init(rng, dim * mlp_ratio, dim),
    )


def transformer_block_apply(p: TransformerBlockParams, x: Tensor) -> Tensor:
    """Pre-norm residual block: attention then position-wise MLP."""
    x = x + attention_apply(p.attn, layer_norm(p.ln1, x))
    return x + linear_apply(p.fc2, gelu(linear_apply(p.fc1, layer_norm(p.ln2, x))))
