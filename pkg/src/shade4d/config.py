"""Configuration dataclasses with JSON round-tripping.

ModelConfig fixes every architecture dimension; TrainConfig adds optimization,
loss weighting, ablation switches, and I/O paths. `load_train_config` reads a
JSON file whose keys mirror the dataclass fields (model options nested under
"model") and applies flat CLI-style overrides on top.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class ModelConfig:
    plane_resolution: int = 256
    defo_channels: int = 32
    sh_order: int = 4
    density_channels: int = 16
    density_field: str = "triplane"  # or "voxel"
    voxel_resolution: int = 64
    patch_size: int = 16
    token_dim: int = 128
    latent_dim: int = 512
    denoiser_width: int = 512
    diffusion_steps: int = 1000
    inject_alpha_bar: float = 0.7
    attention_hidden: int = 64
    near: float = 2.0
    far: float = 6.0
    n_samples_per_ray: int = 64
    background: tuple = (1.0, 1.0, 1.0)

    def validate(self) -> None:
        if self.plane_resolution % self.patch_size != 0:
            raise ValueError(
                f"plane_resolution {self.plane_resolution} not divisible by "
                f"patch_size {self.patch_size}"
            )
        if self.density_field not in ("triplane", "voxel"):
            raise ValueError(f"unknown density_field {self.density_field!r}")
        if not 0 <= self.sh_order <= 10:
            raise ValueError(f"sh_order {self.sh_order} outside [0, 10]")
        if len(self.background) != 3:
            raise ValueError("background must have 3 channels")

    @property
    def sh_channels(self) -> int:
        return 3 * (self.sh_order + 1) ** 2

    @property
    def token_channels(self) -> int:
        """Channels per orientation entering the tokenizer."""
        c = self.defo_channels + self.sh_channels
        if self.density_field == "triplane":
            c += self.density_channels
        return c


@dataclass
class TrainConfig:
    data_dir: str = ""
    out_dir: str = "runs/default"
    learning_rate: float = 5e-4
    lr_schedule: str = "cosine"  # "cosine" decays to 5% by the last step
    batch_size: int = 4  # frames per step, grouped as consecutive-time pairs
    steps: int = 5000
    pretrain_steps: int = 2000
    rays_per_frame: int = 128
    seed: int = 0
    no_deformation: bool = False
    no_diffusion: bool = False
    refined_render: bool = True
    inference_sampling: bool = True  # inject noise + DDIM when rendering at eval
    ddim_steps: int = 10
    lambda_rec: float = 1.0
    lambda_diff: float = 0.1
    lambda_temporal: float = 0.01
    metric_every: int = 500
    checkpoint_every: int = 1000
    stratified: bool = True
    dtype: str = "float64"
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.batch_size < 1 or self.batch_size % 2 != 0:
            raise ValueError("batch_size must be a positive even number (time pairs)")
        if min(self.lambda_rec, self.lambda_diff, self.lambda_temporal) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lambda_rec <= 0:
            raise ValueError("lambda_rec must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unknown dtype {self.dtype!r}")
        self.model.validate()


def desk_model_config() -> ModelConfig:
    """Small configuration able to overfit the toy scene on a CPU."""
    return ModelConfig(
        plane_resolution=64,
        defo_channels=8,
        sh_order=2,
        density_channels=8,
        patch_size=16,
        token_dim=64,
        latent_dim=128,
        denoiser_width=128,
        n_samples_per_ray=32,
    )


def desk_train_config() -> TrainConfig:
    return TrainConfig(
        model=desk_model_config(),
        batch_size=2,
        rays_per_frame=192,
        learning_rate=5e-3,
        dtype="float32",  # memory-bound numpy kernels run ~1.6x faster
    )


def config_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def _build(cls, data: dict, where: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ValueError(f"unknown config key(s) in {where}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        if name == "model" and isinstance(value, dict):
            value = _build(ModelConfig, value, "model")
        elif name == "background":
            value = tuple(value)
        kwargs[name] = value
    return cls(**kwargs)


def train_config_from_dict(data: dict) -> TrainConfig:
    cfg = _build(TrainConfig, dict(data), "config")
    cfg.validate()
    return cfg


def apply_overrides(data: dict, overrides: dict) -> dict:
    """Merge flat overrides into a config dict; model.* keys go to the
    nested model section. None-valued overrides are ignored."""
    out = json.loads(json.dumps(data))  # deep copy of plain JSON data
    for key, value in overrides.items():
        if value is None:
            continue
        if key.startswith("model."):
            out.setdefault("model", {})[key[len("model.") :]] = value
        else:
            out[key] = value
    return out


def load_train_config(path, overrides: dict | None = None) -> TrainConfig:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ValueError(f"config file {path} is not valid JSON: {e}") from e
    if overrides:
        data = apply_overrides(data, overrides)
    return train_config_from_dict(data)


def save_train_config(path, cfg: TrainConfig) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True))
