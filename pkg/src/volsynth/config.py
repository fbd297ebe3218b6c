"""Run configuration, named profiles, and JSON round-tripping.

Paper profiles pin the published hyperparameters; desk profiles shrink
dimensions and step counts for workstation runs without changing any
loss definition.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .backbone import BackboneConfig
from .checkpoint import config_hash
from .tokenizer import TokenizerConfig

CONDITIONING_MODES = ("prompts", "mask_codes", "none")


@dataclass
class RunConfig:
    profile: str
    mode: str
    m: int
    vol_shape: tuple[int, int, int]
    subjects: int
    seed: int = 0
    dataset: str = ""
    out_dir: str = ""

    # tokenizer stage
    channels: tuple[int, int, int] = (32, 64, 128)
    codebook_size: int = 512
    latent_dim: int = 8
    prompt_channels: tuple[int, int] = (48, 96)
    prompt_hidden: int = 192
    lambda_pretext: float = 0.01
    tau: float = 0.2
    vae_batch_size: int = 4
    vae_learning_rate: float = 1e-4
    vae_total_steps: int = 2000
    vae_warmup_steps: int = 100
    vae_optimizer: str = "adam"
    adversarial: bool = False
    perceptual: bool = False

    # diffusion stage
    hidden: int = 192
    blocks: int = 6
    heads: int = 6
    patch: int = 1
    injection_site: str = "modal_or_spatial"
    conditioning: str = "prompts"
    dit_batch_size: int = 8
    dit_learning_rate: float = 5e-5
    dit_total_steps: int = 2000
    dit_warmup_steps: int = 100
    dit_optimizer: str = "adamw"
    weight_decay: float = 0.01
    ema_decay: float = 0.9999
    timesteps: int = 500
    beta_start: float = 0.0015
    beta_end: float = 0.0195
    sampling_steps: int = 200

    def __post_init__(self):
        if self.conditioning not in CONDITIONING_MODES:
            raise ValueError(f"conditioning must be one of {CONDITIONING_MODES}")
        if min(self.vae_batch_size, self.dit_batch_size) < 4:
            raise ValueError("batch sizes below 4 starve the in-batch contrastive negatives")
        self.vol_shape = tuple(self.vol_shape)
        self.channels = tuple(self.channels)
        self.prompt_channels = tuple(self.prompt_channels)

    # -- derived configs ----------------------------------------------------

    def tokenizer_config(self) -> TokenizerConfig:
        return TokenizerConfig(
            mode=self.mode,
            m=self.m,
            channels=self.channels,
            codebook_size=self.codebook_size,
            latent_dim=self.latent_dim,
            prompt_channels=self.prompt_channels,
            prompt_hidden=self.prompt_hidden,
            tau=self.tau,
        )

    def latent_grid(self) -> tuple[int, int, int]:
        return self.tokenizer_config().latent_shape(self.vol_shape)

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(
            variant=self.mode,
            latent_grid=self.latent_grid(),
            n_slots=self.m if self.mode == "brain" else 1,
            hidden=self.hidden,
            blocks=self.blocks,
            heads=self.heads,
            patch=self.patch,
            latent_dim=self.latent_dim,
            injection_site=self.injection_site,
            t_max=self.timesteps,
        )

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["vol_shape"] = list(self.vol_shape)
        d["channels"] = list(self.channels)
        d["prompt_channels"] = list(self.prompt_channels)
        return d

    def hash(self) -> str:
        return config_hash(self.to_dict())

    @classmethod
    def from_dict(cls, payload: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(payload) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**payload)

    @classmethod
    def from_json(cls, path: Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def write_json(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True), encoding="utf-8")


def profile_config(name: str, **overrides) -> RunConfig:
    """Instantiate one of the named profiles, optionally overriding fields."""
    if name == "paper-b":
        base = dict(
            profile=name, mode="brain", m=4, vol_shape=(192, 192, 64), subjects=1000,
            channels=(256, 384, 512), codebook_size=8192,
            prompt_channels=(256, 512), prompt_hidden=1024,
            lambda_pretext=0.01, tau=0.2,
            vae_batch_size=8, vae_learning_rate=1e-4, vae_total_steps=400_000,
            vae_warmup_steps=20_000, vae_optimizer="adam",
            hidden=768, blocks=16, heads=12, patch=2,
            dit_batch_size=32, dit_learning_rate=5e-5, dit_total_steps=100_000,
            dit_warmup_steps=5_000, weight_decay=0.01, ema_decay=0.9999,
            timesteps=500, sampling_steps=200,
        )
    elif name == "paper-c":
        base = dict(
            profile=name, mode="cardiac", m=32, vol_shape=(1, 192, 192), subjects=32248,
            channels=(32, 64, 128), codebook_size=8192,
            prompt_channels=(256, 512), prompt_hidden=1024,
            lambda_pretext=0.01, tau=0.2,
            vae_batch_size=64, vae_learning_rate=1e-4, vae_total_steps=200_000,
            vae_warmup_steps=10_000, vae_optimizer="adam",
            hidden=384, blocks=12, heads=12, patch=1,
            dit_batch_size=64, dit_learning_rate=5e-5, dit_total_steps=100_000,
            dit_warmup_steps=5_000, weight_decay=0.01, ema_decay=0.9999,
            timesteps=500, sampling_steps=250,
        )
    elif name == "desk-b":
        base = dict(
            profile=name, mode="brain", m=4, vol_shape=(32, 32, 16), subjects=200,
            channels=(32, 64, 128), codebook_size=512,
            prompt_channels=(64, 128), prompt_hidden=256,
            lambda_pretext=1.0, tau=0.2,
            vae_batch_size=4, vae_learning_rate=2e-3, vae_total_steps=2000,
            vae_warmup_steps=100, vae_optimizer="adam",
            hidden=192, blocks=6, heads=6, patch=1,
            dit_batch_size=8, dit_learning_rate=3e-4, dit_total_steps=2000,
            dit_warmup_steps=100, weight_decay=0.01, ema_decay=0.995,
            timesteps=100, sampling_steps=20,
        )
    elif name == "desk-c":
        base = dict(
            profile=name, mode="cardiac", m=24, vol_shape=(1, 32, 32), subjects=200,
            channels=(32, 64, 128), codebook_size=512,
            prompt_channels=(64, 128), prompt_hidden=256,
            lambda_pretext=1.0, tau=0.2,
            vae_batch_size=4, vae_learning_rate=2e-3, vae_total_steps=2000,
            vae_warmup_steps=100, vae_optimizer="adam",
            hidden=192, blocks=6, heads=6, patch=1,
            dit_batch_size=8, dit_learning_rate=3e-4, dit_total_steps=2000,
            dit_warmup_steps=100, weight_decay=0.01, ema_decay=0.995,
            timesteps=100, sampling_steps=20,
        )
    else:
        raise ValueError(f"unknown profile {name!r}")
    base.update(overrides)
    return RunConfig(**base)
