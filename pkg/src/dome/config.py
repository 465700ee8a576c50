"""JSON run configuration shared by the command-line drivers."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .diffusion import DiffusionSchedule, make_schedule
from .dit import DitConfig
from .occupancy import PRESETS, get_preset
from .vae import VaeConfig


@dataclass
class TrainConfig:
    lr: float = 1e-3
    min_lr: float = 1e-5
    vae_epochs: int = 12
    vae_batch: int = 8
    wm_steps: int = 3000
    wm_batch: int = 8
    ema_decay: float = 0.999


@dataclass
class RunConfig:
    preset: str = "synthetic"
    seed: int = 0
    n_c: int = 4
    frame_rate: float = 2.0
    vae: dict = field(default_factory=dict)
    dit: dict = field(default_factory=dict)
    schedule: dict = field(default_factory=lambda: {"T": 1000, "beta_start": 1e-4, "beta_end": 0.02,
                                                    "inference_steps": 20})
    train: TrainConfig = field(default_factory=TrainConfig)
    resample: dict = field(default_factory=lambda: {"num_samples": 10, "min_separation": 20,
                                                    "retry_budget": 50})
    paths: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; known: {sorted(PRESETS)}")
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)

    def vae_config(self) -> VaeConfig:
        preset = get_preset(self.preset)
        cfg = {"grid_dims": preset.dims, **self.vae}
        return VaeConfig(**cfg)

    def dit_config(self, latent_hw: tuple[int, int], channels: int) -> DitConfig:
        return DitConfig(**{"latent_hw": latent_hw, "channels": channels, **self.dit})

    def make_schedule(self) -> DiffusionSchedule:
        s = self.schedule
        return make_schedule(s["T"], s["beta_start"], s["beta_end"], s["inference_steps"])

    def to_dict(self) -> dict:
        return asdict(self)


def load_config(path=None, base_dir=None, **overrides) -> RunConfig:
    """Read a JSON config (unknown keys rejected), apply non-None overrides, resolve paths."""
    data = {}
    if path is not None:
        path = Path(path)
        data = json.loads(path.read_text())
        base_dir = base_dir or path.parent
    known = set(RunConfig.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    data.update({k: v for k, v in overrides.items() if v is not None})
    cfg = RunConfig(**data)
    root = Path(base_dir or ".")
    cfg.paths = {k: str((root / v).resolve()) for k, v in cfg.paths.items()}
    return cfg
