"""Model checkpoints: a DOMEckpt tensor archive plus a JSON config sidecar."""

from __future__ import annotations

import json
from pathlib import Path

import torch

from .diffusion import make_schedule, schedule_from_config
from .dit import DitConfig, SpatioTemporalDiT
from .numerics import ParameterStore, load_tensors, save_tensors
from .vae import OccVAE, VaeConfig
from .world import WorldModel


class MissingCheckpoint(FileNotFoundError):
    pass


def _state(module: torch.nn.Module, store: ParameterStore | None, use_ema: bool) -> dict:
    state = {k: v.detach() for k, v in module.state_dict().items()}
    if store is not None and use_ema:
        state.update({k: v for k, v in store.ema.items()})
    return state


def save_vae(vae: OccVAE, path, store: ParameterStore | None = None, use_ema: bool = False) -> None:
    path = Path(path)
    save_tensors(_state(vae, store, use_ema), path)
    path.with_suffix(".json").write_text(json.dumps({"kind": "vae", "config": vae.cfg.to_dict()}, indent=2))


def load_vae(path) -> OccVAE:
    path = Path(path)
    if not path.exists():
        raise MissingCheckpoint(f"VAE checkpoint {path} not found")
    meta = json.loads(path.with_suffix(".json").read_text())
    vae = OccVAE(VaeConfig(**meta["config"]))
    vae.load_state_dict(load_tensors(path))
    vae.eval()
    return vae


def save_world(model: WorldModel, directory, store: ParameterStore | None = None, use_ema: bool = True) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_vae(model.vae, d / "vae.ckpt")
    save_tensors(_state(model.dit, store, use_ema), d / "dit.ckpt")
    (d / "dit.json").write_text(json.dumps({
        "kind": "dit", "config": model.dit.cfg.to_dict(), "schedule": model.schedule.to_config(),
        "latent_scale": model.latent_scale, "guidance": model.guidance,
        "clip_x0": model.clip_x0,
    }, indent=2))


def load_world(directory) -> WorldModel:
    d = Path(directory)
    for name in ("vae.ckpt", "dit.ckpt", "dit.json"):
        if not (d / name).exists():
            raise MissingCheckpoint(f"{d / name} not found")
    meta = json.loads((d / "dit.json").read_text())
    dit = SpatioTemporalDiT(DitConfig(**meta["config"]))
    dit.load_state_dict(load_tensors(d / "dit.ckpt"), strict=False)
    dit.eval()
    schedule = schedule_from_config(meta["schedule"]) if "schedule" in meta else make_schedule()
    return WorldModel(load_vae(d / "vae.ckpt"), dit, schedule, meta["latent_scale"], meta.get("guidance", 1.0),
                      meta.get("clip_x0"))
