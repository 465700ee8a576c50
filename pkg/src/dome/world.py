"""World-model training, forecasting, rollout and horizon evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from . import numerics as nx
from .diffusion import DiffusionSchedule, inject_context, make_schedule, q_sample, sample_loop
from .dit import DitConfig, SpatioTemporalDiT, condition_mask, masked_loss
from .occupancy import MetricReport, OccupancyGrid, SemanticClassTable, compute_metrics
from .trajectory import relative_motion
from .vae import OccVAE, argmax_labels

log = logging.getLogger(__name__)


@dataclass
class WorldModel:
    """Frozen VAE plus denoiser, schedule and the latent normalisation constant.

    Latents are scaled to unit standard deviation, so the default ``clip_x0``
    of 3 bounds sampled clean latents to three standard deviations.
    """

    vae: OccVAE
    dit: SpatioTemporalDiT
    schedule: DiffusionSchedule
    latent_scale: float = 1.0
    guidance: float = 1.0
    clip_x0: float | None = 3.0

    @property
    def n_f(self) -> int:
        return self.dit.cfg.n_f

    @torch.no_grad()
    def encode(self, frames: np.ndarray) -> torch.Tensor:
        """(N, H, W, D) labels -> scaled posterior means (N, n_h, n_w, C)."""
        out = []
        for b in range(0, len(frames), 32):
            mu, _ = self.vae.encode(np.asarray(frames[b:b + 32]))
            out.append(mu)
        return torch.cat(out) / self.latent_scale

    @torch.no_grad()
    def decode(self, z: torch.Tensor) -> np.ndarray:
        out = []
        for b in range(0, len(z), 16):
            out.append(argmax_labels(self.vae.decode(z[b:b + 16] * self.latent_scale)))
        return np.concatenate(out)

    def denoiser(self, deltas: torch.Tensor):
        """Bind trajectory conditioning; guidance != 1 mixes in the null-trajectory estimate."""
        b = deltas.shape[0]

        def fn(z, i):
            t = torch.full((b,), i, dtype=torch.long)
            eps = self.dit(z, t, deltas)
            if self.guidance != 1.0:
                eps_u = self.dit(z, t, deltas, drop_traj=torch.ones(b, dtype=torch.bool))
                eps = eps_u + self.guidance * (eps - eps_u)
            return eps

        return fn


# --------------------------------------------------------------------------- #
# training


@dataclass
class WindowDataset:
    latents: torch.Tensor       # (N, n_f, n_h, n_w, C)
    deltas: torch.Tensor        # (N, n_f, 3)

    def __len__(self):
        return len(self.latents)


def build_windows(latent_seqs: Sequence[torch.Tensor], pose_seqs: Sequence[Sequence[np.ndarray]],
                  n_f: int, stride: int = 1) -> WindowDataset:
    lat, dl = [], []
    for z, poses in zip(latent_seqs, pose_seqs):
        for s in range(0, len(z) - n_f + 1, stride):
            lat.append(z[s:s + n_f])
            dl.append(torch.from_numpy(relative_motion(poses[s:s + n_f]).deltas).float())
    if not lat:
        raise ValueError(f"no sequence is long enough for {n_f}-frame windows")
    return WindowDataset(torch.stack(lat), torch.stack(dl))


@dataclass
class WorldTrainResult:
    model: WorldModel
    store: nx.ParameterStore
    losses: list[float] = field(default_factory=list)


def latent_scale_for(vae: OccVAE, frames: np.ndarray) -> float:
    with torch.no_grad():
        mu, _ = vae.encode(np.asarray(frames[:64]))
    return float(mu.std())


def train_world_model(vae: OccVAE, sequences: Sequence[tuple[Sequence[OccupancyGrid] | np.ndarray, Sequence[np.ndarray]]],
                      dit_cfg: DitConfig, steps: int, schedule: DiffusionSchedule | None = None,
                      n_c: int = 4, lr: float = 1e-3, batch_size: int = 8, seed: int = 0,
                      ema_decay: float = 0.999, min_lr: float = 1e-5, weight_decay: float = 0.0,
                      log_every: int = 100) -> WorldTrainResult:
    """Masked latent-diffusion training of the denoiser on a frozen VAE."""
    schedule = schedule or make_schedule()
    vae.eval()
    for p in vae.parameters():
        p.requires_grad_(False)
    label_seqs = [np.stack([g.labels if isinstance(g, OccupancyGrid) else g for g in grids])
                  for grids, _ in sequences]
    scale = latent_scale_for(vae, np.concatenate(label_seqs))
    dit = SpatioTemporalDiT(dit_cfg, seed=seed)
    model = WorldModel(vae, dit, schedule, scale)
    data = build_windows([model.encode(f) for f in label_seqs], [p for _, p in sequences], dit_cfg.n_f)
    log.info("world model: %d windows, latent scale %.4f", len(data), scale)
    store = nx.ParameterStore.from_module(dit)
    gen = torch.Generator().manual_seed(seed + 1)
    base_mask = condition_mask(dit_cfg.n_f, n_c)
    losses = []
    dit.train()
    for step in range(steps):
        idx = torch.randint(len(data), (batch_size,), generator=gen)
        z0, deltas = data.latents[idx], data.deltas[idx]
        i = torch.randint(schedule.T, (batch_size,), generator=gen)
        eps = torch.randn(z0.shape, generator=gen)
        drop = torch.rand(batch_size, generator=gen) < dit_cfg.p_inj
        mask = base_mask.expand(batch_size, -1) & ~drop[:, None]
        z_hat = inject_context(q_sample(z0, i, eps, schedule), z0, mask)
        eps_hat = dit(z_hat, i, deltas, drop_traj=drop)
        loss = masked_loss(eps_hat, eps, mask)
        store.zero_grad()
        loss.backward()
        nx.adamw_step(store, store.grads(), nx.cosine_lr(step, steps, lr, min_lr), weight_decay=weight_decay)
        nx.ema_update(store, ema_decay)
        losses.append(float(loss.detach()))
        if step % log_every == 0:
            log.info("dit step %d/%d loss %.4f", step, steps, float(np.mean(losses[-log_every:])))
    dit.eval()
    return WorldTrainResult(model, store, losses)


# --------------------------------------------------------------------------- #
# inference


@dataclass
class ForecastRequest:
    context: np.ndarray               # (n_c, H, W, D) labels
    poses: Sequence[np.ndarray]       # at least n_f poses, first n_c align with the context

    def __post_init__(self):
        self.context = np.stack([g.labels if isinstance(g, OccupancyGrid) else np.asarray(g)
                                 for g in self.context])


@torch.no_grad()
def forecast_latents(model: WorldModel, z_ctx_frames: torch.Tensor, poses: Sequence[np.ndarray],
                     seed: int = 0) -> torch.Tensor:
    """Sample one window; ``z_ctx_frames`` holds the n_c context latents. Returns all n_f latents."""
    n_f = model.n_f
    n_c = len(z_ctx_frames)
    if not 1 <= n_c < n_f:
        raise ValueError(f"need 1 <= n_c < n_f = {n_f}, got n_c = {n_c}")
    if len(poses) < n_f:
        raise ValueError(f"window needs {n_f} poses, got {len(poses)}")
    z_ctx = torch.zeros((1, n_f, *z_ctx_frames.shape[1:]), dtype=z_ctx_frames.dtype)
    z_ctx[0, :n_c] = z_ctx_frames
    deltas = torch.from_numpy(relative_motion(poses[:n_f]).deltas).float()[None]
    gen = torch.Generator().manual_seed(seed)
    return sample_loop(model.denoiser(deltas), z_ctx, condition_mask(n_f, n_c), model.schedule, gen,
                       clip_x0=model.clip_x0)[0]


def forecast(request: ForecastRequest, model: WorldModel, seed: int = 0) -> np.ndarray:
    """Predict the n_f - n_c frames following the context."""
    n_c = len(request.context)
    if n_c >= model.n_f:
        raise ValueError(f"n_c = {n_c} must be smaller than n_f = {model.n_f}")
    z = forecast_latents(model, model.encode(request.context), request.poses, seed)
    return model.decode(z[n_c:])


@dataclass
class RolloutResult:
    frames: np.ndarray                        # emitted (predicted) frames only
    windows: list[tuple[int, int]]            # (pose offset, frames emitted) per window
    conditioning: list[np.ndarray] = field(default_factory=list)
    frame_rate: float = 2.0

    @property
    def duration_s(self) -> float:
        return len(self.frames) / self.frame_rate


def rollout_plan(total_frames: int, n_f: int, n_c: int) -> list[tuple[int, int, int]]:
    """(pose offset, context frames, new frames) per window."""
    if total_frames < 1:
        raise ValueError("total_frames must be positive")
    plan = []
    emitted, offset, ctx = 0, 0, n_c
    while emitted < total_frames:
        new = min(n_f - ctx, total_frames - emitted)
        plan.append((offset, ctx, new))
        emitted += new
        offset += ctx + new - 1
        ctx = 1
    return plan


def required_poses(total_frames: int, n_f: int, n_c: int) -> int:
    offset, _, _ = rollout_plan(total_frames, n_f, n_c)[-1]
    return offset + n_f


def rollout(context: np.ndarray, poses: Sequence[np.ndarray], total_frames: int, model: WorldModel,
            seed: int = 0, frame_rate: float = 2.0) -> RolloutResult:
    """Chain windows, re-conditioning each on the last frame emitted by the previous one."""
    context = np.stack([g.labels if isinstance(g, OccupancyGrid) else np.asarray(g) for g in context])
    n_f, n_c = model.n_f, len(context)
    plan = rollout_plan(total_frames, n_f, n_c)
    need = plan[-1][0] + n_f
    if len(poses) < need:
        raise ValueError(f"rollout of {total_frames} frames needs {need} poses, got {len(poses)}")
    frames, windows, cond = [], [], []
    z_ctx = model.encode(context)
    for k, (offset, ctx, new) in enumerate(plan):
        z = forecast_latents(model, z_ctx, poses[offset:offset + n_f], seed + k)
        pred = model.decode(z[ctx:ctx + new])
        cond.append(context[-1] if k == 0 else frames[-1])
        frames.extend(pred)
        windows.append((offset, new))
        # next window starts from the last emitted frame, re-encoded from its labels
        z_ctx = model.encode(pred[-1:])
    return RolloutResult(np.stack(frames), windows, cond, frame_rate)


def copy_paste_baseline(context: np.ndarray, horizon: int) -> np.ndarray:
    context = np.asarray(context)
    if len(context) < 1:
        raise ValueError("need at least one context frame")
    return np.repeat(context[-1:], horizon, axis=0)


# --------------------------------------------------------------------------- #
# evaluation

HORIZONS_S = (1.0, 2.0, 3.0)


@dataclass
class HorizonTable:
    rows: dict[str, dict[str, float]]        # metric name -> column -> value
    reports: dict[str, MetricReport] = field(default_factory=dict, repr=False)

    COLUMNS = ("Recon", "1s", "2s", "3s", "Avg")

    def to_json(self) -> dict:
        return {"columns": list(self.COLUMNS), "rows": self.rows}

    def to_text(self, title: str = "") -> str:
        cols = self.COLUMNS
        lines = []
        if title:
            lines.append(title)
        lines.append(f"{'metric':<8}" + "".join(f"{c:>9}" for c in cols))
        for name, row in self.rows.items():
            cells = "".join(f"{100 * row[c]:>9.2f}" if row.get(c) is not None else f"{'-':>9}" for c in cols)
            lines.append(f"{name:<8}" + cells)
        return "\n".join(lines)


def horizon_index(seconds: float, frame_rate: float) -> int:
    """Frames after the last context frame for a horizon in seconds."""
    k = seconds * frame_rate
    if abs(k - round(k)) > 1e-9:
        raise ValueError(f"{seconds}s is not a whole number of frames at {frame_rate} Hz")
    return int(round(k))


def evaluate(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray], table: SemanticClassTable,
             frame_rate: float = 2.0, horizons: Sequence[float] = HORIZONS_S,
             recon: tuple[np.ndarray, np.ndarray] | None = None) -> HorizonTable:
    """Score predicted future frames against ground truth at fixed horizons.

    ``preds[s][k]`` is the frame k + 1 steps after the last context frame of
    sequence s; frames at one horizon are pooled across sequences and scored
    with :func:`compute_metrics`.
    """
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predicted vs {len(gts)} ground-truth sequences")
    rows = {"mIoU": {}, "IoU": {}}
    reports = {}
    for sec in horizons:
        k = horizon_index(sec, frame_rate)
        for p, g in zip(preds, gts):
            if k > len(p) or k > len(g):
                raise ValueError(f"horizon {sec}s (frame {k}) exceeds sequence length {min(len(p), len(g))}")
        rep = compute_metrics(np.stack([p[k - 1] for p in preds]), np.stack([g[k - 1] for g in gts]), table)
        col = f"{sec:g}s"
        rows["mIoU"][col], rows["IoU"][col] = rep.miou, rep.iou_total
        reports[col] = rep
    cols = [f"{s:g}s" for s in horizons]
    rows["mIoU"]["Avg"] = float(np.mean([rows["mIoU"][c] for c in cols]))
    rows["IoU"]["Avg"] = float(np.mean([rows["IoU"][c] for c in cols]))
    if recon is not None:
        rep = compute_metrics(recon[0], recon[1], table)
        rows["mIoU"]["Recon"], rows["IoU"]["Recon"] = rep.miou, rep.iou_total
        reports["Recon"] = rep
    else:
        rows["mIoU"]["Recon"] = rows["IoU"]["Recon"] = None
    return HorizonTable(rows, reports)


@dataclass
class ForecastEvaluation:
    model: HorizonTable
    baseline: HorizonTable

    def to_json(self) -> dict:
        return {"model": self.model.to_json(), "copy_paste": self.baseline.to_json()}

    def to_text(self) -> str:
        return self.model.to_text("World model") + "\n\n" + self.baseline.to_text("Copy&Paste")


def evaluate_forecasts(model: WorldModel, sequences: Sequence[tuple[np.ndarray, Sequence[np.ndarray]]],
                       table: SemanticClassTable, n_c: int = 4, starts: Sequence[int] = (0,), seed: int = 0,
                       frame_rate: float = 2.0, horizons: Sequence[float] = HORIZONS_S) -> ForecastEvaluation:
    """Forecast one window per (sequence, start) and score it next to the copy-paste baseline.

    The reconstruction column is the VAE round trip of the same ground-truth frames.
    """
    n_f = model.n_f
    preds, gts, copies = [], [], []
    for labels, poses in sequences:
        labels = np.stack([g.labels if isinstance(g, OccupancyGrid) else np.asarray(g) for g in labels])
        for st in starts:
            if st + n_f > len(labels):
                raise ValueError(f"start {st} + window {n_f} exceeds sequence of {len(labels)} frames")
            req = ForecastRequest(labels[st:st + n_c], poses[st:st + n_f])
            preds.append(forecast(req, model, seed=seed + st))
            gts.append(labels[st + n_c:st + n_f])
            copies.append(copy_paste_baseline(labels[st:st + n_c], n_f - n_c))
    flat_gt = np.concatenate(gts)
    recon = model.decode(model.encode(flat_gt))
    return ForecastEvaluation(
        evaluate(preds, gts, table, frame_rate, horizons, recon=(recon, flat_gt)),
        evaluate(copies, gts, table, frame_rate, horizons),
    )
