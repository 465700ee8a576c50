"""Continuous occupancy VAE: class-embedding BEV encoder, 3D deconvolution decoder."""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import numerics as nx
from .occupancy import BadMagic, ClassEmbedding, OccupancyGrid, Truncated, flatten_bev

log = logging.getLogger(__name__)

LOGVAR_MIN, LOGVAR_MAX = -30.0, 20.0


@dataclass
class VaeConfig:
    grid_dims: tuple[int, int, int] = (40, 40, 8)
    num_classes: int = 6
    emb_dim: int = 8
    latent_channels: int = 16
    downsample: int = 4
    width: int = 64
    coarse_depth: int = 2
    attn_heads: int = 4
    beta: float = 1e-6
    lovasz_weight: float = 1.0

    def __post_init__(self):
        self.grid_dims = tuple(self.grid_dims)
        h, w, d = self.grid_dims
        if self.downsample < 1 or self.downsample & (self.downsample - 1):
            raise ValueError(f"downsample must be a power of two, got {self.downsample}")
        if h % self.downsample or w % self.downsample:
            raise ValueError(f"grid {h}x{w} not divisible by downsample {self.downsample}")
        if self.latent_channels < 1:
            raise ValueError("latent_channels must be >= 1")
        if d % self.coarse_depth or (d // self.coarse_depth) & (d // self.coarse_depth - 1):
            raise ValueError(f"depth {d} must be a power-of-two multiple of coarse_depth {self.coarse_depth}")
        if d // self.coarse_depth > self.downsample:
            raise ValueError("depth upsampling cannot exceed the spatial upsampling factor")

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        h, w, _ = self.grid_dims
        return (h // self.downsample, w // self.downsample, self.latent_channels)

    @property
    def compression_ratio(self) -> float:
        return math.prod(self.grid_dims) / math.prod(self.latent_shape)

    def to_dict(self) -> dict:
        return asdict(self)


REFERENCE_VAE = VaeConfig(grid_dims=(200, 200, 16), num_classes=18, downsample=8, coarse_depth=2)


class ResBlock2d(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.gelu(self.conv1(F.gelu(x))))


class AttnBlock(nn.Module):
    """Residual self-attention over the bottleneck feature map."""

    def __init__(self, ch: int, heads: int):
        super().__init__()
        self.norm = nn.LayerNorm(ch)
        self.qkv = nn.Linear(ch, 3 * ch)
        self.proj = nn.Linear(ch, ch)
        self.heads = heads

    def forward(self, x):
        b, c, h, w = x.shape
        t = x.flatten(2).transpose(1, 2)
        q, k, v = self.qkv(self.norm(t)).chunk(3, dim=-1)
        t = t + self.proj(nx.scaled_dot_product_attention(q, k, v, self.heads))
        return t.transpose(1, 2).reshape(b, c, h, w)


class Encoder(nn.Module):
    def __init__(self, cfg: VaeConfig):
        super().__init__()
        _, _, d = cfg.grid_dims
        self.conv_in = nn.Conv2d(d * cfg.emb_dim, cfg.width, 3, padding=1)
        stages = []
        for _ in range(int(math.log2(cfg.downsample))):
            stages += [nn.Conv2d(cfg.width, cfg.width, 3, stride=2, padding=1), ResBlock2d(cfg.width)]
        self.down = nn.Sequential(*stages)
        self.attn = AttnBlock(cfg.width, cfg.attn_heads)
        self.conv_out = nn.Conv2d(cfg.width, 2 * cfg.latent_channels, 1)

    def forward(self, x_bev):
        h = self.conv_in(x_bev.permute(0, 3, 1, 2))
        h = self.attn(self.down(h))
        return self.conv_out(F.gelu(h))


class Decoder(nn.Module):
    def __init__(self, cfg: VaeConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        self.conv_in = nn.Conv2d(cfg.latent_channels, w * cfg.coarse_depth, 1)
        self.res = ResBlock2d(w * cfg.coarse_depth)
        n_up = int(math.log2(cfg.downsample))
        n_depth_up = int(math.log2(cfg.grid_dims[2] // cfg.coarse_depth))
        ups = []
        ch = w
        for k in range(n_up):
            out = cfg.emb_dim if k == n_up - 1 else max(w // 2 ** (k + 1), 2 * cfg.emb_dim)
            grow_depth = k >= n_up - n_depth_up
            kd, sd = (4, 2) if grow_depth else (3, 1)
            ups.append(nn.ConvTranspose3d(ch, out, (4, 4, kd), stride=(2, 2, sd), padding=1))
            ch = out
        self.up = nn.ModuleList(ups)

    def forward(self, z):
        """z: (B, n_h, n_w, C) -> features (B, H, W, D, C_emb)."""
        cfg = self.cfg
        h = self.res(self.conv_in(z.permute(0, 3, 1, 2)))
        b, _, nh, nw = h.shape
        h = h.reshape(b, cfg.width, cfg.coarse_depth, nh, nw).permute(0, 1, 3, 4, 2)
        for k, up in enumerate(self.up):
            h = up(F.gelu(h) if k else h)
        return h.permute(0, 2, 3, 4, 1)


class OccVAE(nn.Module):
    def __init__(self, cfg: VaeConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(seed)
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.embedding = ClassEmbedding(cfg.num_classes, cfg.emb_dim, generator=gen)
            self.encoder = Encoder(cfg)
            self.decoder = Decoder(cfg)

    def _labels(self, x) -> torch.Tensor:
        if isinstance(x, OccupancyGrid):
            x = x.labels[None]
        elif isinstance(x, (list, tuple)) and x and isinstance(x[0], OccupancyGrid):
            x = np.stack([g.labels for g in x])
        lab = torch.as_tensor(np.asarray(x) if not torch.is_tensor(x) else x).long()
        if lab.ndim == 3:
            lab = lab[None]
        if tuple(lab.shape[1:]) != self.cfg.grid_dims:
            raise ValueError(f"grid dims {tuple(lab.shape[1:])} do not match config {self.cfg.grid_dims}")
        return lab

    def encode(self, x) -> tuple[torch.Tensor, torch.Tensor]:
        """Grids (B, H, W, D) -> (mu, sigma), each (B, n_h, n_w, C)."""
        lab = self._labels(x)
        moments = self.encoder(flatten_bev(lab, self.embedding)).permute(0, 2, 3, 1)
        mu, logvar = moments.chunk(2, dim=-1)
        sigma = torch.exp(0.5 * logvar.clamp(LOGVAR_MIN, LOGVAR_MAX))
        return mu.contiguous(), sigma.contiguous()

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        """Latent (B, n_h, n_w, C) -> logits (B, H, W, D, num_classes)."""
        if tuple(z.shape[-3:]) != self.cfg.latent_shape:
            raise ValueError(f"latent shape {tuple(z.shape[-3:])} != {self.cfg.latent_shape}")
        feats = self.decoder(z.reshape(-1, *self.cfg.latent_shape))
        return class_logits(feats, self.embedding.weight)

    def forward(self, x, eps: torch.Tensor | None = None):
        mu, sigma = self.encode(x)
        if eps is None:
            eps = torch.randn_like(mu)
        z = reparameterize(mu, sigma, eps)
        return self.decode(z), mu, sigma


def reparameterize(mu: torch.Tensor, sigma: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    if not (mu.shape == sigma.shape == eps.shape):
        raise ValueError(f"shape mismatch: mu {tuple(mu.shape)}, sigma {tuple(sigma.shape)}, eps {tuple(eps.shape)}")
    return mu + sigma * eps.detach()


def class_logits(features: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    """Dot product of per-voxel features (..., C_emb) with every class embedding row."""
    if features.shape[-1] != table.shape[-1]:
        raise ValueError(f"feature width {features.shape[-1]} vs embedding width {table.shape[-1]}")
    return features @ table.t()


def argmax_labels(logits: torch.Tensor) -> np.ndarray:
    # torch.argmax returns the first maximal index, i.e. the lowest class id on ties
    return logits.argmax(dim=-1).to(torch.uint8).cpu().numpy()


# --------------------------------------------------------------------------- #
# losses


def lovasz_grad(gt_sorted: torch.Tensor) -> torch.Tensor:
    """Gradient of the Lovasz extension of the Jaccard loss w.r.t. sorted errors."""
    gts = gt_sorted.sum()
    intersection = gts - gt_sorted.cumsum(0)
    union = gts + (1.0 - gt_sorted).cumsum(0)
    jaccard = 1.0 - intersection / union
    if gt_sorted.numel() > 1:
        jaccard = torch.cat([jaccard[:1], jaccard[1:] - jaccard[:-1]])
    return jaccard


def lovasz_softmax(probs: torch.Tensor, labels: torch.Tensor, check: bool = True) -> torch.Tensor:
    """Multi-class Lovasz-softmax over flattened voxels.

    probs: (N, K) rows summing to one; labels: (N,) class ids. Averages over the
    classes present in ``labels``.
    """
    probs = probs.reshape(-1, probs.shape[-1])
    labels = torch.as_tensor(labels).reshape(-1).long()
    if probs.shape[0] != labels.shape[0]:
        raise ValueError(f"{probs.shape[0]} probability rows vs {labels.shape[0]} labels")
    if check:
        dev = (probs.detach().sum(-1) - 1).abs().max().item() if probs.numel() else 0.0
        tol = 1e-6 if probs.dtype == torch.float64 else 1e-5
        if dev > tol:
            raise ValueError(f"probability rows deviate from 1 by {dev:.3g}")
    losses = []
    for c in torch.unique(labels).tolist():
        fg = (labels == c).to(probs.dtype)
        errors = (fg - probs[:, c]).abs()
        errors_sorted, perm = torch.sort(errors, descending=True)
        losses.append(torch.dot(errors_sorted, lovasz_grad(fg[perm])))
    if not losses:
        return probs.sum() * 0.0
    return torch.stack(losses).mean()


@dataclass
class VaeLoss:
    total: torch.Tensor
    ce: torch.Tensor
    kl: torch.Tensor
    lovasz: torch.Tensor

    def item_dict(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("total", "ce", "kl", "lovasz")}


class NonFiniteLoss(FloatingPointError):
    def __init__(self, components: dict[str, float]):
        bad = [k for k, v in components.items() if not math.isfinite(v)]
        super().__init__(f"non-finite loss components: {', '.join(bad)}")
        self.components = components


def kl_divergence(mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, sigma^2) || N(0, 1)) averaged over latent elements."""
    logvar = 2.0 * torch.log(sigma)
    return -0.5 * torch.mean(1.0 + logvar - mu.pow(2) - sigma.pow(2))


def vae_loss(labels: torch.Tensor, logits: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor,
             beta: float = 1e-6, lovasz_weight: float = 1.0) -> VaeLoss:
    labels = torch.as_tensor(labels).long()
    k = logits.shape[-1]
    flat_logits = logits.reshape(-1, k)
    flat_labels = labels.reshape(-1)
    ce = F.cross_entropy(flat_logits, flat_labels)
    kl = kl_divergence(mu, sigma)
    lov = lovasz_softmax(torch.softmax(flat_logits, dim=-1), flat_labels, check=False)
    total = ce + beta * kl + lovasz_weight * lov
    out = VaeLoss(total, ce, kl, lov)
    if not torch.isfinite(total):
        raise NonFiniteLoss(out.item_dict())
    return out


# --------------------------------------------------------------------------- #
# training


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, last_good: dict[str, torch.Tensor]):
        super().__init__(msg)
        self.last_good = last_good


@dataclass
class VaeTrainResult:
    model: OccVAE
    store: nx.ParameterStore
    losses: list[float] = field(default_factory=list)


def train_vae(dataset: Sequence[np.ndarray] | np.ndarray, cfg: VaeConfig, epochs: int,
              lr: float = 1e-3, batch_size: int = 8, seed: int = 0, ema_decay: float = 0.999,
              min_lr: float = 1e-5, max_steps: int | None = None,
              model: OccVAE | None = None) -> VaeTrainResult:
    """Fit the VAE on label grids; returns live weights, EMA shadows and the loss curve."""
    frames = np.stack([g.labels if isinstance(g, OccupancyGrid) else np.asarray(g) for g in dataset]) \
        if len(dataset) else np.zeros((0,))
    if len(frames) == 0:
        raise ValueError("cannot train on an empty dataset")
    model = model or OccVAE(cfg, seed=seed)
    model.train()
    store = nx.ParameterStore.from_module(model)
    gen = torch.Generator().manual_seed(seed + 1)
    rng = np.random.default_rng(seed)
    per_epoch = math.ceil(len(frames) / batch_size)
    total = per_epoch * epochs if max_steps is None else min(per_epoch * epochs, max_steps)
    losses: list[float] = []
    last_good = {k: v.detach().clone() for k, v in store.params.items()}
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(frames))
        for b in range(per_epoch):
            if step >= total:
                break
            batch = torch.from_numpy(frames[order[b * batch_size:(b + 1) * batch_size]].astype(np.int64))
            mu, sigma = model.encode(batch)
            eps = torch.randn(mu.shape, generator=gen)
            logits = model.decode(reparameterize(mu, sigma, eps))
            try:
                loss = vae_loss(batch, logits, mu, sigma, cfg.beta, cfg.lovasz_weight)
            except NonFiniteLoss as exc:
                raise TrainingDiverged(str(exc), last_good) from exc
            store.zero_grad()
            loss.total.backward()
            nx.adamw_step(store, store.grads(), nx.cosine_lr(step, total, lr, min_lr), weight_decay=0.0)
            nx.ema_update(store, ema_decay)
            losses.append(float(loss.total.detach()))
            if step % 50 == 0:
                log.info("vae step %d/%d epoch %d loss %s", step, total, epoch, loss.item_dict())
                last_good = {k: v.detach().clone() for k, v in store.params.items()}
            step += 1
    model.eval()
    return VaeTrainResult(model, store, losses)


@torch.no_grad()
def reconstruct(model: OccVAE, frames: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Deterministic round trip through the posterior mean."""
    out = []
    for b in range(0, len(frames), batch_size):
        mu, _ = model.encode(frames[b:b + batch_size])
        out.append(argmax_labels(model.decode(mu)))
    return np.concatenate(out) if out else np.zeros((0, *model.cfg.grid_dims), dtype=np.uint8)


# --------------------------------------------------------------------------- #
# latent files

LATENT_MAGIC = b"OCCZ"
_LATENT_HEADER = struct.Struct("<4sIII")


def encode_latent(z) -> bytes:
    """One latent frame (n_h, n_w, C) as OCCZ: magic, u32 dims, little-endian f32 payload (C fastest)."""
    arr = np.asarray(z.detach().cpu() if torch.is_tensor(z) else z, dtype="<f4")
    if arr.ndim != 3:
        raise ValueError(f"latent must be (n_h, n_w, C), got shape {arr.shape}")
    return _LATENT_HEADER.pack(LATENT_MAGIC, *arr.shape) + np.ascontiguousarray(arr).tobytes()


def decode_latent(data: bytes) -> torch.Tensor:
    if len(data) < _LATENT_HEADER.size:
        raise Truncated("latent header truncated")
    magic, nh, nw, c = _LATENT_HEADER.unpack_from(data)
    if magic != LATENT_MAGIC:
        raise BadMagic(f"expected {LATENT_MAGIC!r}, got {magic!r}")
    n = nh * nw * c
    payload = data[_LATENT_HEADER.size:]
    if len(payload) < 4 * n:
        raise Truncated(f"latent payload has {len(payload)} bytes, expected {4 * n}")
    return torch.from_numpy(np.frombuffer(payload[:4 * n], dtype="<f4").reshape(nh, nw, c).copy())


def write_latent(z, path) -> None:
    with open(path, "wb") as f:
        f.write(encode_latent(z))


def read_latent(path) -> torch.Tensor:
    with open(path, "rb") as f:
        return decode_latent(f.read())
