"""Spatio-temporal diffusion transformer with adaLN-zero conditioning.

Spatial blocks attend over the tokens of one frame (frames folded into the
batch); temporal blocks attend over frames at one spatial index (spatial
positions folded into the batch). Both are modulated by a conditioning vector
built from the diffusion step and the ego trajectory.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from . import numerics as nx
from .diffusion import inject_context
from .trajectory import TrajectoryEncoder

__all__ = [
    "DitConfig", "SpatioTemporalDiT", "patchify", "unpatchify", "sincos_1d", "sincos_2d",
    "condition_mask", "masked_loss", "inject_context", "AllFramesMasked",
]


@dataclass
class DitConfig:
    n_f: int = 11
    latent_hw: tuple[int, int] = (10, 10)
    channels: int = 16
    patch: int = 1
    hidden: int = 64
    heads: int = 4
    depth: int = 2
    mlp_ratio: float = 4.0
    p_inj: float = 0.1
    L_xy: int = 10
    L_yaw: int = 4
    freq_dim: int = 128

    def __post_init__(self):
        self.latent_hw = tuple(self.latent_hw)
        nh, nw = self.latent_hw
        if nh % self.patch or nw % self.patch:
            raise ValueError(f"latent {nh}x{nw} not divisible by patch {self.patch}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if not 0.0 <= self.p_inj <= 1.0:
            raise ValueError("p_inj must lie in [0, 1]")
        if self.hidden % 4:
            raise ValueError("hidden width must be divisible by 4 for 2-D sin/cos embeddings")

    @property
    def grid(self) -> tuple[int, int]:
        return self.latent_hw[0] // self.patch, self.latent_hw[1] // self.patch

    @property
    def n_t(self) -> int:
        gh, gw = self.grid
        return gh * gw

    def to_dict(self) -> dict:
        return asdict(self)


PAPER_DIT = DitConfig(n_f=11, latent_hw=(25, 25), channels=16, patch=1, hidden=1152, heads=16, depth=14)


def patchify(z: torch.Tensor, p: int) -> torch.Tensor:
    """(B, n_f, n_h, n_w, C) -> (B, n_f, n_t, p*p*C) without projection."""
    b, f, nh, nw, c = z.shape
    if nh % p or nw % p:
        raise ValueError(f"latent {nh}x{nw} not divisible by patch size {p}")
    z = z.reshape(b, f, nh // p, p, nw // p, p, c).permute(0, 1, 2, 4, 3, 5, 6)
    return z.reshape(b, f, (nh // p) * (nw // p), p * p * c)


def unpatchify(tokens: torch.Tensor, p: int, grid: tuple[int, int], channels: int) -> torch.Tensor:
    b, f, n_t, _ = tokens.shape
    gh, gw = grid
    if n_t != gh * gw:
        raise ValueError(f"{n_t} tokens do not tile a {gh}x{gw} grid")
    z = tokens.reshape(b, f, gh, gw, p, p, channels).permute(0, 1, 2, 4, 3, 5, 6)
    return z.reshape(b, f, gh * p, gw * p, channels)


def sincos_1d(dim: int, positions) -> np.ndarray:
    """Interleaved (sin, cos) pairs over geometric frequencies, shape (len(positions), dim)."""
    if dim % 2:
        raise ValueError("embedding width must be even")
    pos = np.asarray(positions, dtype=np.float64).reshape(-1)
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim // 2))
    ang = pos[:, None] * omega[None]
    out = np.empty((len(pos), dim))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def sincos_2d(dim: int, grid: tuple[int, int]) -> np.ndarray:
    """Row coordinate in the first half of the channels, column in the second."""
    gh, gw = grid
    rows, cols = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    return np.concatenate([sincos_1d(dim // 2, rows), sincos_1d(dim // 2, cols)], axis=1)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def condition_mask(n_f: int, n_c: int) -> torch.Tensor:
    if not 0 <= n_c <= n_f:
        raise ValueError(f"n_c={n_c} outside [0, {n_f}]")
    return torch.arange(n_f) < n_c


def modulate(x, shift, scale):
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class Attention(nn.Module):
    def __init__(self, hidden: int, heads: int):
        super().__init__()
        self.qkv = nn.Linear(hidden, 3 * hidden)
        self.proj = nn.Linear(hidden, hidden)
        self.heads = heads

    def forward(self, x):
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        return self.proj(nx.scaled_dot_product_attention(q, k, v, self.heads))


class DiTBlock(nn.Module):
    def __init__(self, hidden: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(hidden, heads)
        self.norm2 = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        inner = int(hidden * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(hidden, inner), nn.GELU(approximate="tanh"), nn.Linear(inner, hidden))
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(hidden, 6 * hidden))
        nn.init.zeros_(self.adaLN_modulation[-1].weight)
        nn.init.zeros_(self.adaLN_modulation[-1].bias)

    def forward(self, x, c):
        sh1, sc1, g1, sh2, sc2, g2 = self.adaLN_modulation(c).chunk(6, dim=-1)
        x = x + g1.unsqueeze(1) * self.attn(modulate(self.norm1(x), sh1, sc1))
        return x + g2.unsqueeze(1) * self.mlp(modulate(self.norm2(x), sh2, sc2))


class FinalLayer(nn.Module):
    def __init__(self, hidden: int, out: int):
        super().__init__()
        self.norm = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        self.linear = nn.Linear(hidden, out)
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(hidden, 2 * hidden))
        nn.init.zeros_(self.adaLN_modulation[-1].weight)
        nn.init.zeros_(self.adaLN_modulation[-1].bias)

    def forward(self, x, c):
        shift, scale = self.adaLN_modulation(c).chunk(2, dim=-1)
        return self.linear(modulate(self.norm(x), shift, scale))


class NonFiniteActivation(FloatingPointError):
    pass


class SpatioTemporalDiT(nn.Module):
    def __init__(self, cfg: DitConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            p, c, h = cfg.patch, cfg.channels, cfg.hidden
            self.x_embed = nn.Linear(p * p * c, h)
            self.t_embed = nn.Sequential(nn.Linear(cfg.freq_dim, h), nn.SiLU(), nn.Linear(h, h))
            self.traj_embed = TrajectoryEncoder(cfg.n_f, h, cfg.L_xy, cfg.L_yaw)
            self.null_traj = nn.Parameter(torch.zeros(h))
            self.spatial_blocks = nn.ModuleList(DiTBlock(h, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
            self.temporal_blocks = nn.ModuleList(DiTBlock(h, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
            self.final = FinalLayer(h, p * p * c)
        self.register_buffer("pe_spatial", torch.from_numpy(sincos_2d(h, cfg.grid)).float(), persistent=False)
        self.register_buffer("pe_temporal", torch.from_numpy(sincos_1d(h, np.arange(cfg.n_f))).float(),
                             persistent=False)

    # -- pieces -------------------------------------------------------------

    def patchify(self, z: torch.Tensor) -> torch.Tensor:
        """Latent (B, n_f, n_h, n_w, C) -> projected tokens (B, n_f, n_t, hidden)."""
        cfg = self.cfg
        if tuple(z.shape[1:]) != (cfg.n_f, *cfg.latent_hw, cfg.channels):
            raise ValueError(f"latent shape {tuple(z.shape[1:])} does not match config")
        return self.x_embed(patchify(z, cfg.patch))

    def add_positional(self, tokens: torch.Tensor) -> torch.Tensor:
        pe_s = self.pe_spatial.to(tokens.dtype)
        pe_t = self.pe_temporal.to(tokens.dtype)
        return tokens + pe_s[None, None] + pe_t[None, :, None]

    def trajectory_embedding(self, deltas, drop=None) -> torch.Tensor:
        e = self.traj_embed(deltas)
        if drop is not None:
            drop = torch.as_tensor(drop, dtype=torch.bool).reshape(-1, 1)
            e = torch.where(drop, self.null_traj.to(e.dtype).expand_as(e), e)
        return e

    def build_condition(self, timesteps, e_traj: torch.Tensor | None) -> torch.Tensor:
        t = torch.as_tensor(timesteps).reshape(-1)
        dtype = self.x_embed.weight.dtype
        c = self.t_embed(timestep_embedding(t, self.cfg.freq_dim).to(dtype))
        if e_traj is None:
            return c
        if e_traj.shape[-1] != c.shape[-1]:
            raise ValueError(f"trajectory embedding width {e_traj.shape[-1]} vs hidden {c.shape[-1]}")
        return c + e_traj

    def blocks_forward(self, tokens: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        b, f, n, h = tokens.shape
        x = tokens
        for k, (sb, tb) in enumerate(zip(self.spatial_blocks, self.temporal_blocks)):
            x = sb(x.reshape(b * f, n, h), c.repeat_interleave(f, dim=0)).reshape(b, f, n, h)
            x = x.transpose(1, 2).reshape(b * n, f, h)
            x = tb(x, c.repeat_interleave(n, dim=0)).reshape(b, n, f, h).transpose(1, 2)
            if not torch.isfinite(x).all():
                raise NonFiniteActivation(f"non-finite activations after block {k}")
        return x

    # -- full pass ----------------------------------------------------------

    def forward(self, z: torch.Tensor, timesteps, deltas=None, drop_traj=None) -> torch.Tensor:
        """Noise estimate with the latent's shape (B, n_f, n_h, n_w, C)."""
        cfg = self.cfg
        tokens = self.add_positional(self.patchify(z))
        b = z.shape[0]
        t = torch.as_tensor(timesteps).reshape(-1)
        if t.numel() == 1:
            t = t.expand(b)
        e = None
        if deltas is not None:
            e = self.trajectory_embedding(torch.as_tensor(deltas).reshape(b, cfg.n_f, 3), drop_traj)
        c = self.build_condition(t, e)
        x = self.blocks_forward(tokens, c)
        out = self.final(x.reshape(b * cfg.n_f, cfg.n_t, cfg.hidden), c.repeat_interleave(cfg.n_f, dim=0))
        return unpatchify(out.reshape(b, cfg.n_f, cfg.n_t, -1), cfg.patch, cfg.grid, cfg.channels)


class AllFramesMasked(UserWarning):
    pass


def masked_loss(eps_hat: torch.Tensor, eps: torch.Tensor, mask) -> torch.Tensor:
    """Mean squared error over non-context frames of (B, n_f, ...) tensors."""
    if eps_hat.shape != eps.shape:
        raise ValueError(f"eps_hat {tuple(eps_hat.shape)} vs eps {tuple(eps.shape)}")
    m = torch.as_tensor(mask, dtype=torch.bool, device=eps.device)
    if m.ndim == 1:
        m = m.expand(eps.shape[0], -1)
    keep = (~m).to(eps_hat.dtype).reshape(*m.shape, *([1] * (eps.ndim - 2)))
    per_frame = math.prod(eps.shape[2:])
    n = keep.sum() * per_frame
    if n.item() == 0:
        warnings.warn("every frame is masked; loss defined as zero", AllFramesMasked, stacklevel=2)
        return (eps_hat * 0.0).sum()
    return ((eps_hat - eps).pow(2) * keep).sum() / n
