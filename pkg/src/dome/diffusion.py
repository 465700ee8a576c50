"""DDPM noise schedule, forward noising and the deterministic strided sampler."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

Tensor = torch.Tensor


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    beta: np.ndarray
    alpha_bar: np.ndarray
    inference_steps: tuple[int, ...]

    @property
    def T(self) -> int:
        return len(self.beta)

    def to_config(self) -> dict:
        return {
            "T": self.T,
            "beta_start": float(self.beta[0]),
            "beta_end": float(self.beta[-1]),
            "inference_steps": len(self.inference_steps),
        }


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02,
                  n_inference: int = 20) -> DiffusionSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if not 1 <= n_inference <= T:
        raise ValueError(f"n_inference must be in [1, {T}], got {n_inference}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - beta)
    stride = T // n_inference
    steps = tuple(int(s) for s in range(0, stride * n_inference, stride))[::-1]
    beta.flags.writeable = False
    alpha_bar.flags.writeable = False
    return DiffusionSchedule(beta, alpha_bar, steps)


def schedule_from_config(cfg: dict) -> DiffusionSchedule:
    return make_schedule(cfg["T"], cfg["beta_start"], cfg["beta_end"], cfg["inference_steps"])


def _check_index(i, schedule: DiffusionSchedule):
    idx = np.asarray(i.detach().cpu() if torch.is_tensor(i) else i)
    if np.any(idx < 0) or np.any(idx >= schedule.T):
        raise IndexError(f"diffusion step {i} outside [0, {schedule.T})")
    return idx


def _bcast(values: np.ndarray, like: Tensor) -> Tensor:
    """Per-sample coefficients shaped to broadcast over trailing dims."""
    t = torch.as_tensor(values, dtype=like.dtype, device=like.device)
    if t.ndim == 0:
        return t
    return t.reshape(-1, *([1] * (like.ndim - 1)))


def q_sample(x0: Tensor, i, eps: Tensor, schedule: DiffusionSchedule) -> Tensor:
    """x_i = sqrt(ab_i) x0 + sqrt(1 - ab_i) eps; ``i`` is scalar or one step per batch row."""
    if x0.shape != eps.shape:
        raise ValueError(f"x0 {tuple(x0.shape)} and eps {tuple(eps.shape)} differ")
    ab = schedule.alpha_bar[_check_index(i, schedule)]
    return _bcast(np.sqrt(ab), x0) * x0 + _bcast(np.sqrt(1.0 - ab), x0) * eps


def predict_x0(x_i: Tensor, eps_hat: Tensor, i, schedule: DiffusionSchedule) -> Tensor:
    ab = schedule.alpha_bar[_check_index(i, schedule)]
    if np.any(ab < 1e-12):
        raise ZeroDivisionError(f"alpha_bar {np.min(ab)} too small to invert")
    return (x_i - _bcast(np.sqrt(1.0 - ab), x_i) * eps_hat) / _bcast(np.sqrt(ab), x_i)


def inject_context(z_noisy: Tensor, z_ctx: Tensor, mask, detach_context: bool = True) -> Tensor:
    """Per-frame select: context where mask is true, noisy latent elsewhere.

    Latents are (..., n_f, n_h, n_w, C) and ``mask`` is (n_f,) or (B, n_f).
    Context latents come from the frozen encoder and are detached by default.
    """
    if z_noisy.shape != z_ctx.shape:
        raise ValueError(f"z_noisy {tuple(z_noisy.shape)} and z_ctx {tuple(z_ctx.shape)} differ")
    m = torch.as_tensor(mask, dtype=torch.bool, device=z_noisy.device)
    m = m.reshape(*m.shape, 1, 1, 1)
    if detach_context:
        z_ctx = z_ctx.detach()
    return torch.where(m, z_ctx, z_noisy)


Denoiser = Callable[[Tensor, int], Tensor]


def sample_loop(model: Denoiser, z_ctx: Tensor, mask, schedule: DiffusionSchedule,
                generator: torch.Generator | None = None, noise: Tensor | None = None,
                clip_x0: float | None = None) -> Tensor:
    """Deterministic strided sampling (eta = 0) with context frames held fixed.

    ``model(z, i)`` returns the noise estimate for the whole frame stack at
    step ``i``; conditioning is expected to be bound into the callable.
    ``clip_x0`` clamps each clean-latent estimate to ``[-clip_x0, clip_x0]``
    before the update, which keeps noisy early estimates in the data range.
    """
    mask_t = torch.as_tensor(mask, dtype=torch.bool)
    if noise is None:
        noise = torch.randn(z_ctx.shape, generator=generator, dtype=z_ctx.dtype)
    if noise.shape != z_ctx.shape:
        raise ValueError("noise shape must match the latent stack")
    z = noise
    steps = schedule.inference_steps
    if bool(mask_t.all()):
        return z_ctx.clone()
    for k, i in enumerate(steps):
        z = inject_context(z, z_ctx, mask_t)
        eps_hat = model(z, i)
        if eps_hat.shape != z.shape:
            raise ValueError(f"denoiser returned {tuple(eps_hat.shape)}, expected {tuple(z.shape)}")
        x0 = predict_x0(z, eps_hat, i, schedule)
        if clip_x0 is not None:
            x0 = x0.clamp(-clip_x0, clip_x0)
        if k + 1 < len(steps):
            ab_prev = float(schedule.alpha_bar[steps[k + 1]])
            z = np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps_hat
        else:
            z = x0
    return inject_context(z, z_ctx, mask_t)
