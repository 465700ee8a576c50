"""Tensor primitives, finite-difference gradient checks, AdamW, EMA and checkpoints.

Reverse-mode differentiation is provided by torch autograd; the functions here
pin down the shapes each primitive accepts and fail loudly when they do not
line up.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
import torch.nn.functional as F

Tensor = torch.Tensor


class ShapeError(ValueError):
    def __init__(self, op: str, msg: str):
        super().__init__(f"{op}: {msg}")
        self.op = op


def _shape(x) -> tuple:
    return tuple(x.shape)


# --------------------------------------------------------------------------- #
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError("matmul", f"inner dims differ: {_shape(a)} @ {_shape(b)}")
    return a @ b


def _broadcast(op: str, a: Tensor, b: Tensor):
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(op, f"cannot broadcast {_shape(a)} with {_shape(b)}") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast("add", a, b)
    return a + b


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast("mul", a, b)
    return a * b


def concat(xs: list[Tensor], dim: int = -1) -> Tensor:
    ref = list(xs[0].shape)
    for x in xs[1:]:
        other = list(x.shape)
        if len(other) != len(ref):
            raise ShapeError("concat", f"rank mismatch {ref} vs {other}")
        d = dim % len(ref)
        if other[:d] + other[d + 1:] != ref[:d] + ref[d + 1:]:
            raise ShapeError("concat", f"non-concat dims differ: {ref} vs {other} along dim {dim}")
    return torch.cat(xs, dim=dim)


def slice_(x: Tensor, dim: int, start: int, stop: int) -> Tensor:
    n = x.shape[dim]
    if not 0 <= start <= stop <= n:
        raise ShapeError("slice", f"range [{start}, {stop}) outside dim {dim} of size {n}")
    return x.narrow(dim, start, stop - start)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    known = [s for s in shape if s != -1]
    total = math.prod(known)
    if (-1 not in shape and total != x.numel()) or (total and x.numel() % total):
        raise ShapeError("reshape", f"cannot view {_shape(x)} ({x.numel()} elements) as {shape}")
    return x.reshape(shape)


def transpose(x: Tensor, dim0: int, dim1: int) -> Tensor:
    if not (-x.ndim <= dim0 < x.ndim and -x.ndim <= dim1 < x.ndim):
        raise ShapeError("transpose", f"dims ({dim0}, {dim1}) invalid for rank {x.ndim}")
    return x.transpose(dim0, dim1)


def embedding_lookup(table: Tensor, ids: Tensor) -> Tensor:
    if table.ndim != 2:
        raise ShapeError("embedding_lookup", f"table must be 2-D, got {_shape(table)}")
    if ids.numel() and (int(ids.max()) >= table.shape[0] or int(ids.min()) < 0):
        raise ShapeError("embedding_lookup", f"ids outside [0, {table.shape[0]})")
    return table[ids.long()]


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.shape[-1] != weight.shape[-1]:
        raise ShapeError("linear", f"input width {x.shape[-1]} vs weight {_shape(weight)}")
    if bias is not None and bias.shape != weight.shape[:1]:
        raise ShapeError("linear", f"bias {_shape(bias)} vs weight {_shape(weight)}")
    return F.linear(x, weight, bias)


def layer_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-6) -> Tensor:
    for name, p in (("weight", weight), ("bias", bias)):
        if p is not None and p.shape != x.shape[-1:]:
            raise ShapeError("layer_norm", f"{name} {_shape(p)} vs feature dim {x.shape[-1]}")
    return F.layer_norm(x, x.shape[-1:], weight, bias, eps)


def softmax(x: Tensor, dim: int = -1) -> Tensor:
    return torch.softmax(x, dim=dim)


def gelu(x: Tensor) -> Tensor:
    return F.gelu(x, approximate="tanh")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """x: (B, Cin, H, W); weight: (Cout, Cin, k, k)."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError("conv2d", f"input {_shape(x)} incompatible with kernel {_shape(weight)}")
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    if x.ndim != 5 or weight.ndim != 5 or x.shape[1] != weight.shape[1]:
        raise ShapeError("conv3d", f"input {_shape(x)} incompatible with kernel {_shape(weight)}")
    return F.conv3d(x, weight, bias, stride=stride, padding=padding)


def conv_transpose3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
                     padding: int = 0, output_padding: int = 0) -> Tensor:
    """x: (B, Cin, X, Y, Z); weight: (Cin, Cout, k, k, k), the layout of the matching conv3d kernel."""
    if x.ndim != 5 or weight.ndim != 5 or x.shape[1] != weight.shape[0]:
        raise ShapeError("conv_transpose3d", f"input {_shape(x)} incompatible with kernel {_shape(weight)}")
    return F.conv_transpose3d(x, weight, bias, stride=stride, padding=padding, output_padding=output_padding)


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor, num_heads: int) -> Tensor:
    """Exact multi-head attention over (B, N, C) inputs."""
    if q.ndim != 3 or k.shape != v.shape or q.shape[0] != k.shape[0] or q.shape[2] != k.shape[2]:
        raise ShapeError("attention", f"q {_shape(q)}, k {_shape(k)}, v {_shape(v)}")
    b, n, c = q.shape
    if c % num_heads:
        raise ShapeError("attention", f"width {c} not divisible by {num_heads} heads")
    hd = c // num_heads

    def split(t):
        return t.reshape(t.shape[0], t.shape[1], num_heads, hd).transpose(1, 2)

    qh, kh, vh = split(q), split(k), split(v)
    att = torch.softmax(qh @ kh.transpose(-1, -2) / math.sqrt(hd), dim=-1)
    return (att @ vh).transpose(1, 2).reshape(b, n, c)


# --------------------------------------------------------------------------- #
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float]
    passed: bool


def grad_check(f: Callable[[], Tensor], params: Mapping[str, Tensor] | Iterable[Tensor],
               h: float = 1e-6, tolerance: float = 1e-5) -> GradCheckReport:
    """Compare autograd gradients of scalar ``f()`` against central differences.

    Relative error per parameter is ||g_analytic - g_numeric|| / max(||g_analytic||,
    ||g_numeric||, 1e-12); the report carries the worst one.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if not isinstance(params, Mapping):
        params = {str(i): p for i, p in enumerate(params)}
    for p in params.values():
        p.grad = None
    out = f()
    if out.numel() != 1:
        raise ValueError(f"f must return a scalar, got shape {_shape(out)}")
    if not torch.isfinite(out):
        raise FloatingPointError("f returned a non-finite value")
    grads = torch.autograd.grad(out, list(params.values()), allow_unused=True)
    per_param = {}
    with torch.no_grad():
        for (name, p), g in zip(params.items(), grads):
            g = torch.zeros_like(p) if g is None else g
            num = torch.zeros_like(p)
            flat, nflat = p.view(-1), num.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise FloatingPointError(f"non-finite value perturbing {name}[{i}]")
                nflat[i] = (fp - fm) / (2 * h)
            denom = max(g.norm().item(), num.norm().item(), 1e-12)
            per_param[name] = (g - num).norm().item() / denom
    worst = max(per_param.values()) if per_param else 0.0
    return GradCheckReport(worst, per_param, worst < tolerance)


# --------------------------------------------------------------------------- #
# optimisation


@dataclass
class ParameterStore:
    """Named parameters plus AdamW moments and EMA shadows, iterated by name."""

    params: dict[str, Tensor]
    exp_avg: dict[str, Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, Tensor] = field(default_factory=dict)
    ema: dict[str, Tensor] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        self.params = {k: self.params[k] for k in sorted(self.params)}
        for name, p in self.params.items():
            self.exp_avg.setdefault(name, torch.zeros_like(p, requires_grad=False))
            self.exp_avg_sq.setdefault(name, torch.zeros_like(p, requires_grad=False))
            self.ema.setdefault(name, p.detach().clone())

    @classmethod
    def from_module(cls, module: torch.nn.Module, prefix: str = "") -> "ParameterStore":
        return cls({prefix + k: v for k, v in module.named_parameters() if v.requires_grad})

    def grads(self) -> dict[str, Tensor]:
        return {k: (p.grad if p.grad is not None else torch.zeros_like(p)) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def swap_ema(self) -> None:
        """Exchange live weights and EMA shadows in place."""
        with torch.no_grad():
            for name, p in self.params.items():
                tmp = p.detach().clone()
                p.copy_(self.ema[name])
                self.ema[name].copy_(tmp)


def adamw_step(store: ParameterStore, grads: Mapping[str, Tensor], lr: float,
               betas: tuple[float, float] = (0.9, 0.999), weight_decay: float = 0.0,
               eps: float = 1e-8) -> None:
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    b1, b2 = betas
    store.step += 1
    bc1 = 1 - b1 ** store.step
    bc2 = 1 - b2 ** store.step
    with torch.no_grad():
        for name, p in store.params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeError("adamw_step", f"grad {_shape(g)} vs param {name} {_shape(p)}")
            if weight_decay:
                p.mul_(1 - lr * weight_decay)
            m, v = store.exp_avg[name], store.exp_avg_sq[name]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            denom = (v / bc2).sqrt_().add_(eps)
            p.addcdiv_(m / bc1, denom, value=-lr)


def ema_update(store: ParameterStore, decay: float = 0.999) -> None:
    if not 0.0 <= decay <= 1.0:
        raise ValueError(f"decay must be in [0, 1], got {decay}")
    with torch.no_grad():
        for name, p in store.params.items():
            store.ema[name].mul_(decay).add_(p.detach(), alpha=1 - decay)


def cosine_lr(step: int, total: int, base_lr: float, min_lr: float = 0.0) -> float:
    if base_lr <= 0:
        raise ValueError("base_lr must be positive")
    if total <= 0:
        return base_lr
    frac = min(max(step, 0), total) / total
    return min_lr + 0.5 * (base_lr - min_lr) * (1 + math.cos(math.pi * frac))


# --------------------------------------------------------------------------- #
# checkpoint archive

CKPT_MAGIC = b"DOMEckpt"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_tensors(tensors: Mapping[str, Tensor | np.ndarray], path) -> None:
    out = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = tensors[name]
        arr = arr.detach().cpu().numpy() if torch.is_tensor(arr) else np.asarray(arr)
        encoded = name.encode("utf-8")
        out.append(struct.pack("<I", len(encoded)))
        out.append(encoded)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(out))


def load_tensors(path) -> dict[str, Tensor]:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint archive")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<HI", take(6))
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = math.prod(dims)
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims)
        out[name] = torch.from_numpy(arr.astype(np.float32))
    return out
