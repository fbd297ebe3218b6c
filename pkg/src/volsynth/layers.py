"""Shared differentiable primitives for both pipeline stages.

Analytic gradients come from autograd; ``grad_check`` provides the
independent central-finite-difference oracle used by the test suite to
verify every differentiable operation in 64-bit mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


# ---------------------------------------------------------------------------
# Positional embeddings
# ---------------------------------------------------------------------------


def sincos_pe_1d(positions: np.ndarray, dim: int) -> np.ndarray:
    """[N, dim] sine-cosine embedding; first half sin, second half cos."""
    if dim % 2 != 0:
        raise ValueError(f"embedding dim must be even, got {dim}")
    half = dim // 2
    omega = 1.0 / (10000.0 ** (np.arange(half, dtype=np.float64) / half))
    out = np.outer(positions.astype(np.float64).reshape(-1), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_pe_3d(grid: tuple[int, int, int], dim: int) -> np.ndarray:
    """Per-axis 1D sine-cosine embeddings concatenated in (depth, height, width) order.

    Returns [D*H*W, dim]; rows follow C-order flattening of the grid.
    """
    if dim % 6 != 0:
        raise ValueError(f"3D sine-cosine embedding needs dim divisible by 6, got {dim}")
    d, h, w = grid
    per_axis = dim // 3
    zz, yy, xx = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    parts = [
        sincos_pe_1d(zz.reshape(-1), per_axis),
        sincos_pe_1d(yy.reshape(-1), per_axis),
        sincos_pe_1d(xx.reshape(-1), per_axis),
    ]
    return np.concatenate(parts, axis=1)


def grid_coords(grid: tuple[int, int, int]) -> torch.Tensor:
    """Integer (d, h, w) coordinates for each token of a C-order flattened grid."""
    d, h, w = grid
    zz, yy, xx = torch.meshgrid(
        torch.arange(d), torch.arange(h), torch.arange(w), indexing="ij"
    )
    return torch.stack([zz.reshape(-1), yy.reshape(-1), xx.reshape(-1)], dim=1)


# ---------------------------------------------------------------------------
# Rotary position embeddings
# ---------------------------------------------------------------------------


def split_pairs(head_dim: int, n_axes: int) -> list[int]:
    """Distribute head_dim/2 rotation pairs across axes, earlier axes first."""
    if head_dim % 2 != 0:
        raise ValueError(f"rotary embedding needs an even head dim, got {head_dim}")
    pairs = head_dim // 2
    base = pairs // n_axes
    out = [base] * n_axes
    for i in range(pairs - base * n_axes):
        out[i] += 1
    return out


def rope_angles(positions: torch.Tensor, head_dim: int) -> torch.Tensor:
    """Rotation angle per (token, pair) for multi-axis positions.

    positions: [T] or [T, n_axes] integer/float coordinates. Pairs are
    partitioned across axes; each axis uses the standard geometric
    frequency ladder over its own pair budget.
    """
    if positions.dim() == 1:
        positions = positions[:, None]
    n_axes = positions.shape[1]
    budgets = split_pairs(head_dim, n_axes)
    chunks = []
    for axis in range(n_axes):
        n_pairs = budgets[axis]
        freqs = 1.0 / (
            10000.0 ** (torch.arange(n_pairs, dtype=positions.dtype) / max(n_pairs, 1))
        )
        chunks.append(positions[:, axis : axis + 1].to(freqs.dtype) * freqs[None, :])
    return torch.cat(chunks, dim=1)  # [T, head_dim//2]


def rope_apply(x: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
    """Rotate consecutive coordinate pairs of the last axis by position-dependent angles.

    x: [..., T, head_dim]; positions: [T] or [T, n_axes]. Position 0 is the
    identity and every rotation preserves the Euclidean norm.
    """
    head_dim = x.shape[-1]
    angles = rope_angles(positions, head_dim).to(x.dtype)  # [T, head_dim//2]
    cos, sin = torch.cos(angles), torch.sin(angles)
    x1 = x[..., 0::2]
    x2 = x[..., 1::2]
    out = torch.empty_like(x)
    out[..., 0::2] = x1 * cos - x2 * sin
    out[..., 1::2] = x1 * sin + x2 * cos
    return out


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------


@dataclass
class AttentionConfig:
    num_heads: int
    head_dim: int
    rope_enabled: bool = False
    rope_axes: int = 1  # how many coordinate axes positions carry

    @property
    def dim(self) -> int:
        return self.num_heads * self.head_dim


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention over the T axis of a [G, T, d] stream.

    The leading axis is a batch of independent groups (modality slots,
    spatial sites, or depth planes depending on the caller). Optional
    rotary embeddings act on queries and keys per head.
    """

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.dim
        self.qkv = nn.Linear(d, 3 * d, bias=True)
        self.proj = nn.Linear(d, d, bias=True)

    def forward(self, x, positions=None, return_weights=False):
        if x.dim() != 3:
            raise ValueError(f"expected [G, T, d], got shape {tuple(x.shape)}")
        g, t, d = x.shape
        cfg = self.cfg
        if d != cfg.dim:
            raise ValueError(f"feature dim {d} != num_heads*head_dim {cfg.dim}")
        qkv = self.qkv(x).reshape(g, t, 3, cfg.num_heads, cfg.head_dim)
        q = qkv[:, :, 0].transpose(1, 2)  # [G, H, T, hd]
        k = qkv[:, :, 1].transpose(1, 2)
        v = qkv[:, :, 2].transpose(1, 2)
        if cfg.rope_enabled:
            if positions is None:
                raise ValueError("rope_enabled attention needs token positions")
            q = rope_apply(q, positions)
            k = rope_apply(k, positions)
        scores = q @ k.transpose(-2, -1) / math.sqrt(cfg.head_dim)
        weights = torch.softmax(scores, dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(g, t, d)
        out = self.proj(out)
        if return_weights:
            return out, weights
        return out


# ---------------------------------------------------------------------------
# Adaptive layer-norm modulation
# ---------------------------------------------------------------------------


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    """(1 + scale) * x + shift with shift/scale broadcast over token axes."""
    extra = x.dim() - shift.dim()
    view = shift.shape[:1] + (1,) * extra + shift.shape[1:]
    return x * (1.0 + scale.reshape(view)) + shift.reshape(view)


class Modulation(nn.Module):
    """Per-block linear map of the conditioning vector to shift/scale/gate triples.

    Zero-initialized, so every gated residual starts as the identity and
    cond = 0 yields shift = scale = gate = 0.
    """

    def __init__(self, cond_dim: int, dim: int, n_values: int = 6):
        super().__init__()
        self.linear = nn.Linear(cond_dim, n_values * dim, bias=True)
        nn.init.zeros_(self.linear.weight)
        nn.init.zeros_(self.linear.bias)
        self.n_values = n_values
        self.dim = dim

    def forward(self, cond: torch.Tensor) -> tuple[torch.Tensor, ...]:
        if cond.dim() == 1:
            cond = cond[None]
        return F.silu(cond).matmul(self.linear.weight.t()).add(self.linear.bias).chunk(self.n_values, dim=-1)


class TimestepEmbedder(nn.Module):
    """Sinusoidal frequency embedding of the timestep followed by a SiLU MLP."""

    def __init__(self, dim: int, freq_dim: int = 256, t_max: int = 10**9):
        super().__init__()
        self.freq_dim = freq_dim
        self.t_max = t_max
        self.mlp = nn.Sequential(
            nn.Linear(freq_dim, dim, bias=True),
            nn.SiLU(),
            nn.Linear(dim, dim, bias=True),
        )

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        if t.dim() == 0:
            t = t[None]
        if torch.any(t < 1) or torch.any(t > self.t_max):
            raise ValueError(f"timestep out of [1, {self.t_max}]")
        half = self.freq_dim // 2
        p = next(self.mlp.parameters())
        freqs = torch.exp(
            -math.log(10000.0) * torch.arange(half, dtype=p.dtype) / half
        )
        args = t.to(p.dtype)[:, None] * freqs[None, :]
        emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
        return self.mlp(emb)


# ---------------------------------------------------------------------------
# Shape-checked functional conv
# ---------------------------------------------------------------------------


def conv3d_forward(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation on a single [C, D, H, W] sample with exact-shape checks."""
    if x.dim() != 4:
        raise ValueError(f"expected [C, D, H, W], got {tuple(x.shape)}")
    stride = (stride,) * 3 if isinstance(stride, int) else tuple(stride)
    padding = (padding,) * 3 if isinstance(padding, int) else tuple(padding)
    for ax in range(3):
        n, k = x.shape[1 + ax], weight.shape[2 + ax]
        span = n + 2 * padding[ax] - k
        if span < 0 or span % stride[ax] != 0:
            raise ValueError(
                f"axis {ax}: size {n} with kernel {k}, stride {stride[ax]}, "
                f"padding {padding[ax]} gives a non-integer output dim"
            )
    return F.conv3d(x[None], weight, bias, stride=stride, padding=padding)[0]


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------


def grad_check(fn, inputs, step: float = 1e-5, seed: int = 0,
               max_coords: int | None = None) -> float:
    """Max relative error between autograd and central finite differences.

    ``fn(*inputs)`` may return any tensor; non-scalar outputs are reduced
    with a fixed random projection so both routes see the same scalar.
    All differentiation happens in the inputs' own dtype (use float64).
    ``max_coords`` caps the checked coordinates per input to a seeded
    random subset for expensive operations.
    """
    inputs = [x.detach().clone().requires_grad_(True) for x in inputs]

    out = fn(*inputs)
    if out.dim() > 0 and out.numel() > 1:
        gen = torch.Generator().manual_seed(seed)
        w = torch.randn(out.shape, generator=gen, dtype=out.dtype)

        def scalar_fn(*args):
            return (fn(*args) * w).sum()
    else:
        def scalar_fn(*args):
            return fn(*args).reshape(())

    loss = scalar_fn(*inputs)
    grads = torch.autograd.grad(loss, inputs, allow_unused=True)

    worst = 0.0
    with torch.no_grad():
        for x, g in zip(inputs, grads):
            if g is None:
                g = torch.zeros_like(x)
            flat = x.reshape(-1)
            coords = range(flat.numel())
            if max_coords is not None and flat.numel() > max_coords:
                picker = np.random.default_rng(seed)
                coords = sorted(picker.choice(flat.numel(), size=max_coords, replace=False))
            for i in coords:
                orig = flat[i].item()
                flat[i] = orig + step
                f_plus = scalar_fn(*inputs).item()
                flat[i] = orig - step
                f_minus = scalar_fn(*inputs).item()
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * step)
                analytic = g.reshape(-1)[i].item()
                denom = max(abs(numeric), abs(analytic), 1e-6)
                worst = max(worst, abs(numeric - analytic) / denom)
    return worst
