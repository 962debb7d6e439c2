"""Latent volumes -> context-mixed token sequences.

Pipeline: temporal difference, channel stacking, strided 3D patch
embedding (kernel == stride), 3D rotary positions, and a small stack of
pre-norm spatio-temporal self-attention blocks.
"""

from dataclasses import dataclass

import torch
from torch import nn

ROPE_BASE = 10000.0


@dataclass
class TokenSequence:
    data: torch.Tensor    # (B, L, D)
    coords: torch.Tensor  # (L, 3) long, (t, y, x) patch indices, row-major order


def temporal_diff(z: torch.Tensor) -> torch.Tensor:
    """Frame-to-frame difference along time; the first slice is zero."""
    dz = torch.zeros_like(z)
    dz[:, :, 1:] = z[:, :, 1:] - z[:, :, :-1]
    return dz


def temporal_cumsum(dz: torch.Tensor, first: torch.Tensor) -> torch.Tensor:
    """Inverse of temporal_diff given the first frame slice (B, C, H, W)."""
    out = dz.clone()
    out[:, :, 0] = first
    return torch.cumsum(out, dim=2)


def stack_latents(z: torch.Tensor, dz: torch.Tensor) -> torch.Tensor:
    if z.shape != dz.shape:
        raise ValueError(f"shape mismatch {tuple(z.shape)} vs {tuple(dz.shape)}")
    return torch.cat([z, dz], dim=1)


def patch_grid_coords(nt: int, ny: int, nx: int, device=None) -> torch.Tensor:
    t, y, x = torch.meshgrid(
        torch.arange(nt, device=device),
        torch.arange(ny, device=device),
        torch.arange(nx, device=device),
        indexing="ij",
    )
    return torch.stack([t.flatten(), y.flatten(), x.flatten()], dim=1)


class PatchEmbed3D(nn.Module):
    """Non-overlapping strided Conv3d projecting to D-dim tokens."""

    def __init__(self, in_channels: int, dim: int, kernel=(2, 2, 2)):
        super().__init__()
        self.kernel = tuple(kernel)
        self.proj = nn.Conv3d(in_channels, dim, self.kernel, stride=self.kernel)

    def forward(self, z: torch.Tensor) -> TokenSequence:
        _, _, T, H, W = z.shape
        kt, kh, kw = self.kernel
        if T % kt or H % kh or W % kw:
            raise ValueError(f"dims {(T, H, W)} not divisible by kernel {self.kernel}")
        feats = self.proj(z)  # (B, D, T/kt, H/kh, W/kw)
        B, D, nt, ny, nx = feats.shape
        data = feats.flatten(2).transpose(1, 2)  # (B, L, D), row-major (t, y, x)
        return TokenSequence(data, patch_grid_coords(nt, ny, nx, device=z.device))


def _rope_group_sizes(dim: int):
    if dim < 6 or dim % 2:
        raise ValueError(f"rope3d needs an even channel count >= 6, got {dim}")
    base = (dim // 3) & ~1
    sizes = [base, base, base]
    extra = dim - 3 * base
    for i in range(extra // 2):
        sizes[i % 3] += 2
    return sizes


def rope3d(x: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Rotate channel groups by per-axis coordinates (norm-preserving).

    The channel dim splits into three near-equal even groups, one per
    (t, y, x) axis, each rotated with standard rotary frequencies.
    """
    D = x.shape[-1]
    out = []
    offset = 0
    for axis, size in enumerate(_rope_group_sizes(D)):
        half = size // 2
        freqs = ROPE_BASE ** (-torch.arange(half, dtype=x.dtype, device=x.device) / half)
        angle = coords[:, axis].to(x.dtype)[:, None] * freqs[None, :]  # (L, half)
        cos, sin = torch.cos(angle), torch.sin(angle)
        x1 = x[..., offset:offset + half]
        x2 = x[..., offset + half:offset + size]
        out.append(x1 * cos - x2 * sin)
        out.append(x1 * sin + x2 * cos)
        offset += size
    return torch.cat(out, dim=-1)


class RotarySelfAttention(nn.Module):
    """Multi-head self-attention with rope3d applied to queries and keys."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"heads {heads} must divide dim {dim}")
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
        B, L, D = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = rope3d(q, coords)
        k = rope3d(k, coords)
        hd = D // self.heads

        def split(t):
            return t.view(B, L, self.heads, hd).transpose(1, 2)

        q, k, v = split(q), split(k), split(v)
        attn = torch.softmax(q @ k.transpose(-1, -2) / hd ** 0.5, dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(B, L, D)
        return self.out(y)


class STSABlock(nn.Module):
    """Pre-norm block: attention + residual, then 4x GELU MLP + residual."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = RotarySelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim)
        )

    def forward(self, x: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), coords)
        return x + self.mlp(self.norm2(x))


class STSAStack(nn.Module):
    def __init__(self, dim: int, heads: int = 16, n_layers: int = 2, mlp_ratio: int = 4):
        super().__init__()
        self.blocks = nn.ModuleList(STSABlock(dim, heads, mlp_ratio) for _ in range(n_layers))

    def forward(self, tokens: TokenSequence) -> TokenSequence:
        x = tokens.data
        for block in self.blocks:
            x = block(x, tokens.coords)
        if not torch.isfinite(x).all():
            raise ValueError("non-finite STSA output")
        return TokenSequence(x, tokens.coords)
