"""Dual-source identity conditioning and the frozen toy generator backbone.

The reference video contributes identity slots (video stream); a
background-neutralized anchor frame contributes K image tokens (image
stream). A gate w in [0, 1] blends the two token sets and their global
summary vectors; the fused global vector drives FiLM modulation on the
last half of the backbone blocks. Cross-attention K/V/O projections carry
low-rank adapters; all other backbone weights stay frozen.
"""

import math

import torch
from torch import nn

from .latent_tokens import PatchEmbed3D, patch_grid_coords


def gate_schedule(t, kind: str = "linear"):
    """Gate w as a function of flow time t in [0, 1] (t=1 is pure noise).

    High-noise steps weight the clean image anchor; the clean end hands
    over to the temporal identity tokens.
    """
    t = torch.as_tensor(t)
    if ((t < 0) | (t > 1)).any():
        raise ValueError("diffusion time must lie in [0, 1]")
    if kind == "linear":
        return t
    if kind.startswith("constant:"):
        return torch.full_like(t, float(kind.split(":", 1)[1]))
    raise ValueError(f"unknown gate schedule {kind!r}")


def _check_gate(w):
    w = torch.as_tensor(w)
    if ((w < 0) | (w > 1)).any():
        raise ValueError("gate must lie in [0, 1]")
    return w


def gate_tokens(c_id: torch.Tensor, c_img: torch.Tensor, w):
    """(1-w) * C_id and w * C_img; w scalar or per-batch (B,)."""
    w = _check_gate(w).to(c_id.dtype)
    if w.ndim == 1:
        w = w[:, None, None]
    return (1.0 - w) * c_id, w * c_img


def fuse_global(g_vid: torch.Tensor, g_img: torch.Tensor, w):
    w = _check_gate(w).to(g_vid.dtype)
    if w.ndim == 1:
        w = w[:, None]
    return (1.0 - w) * g_vid + w * g_img


def prefix_dropout(prefix: torch.Tensor, p: float, generator=None, training: bool = True):
    """Independently zero whole prefix tokens with probability p (training only)."""
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout probability must lie in [0, 1)")
    if not training or p == 0.0:
        return prefix
    B, K, _ = prefix.shape
    keep = torch.rand(B, K, 1, generator=generator, device=prefix.device) >= p
    return prefix * keep.to(prefix.dtype)


class Film(nn.Module):
    """Feature-wise affine modulation; zero-initialized so it starts as identity."""

    def __init__(self, dim: int):
        super().__init__()
        self.gamma = nn.Linear(dim, dim)
        self.beta = nn.Linear(dim, dim)
        nn.init.zeros_(self.gamma.weight)
        nn.init.zeros_(self.gamma.bias)
        nn.init.zeros_(self.beta.weight)
        nn.init.zeros_(self.beta.bias)

    def forward(self, x: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
        return x * (1.0 + self.gamma(g)[:, None, :]) + self.beta(g)[:, None, :]


class LoraLinear(nn.Module):
    """Frozen linear plus trainable low-rank correction (B zero-initialized)."""

    def __init__(self, in_dim: int, out_dim: int, rank: int = 32, alpha: float = 16.0,
                 enabled: bool = True):
        super().__init__()
        if rank < 1:
            raise ValueError("rank must be >= 1")
        self.base = nn.Linear(in_dim, out_dim)
        self.base.weight.requires_grad_(False)
        self.base.bias.requires_grad_(False)
        self.enabled = enabled
        self.scale = alpha / rank
        if enabled:
            self.lora_a = nn.Parameter(torch.randn(in_dim, rank) / in_dim ** 0.5)
            self.lora_b = nn.Parameter(torch.zeros(rank, out_dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.base(x)
        if self.enabled:
            y = y + self.scale * (x @ self.lora_a) @ self.lora_b
        return y


class AnchorEncoder(nn.Module):
    """Single-frame latent -> K image-anchor tokens plus a global summary.

    Patch-embeds the anchor latent, then attention-pools with K learnable
    queries (softmax over tokens) and projects.
    """

    def __init__(self, in_channels: int, dim: int, n_tokens: int = 2, spatial_patch: int = 2):
        super().__init__()
        self.embed = PatchEmbed3D(in_channels, dim, kernel=(1, spatial_patch, spatial_patch))
        self.pool_queries = nn.Parameter(torch.randn(n_tokens, dim) / dim ** 0.5)
        self.proj = nn.Linear(dim, dim)
        self.summary = nn.Linear(dim, dim)

    def forward(self, z_img: torch.Tensor):
        if z_img.shape[2] != 1:
            raise ValueError("anchor latent must have a single frame")
        tokens = self.embed(z_img).data  # (B, L, D)
        scores = self.pool_queries[None] @ tokens.transpose(1, 2) / tokens.shape[-1] ** 0.5
        pooled = torch.softmax(scores, dim=-1) @ tokens  # (B, K, D)
        c_img = self.proj(pooled)
        return c_img, self.summary(c_img.mean(dim=1))


def sincos_time_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of flow time t in [0, 1], (B, dim)."""
    half = dim // 2
    freqs = torch.exp(torch.linspace(0.0, math.log(1000.0), half, device=t.device))
    angle = t.to(torch.get_default_dtype() if not t.is_floating_point() else t.dtype)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(angle), torch.cos(angle)], dim=1)


def sincos_position_embedding(coords: torch.Tensor, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Fixed 3D sin-cos absolute positions for backbone tokens, (L, dim)."""
    group = dim // 3
    parts = []
    for axis in range(3):
        size = dim - 2 * group if axis == 2 else group
        half = size // 2
        freqs = 2.0 ** (-torch.arange(half, dtype=dtype))
        angle = coords[:, axis].to(dtype)[:, None] * freqs[None, :]
        part = torch.cat([torch.sin(angle), torch.cos(angle)], dim=1)
        if part.shape[1] < size:  # odd remainder channel
            part = torch.cat([part, torch.zeros(len(coords), size - part.shape[1], dtype=dtype)], dim=1)
        parts.append(part)
    return torch.cat(parts, dim=1)


class CrossAttention(nn.Module):
    """Single-head-split cross-attention with adapters on K/V/O (Q frozen)."""

    def __init__(self, dim: int, heads: int, rank: int, alpha: float, adapt_output: bool):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.q.weight.requires_grad_(False)
        self.q.bias.requires_grad_(False)
        self.k = LoraLinear(dim, dim, rank, alpha)
        self.v = LoraLinear(dim, dim, rank, alpha)
        self.out = LoraLinear(dim, dim, rank, alpha, enabled=adapt_output)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        B, L, D = x.shape
        hd = D // self.heads

        def split(t):
            return t.view(B, -1, self.heads, hd).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(context)), split(self.v(context))
        attn = torch.softmax(q @ k.transpose(-1, -2) / hd ** 0.5, dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(B, L, D)
        return self.out(y)


class PlainSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, L, D = x.shape
        hd = D // self.heads
        q, k, v = (t.view(B, L, self.heads, hd).transpose(1, 2) for t in self.qkv(x).chunk(3, -1))
        attn = torch.softmax(q @ k.transpose(-1, -2) / hd ** 0.5, dim=-1)
        return self.out((attn @ v).transpose(1, 2).reshape(B, L, D))


class BackboneBlock(nn.Module):
    def __init__(self, dim: int, heads: int, rank: int, alpha: float,
                 adapt_output: bool, use_film: bool, mlp_ratio: int = 2):
        super().__init__()
        self.film = Film(dim) if use_film else None
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = PlainSelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.prefix_norm = nn.LayerNorm(dim)  # regularization on prefix tokens only
        self.cross_attn = CrossAttention(dim, heads, rank, alpha, adapt_output)
        self.norm3 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim)
        )

    def forward(self, x, prefix, text, g):
        if self.film is not None:
            x = self.film(x, g)
        x = x + self.self_attn(self.norm1(x))
        context = torch.cat([self.prefix_norm(prefix), text], dim=1)
        x = x + self.cross_attn(self.norm2(x), context)
        return x + self.mlp(self.norm3(x))


class ToyBackbone(nn.Module):
    """Frozen video transformer conditioned via cross-attention and FiLM.

    Trainable surface: cross-attention adapters, FiLM maps, prefix norms.
    Everything else (patchify, time embed, self-attention, MLPs, final
    projection) is frozen after initialization.
    """

    def __init__(self, in_channels: int, dim: int = 128, n_blocks: int = 8, heads: int = 16,
                 patch=(2, 2, 2), rank: int = 32, alpha: float = 16.0,
                 adapt_output: bool = True):
        super().__init__()
        self.in_channels = in_channels
        self.patch = tuple(patch)
        self.dim = dim
        self.embed = PatchEmbed3D(in_channels, dim, kernel=self.patch)
        self.time_mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))
        film_from = n_blocks - math.ceil(n_blocks / 2)
        self.blocks = nn.ModuleList(
            BackboneBlock(dim, heads, rank, alpha, adapt_output, use_film=(i >= film_from))
            for i in range(n_blocks)
        )
        self.final_norm = nn.LayerNorm(dim)
        patch_vol = in_channels * self.patch[0] * self.patch[1] * self.patch[2]
        self.unpatch = nn.Linear(dim, patch_vol)
        self._freeze_base()

    def _freeze_base(self):
        trainable_markers = ("lora_a", "lora_b", "film", "prefix_norm")
        for name, p in self.named_parameters():
            if not any(marker in name for marker in trainable_markers):
                p.requires_grad_(False)

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, prefix: torch.Tensor,
                text: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
        B, C, T, H, W = z_t.shape
        tokens = self.embed(z_t)
        x = tokens.data
        pos = sincos_position_embedding(tokens.coords, self.dim, dtype=x.dtype).to(x.device)
        x = x + pos[None]
        x = x + self.time_mlp(sincos_time_embedding(t.to(x.dtype), self.dim))[:, None, :]
        for block in self.blocks:
            x = block(x, prefix, text, g)
        out = self.unpatch(self.final_norm(x))  # (B, L, patch_vol)
        kt, kh, kw = self.patch
        nt, ny, nx = T // kt, H // kh, W // kw
        out = out.view(B, nt, ny, nx, C, kt, kh, kw)
        out = out.permute(0, 4, 1, 5, 2, 6, 3, 7).reshape(B, C, T, H, W)
        return out
