"""Full identity-conditioned generator: encoders + gating + frozen backbone."""

import hashlib
import json
import re
from pathlib import Path

import torch
from torch import nn

from . import tensorio
from .conditioning import (
    AnchorEncoder,
    ToyBackbone,
    fuse_global,
    gate_schedule,
    gate_tokens,
    prefix_dropout,
)
from .latent_tokens import PatchEmbed3D, STSAStack, stack_latents, temporal_diff
from .ot_core import SinkhornConfig
from .slot_reader import SlotReader


class IdentityEncoder(nn.Module):
    """Reference latents -> identity slots C_id and global summary g_vid."""

    def __init__(self, in_channels: int, dim: int = 128, n_slots: int = 6,
                 n_refine: int = 3, stsa_layers: int = 2, heads: int = 16,
                 sinkhorn: SinkhornConfig | None = None):
        super().__init__()
        self.embed = PatchEmbed3D(2 * in_channels, dim, kernel=(2, 2, 2))
        self.stsa = STSAStack(dim, heads=heads, n_layers=stsa_layers)
        self.reader = SlotReader(dim, n_slots=n_slots, n_iters=n_refine, sinkhorn=sinkhorn)

    def forward(self, ref_latents: torch.Tensor, step: int = 0, collect_diagnostics: bool = False):
        stacked = stack_latents(ref_latents, temporal_diff(ref_latents))
        tokens = self.stsa(self.embed(stacked))
        slots, _, diagnostics = self.reader.read(tokens.data, step, collect_diagnostics)
        return slots, self.reader.global_summary(slots), diagnostics


class ConvPoolEncoder(nn.Module):
    """Ablation variant: strided 3D convs, global average pool, linear to S tokens."""

    def __init__(self, in_channels: int, dim: int = 128, n_slots: int = 6, width: int = 32):
        super().__init__()
        self.n_slots = n_slots
        self.dim = dim
        self.convs = nn.Sequential(
            nn.Conv3d(2 * in_channels, width, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv3d(width, 2 * width, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv3d(2 * width, 4 * width, 3, stride=2, padding=1), nn.GELU(),
        )
        self.to_slots = nn.Linear(4 * width, n_slots * dim)
        self.summary = nn.Linear(dim, dim)

    def forward(self, ref_latents: torch.Tensor, step: int = 0, collect_diagnostics: bool = False):
        stacked = stack_latents(ref_latents, temporal_diff(ref_latents))
        feats = self.convs(stacked).mean(dim=(2, 3, 4))
        slots = self.to_slots(feats).view(-1, self.n_slots, self.dim)
        return slots, self.summary(slots.mean(dim=1)), None


class IdentityConditionedModel(nn.Module):
    """Flow-matching velocity predictor conditioned on a reference clip."""

    def __init__(self, in_channels: int = 4, dim: int = 128, n_slots: int = 6,
                 n_refine: int = 3, stsa_layers: int = 2, heads: int = 16,
                 n_blocks: int = 8, anchor_tokens: int = 2, text_vocab: int = 34,
                 rank: int = 32, alpha: float = 16.0, adapt_output: bool = True,
                 dropout_p: float = 0.05, gate_kind: str = "linear",
                 encoder_mode: str = "slots", sinkhorn: SinkhornConfig | None = None):
        super().__init__()
        if encoder_mode == "slots":
            self.encoder = IdentityEncoder(in_channels, dim, n_slots, n_refine,
                                           stsa_layers, heads, sinkhorn)
        elif encoder_mode == "conv_pool":
            self.encoder = ConvPoolEncoder(in_channels, dim, n_slots)
        else:
            raise ValueError(f"unknown encoder mode {encoder_mode!r}")
        self.anchor = AnchorEncoder(in_channels, dim, n_tokens=anchor_tokens)
        self.text_table = nn.Embedding(text_vocab, dim)
        self.backbone = ToyBackbone(in_channels, dim, n_blocks, heads,
                                    rank=rank, alpha=alpha, adapt_output=adapt_output)
        self.dropout_p = dropout_p
        self.gate_kind = gate_kind

    def condition(self, ref_latents, anchor_latents, text_ids, t, step=0,
                  training=False, generator=None, collect_diagnostics=False):
        """Assemble the prefix tokens, text tokens and fused global vector."""
        c_id, g_vid, diagnostics = self.encoder(ref_latents, step, collect_diagnostics)
        c_img, g_img = self.anchor(anchor_latents)
        w = gate_schedule(t, self.gate_kind)
        c_id_hat, c_img_hat = gate_tokens(c_id, c_img, w)
        prefix = torch.cat([c_img_hat, c_id_hat], dim=1)  # image tokens first
        prefix = prefix_dropout(prefix, self.dropout_p, generator, training)
        g = fuse_global(g_vid, g_img, w)
        return prefix, self.text_table(text_ids), g, diagnostics

    def forward(self, z_t, t, ref_latents, anchor_latents, text_ids, step=0,
                training=False, generator=None, collect_diagnostics=False):
        prefix, text, g, diagnostics = self.condition(
            ref_latents, anchor_latents, text_ids, t, step, training, generator,
            collect_diagnostics)
        v_pred = self.backbone(z_t, t, prefix, text, g)
        return v_pred, diagnostics

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def frozen_hash(self) -> str:
        """SHA-256 over all frozen parameter bytes, order-stable by name."""
        digest = hashlib.sha256()
        for name, p in sorted(self.named_parameters()):
            if not p.requires_grad:
                digest.update(name.encode())
                digest.update(p.detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()


def _safe_name(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name)


def save_checkpoint(model: nn.Module, out_dir, extra: dict | None = None) -> None:
    """Write every parameter as a tensor file plus a JSON manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"params": {}, "extra": extra or {}}
    for name, p in model.named_parameters():
        fname = _safe_name(name) + ".slid"
        tensorio.write_tensor(out_dir / fname, p.detach().cpu().numpy())
        manifest["params"][name] = {
            "file": fname,
            "shape": list(p.shape),
            "frozen": not p.requires_grad,
        }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_checkpoint(model: nn.Module, ckpt_dir) -> dict:
    ckpt_dir = Path(ckpt_dir)
    manifest = json.loads((ckpt_dir / "manifest.json").read_text())
    params = dict(model.named_parameters())
    with torch.no_grad():
        for name, info in manifest["params"].items():
            data = tensorio.read_tensor(ckpt_dir / info["file"])
            params[name].copy_(torch.from_numpy(data).to(params[name].dtype))
    return manifest.get("extra", {})
