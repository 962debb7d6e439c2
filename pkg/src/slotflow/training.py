"""Flow-matching objective, training loop, gradient verification, ablations."""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from . import synthgen
from .conditioning import gate_schedule
from .model import ConvPoolEncoder, IdentityConditionedModel  # noqa: F401 (ablation A)
from .ot_core import SinkhornConfig, temperature
from .rng import derive_seed, substream


class NumericalError(RuntimeError):
    """Raised when training hits NaN/Inf loss."""


@dataclass
class FlowSample:
    z1: torch.Tensor      # clean latents
    z0: torch.Tensor      # Gaussian noise, same shape
    t: torch.Tensor       # (B,) in [0, 1]
    z_t: torch.Tensor     # linear interpolant
    v_star: torch.Tensor  # target velocity z0 - z1


def make_flow_sample(z1: torch.Tensor, generator: torch.Generator | None = None,
                     t: torch.Tensor | None = None, z0: torch.Tensor | None = None) -> FlowSample:
    if t is None:
        t = torch.rand(z1.shape[0], generator=generator, dtype=z1.dtype)
    if z0 is None:
        z0 = torch.randn(z1.shape, generator=generator, dtype=z1.dtype)
    t_b = t.view(-1, *([1] * (z1.ndim - 1)))
    z_t = (1.0 - t_b) * z1 + t_b * z0
    return FlowSample(z1, z0, t, z_t, z0 - z1)


def flow_matching_loss(v_pred: torch.Tensor, v_star: torch.Tensor) -> torch.Tensor:
    if v_pred.shape != v_star.shape:
        raise ValueError(f"shape mismatch {tuple(v_pred.shape)} vs {tuple(v_star.shape)}")
    return ((v_pred - v_star) ** 2).mean()


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    learning_rate: float = 1e-3
    pretrain_steps: int = 2000
    pretrain_lr: float = 1e-3
    seed: int = 0
    ablation: str = "full"  # full | conv_pool | shuffled
    # data
    n_identities: int = 24
    clips_per_identity: int = 4
    frames: int = 16
    height: int = 64
    width: int = 64
    latent_channels: int = 4
    latent_target_std: float = 1.5
    # model
    dim: int = 128
    n_slots: int = 6
    n_refine: int = 3
    stsa_layers: int = 2
    heads: int = 16
    n_blocks: int = 8
    anchor_tokens: int = 2
    lora_rank: int = 32
    lora_alpha: float = 16.0
    adapt_output: bool = True
    dropout_p: float = 0.05
    gate_schedule: str = "linear"
    # sinkhorn
    tau_start: float = 1.0
    tau_end: float = 0.3
    decay_steps: int = 1000
    sinkhorn_iters: int = 20
    sinkhorn_eps: float = 1e-8
    # misc
    precision: str = "f32"  # f32 | f64
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.ablation not in ("full", "conv_pool", "shuffled"):
            raise ValueError(f"unknown ablation mode {self.ablation!r}")
        if self.precision not in ("f32", "f64"):
            raise ValueError("precision must be f32 or f64")
        if self.steps < 1 or self.batch_size < 1 or self.learning_rate < 0:
            raise ValueError("steps/batch_size/learning_rate must be positive")
        if self.pretrain_steps < 0:
            raise ValueError("pretrain_steps must be >= 0")

    def sinkhorn_config(self) -> SinkhornConfig:
        return SinkhornConfig(self.tau_start, self.tau_end, self.decay_steps,
                              self.sinkhorn_iters, self.sinkhorn_eps)


def build_model(cfg: TrainConfig) -> IdentityConditionedModel:
    torch.manual_seed(derive_seed(cfg.seed, "init"))
    encoder_mode = "conv_pool" if cfg.ablation == "conv_pool" else "slots"
    model = IdentityConditionedModel(
        in_channels=cfg.latent_channels, dim=cfg.dim, n_slots=cfg.n_slots,
        n_refine=cfg.n_refine, stsa_layers=cfg.stsa_layers, heads=cfg.heads,
        n_blocks=cfg.n_blocks, anchor_tokens=cfg.anchor_tokens,
        text_vocab=data_mod.TEXT_VOCAB, rank=cfg.lora_rank, alpha=cfg.lora_alpha,
        adapt_output=cfg.adapt_output, dropout_p=cfg.dropout_p,
        gate_kind=cfg.gate_schedule, encoder_mode=encoder_mode,
        sinkhorn=cfg.sinkhorn_config(),
    )
    if cfg.precision == "f64":
        model.double()
    return model


class Trainer:
    """Owns the model, data, optimizer and the metrics stream."""

    def __init__(self, cfg: TrainConfig, metrics_path=None):
        self.cfg = cfg
        self.dtype = torch.float64 if cfg.precision == "f64" else torch.float32
        self.dataset = data_mod.build_dataset(
            cfg.seed, cfg.n_identities, cfg.clips_per_identity,
            cfg.frames, cfg.height, cfg.width,
            latent_target_std=cfg.latent_target_std)
        self.model = build_model(cfg)
        self.optimizer = torch.optim.Adam(self.model.trainable_parameters(),
                                          lr=cfg.learning_rate, betas=(0.9, 0.999))
        self.batch_rng = substream(cfg.seed, "batches")
        self.flow_gen = torch.Generator().manual_seed(derive_seed(cfg.seed, "flow"))
        self.dropout_gen = torch.Generator().manual_seed(derive_seed(cfg.seed, "dropout"))
        self.step_count = 0
        self.history = []
        self.metrics_path = Path(metrics_path) if metrics_path else None
        self._metrics_fh = None
        if self.metrics_path:
            self.metrics_path.parent.mkdir(parents=True, exist_ok=True)
            self._metrics_fh = open(self.metrics_path, "w")
        self.pretrain_losses = []
        if cfg.pretrain_steps > 0:
            self._pretrain_backbone()

    def _pretrain_backbone(self):
        """Backbone initialization: brief text-conditioned flow pretraining.

        The base weights are trained without any reference conditioning
        (zero prefix, g = 0) and then re-frozen; adapters, FiLM maps and
        prefix norms are untouched, so their zero-init identities survive.
        A frozen-but-functional generator is what makes the conditioning
        pathway learnable at all: cross-attention must already transport
        context content before low-rank adapters can specialize it.
        """
        cfg = self.cfg
        bb = self.model.backbone
        base = [p for p in bb.parameters() if not p.requires_grad]
        for p in base:
            p.requires_grad_(True)
        params = base + list(self.model.text_table.parameters())
        opt = torch.optim.Adam(params, lr=cfg.pretrain_lr, betas=(0.9, 0.999))
        rng = substream(cfg.seed, "pretrain/batches")
        gen = torch.Generator().manual_seed(derive_seed(cfg.seed, "pretrain/flow"))
        n_prefix = cfg.anchor_tokens + cfg.n_slots
        for step in range(cfg.pretrain_steps):
            batch = data_mod.sample_batch(self.dataset, cfg.batch_size, rng)
            sample = make_flow_sample(batch.z1.to(self.dtype), gen)
            prefix = torch.zeros(len(batch.z1), n_prefix, cfg.dim, dtype=self.dtype)
            g = torch.zeros(len(batch.z1), cfg.dim, dtype=self.dtype)
            v_pred = bb(sample.z_t.to(self.dtype), sample.t.to(self.dtype), prefix,
                        self.model.text_table(batch.text_ids).to(self.dtype), g)
            loss = flow_matching_loss(v_pred, sample.v_star.to(self.dtype))
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite pretrain loss at step {step}")
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            self.pretrain_losses.append(loss.item())
        opt.zero_grad()
        for p in base:
            p.requires_grad_(False)

    def _reference_mode(self):
        return "shuffled" if self.cfg.ablation == "shuffled" else "ordered"

    def next_batch(self) -> data_mod.Batch:
        return data_mod.sample_batch(self.dataset, self.cfg.batch_size,
                                     self.batch_rng, self._reference_mode())

    def compute_loss(self, batch: data_mod.Batch, sample: FlowSample, step: int,
                     training: bool = True, collect_diagnostics: bool = False):
        v_pred, diagnostics = self.model(
            sample.z_t.to(self.dtype), sample.t.to(self.dtype),
            batch.ref_latents.to(self.dtype), batch.anchor_latents.to(self.dtype),
            batch.text_ids, step=step, training=training,
            generator=self.dropout_gen if training else None,
            collect_diagnostics=collect_diagnostics)
        return flow_matching_loss(v_pred, sample.v_star.to(self.dtype)), diagnostics

    def train_step(self) -> dict:
        cfg = self.cfg
        batch = self.next_batch()
        sample = make_flow_sample(batch.z1.to(self.dtype), self.flow_gen)
        loss, diagnostics = self.compute_loss(batch, sample, self.step_count,
                                              training=True, collect_diagnostics=True)
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite loss at step {self.step_count}")
        self.optimizer.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(self.model.trainable_parameters(), cfg.grad_clip)
        self.optimizer.step()
        w = gate_schedule(sample.t, cfg.gate_schedule)
        record = {
            "step": self.step_count,
            "loss": loss.item(),
            "tau": temperature(self.step_count, cfg.sinkhorn_config()),
            "w_mean": float(w.mean()),
            "w_min": float(w.min()),
            "w_max": float(w.max()),
        }
        if diagnostics is not None:
            record["slot_entropy"] = diagnostics.entropy[-1]
            record["marginal_residual"] = diagnostics.residual[-1]
        self.step_count += 1
        self.history.append(record)
        if self._metrics_fh:
            self._metrics_fh.write(json.dumps(record) + "\n")
            self._metrics_fh.flush()
        return record

    def train(self, steps: int | None = None):
        for _ in range(steps if steps is not None else self.cfg.steps):
            self.train_step()
        if self._metrics_fh:
            self._metrics_fh.close()
            self._metrics_fh = None
        return self.history


def finite_diff_check(loss_fn, params, n_coords: int = 50, h: float = 1e-4,
                      rng: np.random.Generator | None = None) -> float:
    """Max relative error between autograd and central differences.

    loss_fn must be a deterministic closure over the given parameters.
    Intended for 64-bit models.
    """
    rng = rng or np.random.default_rng(0)
    params = [p for p in params if p.requires_grad]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    sizes = np.array([p.numel() for p in params])
    total = sizes.sum()
    worst = 0.0
    for flat in rng.choice(total, size=min(n_coords, total), replace=False):
        pi = int(np.searchsorted(np.cumsum(sizes), flat, side="right"))
        j = int(flat - (np.cumsum(sizes)[pi] - sizes[pi]))
        p = params[pi]
        with torch.no_grad():
            orig = p.view(-1)[j].item()
            p.view(-1)[j] = orig + h
            lp = loss_fn().item()
            p.view(-1)[j] = orig - h
            lm = loss_fn().item()
            p.view(-1)[j] = orig
        fd = (lp - lm) / (2 * h)
        analytic = 0.0 if grads[pi] is None else grads[pi].view(-1)[j].item()
        rel = abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-6)
        worst = max(worst, rel)
    return worst


def grad_check_full_model(seed: int = 0, n_coords: int = 50, h: float = 1e-4) -> float:
    """End-to-end 64-bit gradient check through Sinkhorn routing, the GRU,
    cross-attention adapters and FiLM, on a deliberately small model.

    Trainable parameters are jittered first so zero-initialized branches
    (adapter B matrices, FiLM maps) carry signal.
    """
    cfg = TrainConfig(steps=1, batch_size=2, n_identities=2, clips_per_identity=2,
                      frames=4, height=16, width=16, dim=36, heads=6, n_blocks=2,
                      stsa_layers=1, n_slots=3, n_refine=2, lora_rank=4,
                      dropout_p=0.0, precision="f64", seed=seed, pretrain_steps=0)
    trainer = Trainer(cfg)
    jitter = torch.Generator().manual_seed(derive_seed(seed, "grad-jitter"))
    with torch.no_grad():
        for p in trainer.model.trainable_parameters():
            p += 0.05 * torch.randn(p.shape, generator=jitter, dtype=p.dtype)
    batch = trainer.next_batch()
    sample = make_flow_sample(batch.z1.double(), trainer.flow_gen)

    def loss_fn():
        loss, _ = trainer.compute_loss(batch, sample, step=cfg.decay_steps // 2,
                                       training=False)
        return loss

    return finite_diff_check(loss_fn, trainer.model.trainable_parameters(),
                             n_coords=n_coords, h=h,
                             rng=substream(seed, "grad-coords"))


def shuffle_reference(clip: synthgen.SyntheticClip, n_frames: int,
                      rng: np.random.Generator,
                      permutation: np.ndarray | None = None) -> synthgen.SyntheticClip:
    """Uniformly subsample n_frames, then shuffle their order (ablation B).

    The canonical-pose frame is always kept in the subsample so the
    motion-script invariant survives; permutation can be pinned for tests.
    """
    T = len(clip.frames)
    if not 1 <= n_frames <= T:
        raise ValueError(f"n_frames must lie in [1, {T}]")
    idx = np.unique(np.round(np.linspace(0, T - 1, n_frames)).astype(int))
    c = clip.motion.canonical_index
    if c not in idx:
        idx[np.abs(idx - c).argmin()] = c
        idx = np.sort(idx)
    if permutation is None:
        permutation = rng.permutation(len(idx))
    else:
        permutation = np.asarray(permutation)
        if sorted(permutation.tolist()) != list(range(len(idx))):
            raise ValueError("permutation must be a bijection on the sampled indices")
    idx = idx[permutation]
    m = clip.motion
    motion = synthgen.MotionScript(m.tx[idx], m.ty[idx], m.rot[idx], m.scale[idx],
                                   m.phase[idx], int(np.where(idx == c)[0][0]))
    return synthgen.SyntheticClip(clip.frames[idx], clip.identity, motion,
                                  clip.background_mask[idx])
