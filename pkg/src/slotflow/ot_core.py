"""Entropic optimal-transport machinery for slot routing.

Log-domain Sinkhorn-Knopp with uniform marginals a = 1/S, b = 1/L, a
step-conditioned linear temperature schedule, the post-hoc row-then-column
renormalization, and the exact convex-row rescaling used for aggregation.
Everything is differentiable through the unrolled iterations.
"""

from dataclasses import dataclass

import torch


@dataclass
class SinkhornConfig:
    tau_start: float = 1.0
    tau_end: float = 0.3
    decay_steps: int = 1000
    n_iters: int = 20
    eps: float = 1e-8

    def __post_init__(self):
        if not (self.tau_start >= self.tau_end > 0):
            raise ValueError("require tau_start >= tau_end > 0")
        if self.n_iters < 1 or self.decay_steps < 1:
            raise ValueError("n_iters and decay_steps must be positive")


def temperature(step: int, cfg: SinkhornConfig) -> float:
    """Linear anneal from tau_start to tau_end, clamped after decay_steps."""
    if step >= cfg.decay_steps:
        return cfg.tau_end
    return cfg.tau_start + (step / cfg.decay_steps) * (cfg.tau_end - cfg.tau_start)


def sinkhorn_log(logits: torch.Tensor, cfg: SinkhornConfig) -> torch.Tensor:
    """Project (B, S, L) logits to a log-coupling with uniform marginals.

    Alternates the log-domain scaling updates for n_iters rounds and
    assembles log P = logits + log u + log v; callers exponentiate once.
    Stable for logit magnitudes up to ~1e4.
    """
    if not torch.isfinite(logits).all():
        raise ValueError("sinkhorn_log requires finite logits")
    B, S, L = logits.shape
    log_a = logits.new_full((S,), -torch.log(torch.tensor(float(S))).item())
    log_b = logits.new_full((L,), -torch.log(torch.tensor(float(L))).item())
    log_u = logits.new_zeros(B, S)
    log_v = logits.new_zeros(B, L)
    for _ in range(cfg.n_iters):
        log_u = log_a - torch.logsumexp(logits + log_v[:, None, :], dim=2)
        log_v = log_b - torch.logsumexp(logits + log_u[:, :, None], dim=1)
    return logits + log_u[:, :, None] + log_v[:, None, :]


def renormalize(P: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Single row-then-column renormalization correcting marginal drift."""
    P = P / (P.sum(dim=2, keepdim=True) + eps)
    P = P / (P.sum(dim=1, keepdim=True) + eps)
    return P


def rows_to_convex(P: torch.Tensor) -> torch.Tensor:
    """Rescale each slot row to sum exactly 1 (convex aggregation weights)."""
    sums = P.sum(dim=2, keepdim=True)
    if (sums <= 0).any():
        raise ValueError("rows_to_convex requires strictly positive row sums")
    return P / sums


def routing_weights(logits: torch.Tensor, cfg: SinkhornConfig) -> torch.Tensor:
    """Full routing path: Sinkhorn, renormalize, convex rows."""
    P = torch.exp(sinkhorn_log(logits, cfg))
    return rows_to_convex(renormalize(P, cfg.eps))


def coupling_entropy(P: torch.Tensor) -> torch.Tensor:
    """Entropy of the coupling normalized to a joint distribution, per batch item."""
    flat = P.flatten(1)
    p = flat / flat.sum(dim=1, keepdim=True)
    return -(p * torch.log(p.clamp_min(1e-30))).sum(dim=1)


def marginal_residual(P: torch.Tensor) -> torch.Tensor:
    """Max deviation of row/col sums from the uniform marginals, per batch item."""
    B, S, L = P.shape
    row = (P.sum(dim=2) - 1.0 / S).abs().amax(dim=1)
    col = (P.sum(dim=1) - 1.0 / L).abs().amax(dim=1)
    return torch.maximum(row, col)
