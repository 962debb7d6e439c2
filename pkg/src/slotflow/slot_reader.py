"""Sinkhorn-routed slot reader.

Learnable slot queries are refined for R iterations: scaled dot-product
scores against the tokens, temperature-scaled Sinkhorn projection to a
near doubly-stochastic coupling, convex slot-wise aggregation, and a
gated recurrent update. A LayerNorm-Linear readout emits the identity
slots; the global video summary is a linear map of their mean.
Keys and values are the tokens themselves (no projections).
"""

from dataclasses import dataclass, field

import torch
from torch import nn

from .ot_core import (
    SinkhornConfig,
    coupling_entropy,
    marginal_residual,
    renormalize,
    rows_to_convex,
    sinkhorn_log,
    temperature,
)


@dataclass
class RoutingDiagnostics:
    """Per-refinement-iteration routing statistics (batch means)."""

    entropy: list = field(default_factory=list)
    residual: list = field(default_factory=list)
    slot_mass: list = field(default_factory=list)

    def record(self, raw_coupling: torch.Tensor):
        self.entropy.append(coupling_entropy(raw_coupling).mean().item())
        self.residual.append(marginal_residual(raw_coupling).mean().item())
        self.slot_mass.append(raw_coupling.sum(dim=2).mean(dim=0).tolist())

    def to_record(self) -> dict:
        return {"entropy": self.entropy, "marginal_residual": self.residual,
                "slot_mass": self.slot_mass}


def slot_scores(queries: torch.Tensor, keys: torch.Tensor) -> torch.Tensor:
    """(B, S, D) x (B, L, D) -> (B, S, L) scaled dot products."""
    if queries.shape[-1] != keys.shape[-1]:
        raise ValueError("query/key channel mismatch")
    return queries @ keys.transpose(1, 2) / keys.shape[-1] ** 0.5


class SlotReader(nn.Module):
    def __init__(self, dim: int, n_slots: int = 6, n_iters: int = 3,
                 sinkhorn: SinkhornConfig | None = None):
        super().__init__()
        self.n_slots = n_slots
        self.n_iters = n_iters
        self.sinkhorn = sinkhorn or SinkhornConfig()
        self.init_queries = nn.Parameter(torch.randn(n_slots, dim) / dim ** 0.5)
        self.gru = nn.GRUCell(dim, dim)
        self.readout_norm = nn.LayerNorm(dim)
        self.readout = nn.Linear(dim, dim)
        self.summary = nn.Linear(dim, dim)

    def route_step(self, q_prev: torch.Tensor, tokens: torch.Tensor, step: int,
                   diagnostics: RoutingDiagnostics | None = None):
        """One refinement: route, aggregate, gated update.

        Returns the updated queries and the convex-row coupling actually
        used for aggregation.
        """
        B, S, D = q_prev.shape
        tau = temperature(step, self.sinkhorn)
        logits = slot_scores(q_prev, tokens) / tau
        raw = torch.exp(sinkhorn_log(logits, self.sinkhorn))
        if diagnostics is not None:
            diagnostics.record(raw)
        coupling = rows_to_convex(renormalize(raw, self.sinkhorn.eps))
        agg = coupling @ tokens  # (B, S, D), convex combination of values
        q_next = self.gru(agg.reshape(B * S, D), q_prev.reshape(B * S, D)).view(B, S, D)
        return q_next, coupling

    def read(self, tokens: torch.Tensor, step: int = 0, collect_diagnostics: bool = False):
        """Tokens (B, L, D) -> identity slots (B, S, D) plus diagnostics."""
        B = tokens.shape[0]
        diagnostics = RoutingDiagnostics() if collect_diagnostics else None
        q = self.init_queries.unsqueeze(0).expand(B, -1, -1).to(tokens.dtype)
        for _ in range(self.n_iters):
            q, coupling = self.route_step(q, tokens, step, diagnostics)
        slots = self.readout(self.readout_norm(q))
        return slots, coupling, diagnostics

    def global_summary(self, slots: torch.Tensor) -> torch.Tensor:
        """Mean over slots followed by a learned linear map, (B, D)."""
        return self.summary(slots.mean(dim=1))
