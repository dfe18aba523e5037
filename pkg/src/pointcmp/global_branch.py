"""Video-level contrast with a channel-erased hard negative, and the total loss."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn


class ProjectionHead(nn.Module):
    """Shared two-layer projection used for every role (query, positive, negatives)."""

    def __init__(self, channels: int, out_dim: int = 128):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(channels, channels), nn.ReLU(), nn.Linear(channels, out_dim))

    def forward(self, x):
        return self.net(x)


@dataclass
class GlobalSamples:
    query: torch.Tensor  # (B, C)
    positive: torch.Tensor  # (B, C)
    hard_negative: torch.Tensor | None  # (B, C)
    bank: torch.Tensor  # (B, C); sample j != i is a batch negative for query i


def _pool(grid: torch.Tensor) -> torch.Tensor:
    return grid.flatten(-3, -2).amax(-2)


def build_global_samples(tokens: torch.Tensor, g: torch.Tensor, regressor_out: torch.Tensor,
                         hard_grid: torch.Tensor | None, batch_negatives: str = "regressor") -> GlobalSamples:
    """Max-pool the regressor output (positive) and the erased grid (hard negative).

    The bank supplying batch negatives holds either every sample's positive
    (``"regressor"``) or every sample's pooled encoder grid (``"tokens"``).
    """
    if regressor_out.numel() == 0:
        raise ValueError("empty regressor output")
    if hard_grid is None and tokens.shape[0] < 2:
        raise ValueError("need a hard negative or a batch of at least two")
    positive = _pool(regressor_out)
    if batch_negatives == "regressor":
        bank = positive
    elif batch_negatives == "tokens":
        bank = _pool(tokens)
    else:
        raise ValueError(f"unknown batch negative source {batch_negatives!r}")
    return GlobalSamples(g, positive, None if hard_grid is None else _pool(hard_grid), bank)


@dataclass
class GlobalLossReport:
    loss: torch.Tensor
    sim_positive: torch.Tensor  # (B,) cosine in projected space
    sim_hard: torch.Tensor | None  # (B,)
    sim_batch: torch.Tensor  # (B, B) with the diagonal undefined
    batch_size: int


def global_contrast(samples: GlobalSamples, proj: nn.Module, tau: float = 0.1) -> GlobalLossReport:
    """InfoNCE over ``[positive, hard negative, other videos]`` per query.

    The denominator holds the positive once, the hard negative, and every
    other sample of the batch.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    b = samples.query.shape[0]
    if samples.hard_negative is None and b < 2:
        raise ValueError("no negatives")
    q = F.normalize(proj(samples.query), dim=-1)
    pos = F.normalize(proj(samples.positive), dim=-1)
    bank = F.normalize(proj(samples.bank), dim=-1)
    s_pos = (q * pos).sum(-1)
    s_bank = q @ bank.T
    cols = [s_pos.unsqueeze(-1)]
    s_hard = None
    if samples.hard_negative is not None:
        hard = F.normalize(proj(samples.hard_negative), dim=-1)
        s_hard = (q * hard).sum(-1)
        cols.append(s_hard.unsqueeze(-1))
    eye = torch.eye(b, dtype=torch.bool)
    cols.append(s_bank.masked_fill(eye, float("-inf")))
    logits = torch.cat(cols, -1) / tau
    loss = F.cross_entropy(logits, torch.zeros(b, dtype=torch.long))
    return GlobalLossReport(loss, s_pos.detach(), None if s_hard is None else s_hard.detach(),
                            s_bank.detach(), b)


def total_loss(local, global_) -> torch.Tensor:
    """Unweighted sum of the enabled branch losses (each a report or ``None``)."""
    terms = [r.loss for r in (local, global_) if r is not None]
    if not terms:
        raise ValueError("at least one branch must be enabled")
    for t in terms:
        if not math.isfinite(float(t.detach())):
            raise ValueError("non-finite branch loss")
    return terms[0] if len(terms) == 1 else terms[0] + terms[1]
