"""Mask prediction with token-level contrastive matching.

The regressor fills masked positions with a learned mask token, adds a
linear embedding of each token's ``(x, y, z, t)`` anchor, and runs a small
transformer. The matching module decodes each predicted token to a 3-D
position by folding a fixed 2-D seed; the predictions are then re-sampled at
the ground-truth anchors by interpolation, so the only route from predicted
positions to the loss is through the interpolation weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from scipy.stats import qmc
from torch import nn

from .geometry import interpolate_features


def folding_seeds(n: int) -> torch.Tensor:
    """``n`` near-uniform, deterministic points in ``[-1, 1]^2`` (Halton sequence)."""
    pts = qmc.Halton(d=2, scramble=False).random(n + 1)[1:]
    return torch.from_numpy(2.0 * pts - 1.0).float()


class Regressor(nn.Module):
    def __init__(self, channels: int, depth: int = 3, heads: int = 4):
        super().__init__()
        self.pos_embed = nn.Linear(4, channels)
        self.mask_token = nn.Parameter(torch.zeros(channels))
        nn.init.normal_(self.mask_token, std=0.02)
        self.blocks = nn.ModuleList(
            nn.TransformerEncoderLayer(channels, heads, 2 * channels, dropout=0.0,
                                       batch_first=True, norm_first=True)
            for _ in range(depth)
        )
        self.norm = nn.LayerNorm(channels)
        self.proj = nn.Linear(channels, channels)

    def forward(self, tokens: torch.Tensor, anchors: torch.Tensor, masked: torch.Tensor) -> torch.Tensor:
        """``tokens (B, L, N, C)``, ``anchors (B, L, N, 4)``, ``masked (B, L, N)`` -> ``(B, L, N, C)``."""
        if masked.flatten(1).all(-1).any():
            raise ValueError("every token is masked; the regressor needs visible context")
        x = torch.where(masked.unsqueeze(-1), self.mask_token.to(tokens.dtype), tokens)
        x = x + self.pos_embed(anchors)
        shape = x.shape
        x = x.flatten(1, 2)
        for blk in self.blocks:
            x = blk(x)
        return self.proj(self.norm(x)).reshape(shape)


def gather_masked(x: torch.Tensor, masked: torch.Tensor) -> torch.Tensor:
    """Rows of ``x (B, L, N, D)`` at masked positions, ``(B, M, D)`` in (segment, token) order.

    Every sample must mask the same number of tokens.
    """
    flat = masked.flatten(1)
    m = int(flat[0].sum())
    if (flat.sum(-1) != m).any():
        raise ValueError("samples mask different numbers of tokens")
    idx = torch.sort((~flat).to(torch.int8), dim=-1, stable=True).indices[:, :m]
    return torch.gather(x.flatten(1, 2), 1, idx.unsqueeze(-1).expand(-1, -1, x.shape[-1]))


def masked_ids(masked: torch.Tensor):
    """Segment and token ids ``(B, M)`` of the masked positions, ordered as :func:`gather_masked`."""
    b, l, n = masked.shape
    grid = torch.stack(torch.meshgrid(torch.arange(l), torch.arange(n), indexing="ij"), -1)
    ids = gather_masked(grid.expand(b, l, n, 2), masked)
    return ids[..., 0], ids[..., 1]


class MatchingDecoder(nn.Module):
    """Segment pool-add followed by a two-stage folding decoder."""

    def __init__(self, channels: int, num_tokens: int):
        super().__init__()
        self.register_buffer("seeds", folding_seeds(num_tokens))
        self.fold1 = nn.Sequential(nn.Linear(channels + 2, channels), nn.ReLU(), nn.Linear(channels, 3))
        self.fold2 = nn.Sequential(nn.Linear(channels + 3, channels), nn.ReLU(), nn.Linear(channels, 3))

    def forward(self, z_pre: torch.Tensor, seg_ids: torch.Tensor | None = None,
                tok_ids: torch.Tensor | None = None) -> torch.Tensor:
        """Predict positions for ``z_pre``.

        Either ``z_pre (..., S, N, C)`` with one row per masked segment, or
        ``z_pre (B, M, C)`` with explicit ``seg_ids``/``tok_ids (B, M)``.
        """
        if seg_ids is None:
            *lead, s, n, c = z_pre.shape
            pooled = z_pre.amax(-2, keepdim=True)
            h = z_pre + pooled
            seeds = self.seeds[:n].to(z_pre.dtype).expand(*lead, s, n, 2)
        else:
            same = seg_ids.unsqueeze(-1) == seg_ids.unsqueeze(-2)  # (B, M, M)
            spread = z_pre.unsqueeze(1).expand(-1, z_pre.shape[1], -1, -1)
            pooled = spread.masked_fill(~same.unsqueeze(-1), float("-inf")).amax(2)
            h = z_pre + pooled
            seeds = self.seeds.to(z_pre.dtype)[tok_ids]
        p1 = self.fold1(torch.cat([h, seeds], -1))
        return self.fold2(torch.cat([h, p1], -1))


@dataclass
class LocalLossReport:
    loss: torch.Tensor
    mean_rank: float  # 1 = positive ranked first among all candidates
    num_queries: int


def info_nce_rows(queries: torch.Tensor, targets: torch.Tensor, tau: float):
    """Row ``i`` of ``queries (B, M, D)`` against all ``targets (B, M, D)``; positive on the diagonal.

    Returns per-query losses ``(B, M)`` and positive ranks ``(B, M)``.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    m = queries.shape[-2]
    if m < 2:
        raise ValueError("need at least two candidates for a contrastive loss")
    q = F.normalize(queries, dim=-1, eps=1e-12)
    t = F.normalize(targets, dim=-1, eps=1e-12)
    sim = q @ t.transpose(-1, -2)
    logits = sim / tau
    target = torch.arange(m).expand(*logits.shape[:-1])
    loss = F.cross_entropy(logits.flatten(0, -2), target.flatten(), reduction="none").reshape(target.shape)
    with torch.no_grad():
        pos = sim.diagonal(dim1=-2, dim2=-1).unsqueeze(-1)
        ranks = 1 + (sim > pos).sum(-1)
    return loss, ranks


def local_contrast(z_pre: torch.Tensor, p_pre: torch.Tensor | None, z_gt: torch.Tensor,
                   p_gt: torch.Tensor, seg_ids: torch.Tensor, tau: float = 0.01,
                   k: int = 3) -> LocalLossReport:
    """Token-level InfoNCE between predicted and encoder tokens at masked positions.

    All inputs are ``(B, M, .)``. With ``p_pre`` given, each ground-truth
    anchor of segment ``s`` queries the predictions of segment ``s`` only;
    with ``p_pre=None`` the predictions are compared by index directly (the
    matching-module-off ablation).
    """
    if p_pre is not None:
        same = seg_ids.unsqueeze(-1) == seg_ids.unsqueeze(-2)
        queries = interpolate_features(p_pre, z_pre, p_gt, k=k, valid=same)
    else:
        queries = z_pre
    loss, ranks = info_nce_rows(queries, z_gt, tau)
    return LocalLossReport(loss.mean(), float(ranks.float().mean()), z_pre.shape[-2])

