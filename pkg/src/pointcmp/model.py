"""The full pretraining network: encoder, augmentation, local and global branches."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from . import augment as aug
from .config import RunConfig
from .encoder import PointEncoder, clips_to_segments
from .global_branch import (GlobalLossReport, ProjectionHead, build_global_samples, global_contrast,
                            total_loss)
from .local_branch import LocalLossReport, MatchingDecoder, Regressor, gather_masked, local_contrast, masked_ids


@dataclass
class StepOutput:
    total: torch.Tensor
    local: LocalLossReport | None
    global_: GlobalLossReport | None
    masked: torch.Tensor  # (B, L, N) bool
    erased: torch.Tensor | None  # (B, C) bool


class PointCMP(nn.Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.encoder = PointEncoder(cfg.encoder_config())
        self.regressor = Regressor(cfg.channels, cfg.depth, cfg.heads)
        self.decoder = MatchingDecoder(cfg.channels, cfg.tokens)
        self.proj = ProjectionHead(cfg.channels, cfg.proj_dim)

    def encode(self, clips: torch.Tensor):
        """``clips (B, T, P, 3)`` -> tokens, anchors, global token."""
        return self.encoder(clips_to_segments(clips, self.cfg.segments))

    @torch.no_grad()
    def choose_mask(self, tokens, g, generator=None) -> torch.Tensor:
        cfg = self.cfg
        b, l, n, _ = tokens.shape
        if cfg.mask_granularity == "segment":
            if cfg.mask_strategy == "similarity":
                sim = aug.token_global_similarity(tokens, g)
                dom = aug.select_dominant(sim, cfg.dominant_fraction)
                seg = aug.select_masked_segments(dom, cfg.num_masked_segments)
            else:
                seg = aug.random_segments((b,), l, cfg.num_masked_segments, generator)
            return aug.segment_token_mask(seg, l, n)
        count = cfg.num_masked_tokens
        if cfg.mask_strategy == "similarity":
            sim = aug.token_global_similarity(tokens, g)
            return aug.select_top_tokens(sim, count)
        return aug.random_token_mask((b,), l, n, count, generator)

    @torch.no_grad()
    def choose_erase(self, tokens, g, strategy: str | None = None, generator=None) -> torch.Tensor | None:
        strategy = strategy or self.cfg.erase_strategy
        if strategy == "off":
            return None
        if strategy == "similarity":
            a = aug.rank_sum_channels(aug.channel_correlation(tokens, g))
            return aug.principal_channels(a, self.cfg.erase_fraction)
        return aug.random_channel_mask((tokens.shape[0],), tokens.shape[-1], self.cfg.erase_fraction, generator)

    def forward(self, clips: torch.Tensor, generator: torch.Generator | None = None,
                erase_strategy: str | None = None) -> StepOutput:
        cfg = self.cfg
        tokens, anchors, g = self.encode(clips)
        masked = self.choose_mask(tokens, g, generator)
        erased = self.choose_erase(tokens, g, erase_strategy, generator)
        reg_out = self.regressor(tokens, anchors, masked)

        local = None
        if cfg.local_branch:
            seg_ids, tok_ids = masked_ids(masked)
            z_pre = gather_masked(reg_out, masked)
            z_gt = gather_masked(tokens, masked)
            p_gt = gather_masked(anchors[..., :3], masked)
            p_pre = self.decoder(z_pre, seg_ids, tok_ids) if cfg.matching_module else None
            local = local_contrast(z_pre, p_pre, z_gt, p_gt, seg_ids, cfg.tau_local)

        global_ = None
        if cfg.global_branch or erase_strategy is not None:
            hard = None if erased is None else aug.erase_channels(tokens, erased)
            samples = build_global_samples(tokens, g, reg_out, hard, cfg.batch_negatives)
            global_ = global_contrast(samples, self.proj, cfg.tau_global)
        used_global = global_ if cfg.global_branch else None
        return StepOutput(total_loss(local, used_global), local, global_, masked, erased)
