"""Spatio-temporal point encoder: segments -> token grid + global token.

A compact stand-in for a point spatio-temporal convolution backbone. Each
segment gets its own FPS anchors on its middle frame; every frame of the
segment is grouped around those anchors by ball query, the relative
``(dx, dy, dz, dt)`` offsets (spatial part in units of the radius) go
through a shared MLP with batch norm and max-pooling, and the per-frame
descriptors are fused by a learned weighting over frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .geometry import ball_query, farthest_point_sample, gather_points


@dataclass
class EncoderConfig:
    num_tokens: int = 32  # N, anchors per segment
    channels: int = 128  # C
    hidden: int = 64  # width of the point-wise MLP
    radius: float = 0.3
    k_ball: int = 9
    frames_per_segment: int = 4

    def validate(self):
        if min(self.num_tokens, self.channels, self.hidden, self.k_ball, self.frames_per_segment) < 1:
            raise ValueError("encoder sizes must be positive")
        if self.radius <= 0:
            raise ValueError("radius must be positive")


def count_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


class _ChannelBN(nn.BatchNorm1d):
    """Batch norm over the last dim of an arbitrarily shaped input."""

    def forward(self, x):
        return super().forward(x.reshape(-1, x.shape[-1])).reshape(x.shape)


def _linear_bn_relu(d_in, d_out):
    return nn.Linear(d_in, d_out, bias=False), _ChannelBN(d_out), nn.ReLU()


class PointEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        h, c, f = cfg.hidden, cfg.channels, cfg.frames_per_segment
        self.point_mlp = nn.Sequential(*_linear_bn_relu(4, h), *_linear_bn_relu(h, h))
        self.temporal = nn.Linear(f, 1)
        self.token_mlp = nn.Sequential(*_linear_bn_relu(h, c), nn.Linear(c, c))
        self.global_head = nn.Sequential(nn.Linear(c, c), nn.ReLU(), nn.Linear(c, c))

    def anchor_indices(self, frame: torch.Tensor) -> torch.Tensor:
        """FPS over ``frame (..., P, 3)`` seeded at the point farthest from the centroid."""
        centroid = frame.mean(-2, keepdim=True)
        start = ((frame - centroid) ** 2).sum(-1).argmax(-1)
        return farthest_point_sample(frame, self.cfg.num_tokens, start)

    def encode_segments(self, segments: torch.Tensor, total_frames: int | None = None):
        """Token features and anchors for ``segments (B, L, F, P, 3)``.

        Returns ``feat (B, L, N, C)`` and ``anchors (B, L, N, 4)`` with the
        anchor time normalised to ``[0, 1]`` over the whole clip.
        """
        b, l, f, p, _ = segments.shape
        if f != self.cfg.frames_per_segment:
            raise ValueError(f"expected {self.cfg.frames_per_segment} frames per segment, got {f}")
        if self.cfg.num_tokens > p:
            raise ValueError(f"{self.cfg.num_tokens} tokens requested from {p}-point frames")
        total_frames = total_frames or l * f
        mid = f // 2
        anchor_frame = segments[:, :, mid]
        idx = self.anchor_indices(anchor_frame)
        xyz = gather_points(anchor_frame, idx)  # (B, L, N, 3)

        centers = xyz.unsqueeze(2).expand(b, l, f, -1, 3)
        nbr = ball_query(centers, segments, self.cfg.radius, self.cfg.k_ball).indices
        grouped = gather_points(segments, nbr)  # (B, L, F, N, K, 3)
        offsets = (grouped - centers.unsqueeze(-2)) / self.cfg.radius
        dt = (torch.arange(f, dtype=segments.dtype) - mid).view(1, 1, f, 1, 1, 1)
        dt = dt.expand(*offsets.shape[:-1], 1)
        per_frame = self.point_mlp(torch.cat([offsets, dt], -1)).max(-2).values  # (B, L, F, N, H)
        fused = self.temporal(per_frame.permute(0, 1, 3, 4, 2)).squeeze(-1)  # (B, L, N, H)
        feat = self.token_mlp(fused)

        seg_start = torch.arange(l, dtype=segments.dtype) * f
        t = (seg_start + mid) / max(total_frames - 1, 1)
        t = t.view(1, l, 1, 1).expand(b, l, self.cfg.num_tokens, 1)
        return feat, torch.cat([xyz, t], -1)

    def encode_segment(self, frames: torch.Tensor, index: int = 0, total_frames: int | None = None):
        """One segment ``(F, P, 3)`` -> ``feat (N, C)``, ``anchors (N, 4)``.

        ``index`` places the segment in a clip of ``total_frames`` frames for
        the anchor time.
        """
        f = frames.shape[0]
        total_frames = total_frames or f
        feat, anchors = self.encode_segments(frames[None, None], total_frames)
        t = (index * f + f // 2) / max(total_frames - 1, 1)
        return feat[0, 0], torch.cat([anchors[0, 0, :, :3], anchors.new_full((anchors.shape[2], 1), t)], -1)

    def global_token(self, feat: torch.Tensor) -> torch.Tensor:
        """Head applied to the channel-wise max over all ``L*N`` tokens."""
        return self.global_head(feat.flatten(-3, -2).amax(-2))

    def forward(self, segments: torch.Tensor):
        feat, anchors = self.encode_segments(segments)
        return feat, anchors, self.global_token(feat)


def clips_to_segments(clips: torch.Tensor, num_segments: int) -> torch.Tensor:
    """Reshape ``(B, T, P, 3)`` clips into ``(B, L, T/L, P, 3)``."""
    b, t, p, _ = clips.shape
    if t % num_segments:
        raise ValueError(f"{num_segments} segments do not evenly divide {t} frames")
    return clips.reshape(b, num_segments, t // num_segments, p, 3)
