"""Feature-level hard sample synthesis.

Tokens that agree most with the global token are "dominant"; the segments
holding the most dominant tokens are masked. Channels whose per-token
correlation with the global token ranks persistently high are "principal";
zeroing them yields a hard negative. Random variants with identical
cardinalities exist for ablations.

Every function takes arbitrary leading batch dimensions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

EPS = 1e-12


def count_for(fraction: float, total: int) -> int:
    """``floor(fraction * total)``, robust to binary rounding of the product."""
    return int(math.floor(fraction * total + 1e-9))


def segments_for(ratio: float, num_segments: int) -> int:
    """Number of masked segments for a segment masking ratio (half-up rounding)."""
    return int(math.floor(ratio * num_segments + 0.5))


def _unit(x: torch.Tensor) -> torch.Tensor:
    return x / (x.norm(dim=-1, keepdim=True) + EPS)


def _check(*tensors):
    for t in tensors:
        if not torch.isfinite(t).all():
            raise ValueError("non-finite features")


def token_global_similarity(tokens: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of each token ``(..., L, N, C)`` with ``g (..., C)``."""
    _check(tokens, g)
    return (_unit(tokens) * _unit(g)[..., None, None, :]).sum(-1)


def _top_mask(scores: torch.Tensor, count: int) -> torch.Tensor:
    """Boolean mask of the ``count`` largest entries along the last dim, ties to low index."""
    order = torch.sort(-scores, dim=-1, stable=True).indices[..., :count]
    mask = torch.zeros_like(scores, dtype=torch.bool)
    return mask.scatter(-1, order, True)


def select_top_tokens(similarity: torch.Tensor, count: int) -> torch.Tensor:
    """The ``count`` highest-similarity tokens of ``(..., L, N)``, ties by (segment, token)."""
    return _top_mask(similarity.flatten(-2), count).reshape(similarity.shape)


def select_dominant(similarity: torch.Tensor, fraction: float = 0.4) -> torch.Tensor:
    if not 0 < fraction < 1:
        raise ValueError("fraction must be in (0, 1)")
    l, n = similarity.shape[-2:]
    return select_top_tokens(similarity, count_for(fraction, l * n))


def select_masked_segments(dominant: torch.Tensor, num_masked: int) -> torch.Tensor:
    """Ids ``(..., L_m)`` (ascending) of the segments with the most dominant tokens."""
    l = dominant.shape[-2]
    if not 1 <= num_masked < l:
        raise ValueError(f"need 1 <= L_m < L, got L_m={num_masked}, L={l}")
    counts = dominant.sum(-1)
    order = torch.sort(-counts, dim=-1, stable=True).indices[..., :num_masked]
    return order.sort(-1).values


def segment_token_mask(segment_ids: torch.Tensor, num_segments: int, num_tokens: int) -> torch.Tensor:
    """Expand masked segment ids to an ``(..., L, N)`` boolean token mask."""
    seg = torch.zeros(*segment_ids.shape[:-1], num_segments, dtype=torch.bool)
    seg = seg.scatter(-1, segment_ids, True)
    return seg.unsqueeze(-1).expand(*seg.shape, num_tokens)


def channel_correlation(tokens: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    """Per-token, per-channel product of normalised entries: ``(..., L*N, C)``.

    Summing over channels recovers :func:`token_global_similarity`.
    """
    _check(tokens, g)
    z = _unit(tokens).flatten(-3, -2)
    return z * _unit(g).unsqueeze(-2)


def rank_sum_channels(corr: torch.Tensor) -> torch.Tensor:
    """Sum over tokens of each channel's ascending rank (1 = lowest correlation)."""
    order = torch.sort(corr, dim=-1, stable=True).indices
    ranks = torch.empty_like(order)
    ranks.scatter_(-1, order, torch.arange(1, corr.shape[-1] + 1).expand_as(order).contiguous())
    return ranks.sum(-2).to(corr.dtype)


def principal_channels(rank_sum: torch.Tensor, fraction: float = 0.2) -> torch.Tensor:
    if not 0 < fraction < 1:
        raise ValueError("fraction must be in (0, 1)")
    c = rank_sum.shape[-1]
    return _top_mask(rank_sum, count_for(fraction, c))


def erase_channels(tokens: torch.Tensor, channel_mask: torch.Tensor) -> torch.Tensor:
    """Copy of ``tokens`` with the masked channels zeroed in every token."""
    keep = (~channel_mask).to(tokens.dtype)[..., None, None, :]
    return tokens * keep


def erase_principal_channels(tokens: torch.Tensor, rank_sum: torch.Tensor, fraction: float = 0.2):
    """Returns ``(erased_tokens, channel_mask)``; the input is left untouched."""
    mask = principal_channels(rank_sum, fraction)
    return erase_channels(tokens, mask), mask


# --------------------------------------------------------------------------
# random variants


def random_segments(batch_shape, num_segments: int, num_masked: int,
                    generator: torch.Generator | None = None) -> torch.Tensor:
    if not 1 <= num_masked < num_segments:
        raise ValueError(f"need 1 <= L_m < L, got L_m={num_masked}, L={num_segments}")
    noise = torch.rand(*batch_shape, num_segments, generator=generator)
    return noise.argsort(-1)[..., :num_masked].sort(-1).values


def random_token_mask(batch_shape, num_segments: int, num_tokens: int, count: int,
                      generator: torch.Generator | None = None) -> torch.Tensor:
    noise = torch.rand(*batch_shape, num_segments * num_tokens, generator=generator)
    return _top_mask(noise, count).reshape(*batch_shape, num_segments, num_tokens)


def random_channel_mask(batch_shape, channels: int, fraction: float,
                        generator: torch.Generator | None = None) -> torch.Tensor:
    if not 0 < fraction < 1:
        raise ValueError("fraction must be in (0, 1)")
    noise = torch.rand(*batch_shape, channels, generator=generator)
    return _top_mask(noise, count_for(fraction, channels))


# --------------------------------------------------------------------------
# per-sample records


@dataclass
class MaskSpec:
    masked_segments: tuple[int, ...]
    dominant: np.ndarray  # (L, N) bool
    similarity: np.ndarray  # (L, N)
    masked: np.ndarray  # (L, N) bool

    def to_record(self) -> str:
        return (f"masked_segments={','.join(map(str, self.masked_segments))} "
                f"dominant={int(self.dominant.sum())} masked_tokens={int(self.masked.sum())}")


@dataclass
class EraseSpec:
    erased_channels: tuple[int, ...]
    rank_sum: np.ndarray  # (C,)

    def to_record(self) -> str:
        return f"erased_channels={','.join(map(str, self.erased_channels))}"


def similarity_mask_spec(tokens: torch.Tensor, g: torch.Tensor, num_masked: int,
                         dominant_fraction: float = 0.4) -> MaskSpec:
    """Similarity-driven segment mask for one sample (``tokens (L, N, C)``)."""
    sim = token_global_similarity(tokens, g)
    dom = select_dominant(sim, dominant_fraction)
    seg = select_masked_segments(dom, num_masked)
    mask = segment_token_mask(seg, *tokens.shape[-3:-1])
    return MaskSpec(tuple(seg.tolist()), dom.numpy(), sim.numpy(), mask.numpy())


def similarity_erase_spec(tokens: torch.Tensor, g: torch.Tensor, fraction: float = 0.2) -> EraseSpec:
    a = rank_sum_channels(channel_correlation(tokens, g))
    mask = principal_channels(a, fraction)
    return EraseSpec(tuple(torch.nonzero(mask).flatten().tolist()), a.numpy())


def random_mask_spec(num_segments: int, num_tokens: int, generator: torch.Generator,
                     num_masked: int | None = None, token_fraction: float | None = None) -> MaskSpec:
    """Uniformly random segment set (``num_masked``) or token set (``token_fraction``)."""
    if (num_masked is None) == (token_fraction is None):
        raise ValueError("give exactly one of num_masked or token_fraction")
    if num_masked is not None:
        seg = random_segments((), num_segments, num_masked, generator)
        mask = segment_token_mask(seg, num_segments, num_tokens)
        segs = tuple(seg.tolist())
    else:
        if not 0 < token_fraction < 1:
            raise ValueError("token_fraction must be in (0, 1)")
        count = count_for(token_fraction, num_segments * num_tokens)
        mask = random_token_mask((), num_segments, num_tokens, count, generator)
        segs = tuple(torch.nonzero(mask.any(-1)).flatten().tolist())
    empty = np.zeros((num_segments, num_tokens))
    return MaskSpec(segs, empty.astype(bool), empty, mask.numpy())


def random_erase_spec(channels: int, fraction: float, generator: torch.Generator) -> EraseSpec:
    mask = random_channel_mask((), channels, fraction, generator)
    return EraseSpec(tuple(torch.nonzero(mask).flatten().tolist()), np.zeros(channels))
