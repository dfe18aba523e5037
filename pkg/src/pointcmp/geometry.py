"""Geometric kernels over point sets.

All functions accept arbitrary leading batch dimensions, e.g. points of shape
``(..., P, 3)``. Ties are always broken toward the smallest source index.
"""

from __future__ import annotations

from typing import NamedTuple

import torch

COINCIDENT_DIST = 1e-8


class NeighborTable(NamedTuple):
    indices: torch.Tensor  # (..., M, K) long
    valid_count: torch.Tensor  # (..., M) long


def square_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise squared distances ``(..., M, P)`` between ``a (..., M, 3)`` and ``b (..., P, 3)``.

    Uses explicit differences rather than the ``|a|^2 + |b|^2 - 2ab`` expansion
    so results are exactly translation invariant up to rounding of the inputs.
    """
    return ((a.unsqueeze(-2) - b.unsqueeze(-3)) ** 2).sum(-1)


def gather_points(x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """Index ``x (..., P, C)`` with ``idx (..., *S)`` -> ``(..., *S, C)``."""
    batch = x.shape[:-2]
    nb = len(batch)
    flat = idx.reshape(*batch, -1)
    out = torch.gather(x, nb, flat.unsqueeze(-1).expand(*flat.shape, x.shape[-1]))
    return out.reshape(*idx.shape, x.shape[-1])


def _check_finite(*tensors):
    for t in tensors:
        if not torch.isfinite(t).all():
            raise ValueError("non-finite coordinates")


def farthest_point_sample(points: torch.Tensor, n: int, start_index=0) -> torch.Tensor:
    """Greedy max-min subset of ``n`` indices, beginning at ``start_index``.

    ``start_index`` may be an int or a long tensor of the batch shape.
    """
    p = points.shape[-2]
    if not 1 <= n <= p:
        raise ValueError(f"cannot sample {n} of {p} points")
    batch = points.shape[:-2]
    pts = points.detach().reshape(-1, p, 3)
    b = pts.shape[0]
    start = torch.as_tensor(start_index, dtype=torch.long).expand(batch).reshape(-1)
    if ((start < 0) | (start >= p)).any():
        raise ValueError("start_index out of range")
    out = torch.empty(b, n, dtype=torch.long)
    rows = torch.arange(b)
    out[:, 0] = start
    min_d = ((pts - pts[rows, start].unsqueeze(1)) ** 2).sum(-1)
    for i in range(1, n):
        nxt = min_d.argmax(dim=1)  # first maximum -> smallest index on ties
        out[:, i] = nxt
        d = ((pts - pts[rows, nxt].unsqueeze(1)) ** 2).sum(-1)
        min_d = torch.minimum(min_d, d)
    return out.reshape(*batch, n)


def _k_smallest(d: torch.Tensor, k: int) -> torch.Tensor:
    """Boolean mask of the ``k`` smallest entries along the last dim, ties to low index."""
    kth = torch.topk(d, k, dim=-1, largest=False).values[..., -1:]
    below = d < kth
    at = d == kth
    need = k - below.sum(-1, keepdim=True)
    return below | (at & (at.cumsum(-1) <= need))


def _mask_to_indices(mask: torch.Tensor, k: int, fill: int) -> torch.Tensor:
    """Positions of the (at most ``k``) true entries in ascending order, padded with ``fill``."""
    slot = mask.cumsum(-1) - 1
    slot = torch.where(mask, slot, torch.full_like(slot, k))
    out = torch.full((*mask.shape[:-1], k + 1), fill, dtype=torch.long)
    src = torch.arange(mask.shape[-1]).expand_as(slot).contiguous()
    return out.scatter(-1, slot, src)[..., :k]


def ball_query(centers: torch.Tensor, points: torch.Tensor, radius: float, k: int) -> NeighborTable:
    """Up to ``k`` points within ``radius`` of each center.

    When more than ``k`` points fall inside the ball the ``k`` nearest are
    kept, so the result does not depend on the storage order of ``points``.
    Kept neighbors are listed by ascending source index; slots past
    ``valid_count`` repeat the first one. An empty ball falls back to the
    single nearest point.
    """
    if radius <= 0 or k < 1:
        raise ValueError("radius must be > 0 and k >= 1")
    p = points.shape[-2]
    if p == 0:
        raise ValueError("empty point set")
    d2 = square_distance(centers.detach(), points.detach())
    keep = _k_smallest(d2, min(k, p)) & (d2 <= radius * radius)
    count = keep.sum(-1)
    empty = count == 0
    if empty.any():
        nearest = torch.zeros_like(keep).scatter(-1, d2.argmin(-1, keepdim=True), True)
        keep = torch.where(empty.unsqueeze(-1), nearest, keep)
        count = count.clamp_min(1)
    idx = _mask_to_indices(keep, k, p)
    first = idx[..., :1].expand_as(idx)
    idx = torch.where(torch.arange(k) < count.unsqueeze(-1), idx, first)
    return NeighborTable(idx, count)


def knn(query: torch.Tensor, points: torch.Tensor, k: int) -> NeighborTable:
    """``k`` nearest points by Euclidean distance, nearest first."""
    p = points.shape[-2]
    if not 1 <= k <= p:
        raise ValueError(f"k={k} must be in [1, {p}]")
    d2 = square_distance(query.detach(), points.detach())
    _, order = torch.sort(d2, dim=-1, stable=True)
    idx = order[..., :k]
    return NeighborTable(idx, torch.full(idx.shape[:-1], k, dtype=torch.long))


def interpolate_features(src_pos: torch.Tensor, src_feat: torch.Tensor, query_pos: torch.Tensor,
                         k: int = 3, valid: torch.Tensor | None = None) -> torch.Tensor:
    """Inverse-squared-distance blend of the ``k`` nearest source features.

    ``valid`` (``(..., Q, S)`` bool) optionally restricts which sources each
    query may use; every query needs at least one. A query within
    ``COINCIDENT_DIST`` of a source returns that source's feature exactly.
    Differentiable in ``src_pos``, ``src_feat`` and ``query_pos``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    s = src_pos.shape[-2]
    if s < 1:
        raise ValueError("need at least one source")
    _check_finite(src_pos, query_pos)
    d2 = square_distance(query_pos, src_pos)
    if valid is not None:
        if not valid.any(-1).all():
            raise ValueError("a query has no admissible source")
        d2_rank = d2.detach().masked_fill(~valid, float("inf"))
    else:
        d2_rank = d2.detach()
    kk = min(k, s)
    _, order = torch.sort(d2_rank, dim=-1, stable=True)
    order = order[..., :kk]
    sel_d2 = torch.gather(d2, -1, order)
    sel_ok = torch.gather(d2_rank, -1, order).isfinite()

    safe = torch.where(sel_ok, sel_d2, torch.ones_like(sel_d2)).clamp_min(COINCIDENT_DIST ** 2)
    w = torch.where(sel_ok, 1.0 / safe, torch.zeros_like(safe))
    w = w / w.sum(-1, keepdim=True)
    coincident = sel_d2[..., :1].detach() < COINCIDENT_DIST ** 2
    onehot = torch.zeros_like(w)
    onehot[..., 0] = 1.0
    w = torch.where(coincident, onehot, w)

    feats = gather_points(src_feat, order)  # (..., Q, kk, C)
    return (w.unsqueeze(-1) * feats).sum(-2)
