"""Replacement blocks for the ablation variants (sampling, aggregation, upsampling)."""
import numpy as np
import torch
import torch.nn as nn

from . import data
from .dta import wca_map
from .errors import ShapeError
from .lts import SparsifiedSelection
from .numerics import gather_rows


def _selection(tokens, indices):
    b, n = tokens.features.shape[0], tokens.count
    h = indices.shape[-1]
    soft = torch.full((b, n), h / n, dtype=tokens.features.dtype)
    return SparsifiedSelection(indices, gather_rows(tokens.features, indices),
                               gather_rows(tokens.coords, indices), soft)


def random_sample(tokens, h, generator=None):
    """Uniform sample of ``h`` tokens without replacement, per batch item."""
    n = tokens.count
    if h < 1 or h > n:
        raise ValueError(f"H must satisfy 1 <= H <= N, got H={h}, N={n}")
    rows = [torch.randperm(n, generator=generator)[:h].sort().values
            for _ in range(tokens.features.shape[0])]
    return _selection(tokens, torch.stack(rows))


def fps_sample(tokens, h):
    coords = tokens.coords.detach().cpu().numpy()
    rows = [np.sort(data.fps(c, h)) for c in coords]
    return _selection(tokens, torch.as_tensor(np.stack(rows), dtype=torch.long))


def knn_indices(query, ref, k):
    """(B, H, 3), (B, N, 3) -> (B, H, k) nearest by distance; ties by lower index."""
    if k < 1 or k > ref.shape[-2]:
        raise ValueError(f"k must satisfy 1 <= k <= N, got k={k}, N={ref.shape[-2]}")
    d2 = ((query.unsqueeze(-2) - ref.unsqueeze(-3)) ** 2).sum(-1)
    return torch.sort(d2, dim=-1, stable=True).indices[..., :k]


class KnnMlpAggregate(nn.Module):
    """Shared MLP on the k nearest original tokens of each sparsified token, max-pooled."""

    def __init__(self, width, k=16):
        super().__init__()
        self.k = k
        self.mlp = nn.Sequential(nn.Linear(width, width), nn.ReLU(), nn.Linear(width, width))

    def forward(self, s_coords, t, t_coords):
        k = min(self.k, t.shape[-2])
        idx = knn_indices(s_coords, t_coords, k)  # (B, H, k)
        b, h, _ = idx.shape
        neigh = gather_rows(t, idx.reshape(b, h * k)).reshape(b, h, k, -1)
        return self.mlp(neigh).amax(dim=-2)


def vca_map(q, k, bias, width):
    """Vanilla cross-attention map: the weighted map with every keep weight set to 1."""
    ones = torch.ones(q.shape[:-2] + (k.shape[-2],), dtype=q.dtype)
    return wca_map(q, k, ones, bias, width)


def interpolate_up(s, s_coords, t_coords, mode="trilinear"):
    """Spread (B, H, D) sparsified features onto (B, N, 3) target points.

    trilinear: inverse squared-distance weights over the 3 nearest sources;
    a coincident source takes all the weight. nearest: copy the closest source.
    """
    if s.shape[-2] < 1:
        raise ShapeError("need at least one source token")
    if mode not in ("trilinear", "nearest"):
        raise ValueError(f"unknown interpolation mode {mode!r}")
    kk = 1 if mode == "nearest" else min(3, s.shape[-2])
    d2 = ((t_coords.unsqueeze(-2) - s_coords.unsqueeze(-3)) ** 2).sum(-1)  # (B, N, H)
    d2s, idx = torch.sort(d2, dim=-1, stable=True)
    d2s, idx = d2s[..., :kk], idx[..., :kk]
    if kk == 1:
        w = torch.ones_like(d2s)
    else:
        hit = d2s == 0
        inv = 1.0 / torch.where(hit, torch.ones_like(d2s), d2s)
        # sorted ascending, so a coincident source always sits in column 0
        first = torch.zeros_like(d2s)
        first[..., 0] = 1.0
        w = torch.where(hit[..., :1], first, inv)
        w = w / w.sum(-1, keepdim=True)
    b, n, _ = idx.shape
    src = gather_rows(s, idx.reshape(b, n * kk)).reshape(b, n, kk, -1)
    return (w.unsqueeze(-1) * src).sum(-2)
