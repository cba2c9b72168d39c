"""Learnable token sparsification: GLocal embedding, keep/drop scores, top-H selection."""
import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ConfigError, ShapeError
from .numerics import gather_rows, gumbel_top_h, stable_softmax

KEEP_LOGIT_EPS = 1e-12


@dataclass
class TokenSet:
    features: torch.Tensor  # (B, N, D)
    coords: torch.Tensor    # (B, N, 3)

    def __post_init__(self):
        if self.features.shape[:-1] != self.coords.shape[:-1]:
            raise ShapeError("features and coords disagree on token count")

    @property
    def count(self):
        return self.features.shape[-2]

    @property
    def width(self):
        return self.features.shape[-1]


@dataclass
class DecisionScores:
    phi: torch.Tensor  # (B, N, 2): keep, drop

    @property
    def pi(self):
        return self.phi[..., 0]


@dataclass
class SparsifiedSelection:
    indices: torch.Tensor       # (B, H)
    features: torch.Tensor      # (B, H, D)
    coords: torch.Tensor        # (B, H, 3)
    soft_weights: torch.Tensor  # (B, N)

    @property
    def count(self):
        return self.indices.shape[-1]


def keep_count(ratio, n):
    return max(1, min(n, math.ceil(ratio * n - 1e-9)))


def _mlp(d_in, d_hidden, d_out):
    return nn.Sequential(nn.Linear(d_in, d_hidden), nn.ReLU(), nn.Linear(d_hidden, d_out))


class GLocalEmbed(nn.Module):
    """Per-token local embedding concatenated with an average-pooled global one."""

    def __init__(self, width):
        super().__init__()
        if width < 2 or width % 2:
            raise ConfigError(f"token width must be even and >= 2, got {width}")
        half = width // 2
        self.local_mlp = _mlp(width, half, half)
        self.global_mlp = _mlp(width, half, half)

    def forward(self, x):
        local = self.local_mlp(x)
        glob = self.global_mlp(x).mean(dim=-2, keepdim=True)
        return torch.cat([local, glob.expand_as(local)], dim=-1)


class DecisionHead(nn.Module):
    def __init__(self, width):
        super().__init__()
        self.mlp = _mlp(width, max(1, width // 2), 2)

    def forward(self, glocal):
        return DecisionScores(phi=stable_softmax(self.mlp(glocal), dim=-1))


def sparsify(tokens, scores, h, generator=None, training=False, temperature=1.0,
             relaxed=False):
    """Pick ``h`` tokens by Gumbel top-H over log keep-probabilities.

    The straight-through mask multiplies the gathered rows; its forward value is
    exactly 1, so selected features are bitwise copies of the input rows. With
    ``relaxed=True`` rows are scaled by the soft weights instead, giving a smooth
    surrogate whose gradient equals the straight-through one (used by gradient
    checks).
    """
    n = tokens.count
    if h < 1 or h > n:
        raise ValueError(f"H must satisfy 1 <= H <= N, got H={h}, N={n}")
    logits = torch.log(scores.pi + KEEP_LOGIT_EPS)
    top = gumbel_top_h(logits, h, temperature, generator, training)
    weights = top.soft_weights if relaxed else top.mask
    picked_w = torch.gather(weights, -1, top.indices).unsqueeze(-1)
    feats = gather_rows(tokens.features, top.indices) * picked_w
    coords = gather_rows(tokens.coords, top.indices)
    return SparsifiedSelection(top.indices, feats, coords, top.soft_weights)


class LTS(nn.Module):
    def __init__(self, width, temperature=1.0):
        super().__init__()
        self.embed = GLocalEmbed(width)
        self.decide = DecisionHead(width)
        self.temperature = temperature

    def scores(self, tokens):
        return self.decide(self.embed(tokens.features))

    def forward(self, tokens, h, generator=None, relaxed=False):
        scores = self.scores(tokens)
        sel = sparsify(tokens, scores, h, generator, self.training, self.temperature,
                       relaxed)
        return scores, sel
