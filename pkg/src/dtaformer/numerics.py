"""Differentiable primitives shared by the network blocks."""
from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import InvalidInputError, ShapeError

GUMBEL_EPS = 1e-10


def make_generator(seed):
    """CPU generator seeded for reproducible Gumbel / sampling draws."""
    g = torch.Generator()
    g.manual_seed(int(seed) & 0xFFFF_FFFF_FFFF_FFFF)
    return g


def check_finite(x, name="input"):
    if not torch.isfinite(x).all():
        raise InvalidInputError(f"{name} contains NaN or Inf")


def stable_softmax(x, dim=-1):
    """Max-shifted softmax. Raises on non-finite input instead of returning NaN."""
    check_finite(x, "softmax input")
    shifted = x - x.amax(dim=dim, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


def gumbel_noise(shape, generator=None, dtype=torch.float32):
    u = torch.rand(shape, generator=generator, dtype=dtype)
    u = u.clamp(GUMBEL_EPS, 1.0 - GUMBEL_EPS)
    return -torch.log(-torch.log(u))


@dataclass
class TopH:
    indices: torch.Tensor       # (..., H), ascending
    soft_weights: torch.Tensor  # (..., N)
    mask: torch.Tensor          # (..., N) hard 0/1 forward, soft-weight gradient backward


def gumbel_top_h(logits, h, temperature=1.0, generator=None, training=False):
    """Select the top-``h`` entries of ``logits`` along the last axis.

    Training mode perturbs the logits with Gumbel(0, 1) noise first; eval mode
    is deterministic with ties resolved toward the lower index. Returned indices
    are sorted ascending so that ``h == N`` reproduces the original order.
    """
    n = logits.shape[-1]
    if h < 1 or h > n:
        raise ValueError(f"H must satisfy 1 <= H <= N, got H={h}, N={n}")
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    check_finite(logits, "logits")

    perturbed = logits
    if training:
        perturbed = logits + gumbel_noise(logits.shape, generator, logits.dtype)
    # stable descending sort keeps equal values in index order
    order = torch.sort(perturbed.detach(), dim=-1, descending=True, stable=True).indices
    indices = order[..., :h].sort(dim=-1).values

    soft = stable_softmax(perturbed / temperature, dim=-1)
    hard = torch.zeros_like(soft).scatter(-1, indices, 1.0)
    # soft - soft.detach() is exactly zero, so the forward value stays 0/1
    mask = hard + (soft - soft.detach())
    return TopH(indices=indices, soft_weights=soft, mask=mask)


def gather_rows(x, indices):
    """x: (B, N, D), indices: (B, H) -> (B, H, D)"""
    return torch.gather(x, 1, indices.unsqueeze(-1).expand(-1, -1, x.shape[-1]))


class LBR(nn.Module):
    """Linear -> BatchNorm over every (batch, token) row -> ReLU."""

    def __init__(self, in_dim, out_dim, momentum=0.1):
        super().__init__()
        self.linear = nn.Linear(in_dim, out_dim)
        self.norm = nn.BatchNorm1d(out_dim, momentum=momentum)

    def forward(self, x):
        if x.shape[-1] != self.linear.in_features:
            raise ShapeError(
                f"LBR expects width {self.linear.in_features}, got {x.shape[-1]}")
        lead = x.shape[:-1]
        y = self.linear(x).reshape(-1, self.linear.out_features)
        y = self.norm(y)
        return torch.relu(y).reshape(*lead, -1)


def position_hidden_width(width):
    return max(8, width // 4)


class PositionBias(nn.Module):
    """Scalar relative-position bias: B[i, j] = MLP(q_i - k_j), MLP is 3 -> d -> 1."""

    def __init__(self, hidden):
        super().__init__()
        self.fc1 = nn.Linear(3, hidden)
        self.fc2 = nn.Linear(hidden, 1)

    def forward(self, coords_q, coords_k):
        if coords_q.shape[-1] != 3 or coords_k.shape[-1] != 3:
            raise ShapeError("position bias expects 3D coordinates")
        # fc1 is affine, so fc1(q - k) = (W q + b) - W k; avoids a (H, N, 3) diff tensor
        a = self.fc1(coords_q)
        b = coords_k @ self.fc1.weight.t()
        hidden = torch.relu(a.unsqueeze(-2) - b.unsqueeze(-3))
        return self.fc2(hidden).squeeze(-1)
