"""Dynamic token aggregating via weighted cross-attention (WCA)."""
import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ShapeError
from .numerics import PositionBias, position_hidden_width, stable_softmax


@dataclass(eq=False)
class WCAMap:
    wm: torch.Tensor      # (B, H, N), rows sum to 1
    logits: torch.Tensor  # pre-softmax, kept for diagnostics

    @property
    def shape(self):
        return tuple(self.wm.shape)


def projection(width):
    w = torch.empty(width, width)
    bound = 1.0 / math.sqrt(width)
    nn.init.uniform_(w, -bound, bound)
    return nn.Parameter(w)


def project_qkv(s, t, w_q, w_k, w_v):
    if s.shape[-1] != w_q.shape[0] or t.shape[-1] != w_k.shape[0] or t.shape[-1] != w_v.shape[0]:
        raise ShapeError("token width does not match projection weights")
    return s @ w_q, t @ w_k, t @ w_v


def wca_map(q, k, pi, bias, width):
    """WM = softmax(Pi * (Q K^T / sqrt(D) + B)), Pi broadcast over query rows."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"Q/K widths differ: {q.shape[-1]} vs {k.shape[-1]}")
    scores = q @ k.transpose(-1, -2) / math.sqrt(width)
    if bias is not None:
        scores = scores + bias
    logits = pi.unsqueeze(-2) * scores
    return WCAMap(wm=stable_softmax(logits, dim=-1), logits=logits)


def aggregate(wm, v):
    wm = wm.wm if isinstance(wm, WCAMap) else wm
    if wm.shape[-1] != v.shape[-2]:
        raise ShapeError(f"map has {wm.shape[-1]} columns, V has {v.shape[-2]} rows")
    return wm @ v


class DTA(nn.Module):
    """Aggregates global context from T into each sparsified token of S."""

    def __init__(self, width, use_pi=True):
        super().__init__()
        self.width = width
        self.use_pi = use_pi
        self.w_q = projection(width)
        self.w_k = projection(width)
        self.w_v = projection(width)
        self.pos = PositionBias(position_hidden_width(width))

    def forward(self, s, s_coords, t, t_coords, pi):
        q, k, v = project_qkv(s, t, self.w_q, self.w_k, self.w_v)
        bias = self.pos(s_coords, t_coords)
        if not self.use_pi:
            pi = torch.ones_like(pi)
        m = wca_map(q, k, pi, bias, self.width)
        return aggregate(m, v), m
