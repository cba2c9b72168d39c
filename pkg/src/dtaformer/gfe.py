"""Global feature enhancement: point-wise + channel-wise self-attention with residual LBR."""
import math

import torch
import torch.nn as nn

from .dta import projection
from .errors import ShapeError
from .numerics import LBR, PositionBias, position_hidden_width, stable_softmax


def pointwise_attention(s, w_qe, w_ke, w_ve, bias=None):
    """(H, D) tokens -> (H, D); token-by-token attention map of shape (H, H)."""
    width = s.shape[-1]
    q, k, v = s @ w_qe, s @ w_ke, s @ w_ve
    att = q @ k.transpose(-1, -2) / math.sqrt(width)
    if bias is not None:
        att = att + bias
    return stable_softmax(att, dim=-1) @ v


def channelwise_attention(s, w_qe, w_ke, w_ve):
    """(H, D) tokens -> (H, D); channel-by-channel attention map of shape (D, D).

    The raw product A (S W_VE)^T is D x H; it is returned transposed so it can be
    summed with the point-wise branch.
    """
    width = s.shape[-1]
    q, k, v = s @ w_qe, s @ w_ke, s @ w_ve
    att = stable_softmax(k.transpose(-1, -2) @ q / math.sqrt(width), dim=-1)
    return (att @ v.transpose(-1, -2)).transpose(-1, -2)


def gfe_fuse(s, f_p, f_c, mlp, lbr):
    if f_p.shape != s.shape or f_c.shape != s.shape:
        raise ShapeError(f"branch outputs {tuple(f_p.shape)}/{tuple(f_c.shape)} "
                         f"do not match tokens {tuple(s.shape)}")
    return lbr(s + mlp(f_p + f_c))


class GFE(nn.Module):
    def __init__(self, width, point=True, channel=True):
        super().__init__()
        self.point = point
        self.channel = channel
        # one set of projections feeds both branches
        self.w_qe = projection(width)
        self.w_ke = projection(width)
        self.w_ve = projection(width)
        self.pos = PositionBias(position_hidden_width(width))
        self.mlp = nn.Linear(width, width)
        self.lbr = LBR(width, width)

    def forward(self, s, coords):
        zero = torch.zeros_like(s)
        f_p = zero
        if self.point:
            f_p = pointwise_attention(s, self.w_qe, self.w_ke, self.w_ve,
                                      self.pos(coords, coords))
        f_c = channelwise_attention(s, self.w_qe, self.w_ke, self.w_ve) if self.channel else zero
        return gfe_fuse(s, f_p, f_c, self.mlp, self.lbr)
