"""Finite-difference and oracle verification suite, run at toy sizes in float64.

Each block is checked twice: its forward output against the loop oracles in
``reference`` and its autograd gradient against central differences.
"""
from dataclasses import dataclass

import numpy as np
import torch

from . import dta, gfe, itr, lts, numerics, reference
from .ablations import vca_map
from .wnet import DTAFormer, ModelConfig, StageConfig, multi_loss

FD_STEP = 1e-4
GRAD_TOL = 1e-3
ST_TOL = 1e-4
FORWARD_TOL = 1e-6


@dataclass
class BlockResult:
    block: str
    grad_error: float
    forward_error: float
    grad_tol: float = GRAD_TOL
    forward_tol: float = FORWARD_TOL

    @property
    def passed(self):
        return (np.isfinite(self.grad_error) and self.grad_error <= self.grad_tol
                and np.isfinite(self.forward_error) and self.forward_error <= self.forward_tol)


def relative_error(a, b):
    """max |a - b| scaled by the larger of the two max magnitudes (floor 1e-8)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def numeric_grad(fn, tensors, step=FD_STEP):
    """Central differences of scalar ``fn()`` w.r.t. every entry of ``tensors``."""
    grads = []
    with torch.no_grad():
        for t in tensors:
            g = torch.zeros_like(t)
            flat, gflat = t.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                hi = float(fn())
                flat[i] = orig - step
                lo = float(fn())
                flat[i] = orig
                gflat[i] = (hi - lo) / (2 * step)
            grads.append(g)
    return grads


def analytic_grad(fn, tensors):
    for t in tensors:
        t.grad = None
    fn().backward()
    return [t.grad.clone() if t.grad is not None else torch.zeros_like(t) for t in tensors]


def gradient_error(fn, tensors, step=FD_STEP, numeric_fn=None):
    # one scale for all tensors: a parameter whose gradient is exactly zero
    # (e.g. a bias feeding batch norm) must not be judged on its roundoff alone
    ana = torch.cat([a.reshape(-1) for a in analytic_grad(fn, tensors)])
    num = torch.cat([n.reshape(-1) for n in numeric_grad(numeric_fn or fn, tensors, step)])
    return relative_error(ana.numpy(), num.numpy())


def _rand(g, *shape):
    return torch.randn(*shape, generator=g, dtype=torch.float64, requires_grad=True)


def _weights_like(g, out):
    return torch.randn(out.shape, generator=g, dtype=torch.float64)


def _np(t):
    return t.detach().numpy()


def check_softmax(g):
    x = _rand(g, 3, 4)
    w = _weights_like(g, x)
    fwd = relative_error(_np(numerics.stable_softmax(x)), reference.softmax_rows(_np(x)))
    return BlockResult("numerics.stable_softmax",
                       gradient_error(lambda: (numerics.stable_softmax(x) * w).sum(), [x]), fwd)


def check_gumbel_st(g):
    n, h = 8, 3
    logits = _rand(g, n)
    noise = numerics.gumbel_noise((n,), numerics.make_generator(11), torch.float64)
    c = torch.randn(n, generator=g, dtype=torch.float64)

    def st_loss():
        # training-mode draw with the same noise every call
        top = numerics.gumbel_top_h(logits, h, 1.0, numerics.make_generator(11), training=True)
        return (top.mask * c).sum()

    def soft_loss():
        return (numerics.stable_softmax(logits + noise) * c).sum()

    top = numerics.gumbel_top_h(logits, h, 1.0, numerics.make_generator(11), training=True)
    fwd = relative_error(_np(top.indices).tolist(), reference.top_h(_np(logits + noise).tolist(), h))
    return BlockResult("numerics.gumbel_top_h", gradient_error(st_loss, [logits], numeric_fn=soft_loss),
                       fwd, grad_tol=ST_TOL)


def _lbr_params(m):
    return (_np(m.linear.weight), _np(m.linear.bias), _np(m.norm.weight), _np(m.norm.bias))


def check_lbr(g):
    torch.manual_seed(0)
    m = numerics.LBR(4, 4).double().train()
    with torch.no_grad():
        m.norm.weight.uniform_(0.5, 1.5)
        m.norm.bias.uniform_(-0.5, 0.5)
    x = _rand(g, 4, 4)
    w = _weights_like(g, m(x))
    fwd = relative_error(_np(m(x)), reference.lbr(_np(x), *_lbr_params(m)))
    params = [x] + list(m.parameters())
    return BlockResult("numerics.lbr", gradient_error(lambda: (m(x) * w).sum(), params), fwd)


def check_position_bias(g):
    torch.manual_seed(1)
    m = numerics.PositionBias(8).double()
    cq, ck = _rand(g, 3, 3), _rand(g, 4, 3)
    w = _weights_like(g, m(cq, ck))
    fwd = relative_error(_np(m(cq, ck)), reference.position_bias(
        _np(cq), _np(ck), _np(m.fc1.weight), _np(m.fc1.bias), _np(m.fc2.weight), _np(m.fc2.bias)))
    params = [cq, ck] + list(m.parameters())
    return BlockResult("numerics.position_bias",
                       gradient_error(lambda: (m(cq, ck) * w).sum(), params), fwd)


def _mlp_params(seq):
    return (_np(seq[0].weight), _np(seq[0].bias), _np(seq[2].weight), _np(seq[2].bias))


def check_lts(g):
    torch.manual_seed(2)
    block = lts.LTS(4).double().eval()
    feats = torch.randn(1, 4, 4, generator=g, dtype=torch.float64)
    coords = torch.randn(1, 4, 3, generator=g, dtype=torch.float64)
    tokens = lts.TokenSet(feats, coords)

    def loss(relaxed):
        _, sel = block(tokens, 2, relaxed=relaxed)
        return sel.features.sum()

    # straight-through gradient equals the gradient of the soft-weighted surrogate
    params = list(block.parameters())
    err = gradient_error(lambda: loss(False), params, numeric_fn=lambda: loss(True))

    emb = reference.glocal(_np(feats[0]), _mlp_params(block.embed.local_mlp),
                           _mlp_params(block.embed.global_mlp))
    phi = reference.softmax_rows(reference.mlp2(emb, *_mlp_params(block.decide.mlp)))
    expected = reference.top_h(np.log(phi[:, 0] + lts.KEEP_LOGIT_EPS).tolist(), 2)
    _, sel = block(tokens, 2)
    fwd = max(relative_error(_np(block.scores(tokens).phi[0]), phi),
              relative_error(_np(sel.indices[0]).tolist(), expected),
              relative_error(_np(sel.features[0]), _np(feats[0])[expected]))
    return BlockResult("lts", err, fwd)


def _small_qkv(g):
    q, k, v = _rand(g, 2, 2), _rand(g, 3, 2), _rand(g, 3, 2)
    pi = torch.rand(3, generator=g, dtype=torch.float64).requires_grad_(True)
    bias = _rand(g, 2, 3)
    return q, k, v, pi, bias


def check_dta(g):
    q, k, v, pi, bias = _small_qkv(g)
    w = torch.randn(2, 2, generator=g, dtype=torch.float64)

    def loss():
        return (dta.aggregate(dta.wca_map(q, k, pi, bias, 2), v) * w).sum()

    err = gradient_error(loss, [q, k, v, pi, bias])
    wm_ref = reference.wca_map(_np(q), _np(k), _np(pi), _np(bias), 2)
    m = dta.wca_map(q, k, pi, bias, 2)
    fwd = max(relative_error(_np(m.wm), wm_ref),
              relative_error(_np(dta.aggregate(m, v)), reference.aggregate(wm_ref, _np(v))))
    # VCA reduction: unit keep weights and zero bias give plain cross-attention
    torch.manual_seed(3)
    block = dta.DTA(2).double()
    s, t = _rand(g, 2, 2), _rand(g, 3, 2)
    zero = torch.zeros(2, 3, dtype=torch.float64)
    qq, kk, vv = dta.project_qkv(s, t, block.w_q, block.w_k, block.w_v)
    out = dta.aggregate(dta.wca_map(qq, kk, torch.ones(3, dtype=torch.float64), zero, 2), vv)
    vca = reference.vanilla_cross_attention(_np(s), _np(t), _np(block.w_q), _np(block.w_k), _np(block.w_v))
    fwd = max(fwd, relative_error(_np(out), vca),
              relative_error(_np(vca_map(qq, kk, zero, 2).wm),
                             _np(dta.wca_map(qq, kk, torch.ones(3, dtype=torch.float64), zero, 2).wm)))
    return BlockResult("dta", err, fwd)


def check_gfe(g):
    torch.manual_seed(4)
    block = gfe.GFE(4).double().train()
    s = _rand(g, 1, 3, 4)
    coords = torch.randn(1, 3, 3, generator=g, dtype=torch.float64)
    w = _weights_like(g, s)
    err = gradient_error(lambda: (block(s, coords) * w).sum(), [s] + list(block.parameters()))

    s0 = _np(s[0])
    wq, wk, wv = _np(block.w_qe), _np(block.w_ke), _np(block.w_ve)
    pb = block.pos
    bias = reference.position_bias(_np(coords[0]), _np(coords[0]), _np(pb.fc1.weight),
                                   _np(pb.fc1.bias), _np(pb.fc2.weight), _np(pb.fc2.bias))
    fp = reference.pointwise_attention(s0, wq, wk, wv, bias)
    fc = reference.channelwise_attention(s0, wq, wk, wv)
    fused = reference.lbr(s0 + reference.linear(fp + fc, _np(block.mlp.weight), _np(block.mlp.bias)),
                          *_lbr_params(block.lbr))
    fwd = max(
        relative_error(_np(gfe.pointwise_attention(s, block.w_qe, block.w_ke, block.w_ve,
                                                   block.pos(coords, coords))[0]), fp),
        relative_error(_np(gfe.channelwise_attention(s, block.w_qe, block.w_ke, block.w_ve)[0]), fc),
        relative_error(_np(block(s, coords)[0]), fused))
    return BlockResult("gfe", err, fwd)


def check_itr(g):
    s, t = _rand(g, 2, 2), _rand(g, 3, 2)
    wm = torch.softmax(torch.randn(2, 3, generator=g, dtype=torch.float64), -1).requires_grad_(True)
    w = _weights_like(g, t)
    err = gradient_error(lambda: (itr.reconstruct(s, t, wm) * w).sum(), [s, t, wm])
    fwd = relative_error(_np(itr.reconstruct(s, t, wm)), reference.reconstruct(_np(s), _np(t), _np(wm)))
    return BlockResult("itr", err, fwd)


def toy_model(seed=5, num_classes=2):
    torch.manual_seed(seed)
    cfg = ModelConfig(in_channels=6, num_classes=num_classes,
                      stages=[StageConfig(4, 0.25), StageConfig(4, 0.25)])
    return DTAFormer(cfg).double()


def check_end_to_end(g):
    model = toy_model().train()
    points = torch.randn(1, 8, 6, generator=g, dtype=torch.float64)
    labels = torch.randint(0, 2, (1, 8), generator=g)

    def loss():
        out = model(points, numerics.make_generator(13), relaxed=True)
        return multi_loss(out, labels)

    err = gradient_error(loss, list(model.parameters()))
    # forward consistency: identical draws give identical losses
    with torch.no_grad():
        fwd = abs(float(loss()) - float(loss()))
    return BlockResult("end_to_end", err, fwd)


CHECKS = [check_softmax, check_gumbel_st, check_lbr, check_position_bias, check_lts,
          check_dta, check_gfe, check_itr, check_end_to_end]


def run_suite(seed=0, checks=None):
    results = []
    for i, check in enumerate(checks or CHECKS):
        g = torch.Generator().manual_seed(seed * 1000 + i)
        results.append(check(g))
    return results
