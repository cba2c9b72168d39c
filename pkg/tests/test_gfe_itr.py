import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dtaformer import reference
from dtaformer.errors import ShapeError
from dtaformer.gfe import GFE, channelwise_attention, gfe_fuse, pointwise_attention
from dtaformer.itr import reconstruct, reconstruction_weights

from conftest import t64

EYE2 = torch.eye(2, dtype=torch.float64)
S_FIX = t64([[1, 2], [0, 1]])


def rand_w(g, d):
    return torch.randn(d, d, generator=g, dtype=torch.float64)


class TestPointwise:
    def test_single_token(self):
        g = torch.Generator().manual_seed(0)
        s, wv = torch.randn(1, 3, generator=g, dtype=torch.float64), rand_w(g, 3)
        out = pointwise_attention(s, rand_w(g, 3), rand_w(g, 3), wv)
        assert torch.allclose(out, s @ wv)

    def test_identical_rows(self):
        g = torch.Generator().manual_seed(1)
        s = torch.randn(1, 3, generator=g, dtype=torch.float64).expand(4, 3)
        out = pointwise_attention(s, rand_w(g, 3), rand_w(g, 3), rand_w(g, 3), torch.zeros(4, 4, dtype=torch.float64))
        assert torch.allclose(out, out[0].expand(4, 3))

    def test_hand_case(self):
        a, b = 0.8929581985348296, 0.6697615493266569  # sigmoid(3/sqrt2), sigmoid(1/sqrt2)
        out = pointwise_attention(S_FIX, EYE2, EYE2, EYE2)
        assert torch.allclose(out, t64([[a, 1 + a], [b, 1 + b]]), atol=1e-12)

    def test_permutation_equivariant(self):
        g = torch.Generator().manual_seed(2)
        s, w = torch.randn(5, 4, generator=g, dtype=torch.float64), [rand_w(g, 4) for _ in range(3)]
        perm = torch.randperm(5, generator=g)
        assert torch.allclose(pointwise_attention(s[perm], *w), pointwise_attention(s, *w)[perm])


class TestChannelwise:
    def test_single_channel(self):
        g = torch.Generator().manual_seed(0)
        s, wv = torch.randn(4, 1, generator=g, dtype=torch.float64), rand_w(g, 1)
        assert torch.allclose(channelwise_attention(s, rand_w(g, 1), rand_w(g, 1), wv), s @ wv)

    def test_zero_tokens(self):
        g = torch.Generator().manual_seed(0)
        out = channelwise_attention(torch.zeros(3, 4, dtype=torch.float64), *[rand_w(g, 4) for _ in range(3)])
        assert torch.equal(out, torch.zeros(3, 4, dtype=torch.float64))

    def test_hand_case(self):
        a, b = 0.8929581985348296, 0.6697615493266569
        out = channelwise_attention(S_FIX, EYE2, EYE2, EYE2)
        assert torch.allclose(out, t64([[1 + b, 1 + a], [b, a]]), atol=1e-12)

    def test_shape(self):
        out = channelwise_attention(torch.randn(5, 3), torch.randn(3, 3), torch.randn(3, 3), torch.randn(3, 3))
        assert out.shape == (5, 3)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 10_000))
def test_attention_branches_match_oracles(h, d, seed):
    g = np.random.default_rng(seed)
    s, wq, wk, wv = g.normal(size=(h, d)), g.normal(size=(d, d)), g.normal(size=(d, d)), g.normal(size=(d, d))
    bias = g.normal(size=(h, h))
    got_p = pointwise_attention(t64(s), t64(wq), t64(wk), t64(wv), t64(bias)).numpy()
    got_c = channelwise_attention(t64(s), t64(wq), t64(wk), t64(wv)).numpy()
    assert np.allclose(got_p, reference.pointwise_attention(s, wq, wk, wv, bias), atol=1e-6)
    assert np.allclose(got_c, reference.channelwise_attention(s, wq, wk, wv), atol=1e-6)


class TestGFEBlock:
    def test_residual_only_path(self):
        torch.manual_seed(0)
        m = GFE(4).double().train()
        with torch.no_grad():
            m.mlp.weight.zero_()
            m.mlp.bias.zero_()
        s = torch.randn(6, 4, dtype=torch.float64)
        assert torch.allclose(gfe_fuse(s, torch.zeros_like(s), torch.zeros_like(s), m.mlp, m.lbr), m.lbr(s))
        assert torch.allclose(m(s, torch.randn(6, 3, dtype=torch.float64)), m.lbr(s))

    def test_output_width(self):
        assert GFE(8)(torch.randn(2, 5, 8), torch.randn(2, 5, 3)).shape == (2, 5, 8)

    def test_fuse_shape_check(self):
        m = GFE(4)
        with pytest.raises(ShapeError):
            gfe_fuse(torch.zeros(3, 4), torch.zeros(2, 4), torch.zeros(3, 4), m.mlp, m.lbr)

    def test_branches_share_projections(self):
        names = {n for n, _ in GFE(4).named_parameters()}
        assert {"w_qe", "w_ke", "w_ve"} <= names
        assert not any(n.startswith(("w_qc", "w_kc", "w_vc")) for n in names)

    @pytest.mark.parametrize("point,channel", [(True, False), (False, True), (False, False)])
    def test_branch_switches(self, point, channel):
        torch.manual_seed(0)
        full = GFE(4).double().eval()
        part = GFE(4, point, channel).double().eval()
        part.load_state_dict(full.state_dict())
        s, c = torch.randn(1, 5, 4, dtype=torch.float64), torch.randn(1, 5, 3, dtype=torch.float64)
        f_p = pointwise_attention(s, full.w_qe, full.w_ke, full.w_ve, full.pos(c, c)) if point else 0
        f_c = channelwise_attention(s, full.w_qe, full.w_ke, full.w_ve) if channel else 0
        expected = full.lbr(s + full.mlp(f_p + f_c + torch.zeros_like(s)))
        assert torch.allclose(part(s, c), expected)

    def test_permutation_equivariant_in_eval(self):
        torch.manual_seed(0)
        m = GFE(4).double().eval()
        s, c = torch.randn(1, 7, 4, dtype=torch.float64), torch.randn(1, 7, 3, dtype=torch.float64)
        perm = torch.randperm(7)
        assert torch.allclose(m(s[:, perm], c[:, perm]), m(s, c)[:, perm])


class TestReconstruct:
    def test_zero_sparse_tokens_leave_t(self):
        t = torch.randn(5, 3, dtype=torch.float64)
        wm = torch.softmax(torch.randn(2, 5, dtype=torch.float64), -1)
        assert torch.equal(reconstruct(torch.zeros(2, 3, dtype=torch.float64), t, wm), t)

    def test_single_source_broadcast(self):
        s, t = torch.randn(1, 3, dtype=torch.float64), torch.randn(4, 3, dtype=torch.float64)
        assert torch.allclose(reconstruct(s, t, torch.full((1, 4), 0.25, dtype=torch.float64)), s + t)

    def test_hand_case(self):
        s, t = t64([[1, 0], [0, 2]]), t64([[0, 1], [1, 0], [0.5, 0.5]])
        wm = t64([[0.5, 0.25, 0.25], [0.1, 0.2, 0.7]])
        expected = t64([[0.598687660112452, 1.802624679775096],
                        [1.5124973964842103, 0.9750052070315793],
                        [0.8893607660507781, 1.721278467898444]])
        assert torch.allclose(reconstruct(s, t, wm), expected, atol=1e-12)

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            reconstruct(torch.zeros(2, 3), torch.zeros(4, 2), torch.full((2, 4), 0.25))

    def test_map_shape_mismatch(self):
        with pytest.raises(ShapeError):
            reconstruct(torch.zeros(2, 3), torch.zeros(4, 3), torch.full((3, 4), 0.25))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 3), st.integers(0, 10_000))
    def test_weights_stochastic_and_match_oracle(self, h, n, d, seed):
        g = np.random.default_rng(seed)
        wm = reference.softmax_rows(g.normal(size=(h, n)))
        s, t = g.normal(size=(h, d)), g.normal(size=(n, d))
        w = reconstruction_weights(t64(wm)).numpy()
        assert w.shape == (n, h)
        assert np.allclose(w.sum(-1), 1.0, atol=1e-12)
        assert np.allclose(reconstruct(t64(s), t64(t), t64(wm)).numpy(), reference.reconstruct(s, t, wm), atol=1e-6)
