import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from emt.tct import MSA, STA, ClasMixer, RegrMixer, TCTBlock, attention, clas_blocks, regr_blocks

from oracles import gru_unroll, temporal_conv_bruteforce

D = torch.float64


def _softmax_np(s):
    e = np.exp(s - s.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), t=st.integers(1, 12), d=st.integers(1, 8),
       scale=st.floats(0.01, 30.0))
def test_attention_rows_sum_to_one_and_outputs_convex(seed, t, d, scale):
    g = torch.Generator().manual_seed(seed)
    q, k, v = (scale * torch.randn(2, 3, t, d, generator=g, dtype=D) for _ in range(3))
    out, w = attention(q, k, v, return_weights=True)
    np.testing.assert_allclose(w.sum(-1).numpy(), 1.0, atol=1e-6)
    assert torch.all(w >= 0)
    lo = v.min(dim=-2, keepdim=True).values
    hi = v.max(dim=-2, keepdim=True).values
    assert torch.all(out >= lo - 1e-9) and torch.all(out <= hi + 1e-9)


def test_attention_matches_numpy(rng):
    q, k, v = (rng.standard_normal((4, 6, 5)) for _ in range(3))
    ref = _softmax_np(q @ k.transpose(0, 2, 1) / np.sqrt(5)) @ v
    out = attention(*(torch.as_tensor(x) for x in (q, k, v)))
    np.testing.assert_allclose(out.numpy(), ref, atol=1e-13)


def test_msa_heads_are_independent_projections(rng):
    msa = MSA(8, n_head=3, d_head=4).double()
    s = torch.as_tensor(rng.standard_normal((2, 5, 8)))
    out = msa(s)
    assert out.shape == (2, 3, 5, 4)
    w = msa.w_qkv.detach().numpy()
    for h in range(3):
        proj = s.numpy() @ w[h]
        q, k, v = proj[..., :4], proj[..., 4:8], proj[..., 8:]
        ref = _softmax_np(q @ k.transpose(0, 2, 1) / 2.0) @ v
        np.testing.assert_allclose(out[:, h].detach().numpy(), ref, atol=1e-13)


def test_sta_conv_matches_bruteforce_exactly():
    # integer-valued data keeps every partial sum exact, so results must be identical
    rng = np.random.default_rng(5)
    sta = STA(n_head=3, d_head=4, d_out=6, n_anchor=3, alpha=0.25).double().eval()
    w = rng.integers(-3, 4, size=sta.conv.weight.shape).astype(np.float64)
    with torch.no_grad():
        sta.conv.weight.copy_(torch.as_tensor(w))
    h = rng.integers(-5, 6, size=(2, 3, 7, 4)).astype(np.float64)
    conv = sta.conv(torch.as_tensor(h)).detach().numpy()
    np.testing.assert_array_equal(conv, temporal_conv_bruteforce(h, w))


@pytest.mark.parametrize("n_anchor", [1, 3, 5])
def test_sta_full_path_matches_bruteforce(n_anchor, rng):
    sta = STA(n_head=4, d_head=3, d_out=5, n_anchor=n_anchor).double().eval()
    h = rng.standard_normal((2, 4, 6, 3))
    conv = temporal_conv_bruteforce(h, sta.conv.weight.detach().numpy())
    flat = conv.transpose(0, 2, 1, 3).reshape(2, 6, 12)
    ref = flat @ sta.w_sta.weight.detach().numpy().T
    np.testing.assert_allclose(sta(torch.as_tensor(h)).detach().numpy(), ref, atol=1e-12)


def test_sta_without_conv_is_reshape_and_projection(rng):
    sta = STA(n_head=4, d_head=3, d_out=5, use_conv=False).double()
    assert not hasattr(sta, "conv")
    h = rng.standard_normal((2, 4, 6, 3))
    ref = h.transpose(0, 2, 1, 3).reshape(2, 6, 12) @ sta.w_sta.weight.detach().numpy().T
    np.testing.assert_allclose(sta(torch.as_tensor(h)).detach().numpy(), ref, atol=1e-13)


def test_sta_configuration():
    sta = STA(n_head=4, d_head=3, alpha=0.4, p_base=0.25)
    assert sta.dropout.p == pytest.approx(0.1)
    # near-identity initialisation
    centre = sta.conv.weight[torch.arange(4), torch.arange(4), 1, 0]
    assert torch.all((centre - 1).abs() < 0.1)
    with pytest.raises(ValueError):
        STA(n_anchor=2)
    with pytest.raises(ValueError):
        STA(n_head=2, d_head=2, n_anchor=5)(torch.zeros(1, 2, 3, 2))


def test_block_with_zeroed_sublayers_is_identity(rng):
    block = TCTBlock(ClasMixer(8, n_head=2, d_head=4), 8).double().eval()
    with torch.no_grad():
        block.mixer.sta.w_sta.weight.zero_()
        block.mlp.fc2.weight.zero_()
        block.mlp.fc2.bias.zero_()
    z = torch.as_tensor(rng.standard_normal((2, 5, 8)))
    assert torch.equal(block(z), z)


def test_block_width_check():
    block = TCTBlock(ClasMixer(8, n_head=2, d_head=4), 8)
    with pytest.raises(ValueError):
        block(torch.zeros(1, 3, 9))


def test_clas_stream_keeps_width_32():
    blocks = clas_blocks(4).eval()
    z = torch.randn(2, 37, 32)
    for b in blocks:
        z = b(z)
        assert z.shape == (2, 37, 32)


def test_regr_stream_widths():
    blocks = regr_blocks(2, d_g=32, d_head=32).eval()
    assert isinstance(blocks[0].residual, torch.nn.Linear)
    assert blocks[0].residual.bias is None
    assert isinstance(blocks[1].residual, torch.nn.Identity)
    z = torch.randn(2, 96, 32)
    for b in blocks:
        z = b(z)
    assert z.shape == (2, 96, 64)


def _gru_oracle_layer(x, gru, layer):
    h = gru.hidden_size
    outs = []
    for suffix, rev in (("", False), ("_reverse", True)):
        p = {n: getattr(gru, f"{n}_l{layer}{suffix}").detach().numpy()
             for n in ("weight_ih", "weight_hh", "bias_ih", "bias_hh")}
        outs.append(np.stack([gru_unroll(xi, p["weight_ih"], p["weight_hh"], p["bias_ih"],
                                         p["bias_hh"], reverse=rev) for xi in x]))
    assert outs[0].shape[-1] == h
    return np.concatenate(outs, axis=-1)


def test_gru_mixer_matches_numpy_unroll(rng):
    mixer = RegrMixer(6, d_head=5, rnn="gru", num_layers=2).double()
    s = rng.standard_normal((3, 7, 6))
    x = s @ mixer.w_v.weight.detach().numpy().T
    for layer in range(2):
        x = _gru_oracle_layer(x, mixer.rnn, layer)
    np.testing.assert_allclose(mixer(torch.as_tensor(s)).detach().numpy(), x, atol=1e-12)


@pytest.mark.parametrize("kind", ["rnn", "lstm", "gru"])
def test_bidirectional_reversal_symmetry(kind, rng):
    # reversing time swaps the roles of the two directions at the first layer
    mixer = RegrMixer(4, d_head=3, rnn=kind, num_layers=1).double()
    with torch.no_grad():
        for name, p in mixer.rnn.named_parameters():
            if name.endswith("_reverse"):
                p.copy_(getattr(mixer.rnn, name[: -len("_reverse")]))
    s = torch.as_tensor(rng.standard_normal((2, 6, 4)))
    out = mixer(s)
    out_rev = mixer(s.flip(1)).flip(1)
    np.testing.assert_allclose(out[..., :3].detach().numpy(), out_rev[..., 3:].detach().numpy(),
                               atol=1e-13)
    assert out.shape == (2, 6, 6)


def test_unknown_rnn_kind():
    with pytest.raises(ValueError):
        RegrMixer(4, rnn="transformer")


def test_eval_mode_is_deterministic(rng):
    blocks = clas_blocks(2).double().eval()
    z = torch.as_tensor(rng.standard_normal((2, 9, 32)))
    a, b = z, z
    for blk in blocks:
        a, b = blk(a), blk(b)
    assert torch.equal(a, b)
