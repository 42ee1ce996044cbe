import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from mtbev.config import ConfigError
from mtbev.decoder import (TCS, VSS2D, Decoder, DeformableAttention, QueryCrossAttention, bilinear_sample,
                           count_parameters, deformable_self_attention, index_update_queries, vss2d_scan)
from mtbev.query_init import TaskQuerySet
from mtbev.verify import oracles as O
from mtbev.verify.checks import (_random_vss, _ssm_params, _tcs_params, grad_cross_attention, grad_deformable_self,
                                 grad_index_update, grad_tcs, grad_vss2d, oracle_decoder)

D = torch.float64


def _qs(q, pos, task="det"):
    return TaskQuerySet(task, q, pos, torch.zeros_like(q))


def _own_cell_attention(dim=4):
    """Zero offsets, one head, one point: every query samples exactly its reference."""
    a = DeformableAttention(dim, 1, 1).double()
    with torch.no_grad():
        a.sampling_offsets.weight.zero_()
        a.sampling_offsets.bias.zero_()
    return a


def test_bilinear_midpoint_is_corner_mean():
    v = torch.randn(1, 2, 2, 3, dtype=D)
    got = bilinear_sample(v, torch.tensor([[[[1.0, 1.0]]]], dtype=D))[0, :, 0, 0]
    torch.testing.assert_close(got, v[0].reshape(4, 3).mean(0))
    np.testing.assert_allclose(O.bilinear_oracle(v[0].numpy(), 1.0, 1.0), got.numpy(), atol=1e-12)


def test_self_attention_zero_offsets_reads_own_cell():
    a = _own_cell_attention()
    f = torch.randn(1, 3, 3, 4, dtype=D)
    with torch.no_grad():
        got = deformable_self_attention(f, a)
        want = f + a.output_proj(a.value_proj(f))
    torch.testing.assert_close(got, want)


def test_self_attention_weights_normalized_and_errors():
    torch.manual_seed(0)
    a = DeformableAttention(8, 4, 4).double()
    with torch.no_grad():
        a.attention_weights.weight.normal_()
    _, w = a.sampling(torch.randn(1, 5, 8, dtype=D), torch.rand(1, 5, 2, dtype=D))
    torch.testing.assert_close(w.sum(-1), torch.ones(1, 5, 4, dtype=D))
    with pytest.raises(ValueError):
        deformable_self_attention(torch.zeros(1, 1, 3, 8, dtype=D), a)
    with torch.no_grad():
        a.sampling_offsets.bias[0] = float("inf")
    with pytest.raises(FloatingPointError):
        deformable_self_attention(torch.zeros(1, 2, 2, 8, dtype=D), a)


def test_vss2d_single_cell():
    v = _random_vss(3, 2, 5)
    f = torch.randn(1, 1, 1, 3, dtype=D)
    with torch.no_grad():
        one = v.ssm(f.view(1, 1, 3))
        torch.testing.assert_close(vss2d_scan(f, v), f + v.merge(4 * one).view(1, 1, 1, 3))


@settings(max_examples=12, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 8), st.integers(0, 10_000))
def test_vss2d_matches_naive_recurrence(h, w, n, seed):
    v = _random_vss(3, n, seed)
    f = torch.randn(1, h, w, 3, dtype=D, generator=torch.Generator().manual_seed(seed))
    with torch.no_grad():
        got = v(f)[0].numpy()
    np.testing.assert_allclose(got, O.vss2d_oracle(f[0].numpy(), _ssm_params(v)), atol=1e-6)


def test_ssm_decay_is_stable():
    v = VSS2D(4, 8)
    assert torch.all(v.ssm.A() < 0)


def test_tcs_identity_and_zero():
    tcs = TCS(4, 3).double()
    f = torch.randn(1, 3, 3, 4, dtype=D)
    outs = tcs(f)
    assert len(outs) == 3 and all(torch.equal(o, f) for o in outs)
    with torch.no_grad():
        for lin in tcs.weight:
            lin.bias.zero_()
    assert all(o.abs().max() == 0 for o in tcs(f))


def test_tcs_matches_scripted_oracle():
    torch.manual_seed(4)
    tcs = TCS(4, 3).double()
    with torch.no_grad():
        for p in tcs.parameters():
            p.normal_(0, 0.5)
    f = torch.randn(1, 3, 3, 4, dtype=D)
    with torch.no_grad():
        got = [o[0].numpy() for o in tcs(f)]
    for g, w in zip(got, O.tcs_oracle(f[0].numpy(), _tcs_params(tcs))):
        np.testing.assert_allclose(g, w, atol=1e-6)


@pytest.mark.parametrize("i", range(3))
def test_tcs_gradient_isolation(i):
    torch.manual_seed(1)
    tcs = TCS(4, 3).double()
    with torch.no_grad():
        for p in tcs.parameters():
            p.normal_()
    f = torch.randn(1, 3, 3, 4, dtype=D)
    loss = (tcs(f)[i] ** 2).sum()
    loss.backward()
    for j in range(3):
        grads = [tcs.embed[j].weight.grad, tcs.embed[j].bias.grad, tcs.weight[j].weight.grad, tcs.weight[j].bias.grad]
        if j == i:
            assert any(g is not None and g.abs().sum() > 0 for g in grads)
        else:
            assert all(g is None or torch.count_nonzero(g) == 0 for g in grads)


def test_cross_attention_trivial_cases():
    block = QueryCrossAttention(4, 1, 1, 2).double()
    with torch.no_grad():
        block.attn.sampling_offsets.weight.zero_()
        block.attn.sampling_offsets.bias.zero_()
    q, f = torch.randn(1, 3, 4, dtype=D), torch.randn(1, 3, 3, 4, dtype=D)
    pos = torch.tensor([[[0, 0], [2, 1], [1, 2]]])
    with torch.no_grad():
        got = block(_qs(q, pos), f).embeddings
        own = f[0, pos[0, :, 0], pos[0, :, 1]].unsqueeze(0)
        mid = q + block.attn.output_proj(block.attn.value_proj(own))
        torch.testing.assert_close(got, mid + block.ffn(mid))
        block.attn.value_proj.weight.zero_()
        block.attn.value_proj.bias.zero_()
        block.attn.output_proj.bias.zero_()
        out = block(_qs(q, pos), f)
    torch.testing.assert_close(out.embeddings, q + block.ffn(q))
    assert torch.equal(out.positions, pos)


def test_cross_attention_rejects_outside_position():
    block = QueryCrossAttention(4, 1, 1).double()
    with pytest.raises(IndexError):
        block(_qs(torch.zeros(1, 1, 4, dtype=D), torch.tensor([[[3, 0]]])), torch.zeros(1, 3, 3, 4, dtype=D))


def test_index_update_examples():
    q = torch.randn(1, 2, 3, dtype=D)
    pos = torch.tensor([[[0, 0], [2, 1]]])
    assert torch.equal(index_update_queries(_qs(q, pos), torch.zeros(1, 3, 3, 3, dtype=D)).embeddings, q)
    f = torch.randn(1, 3, 3, 3, dtype=D)
    out = index_update_queries(_qs(q, pos), f)
    assert torch.equal(out.embeddings[0, 0], q[0, 0] + f[0, 0, 0])
    with pytest.raises(IndexError):
        index_update_queries(_qs(q, torch.tensor([[[0, 0], [0, -1]]])), f)


def test_index_update_uses_column_for_voxels():
    q = torch.randn(1, 2, 3, dtype=D)
    pos = torch.tensor([[[1, 1, 0], [1, 1, 3]]])
    f = torch.randn(1, 2, 2, 3, dtype=D)
    out = index_update_queries(_qs(q, pos, "occ-definite"), f).embeddings
    torch.testing.assert_close(out - q, f[0, 1, 1].expand(1, 2, 3))


@pytest.mark.parametrize("variant", ["transformer", "mamba"])
def test_zero_layers_is_identity(variant):
    dec = Decoder(8, 0, variant).double()
    q = {"det": _qs(torch.randn(1, 3, 8, dtype=D), torch.zeros(1, 3, 2, dtype=torch.long))}
    f = torch.randn(1, 4, 4, 8, dtype=D)
    out, f_out, grids = dec(q, f)
    assert out["det"] is q["det"] and f_out is f and all(g is f for g in grids)


def test_transformer_layer_residual_identity():
    dec = Decoder(8, 1, "transformer", ("det", "seg")).double()
    layer = dec.layers[0]
    with torch.no_grad():
        for mod in [layer.dsa, layer.ffn] + [c for c in layer.cross.values()]:
            for name, p in mod.named_parameters():
                if "sampling_offsets" not in name:
                    p.zero_()
    q = {t: _qs(torch.randn(1, 3, 8, dtype=D), torch.tensor([[[0, 0], [1, 2], [3, 3]]]), t) for t in ("det", "seg")}
    f = torch.randn(1, 4, 4, 8, dtype=D)
    with torch.no_grad():
        out, f_out, _ = dec(q, f)
    assert torch.equal(f_out, f)
    for t in q:
        assert torch.equal(out[t].embeddings, q[t].embeddings)


def test_unknown_variant():
    with pytest.raises(ConfigError):
        Decoder(8, 1, "rnn")


@pytest.mark.parametrize("dim,layers", [(8, 1), (32, 2), (64, 2)])
def test_mamba_has_fewer_parameters(dim, layers):
    assert count_parameters(Decoder(dim, layers, "mamba")) < count_parameters(Decoder(dim, layers, "transformer"))


def test_oracle_group():
    for r in oracle_decoder():
        assert r.passed, r.summary()


@pytest.mark.parametrize("check", [grad_deformable_self, grad_cross_attention, grad_vss2d, grad_tcs,
                                   grad_index_update])
def test_gradients(check):
    report = check()
    assert report.passed, report.summary()
