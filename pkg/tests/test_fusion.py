import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from mtbev.fusion import MAFI
from mtbev.verify import oracles as O
from mtbev.verify.checks import grad_mafi


def _mafi(c=4, seed=0):
    torch.manual_seed(seed)
    return MAFI(c).double()


def _zero_gates(m):
    with torch.no_grad():
        for g in (m.gate_lidar, m.gate_cam):
            g.weight.zero_()
            g.bias.zero_()


def test_zero_inputs_zero_bias_give_zero():
    m = _mafi()
    with torch.no_grad():
        m.fuse_conv.bias.zero_()
        out = m.init_fuse(torch.zeros(1, 3, 3, 4, dtype=torch.float64), torch.zeros(1, 3, 3, 4, dtype=torch.float64))
    assert out.abs().max() == 0


def test_identity_kernel_passes_lidar():
    m = _mafi()
    with torch.no_grad():
        m.fuse_conv.weight.zero_()
        m.fuse_conv.bias.zero_()
        for c in range(4):
            m.fuse_conv.weight[c, c, 1, 1] = 1.0
    fl, fc = torch.randn(1, 5, 4, 4, dtype=torch.float64), torch.randn(1, 5, 4, 4, dtype=torch.float64)
    with torch.no_grad():
        assert torch.equal(m.init_fuse(fl, fc), fl)


def test_init_fuse_matches_naive_conv():
    m = _mafi(2, seed=3)
    fl, fc = torch.randn(1, 4, 4, 2, dtype=torch.float64), torch.randn(1, 4, 4, 2, dtype=torch.float64)
    with torch.no_grad():
        got = m.init_fuse(fl, fc)[0].numpy()
    want = O.naive_conv3x3(np.concatenate([fl[0].numpy(), fc[0].numpy()], -1),
                           m.fuse_conv.weight.detach().numpy(), m.fuse_conv.bias.detach().numpy())
    np.testing.assert_allclose(got, want, atol=1e-6)


def test_shape_mismatch():
    m = _mafi()
    with pytest.raises(ValueError):
        m.init_fuse(torch.zeros(1, 3, 3, 4), torch.zeros(1, 3, 2, 4))


def test_gate_examples():
    m = _mafi(2)
    _zero_gates(m)
    f = torch.randn(1, 2, 2, 2, dtype=torch.float64)
    assert torch.all(MAFI.gate_weights(f, m.gate_lidar) == 0.5)
    with torch.no_grad():
        m.gate_lidar.bias.fill_(20.0)
    assert torch.all(MAFI.gate_weights(f, m.gate_lidar) >= 1 - 1e-8)
    with torch.no_grad():
        m.gate_cam.weight.copy_(torch.tensor([[math.log(3), 0.0], [0.0, math.log(3)]]))
    g = MAFI.gate_weights(torch.tensor([[[[1.0, -1.0]]]], dtype=torch.float64), m.gate_cam)
    np.testing.assert_allclose(g.detach().numpy().ravel(), [0.75, 0.25], atol=1e-12)


def test_zero_gates_pass_init_and_saturated_gates_double():
    m = _mafi()
    _zero_gates(m)
    fl, fc = torch.randn(1, 3, 3, 4, dtype=torch.float64), torch.randn(1, 3, 3, 4, dtype=torch.float64)
    with torch.no_grad():
        f_init = m.init_fuse(fl, fc)
        assert torch.allclose(m(fl, fc), f_init, atol=0, rtol=0)
        m.gate_lidar.bias.fill_(50.0)
        m.gate_cam.bias.fill_(50.0)
        assert torch.allclose(m(fl, fc), 2 * f_init)


def test_matches_elementwise_oracle():
    m = _mafi(4, seed=5)
    fl, fc = torch.randn(1, 3, 3, 4, dtype=torch.float64), torch.randn(1, 3, 3, 4, dtype=torch.float64)
    with torch.no_grad():
        got = m(fl, fc)[0].numpy()
    p = [t.detach().numpy() for t in (m.fuse_conv.weight, m.fuse_conv.bias, m.gate_lidar.weight,
                                      m.gate_lidar.bias, m.gate_cam.weight, m.gate_cam.bias)]
    np.testing.assert_allclose(got, O.mafi_oracle(fl[0].numpy(), fc[0].numpy(), *p), atol=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_algebraic_identity_and_gate_range(seed):
    g = torch.Generator().manual_seed(seed)
    m = _mafi(3, seed=seed % 1000)
    fl = torch.randn(1, 3, 4, 3, generator=g, dtype=torch.float64) * 3
    fc = torch.randn(1, 3, 4, 3, generator=g, dtype=torch.float64) * 3
    with torch.no_grad():
        gl, gc = MAFI.gate_weights(fl, m.gate_lidar), MAFI.gate_weights(fc, m.gate_cam)
        assert torch.all((gl > 0) & (gl < 1)) and torch.all((gc > 0) & (gc < 1))
        assert torch.equal(m(fl, fc), gl * m.init_fuse(fl, fc) + gc * m.init_fuse(fl, fc))
        torch.testing.assert_close(m(fl, fc), (gl + gc) * m.init_fuse(fl, fc), rtol=1e-15, atol=1e-15)


def test_cam_perturbation_does_not_reach_lidar_gate():
    m = _mafi()
    fl = torch.randn(1, 3, 3, 4, dtype=torch.float64)
    fc = torch.randn(1, 3, 3, 4, dtype=torch.float64, requires_grad=True)
    gl = MAFI.gate_weights(fl, m.gate_lidar)
    gc = MAFI.gate_weights(fc, m.gate_cam)
    (grad,) = torch.autograd.grad(gl.sum() + 0 * gc.sum(), fc)
    assert torch.count_nonzero(grad) == 0


def test_non_finite_input_reports_location():
    m = _mafi()
    fl = torch.zeros(1, 3, 3, 4, dtype=torch.float64)
    fl[0, 2, 1, 3] = float("nan")
    with pytest.raises(FloatingPointError, match=r"\(0, 2, 1, 3\)"):
        m(fl, torch.zeros_like(fl))


def test_ungated_is_plain_conv():
    torch.manual_seed(0)
    m = MAFI(4, gated=False).double()
    fl, fc = torch.randn(1, 3, 3, 4, dtype=torch.float64), torch.randn(1, 3, 3, 4, dtype=torch.float64)
    assert torch.equal(m(fl, fc), m.init_fuse(fl, fc))


def test_gradients():
    report = grad_mafi()
    assert report.passed, report.summary()
