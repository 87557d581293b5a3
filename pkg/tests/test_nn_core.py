import numpy as np
import pytest
import torch
from numpy.lib.stride_tricks import sliding_window_view

from conftest import fd_check
from pwave.nn import (
    AdamW, AdamWHyper, Conv, ConfigError, ConvLSTMCell, ConvLSTMState, ConvSpec, DepthConvBlock,
    MaskedConv, ResidualBlock, WeightFileError, causal_mask, conv2d, conv_lstm_step, dumps_weights,
    leaky_relu, loads_weights, round_half_away, ste_round,
)
from pwave.nn.optim import adamw_step, OptimizerState


def np_conv2d(x, w, b=None, pad=None):
    """Reference cross-correlation with zero padding."""
    k = w.shape[-1]
    pad = k // 2 if pad is None else pad
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # B, C, H, W, k, k
    out = np.einsum("bchwij,ocij->bohw", win, w)
    if b is not None:
        out = out + b[None, :, None, None]
    return out


def sigmoid(x):
    return 1 / (1 + np.exp(-x))


def test_conv_matches_reference(rng):
    x = rng.normal(size=(2, 3, 7, 9))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    y = conv2d(torch.tensor(x), ConvSpec(3, 4, 3), torch.tensor(w), torch.tensor(b))
    np.testing.assert_allclose(y.numpy(), np_conv2d(x, w, b), rtol=1e-12, atol=1e-12)


def test_conv_spec_validation():
    with pytest.raises(ConfigError):
        ConvSpec(3, 4, kernel_size=4)
    with pytest.raises(ConfigError):
        ConvSpec(3, 4, groups=2)
    spec = ConvSpec(4, 8, 3)
    with pytest.raises(ConfigError):
        conv2d(torch.zeros(1, 3, 5, 5), spec, torch.zeros(spec.weight_shape))
    with pytest.raises(ConfigError):
        conv2d(torch.zeros(1, 4, 5, 5), spec, torch.zeros(8, 4, 5, 5))


def test_same_padding_keeps_size():
    for k in (1, 3, 5):
        c = Conv(2, 3, k).double()
        assert c(torch.zeros(1, 2, 6, 10, dtype=torch.float64)).shape == (1, 3, 6, 10)


def test_round_half_away():
    x = torch.tensor([-2.5, -1.5, -0.5, -0.49, 0.0, 0.49, 0.5, 1.5, 2.5, 3.4 * 2], dtype=torch.float64)
    expect = [-3, -2, -1, 0, 0, 0, 1, 2, 3, 7]
    assert round_half_away(x).tolist() == expect


def test_round_half_away_large_values():
    x = torch.tensor([2.0 ** 52 + 1, -(2.0 ** 52) - 1, 1e300], dtype=torch.float64)
    assert torch.equal(round_half_away(x), x)


def test_ste_identity_gradient():
    x = torch.tensor([0.2, 1.7, -3.5], dtype=torch.float64, requires_grad=True)
    y = ste_round(x * 2.0)
    y.sum().backward()
    assert y.tolist() == [0.0, 3.0, -7.0]
    assert x.grad.tolist() == [2.0, 2.0, 2.0]


def test_leaky_relu():
    x = torch.tensor([-2.0, 0.0, 3.0])
    assert leaky_relu(x).tolist() == pytest.approx([-0.02, 0.0, 3.0])


def test_causal_mask():
    m = causal_mask(5)
    expect = np.zeros((5, 5))
    expect[:2] = 1
    expect[2, :2] = 1
    assert np.array_equal(m.numpy(), expect)


def test_masked_conv_is_causal(rng):
    mc = MaskedConv(1, 4, 5).double()
    with torch.no_grad():
        mc.weight.normal_()
    x = torch.tensor(rng.normal(size=(1, 1, 8, 8)))
    base = mc(x)
    x2 = x.clone()
    x2[0, 0, 4, 4] += 10.0  # affects only positions after (4, 4) in raster order
    diff = (mc(x2) - base).abs().sum(1)[0].detach().numpy() > 0
    rows, cols = np.nonzero(diff)
    assert all((r, c) > (4, 4) for r, c in zip(rows, cols))


def test_conv_lstm_matches_reference(rng):
    cin, hc = 2, 3
    x = rng.normal(size=(1, cin, 5, 6))
    h = rng.normal(size=(1, hc, 5, 6))
    c = rng.normal(size=(1, hc, 5, 6))
    w = rng.normal(size=(4 * hc, cin + hc, 3, 3)) * 0.3
    b = rng.normal(size=4 * hc)
    gates = np_conv2d(np.concatenate([x, h], 1), w, b)
    i, f, o, g = np.split(gates, 4, axis=1)
    c_ref = sigmoid(f) * c + sigmoid(i) * np.tanh(g)
    h_ref = sigmoid(o) * np.tanh(c_ref)
    out, st = conv_lstm_step(torch.tensor(x), ConvLSTMState(torch.tensor(h), torch.tensor(c)),
                             torch.tensor(w), torch.tensor(b))
    np.testing.assert_allclose(st.cell.numpy(), c_ref, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(out.numpy(), h_ref, rtol=1e-12, atol=1e-12)


def test_conv_lstm_zero_state_and_size_check():
    cell = ConvLSTMCell(2, 3).double()
    st = ConvLSTMState.zeros(1, 3, 4, 4)
    h, st2 = cell(torch.zeros(1, 2, 4, 4, dtype=torch.float64), st)
    assert h.shape == (1, 3, 4, 4) and st2.size == (4, 4)
    with pytest.raises(ConfigError):
        cell(torch.zeros(1, 2, 8, 8, dtype=torch.float64), st)


def test_blocks_shapes():
    x = torch.zeros(2, 8, 6, 6, dtype=torch.float64)
    assert ResidualBlock(8).double()(x).shape == x.shape
    assert DepthConvBlock(8).double()(x).shape == x.shape


@pytest.mark.parametrize("make", [
    lambda: Conv(2, 3, 3),
    lambda: Conv(2, 2, 3, groups=2),
    lambda: Conv(1, 2, 3, padding_mode="replicate"),
    lambda: MaskedConv(1, 2, 5),
    lambda: ResidualBlock(3),
    lambda: DepthConvBlock(4),
])
def test_module_gradients_finite_difference(make, rng):
    m = make().double()
    with torch.no_grad():
        for p in m.parameters():
            p.normal_()
    cin = m.spec.in_channels if hasattr(m, "spec") else (3 if isinstance(m, ResidualBlock) else 4)
    x = torch.tensor(rng.normal(size=(2, cin, 5, 6)), requires_grad=True)
    proj = torch.tensor(rng.normal(size=m(x).shape))
    fd_check(lambda: (m(x) * proj).sum(), [x] + list(m.parameters()))


def test_conv_lstm_gradients_finite_difference(rng):
    cell = ConvLSTMCell(2, 3).double()
    with torch.no_grad():
        for p in cell.parameters():
            p.normal_(std=0.5)
    x = torch.tensor(rng.normal(size=(1, 2, 4, 5)), requires_grad=True)
    h0 = torch.tensor(rng.normal(size=(1, 3, 4, 5)), requires_grad=True)
    c0 = torch.tensor(rng.normal(size=(1, 3, 4, 5)), requires_grad=True)
    ph = torch.tensor(rng.normal(size=(1, 3, 4, 5)))
    pc = torch.tensor(rng.normal(size=(1, 3, 4, 5)))

    def f():
        h, st = cell(x, ConvLSTMState(h0, c0))
        return (h * ph).sum() + (st.cell * pc).sum()

    fd_check(f, [x, h0, c0, *cell.parameters()])


def np_adamw(p, grads, lr, b1, b2, eps, wd):
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, 1):
        p = p * (1 - lr * wd)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p = p - lr * mhat / (np.sqrt(vhat) + eps)
    return p


def test_adamw_matches_reference(rng):
    p0 = rng.normal(size=(3, 4))
    grads = [rng.normal(size=(3, 4)) for _ in range(5)]
    hp = AdamWHyper(lr=1e-2, weight_decay=0.1)
    p = torch.tensor(p0)
    st = OptimizerState()
    for g in grads:
        adamw_step({"w": p}, {"w": torch.tensor(g)}, st, hp)
    ref = np_adamw(p0, grads, 1e-2, hp.beta1, hp.beta2, hp.eps, 0.1)
    np.testing.assert_allclose(p.numpy(), ref, rtol=1e-12, atol=1e-14)


def test_adamw_skips_nonfinite(caplog):
    p = torch.ones(3, dtype=torch.float64)
    st = OptimizerState()
    skipped = adamw_step({"w": p}, {"w": torch.tensor([1.0, float("nan"), 0.0], dtype=torch.float64)},
                         st, AdamWHyper(lr=0.1))
    assert skipped == ["w"]
    assert p.tolist() == [1.0, 1.0, 1.0]


def test_adamw_state_round_trip():
    lin = Conv(1, 2, 1).double()
    opt = AdamW(lin.named_parameters(), AdamWHyper(lr=0.01))
    lin(torch.ones(1, 1, 2, 2, dtype=torch.float64)).sum().backward()
    opt.step()
    opt2 = AdamW(lin.named_parameters(), AdamWHyper(lr=0.01))
    opt2.load_state_tensors(opt.state_tensors(), opt.state.steps)
    for k in opt.state.exp_avg:
        assert torch.equal(opt.state.exp_avg[k], opt2.state.exp_avg[k])
    assert opt2.state.steps == opt.state.steps


def test_weights_round_trip(rng):
    tensors = {"a.weight": torch.tensor(rng.normal(size=(2, 3, 3, 3))), "b": torch.tensor(1.5, dtype=torch.float64),
               "c": torch.zeros(0, dtype=torch.float64)}
    buf = dumps_weights(tensors, {"k": [1, 2]})
    back, meta = loads_weights(buf)
    assert meta == {"k": [1, 2]}
    assert set(back) == set(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape
        assert torch.equal(back[k], tensors[k])


def test_weights_corruption_detected(rng):
    buf = dumps_weights({"w": torch.ones(4, dtype=torch.float64)})
    with pytest.raises(WeightFileError):
        loads_weights(b"XXXX" + buf[4:])
    with pytest.raises(WeightFileError):
        loads_weights(buf[:-3])
