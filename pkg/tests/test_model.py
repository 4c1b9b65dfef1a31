import numpy as np
import pytest

from denseuv.errors import StaleTapeError
from denseuv.losses import uv_l1
from denseuv.model import NetConfig, ToyNet
from denseuv.nn import Adam, AvgPool2, Conv2d, ReLU, Sequential, Upsample2

from helpers import numeric_grad, rel_err


def randomize(params, rng, scale=0.5):
    for p in params:
        p.data[...] = rng.normal(0, scale, p.data.shape)


def tiny_net(mode="denseseg", seed=0):
    cfg = NetConfig(n_structures=2, channels=(2, 3, 4), head_channels=2, mode=mode,
                    n_landmarks=3 if mode == "heatmap" else 0, seed=seed)
    return ToyNet(cfg)


def test_zero_heads_initial_output():
    net = ToyNet(NetConfig())
    x = np.random.default_rng(0).random((2, 1, 64, 64))
    seg, uv = net.forward(x)
    assert seg.shape == (2, 1, 64, 64) and uv.shape == (2, 1, 2, 64, 64)
    assert np.all(seg == 0.5) and np.all(uv == 0)
    assert 15_000 <= net.n_params <= 40_000


def test_shape_contract_multi_structure():
    net = ToyNet(NetConfig(n_structures=3))
    seg, uv = net.forward(np.zeros((1, 1, 16, 12)))
    assert seg.shape == (1, 3, 16, 12) and uv.shape == (1, 3, 2, 16, 12)
    with pytest.raises(ValueError):
        net.forward(np.zeros((1, 1, 10, 12)))
    with pytest.raises(ValueError):
        net.forward(np.zeros((1, 2, 16, 12)))


def test_output_ranges_and_batch_permutation():
    rng = np.random.default_rng(3)
    net = tiny_net()
    # moderate weights keep the sigmoid away from float saturation at 1.0
    randomize(net.params(), rng, 0.5)
    x = rng.random((4, 1, 8, 8))
    seg, uv = net.forward(x)
    assert np.all((seg > 0) & (seg < 1)) and np.all(np.abs(uv) <= 1)
    perm = np.array([2, 0, 3, 1])
    seg2, uv2 = net.forward(x[perm])
    np.testing.assert_array_equal(seg2, seg[perm])
    np.testing.assert_array_equal(uv2, uv[perm])
    seg3, _ = net.forward(x)
    np.testing.assert_array_equal(seg3, seg)


def test_stale_tape():
    net = tiny_net()
    with pytest.raises(StaleTapeError):
        net.backward(np.zeros((1, 2, 4, 4)), np.zeros((1, 2, 2, 4, 4)))
    net.forward(np.zeros((1, 1, 4, 4)))
    net.backward(None, None)
    with pytest.raises(StaleTapeError):
        net.backward(None, None)


def test_zero_upstream_zero_grads():
    rng = np.random.default_rng(1)
    net = tiny_net()
    randomize(net.params(), rng)
    net.zero_grad()
    net.forward(rng.random((2, 1, 8, 8)))
    net.backward(None, None)
    assert all(np.all(p.grad == 0) for p in net.params())


def _check_net(net, rng, x):
    randomize(net.params(), rng)
    if net.config.mode == "heatmap":
        a = rng.normal(size=net.forward(x).shape)

        def loss():
            return float((a * net.forward(x)).sum())

        loss()
        net.zero_grad()
        net.backward(d_heatmap=a)
    else:
        seg, uv = net.forward(x)
        a, b = rng.normal(size=seg.shape), rng.normal(size=uv.shape)

        def loss():
            s, u = net.forward(x)
            return float((a * s).sum() + (b * u).sum())

        loss()
        net.zero_grad()
        net.backward(a, b)
    worst = 0.0
    for p in net.params():
        analytic = p.grad.copy()
        num = numeric_grad(loss, p.data)
        worst = max(worst, rel_err(analytic, num).max())
    net._tape = None
    return worst


@pytest.mark.parametrize("seed", range(3))
def test_full_network_gradcheck(seed):
    rng = np.random.default_rng(seed)
    assert _check_net(tiny_net(seed=seed), rng, rng.random((2, 1, 4, 4))) <= 1e-4


def test_heatmap_network_gradcheck():
    rng = np.random.default_rng(7)
    assert _check_net(tiny_net("heatmap"), rng, rng.random((2, 1, 4, 8))) <= 1e-4


def test_two_conv_gradcheck_including_input():
    rng = np.random.default_rng(11)
    net = Sequential(Conv2d("a", 2, 3, 3, rng), ReLU(), Conv2d("b", 3, 2, 3, rng))
    randomize(net.params(), rng)
    x = rng.normal(size=(2, 2, 4, 4))  # (C, N, H, W)
    a = rng.normal(size=(2, 2, 4, 4))

    def loss():
        return float((a * net.forward(x)).sum())

    loss()
    for p in net.params():
        p.grad[...] = 0
    gx = net.backward(a)
    for p in net.params():
        assert rel_err(p.grad, numeric_grad(loss, p.data)).max() <= 1e-4
    assert rel_err(gx, numeric_grad(loss, x)).max() <= 1e-4


def test_pool_and_upsample_adjoint():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 1, 8, 6))
    for layer in (AvgPool2(), Upsample2()):
        y = layer.forward(x)
        g = rng.normal(size=y.shape)
        gx = layer.backward(g)
        assert abs((g * y).sum() - (gx * x).sum()) < 1e-10


def test_masked_uv_gradient_zero_outside():
    rng = np.random.default_rng(2)
    pred = rng.uniform(-1, 1, (1, 1, 2, 8, 8))
    gt = rng.uniform(-1, 1, (1, 1, 2, 8, 8))
    valid = rng.random((1, 1, 8, 8)) < 0.5
    _, g = uv_l1(pred, gt, valid)
    assert np.all(g[:, :, :, ~valid[0, 0]] == 0)


def test_infer_masks_uv():
    rng = np.random.default_rng(4)
    net = tiny_net()
    randomize(net.params(), rng)
    seg, uv, masks = net.infer(rng.random((1, 1, 8, 8)))
    assert np.all(np.isnan(uv[:, :, 0][~masks])) and np.all(np.isfinite(uv[:, :, 0][masks]))


def test_flat_roundtrip_and_adam_moves():
    net = tiny_net()
    flat = net.get_flat()
    net.set_flat(flat * 2)
    np.testing.assert_array_equal(net.get_flat(), flat * 2)
    with pytest.raises(ValueError):
        net.set_flat(flat[:-1])
    p = net.params()[0]
    opt = Adam([p], lr=0.1)
    p.grad[...] = 1.0
    before = p.data.copy()
    opt.step()
    np.testing.assert_allclose(p.data, before - 0.1, atol=1e-6)
