import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from noduleseg.dbresnet import (
    Checkpoint,
    CheckpointError,
    NetworkConfig,
    ResBlock,
    build,
    central_pool,
    cip,
    load_checkpoint,
    param_count,
    res_block,
    save_checkpoint,
    stage_shapes,
)

REDUCED = NetworkConfig(channel_divisor=4)


@pytest.fixture(scope="module")
def full_net():
    return build(NetworkConfig())


@pytest.fixture(scope="module")
def small_net():
    return build(REDUCED)


def patches(n, seed=0, dtype=torch.float32, scales=3):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 3, 35, 35, generator=g, dtype=dtype), torch.rand(n, scales, 35, 35, generator=g, dtype=dtype)


# -- naive oracles -------------------------------------------------------------


def conv2d_oracle(x, w):
    """Direct per-pixel zero-padded convolution; x (C, H, W), w (O, C, k, k)."""
    c, h, wd = x.shape
    o, _, k, _ = w.shape
    p = k // 2
    xp = np.zeros((c, h + 2 * p, wd + 2 * p))
    xp[:, p : p + h, p : p + wd] = x
    out = np.zeros((o, h, wd))
    for oc in range(o):
        for i in range(h):
            for j in range(wd):
                acc = 0.0
                for ic in range(c):
                    for di in range(k):
                        for dj in range(k):
                            acc += w[oc, ic, di, dj] * xp[ic, i + di, j + dj]
                out[oc, i, j] = acc
    return out


def bn_oracle(x, bn):
    mean = bn.running_mean.detach().numpy()[:, None, None]
    var = bn.running_var.detach().numpy()[:, None, None]
    g = bn.weight.detach().numpy()[:, None, None]
    b = bn.bias.detach().numpy()[:, None, None]
    return (x - mean) / np.sqrt(var + bn.eps) * g + b


def prelu_oracle(x, act):
    a = act.weight.detach().numpy()[:, None, None]
    return np.where(x >= 0, x, a * x)


def maxpool_oracle(x):
    h, w = x.shape
    return np.array([[max(x[2 * i + a, 2 * j + b] for a in (0, 1) for b in (0, 1)) for j in range(w // 2)] for i in range(h // 2)])


def randomize_bn(module, g):
    for m in module.modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            m.running_mean.copy_(torch.randn(m.num_features, generator=g, dtype=m.running_mean.dtype) * 0.1)
            m.running_var.copy_(torch.rand(m.num_features, generator=g, dtype=m.running_var.dtype) + 0.5)
            m.weight.data.copy_(torch.rand(m.num_features, generator=g, dtype=m.weight.dtype) + 0.5)
            m.bias.data.copy_(torch.randn(m.num_features, generator=g, dtype=m.bias.dtype) * 0.1)
        if isinstance(m, torch.nn.PReLU):
            m.weight.data.uniform_(0.05, 0.5, generator=g)


# -- building blocks ---------------------------------------------------------------


@pytest.mark.parametrize("c_in", [4, 5])
def test_res_block_matches_naive_convolution(c_in):
    torch.manual_seed(0)
    g = torch.Generator().manual_seed(1)
    block = ResBlock(c_in, (3, 2, 4)).double().eval()
    with torch.no_grad():
        randomize_bn(block, g)
    x = torch.randn(1, c_in, 6, 6, generator=g, dtype=torch.float64)
    with torch.no_grad():
        got = res_block(x, block)[0].numpy()
    xn = x[0].numpy()
    r = block.residual
    h = prelu_oracle(bn_oracle(conv2d_oracle(xn, r[0][0].weight.detach().numpy()), r[0][1]), r[0][2])
    h = prelu_oracle(bn_oracle(conv2d_oracle(h, r[1][0].weight.detach().numpy()), r[1][1]), r[1][2])
    h = bn_oracle(conv2d_oracle(h, r[2].weight.detach().numpy()), r[3])
    if block.project:
        sc = bn_oracle(conv2d_oracle(xn, block.shortcut[0].weight.detach().numpy()), block.shortcut[1])
    else:
        sc = xn
    expected = prelu_oracle(sc + h, block.act)
    assert np.allclose(got, expected, atol=1e-6)


def test_zero_residual_gives_prelu_of_input():
    block = ResBlock(8, (2, 2, 8)).eval()
    assert not block.project
    with torch.no_grad():
        for m in block.residual.modules():
            if isinstance(m, torch.nn.Conv2d):
                m.weight.zero_()
        x = torch.randn(2, 8, 5, 5)
        assert torch.allclose(block(x), block.act(x))


@pytest.mark.parametrize("size", [3, 8, 17])
def test_res_block_preserves_spatial_size(size):
    block = ResBlock(4, (2, 2, 6))
    assert block(torch.randn(1, 4, size, size)).shape == (1, 6, size, size)


def test_central_pool_sizes_and_oracle():
    assert central_pool(torch.zeros(1, 2, 35, 35)).shape[-1] == 17
    assert central_pool(torch.zeros(1, 2, 17, 17)).shape[-1] == 8
    c = central_pool(torch.full((1, 1, 9, 9), 3.5))
    assert torch.all(c == 3.5)
    x = np.random.default_rng(3).random((6, 6))
    got = central_pool(torch.as_tensor(x)[None, None])[0, 0].numpy()
    assert np.array_equal(got, maxpool_oracle(x))


# -- central intensity pooling ------------------------------------------------------


def test_cip_examples():
    x = np.zeros((1, 5, 5))
    x[0, 2, 2] = 7
    assert cip(x, (1,)).tolist() == [7.0]
    y = np.zeros((1, 5, 5))
    y[0, 1:4, 1:4] = 2.0  # central 3x3 sums to 18
    assert cip(y, (3,))[0] == pytest.approx(2.0)
    assert np.allclose(cip(np.full((4, 7, 7), 1.25)), 1.25)
    assert cip(np.zeros((3, 5, 5))).shape == (6,)


def test_cip_rejects_even_maps():
    with pytest.raises(ValueError):
        cip(np.zeros((1, 4, 4)))
    with pytest.raises(ValueError):
        cip(np.zeros((1, 5, 5)), (2,))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**16), st.floats(-3, 3), st.floats(-3, 3), st.sampled_from([3, 5, 9]))
def test_cip_is_linear(seed, a, b, size):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((2, 2, size, size))
    kernels = (1, 3)
    assert np.allclose(cip(a * x + b * y, kernels), a * cip(x, kernels) + b * cip(y, kernels), atol=1e-9)


def test_cip_gradient_is_window_uniform():
    x = torch.zeros(1, 2, 7, 7, dtype=torch.float64, requires_grad=True)
    cip(x, (1, 3)).sum().backward()
    g = x.grad[0, 0].numpy()
    expected = np.zeros((7, 7))
    expected[2:5, 2:5] = 1 / 9
    expected[3, 3] += 1
    assert np.allclose(g, expected)


def test_cip_gradcheck_against_finite_differences():
    x = torch.randn(2, 3, 7, 7, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda t: cip(t, (1, 3, 5)), (x,), eps=1e-6, atol=0, rtol=1e-4)


# -- network ------------------------------------------------------------------------


def test_standard_profile_stage_shapes(full_net):
    shapes = stage_shapes(full_net)
    for branch in ("multiview", "multiscale"):
        assert shapes[branch] == [(36, 35, 35), (512, 17, 17), (1024, 8, 8)]


def test_depth_variants():
    assert NetworkConfig(depth=83).repeats == (4, 23)
    assert NetworkConfig(depth=134).repeats == (8, 36)
    with pytest.raises(ValueError):
        NetworkConfig(depth=50)


def test_reduced_profile_divides_channels(small_net):
    assert REDUCED.conv_channels == 9 and REDUCED.res1 == (32, 32, 128) and REDUCED.res2 == (64, 64, 256)
    shapes = stage_shapes(small_net)["multiview"]
    assert shapes == [(9, 35, 35), (128, 17, 17), (256, 8, 8)]


def test_reduced_count_below_full(full_net, small_net):
    assert param_count(small_net) < param_count(full_net)


@pytest.mark.parametrize(
    "placement, dim",
    [(0, 2048), (1, 2060), (2, 2060 + 2 * 2 * 36), (3, 2060 + 2 * 2 * (36 + 512)), (4, 2060 + 2 * 2 * (36 + 512 + 1024))],
)
def test_head_input_dimension(placement, dim):
    net = build(NetworkConfig(cip_placement=placement))
    assert net.feature_dim == dim == net.head.in_features


@pytest.mark.parametrize("placement", [0, 1, 2, 3, 4])
def test_reported_dimension_matches_features(placement):
    net = build(NetworkConfig(cip_placement=placement, channel_divisor=8)).eval()
    mv, ms = patches(2)
    with torch.no_grad():
        feats = net.features(mv, ms)
    assert feats.shape == (2, net.feature_dim)
    assert net.head.in_features == net.feature_dim


def test_standard_head_dimensions(full_net):
    assert full_net.feature_dim == 2060


def test_softmax_outputs(small_net):
    small_net.eval()
    mv, ms = patches(5)
    with torch.no_grad():
        p = small_net(mv * 100 - 50, ms)
    assert torch.all(p >= 0)
    assert torch.allclose(p.sum(dim=1), torch.ones(5), atol=1e-6)


def test_identical_patches_give_identical_outputs(small_net):
    small_net.eval()
    mv, ms = patches(1)
    with torch.no_grad():
        p = small_net(mv.repeat(4, 1, 1, 1), ms.repeat(4, 1, 1, 1))
    assert torch.all(p == p[0])


def test_zero_head_gives_even_odds():
    net = build(NetworkConfig(channel_divisor=8)).eval()
    with torch.no_grad():
        net.head.weight.zero_()
        net.head.bias.zero_()
        p = net(*patches(3))
    assert torch.allclose(p, torch.full((3, 2), 0.5))


def test_shape_mismatch_is_rejected(small_net):
    mv, ms = patches(1)
    with pytest.raises(ValueError):
        small_net(mv[:, :, :33, :33], ms)
    with pytest.raises(ValueError):
        small_net(mv, ms[:, :2])


def test_branches_are_independent():
    net = build(NetworkConfig(channel_divisor=8)).eval()
    mv, ms = patches(2)
    with torch.no_grad():
        before = net.multiview(mv).clone()
        for p in net.multiscale.parameters():
            p.add_(torch.randn_like(p))
        after = net.multiview(mv)
    assert torch.equal(before, after)
    mv_names = {n for n, _ in net.multiview.named_parameters()}
    assert all(p1.data_ptr() != p2.data_ptr() for p1, p2 in zip(net.multiview.parameters(), net.multiscale.parameters()))
    assert mv_names == {n for n, _ in net.multiscale.named_parameters()}


def test_build_is_seeded():
    a = build(NetworkConfig(channel_divisor=8, seed=3))
    b = build(NetworkConfig(channel_divisor=8, seed=3))
    c = build(NetworkConfig(channel_divisor=8, seed=4))
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert not all(torch.equal(sa[k], sc[k]) for k in sa)


def test_predict_returns_nodule_probability(small_net):
    mv, ms = patches(3)
    got = small_net.predict(mv.numpy(), ms.numpy(), batch_size=2)
    with torch.no_grad():
        small_net.eval()
        expected = small_net(mv, ms)[:, 1].numpy()
    assert np.allclose(got, expected, atol=1e-6)


def test_whole_network_gradient_matches_finite_differences():
    torch.manual_seed(0)
    net = build(REDUCED).double().train()
    mv, ms = patches(4, seed=2, dtype=torch.float64)
    y = torch.tensor([1.0, 0.0, 1.0, 0.0], dtype=torch.float64)

    def loss():
        p = net(mv, ms)[:, 1].clamp(1e-7, 1 - 1e-7)
        return -(y * p.log() + (1 - y) * (1 - p).log()).mean()

    named = [(n, p) for n, p in net.named_parameters()]
    net.zero_grad()
    loss().backward()
    rng = np.random.default_rng(0)
    flat = [(i, j) for i, (_, p) in enumerate(named) for j in range(p.numel())]
    picks = [flat[k] for k in rng.choice(len(flat), size=50, replace=False)]
    h = 1e-7  # keeps the +-h window clear of PReLU and max-pool switch points
    worst = 0.0
    with torch.no_grad():
        for i, j in picks:
            p = named[i][1].view(-1)
            analytic = named[i][1].grad.view(-1)[j].item()
            orig = p[j].item()
            p[j] = orig + h
            up = loss().item()
            p[j] = orig - h
            down = loss().item()
            p[j] = orig
            numeric = (up - down) / (2 * h)
            scale = max(abs(analytic), abs(numeric))
            err = abs(analytic - numeric) / scale if scale > 1e-7 else abs(analytic - numeric)
            worst = max(worst, err)
    assert worst < 1e-3, worst


# -- checkpoints ------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, small_net):
    ckpt = Checkpoint(REDUCED, small_net.state_dict(), epoch=3, val_loss=0.25, seed=9, history=[0.5, 0.25])
    path = save_checkpoint(ckpt, tmp_path / "net")
    assert path.name == "net.ckpt.json"
    back = load_checkpoint(tmp_path / "net.ckpt.bin")
    assert back.config == REDUCED and back.epoch == 3 and back.val_loss == 0.25 and back.history == [0.5, 0.25]
    net = back.restore()
    assert net.is_trained
    s = small_net.state_dict()
    assert all(torch.equal(s[k], net.state_dict()[k]) for k in s)


def test_checkpoint_hash_is_validated(tmp_path, small_net):
    import json

    save_checkpoint(Checkpoint(REDUCED, small_net.state_dict()), tmp_path / "net")
    meta_path = tmp_path / "net.ckpt.json"
    meta = json.loads(meta_path.read_text())
    meta["config"]["depth"] = 83
    meta_path.write_text(json.dumps(meta))
    with pytest.raises(CheckpointError):
        load_checkpoint(meta_path)


def test_checkpoint_truncation_detected(tmp_path, small_net):
    save_checkpoint(Checkpoint(REDUCED, small_net.state_dict()), tmp_path / "net")
    b = tmp_path / "net.ckpt.bin"
    b.write_bytes(b.read_bytes()[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(b)


def test_config_digest_tracks_fields():
    assert NetworkConfig().digest() == NetworkConfig().digest()
    assert NetworkConfig().digest() != NetworkConfig(cip_placement=2).digest()
    assert NetworkConfig.from_dict(NetworkConfig(cip_kernels=(1, 5)).to_dict()) == NetworkConfig(cip_kernels=(1, 5))


def test_param_count_is_config_function():
    a = param_count(build(NetworkConfig(channel_divisor=8, seed=1)))
    b = param_count(build(NetworkConfig(channel_divisor=8, seed=2)))
    assert a == b
    assert math.isclose(a, param_count(build(NetworkConfig(channel_divisor=8))))
