"""Tape ops against direct loop oracles, gradient checks, optimizer and model files."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffseg import nn
from diffseg.errors import ConfigError, InputError, ModelError, TrainingError
from diffseg.nn import AdamState, Architecture, DenoiserNet, Node, adam_step, backprop, noise_loss


def conv_loop(x, w, b):
    # zero-padded "same" correlation, written with explicit loops
    B, H, W, C = x.shape
    k = w.shape[0]
    p = k // 2
    out = np.zeros((B, H, W, w.shape[-1]))
    for n in range(B):
        for i in range(H):
            for j in range(W):
                for dy in range(k):
                    for dx in range(k):
                        y, xx = i + dy - p, j + dx - p
                        if 0 <= y < H and 0 <= xx < W:
                            out[n, i, j] += x[n, y, xx] @ w[dy, dx]
    return out + b


def group_norm_loop(x, g, b, groups, eps=1e-5):
    out = np.empty_like(x)
    cg = x.shape[-1] // groups
    for n in range(x.shape[0]):
        for k in range(groups):
            sl = x[n, :, :, k * cg : (k + 1) * cg]
            out[n, :, :, k * cg : (k + 1) * cg] = (sl - sl.mean()) / np.sqrt(sl.var() + eps)
    return out * g + b


@pytest.mark.parametrize("k", [1, 3])
def test_conv2d_matches_loops(rng, k):
    x = rng.standard_normal((2, 5, 4, 3))
    w = rng.standard_normal((k, k, 3, 2))
    b = rng.standard_normal(2)
    y = nn.conv2d(Node(x), Node(w), Node(b)).value
    np.testing.assert_allclose(y, conv_loop(x, w, b), atol=1e-12)


def test_group_norm_matches_loops(rng):
    x = rng.standard_normal((2, 3, 3, 6))
    g, b = rng.standard_normal(6), rng.standard_normal(6)
    y = nn.group_norm(Node(x), Node(g), Node(b), groups=3).value
    np.testing.assert_allclose(y, group_norm_loop(x, g, b, 3), atol=1e-10)


def test_pool_and_upsample(rng):
    x = rng.standard_normal((1, 4, 6, 2))
    pooled = nn.avgpool2(Node(x)).value
    assert pooled.shape == (1, 2, 3, 2)
    assert pooled[0, 1, 2, 1] == pytest.approx(x[0, 2:4, 4:6, 1].mean())
    up = nn.upsample2(Node(pooled)).value
    assert up.shape == x.shape
    assert np.all(up[0, 2:4, 4:6, 1] == pooled[0, 1, 2, 1])


def numeric_grad(f, a, h=1e-6):
    g = np.zeros_like(a)
    it = np.nditer(a, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = a[i]
        a[i] = old + h
        fp = f()
        a[i] = old - h
        fm = f()
        a[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


OPS = {
    "conv3": lambda x, p: nn.conv2d(x, p["w3"], p["b"]),
    "conv1": lambda x, p: nn.conv2d(x, p["w1"], p["b"]),
    "norm": lambda x, p: nn.group_norm(x, p["g4"], p["b4"], 2),
    "silu": lambda x, p: nn.silu(x),
    "pool": lambda x, p: nn.avgpool2(x),
    "up": lambda x, p: nn.upsample2(x),
    "concat": lambda x, p: nn.concat(x, x),
    "bias": lambda x, p: nn.channel_bias(x, p["e"]),
}


@pytest.mark.parametrize("op", sorted(OPS))
def test_op_gradients_against_central_differences(rng, op):
    x = rng.standard_normal((2, 4, 4, 4))
    raw = {
        "w3": rng.standard_normal((3, 3, 4, 3)),
        "w1": rng.standard_normal((1, 1, 4, 3)),
        "b": rng.standard_normal(3),
        "g4": rng.standard_normal(4),
        "b4": rng.standard_normal(4),
        "e": rng.standard_normal((2, 4)),
    }
    weights = None

    def run():
        leaves = {k: Node(v, name=k) for k, v in raw.items()}
        xin = Node(x, name="x")
        return OPS[op](xin, leaves)

    out = run()
    weights = rng.standard_normal(out.value.shape)
    grads = backprop(out, weights)

    def f():
        return float((run().value * weights).sum())

    for name, arr in [("x", x), *raw.items()]:
        if name not in grads:
            continue
        np.testing.assert_allclose(grads[name], numeric_grad(f, arr), rtol=1e-5, atol=1e-6)


def test_linear_and_embedding_gradients(rng):
    table = rng.standard_normal((3, 4))
    w = rng.standard_normal((4, 2))
    b = rng.standard_normal(2)
    idx = np.array([2, 0, 2])
    weights = rng.standard_normal((3, 2))

    def run():
        t = Node(table, name="t")
        return nn.linear(nn.embedding(t, idx), Node(w, name="w"), Node(b, name="b"))

    grads = backprop(run(), weights)
    f = lambda: float((run().value * weights).sum())  # noqa: E731
    for name, arr in (("t", table), ("w", w), ("b", b)):
        np.testing.assert_allclose(grads[name], numeric_grad(f, arr), rtol=1e-5, atol=1e-7)


def test_whole_network_gradient_check(tiny_arch):
    net = DenoiserNet.init(tiny_arch, seed=3)
    report = nn.gradient_check(net, probe_count=20, seed=7)
    assert set(report) == {"conv", "norm", "linear", "embedding"}
    assert max(report.values()) < 1e-4


def test_gradient_check_rejects_zero_probes(tiny_arch):
    with pytest.raises(InputError):
        nn.gradient_check(DenoiserNet.init(tiny_arch), probe_count=0)


def test_zero_weights_output_is_output_bias(tiny_arch, rng):
    net = DenoiserNet.init(tiny_arch, seed=0)
    for k in net.params:
        net.params[k][...] = 0
    net.params["out_conv.b"][...] = [0.25, -1.0, 2.0]
    y = net.forward(rng.standard_normal((2, 3, 8, 8)), [0, 1], [0.3, 0.9])
    expect = np.broadcast_to(np.array([0.25, -1.0, 2.0])[None, :, None, None], y.shape)
    np.testing.assert_array_equal(y, expect)


def test_forward_is_deterministic(tiny_model, rng):
    net = tiny_model.nets[0]
    x = rng.standard_normal((1, 3, 8, 8))
    a = net.forward(x, 1, 0.5)
    b = net.forward(x, 1, 0.5)
    assert a.tobytes() == b.tobytes()


def test_forward_rejects_bad_inputs(tiny_model):
    net = tiny_model.nets[0]
    with pytest.raises(ConfigError):
        net.forward(np.zeros((1, 3, 7, 7)), 0, 0.5)
    with pytest.raises(InputError):
        net.forward(np.zeros((1, 3, 8, 8)), 2, 0.5)
    with pytest.raises(InputError):
        net.forward(np.full((1, 3, 8, 8), np.nan), 0, 0.5)


def test_perfect_prediction_has_zero_loss_and_gradients(tiny_arch, rng):
    net = DenoiserNet.init(tiny_arch, seed=0, dtype=np.float64)
    x = rng.standard_normal((2, 3, 8, 8))
    eps = net.forward(x, [0, 1], [0.4, 0.4])
    loss, grads = noise_loss(net, x, [0, 1], [0.4, 0.4], eps)
    assert loss == 0.0
    assert all(not np.any(g) for g in grads.values())


def test_duplicate_samples_have_equal_losses(tiny_model, rng):
    net = tiny_model.nets[0]
    x = rng.standard_normal((1, 3, 8, 8))
    eps = rng.standard_normal((1, 3, 8, 8))
    l1, _ = noise_loss(net, x, [1], [0.5], eps)
    l2, _ = noise_loss(net, np.concatenate([x, x]), [1, 1], [0.5, 0.5], np.concatenate([eps, eps]))
    assert l1 == pytest.approx(l2, rel=1e-6)


def test_adam_zero_gradient_leaves_parameters(tiny_arch):
    net = DenoiserNet.init(tiny_arch, seed=0)
    before = net.copy()
    adam_step(net, {k: np.zeros_like(v) for k, v in net.params.items()}, AdamState())
    for k in net.params:
        np.testing.assert_array_equal(net.params[k], before.params[k])


def test_adam_first_step_moves_by_lr(tiny_arch):
    net = DenoiserNet.init(tiny_arch, seed=0, dtype=np.float64)
    before = net.copy()
    grads = {k: np.full_like(v, 3.0) for k, v in net.params.items()}
    adam_step(net, grads, AdamState(lr=0.01))
    # bias-corrected first step is lr * g / (|g| + eps)
    for k in net.params:
        np.testing.assert_allclose(before.params[k] - net.params[k], 0.01, rtol=1e-6)


def test_adam_is_deterministic(tiny_arch, rng):
    grads = {k: rng.standard_normal(s) for k, s in tiny_arch.shapes().items()}
    a, b = DenoiserNet.init(tiny_arch, seed=2), DenoiserNet.init(tiny_arch, seed=2)
    sa, sb = AdamState(), AdamState()
    for _ in range(3):
        adam_step(a, grads, sa)
        adam_step(b, grads, sb)
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()


def test_adam_rejects_non_finite(tiny_arch):
    net = DenoiserNet.init(tiny_arch)
    grads = {k: np.zeros_like(v) for k, v in net.params.items()}
    grads["in_conv.w"][0, 0, 0, 0] = np.inf
    with pytest.raises(TrainingError):
        adam_step(net, grads, AdamState())


def test_model_file_round_trip(tmp_path, tiny_arch):
    nets = [DenoiserNet.init(tiny_arch, seed=s) for s in (1, 2)]
    nn.save_model(tmp_path / "m.dseg", nets, {"note": "x"})
    back, meta = nn.load_model(tmp_path / "m.dseg")
    assert meta["note"] == "x" and len(back) == 2
    for a, b in zip(nets, back):
        assert a.arch == b.arch
        for k in a.params:
            np.testing.assert_array_equal(a.params[k], b.params[k])


def test_model_file_errors(tmp_path):
    with pytest.raises(ModelError, match="model not found"):
        nn.load_model(tmp_path / "missing.dseg")
    (tmp_path / "bad.dseg").write_bytes(b"nope")
    with pytest.raises(ModelError):
        nn.load_model(tmp_path / "bad.dseg")


@settings(max_examples=25, deadline=None)
@given(
    levels=st.integers(1, 3),
    width=st.sampled_from([2, 4, 8]),
    blocks=st.integers(1, 2),
)
def test_parameter_count_matches_init(levels, width, blocks):
    arch = Architecture(channels=tuple(width * 2**i for i in range(levels)), blocks_per_level=blocks, emb_dim=4, groups=2)
    net = DenoiserNet.init(arch)
    assert net.parameter_count() == arch.parameter_count()
    side = 2 ** (levels - 1) * 2
    y = net.forward(np.zeros((1, 3, side, side)), 0, 0.5)
    assert y.shape == (1, 3, side, side)


def _golden_net():
    arch = Architecture(channels=(4, 8), blocks_per_level=1, emb_dim=8, groups=2)
    net = DenoiserNet.init(arch, seed=0, dtype=np.float64)
    net.params["out_conv.w"] = np.random.default_rng(1).uniform(-0.3, 0.3, net.params["out_conv.w"].shape)
    return net


def test_forward_matches_frozen_golden_output():
    from pathlib import Path

    golden = np.load(Path(__file__).parent / "data" / "golden_forward_8x8.npy")
    x = np.random.default_rng(2).standard_normal((2, 3, 8, 8))
    y = _golden_net().forward(x, [0, 1], [0.3, 0.8])
    np.testing.assert_allclose(y, golden, rtol=1e-10, atol=1e-12)


def test_every_gradient_of_small_net():
    arch = Architecture(channels=(2,), blocks_per_level=1, emb_dim=4, groups=1)
    assert 150 <= arch.parameter_count() <= 250
    net = DenoiserNet.init(arch, seed=1, dtype=np.float64)
    r = np.random.default_rng(3)
    net.params["out_conv.w"] = r.uniform(-0.5, 0.5, net.params["out_conv.w"].shape)
    x = r.standard_normal((2, 3, 4, 4))
    eps = r.standard_normal(x.shape)
    labels, ab = [0, 1], [0.2, 0.7]
    _, grads = noise_loss(net, x, labels, ab, eps)

    def f():
        y = net.forward(x, labels, ab)
        return float(np.mean((y - eps) ** 2))

    worst = 0.0
    for name, p in net.params.items():
        num = numeric_grad(f, p, h=1e-5)
        denom = np.maximum(np.maximum(np.abs(num), np.abs(grads[name])), 1e-6)
        worst = max(worst, float((np.abs(num - grads[name]) / denom).max()))
    assert worst < 1e-4
