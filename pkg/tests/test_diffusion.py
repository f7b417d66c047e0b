import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffseg.data import SyntheticSpec, synthesize, training_pool
from diffseg.diffusion import (
    DiffusionModel,
    TrainConfig,
    build_schedule,
    forward_noise,
    predict_noise,
    to_model_space,
    train,
)
from diffseg.errors import ConfigError, InputError
from diffseg.nn import DenoiserNet


def test_single_step_schedule():
    s = build_schedule(T=1, beta_start=0.01, beta_end=0.01)
    assert s.alphabar(1) == pytest.approx(0.99, abs=1e-15)


def test_schedule_ratio_and_endpoints():
    s = build_schedule(150)
    assert s.betas[0] == 1e-4 and s.betas[-1] == pytest.approx(0.02)
    ab = s.alphabars
    np.testing.assert_allclose(ab[1:] / ab[:-1], 1.0 - s.betas[1:], rtol=1e-13)
    # written as a product loop, independent of cumprod
    prod = 1.0
    for t in range(1, 151):
        prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * (t - 1) / 149)
        assert s.alphabar(t) == pytest.approx(prod, rel=1e-12)


def test_schedule_rejects_bad_ranges():
    with pytest.raises(ConfigError):
        build_schedule(0)
    with pytest.raises(ConfigError):
        build_schedule(10, 0.02, 0.01)
    with pytest.raises(InputError):
        build_schedule(10).alphabar(11)


def test_forward_noise_special_cases(rng):
    s = build_schedule(150)
    x0 = rng.standard_normal((1, 3, 4, 4))
    eps = rng.standard_normal(x0.shape)
    ab = s.alphabar(70)
    np.testing.assert_allclose(forward_noise(x0, 70, s, np.zeros_like(x0)), np.sqrt(ab) * x0)
    np.testing.assert_allclose(forward_noise(np.zeros_like(x0), 70, s, eps), np.sqrt(1 - ab) * eps)
    with pytest.raises(InputError):
        forward_noise(x0, 70, s, eps[..., :2])


@settings(max_examples=30, deadline=None)
@given(t=st.integers(1, 150), scale=st.floats(0.1, 3.0))
def test_forward_noise_is_linear(t, scale):
    s = build_schedule(150)
    r = np.random.default_rng(t)
    x0, eps = r.standard_normal((2, 3, 2, 2)), r.standard_normal((2, 3, 2, 2))
    np.testing.assert_allclose(forward_noise(scale * x0, t, s, scale * eps), scale * forward_noise(x0, t, s, eps))


def test_model_space_range():
    img = np.zeros((4, 4, 3))
    img[0, 0] = 1.0
    x = to_model_space(img)
    assert x.shape == (1, 3, 4, 4) and x.min() == -1.0 and x.max() == 1.0


def test_embedding_mode_dispatches_to_net(tiny_model, rng):
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    out = predict_noise(tiny_model, x, [0, 1], 80)
    ab = tiny_model.schedule.alphabar(80)
    np.testing.assert_array_equal(out, tiny_model.nets[0].forward(x, [0, 1], [ab, ab]))


def test_dual_model_twins_agree(tiny_arch, rng):
    net = DenoiserNet.init(tiny_arch, seed=4)
    net.params["out_conv.w"][...] = 0.1
    model = DiffusionModel([net, net.copy()], "dual-model", build_schedule(150))
    x = rng.standard_normal((1, 3, 8, 8)).astype(np.float32)
    a = predict_noise(model, x, 0, 100)
    b = predict_noise(model, x, 1, 100)
    np.testing.assert_array_equal(a, b)


def test_predict_rejects_unknown_class(tiny_model):
    with pytest.raises(ConfigError):
        predict_noise(tiny_model, np.zeros((1, 3, 8, 8), np.float32), 2, 10)


def _tiny_train_cfg(**kw):
    base = dict(image_size=16, batch_size=4, epochs=2, channels=(4, 8), blocks_per_level=1, emb_dim=8, seed=11)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_pool():
    return training_pool(synthesize(SyntheticSpec(size=16, radius=(3.0, 6.0), seed=2), 6))


def test_zero_epochs_returns_initial_net(tiny_pool):
    cfg = _tiny_train_cfg(epochs=0)
    model, curve = train(tiny_pool, cfg)
    assert curve == []
    init = DenoiserNet.init(cfg.architecture(), seed=cfg.seed * 1000)
    for k, v in init.params.items():
        np.testing.assert_array_equal(model.nets[0].params[k], v)


def test_training_is_deterministic(tiny_pool, tmp_path):
    m1, c1 = train(tiny_pool, _tiny_train_cfg(), checkpoint_dir=tmp_path / "a")
    m2, c2 = train(tiny_pool, _tiny_train_cfg())
    assert c1 == c2
    assert all(np.isfinite(c1))
    for k in m1.nets[0].params:
        assert m1.nets[0].params[k].tobytes() == m2.nets[0].params[k].tobytes()
    assert (tmp_path / "a" / "epoch_0002.dseg").is_file()


def test_dual_model_training_runs(tiny_pool):
    model, curve = train(tiny_pool, _tiny_train_cfg(conditioning="dual-model", epochs=1))
    assert len(model.nets) == 2 and len(curve) == 1


def test_training_needs_both_classes():
    healthy = synthesize(SyntheticSpec(size=16, radius=(3.0, 6.0), lesion_count=(0, 0)), 3)
    with pytest.raises(ConfigError):
        train(healthy, _tiny_train_cfg())


def test_model_save_load(tiny_model, tmp_path):
    tiny_model.save(tmp_path / "m.dseg")
    back = DiffusionModel.load(tmp_path / "m.dseg")
    assert back.conditioning == "embedding"
    np.testing.assert_allclose(back.schedule.alphabars, tiny_model.schedule.alphabars)
