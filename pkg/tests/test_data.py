import numpy as np
import pytest

from diffseg.data import (
    AugmentConfig,
    SyntheticSpec,
    augment,
    healthy_counterfactual,
    read_dataset,
    render_sample,
    synthesize,
    training_pool,
    write_dataset,
)
from diffseg.diffusion import ClassLabel
from diffseg.errors import DataError
from diffseg.metrics import evaluate


@pytest.fixture(scope="module")
def samples():
    return synthesize(SyntheticSpec(size=32, radius=(5.0, 10.0), seed=4), 6)


def test_same_seed_same_samples(samples):
    again = synthesize(SyntheticSpec(size=32, radius=(5.0, 10.0), seed=4), 6)
    for a, b in zip(samples, again):
        assert a.image.tobytes() == b.image.tobytes() and a.mask.tobytes() == b.mask.tobytes()
    other = render_sample(SyntheticSpec(size=32, radius=(5.0, 10.0), seed=5), 0)
    assert other.image.tobytes() != samples[0].image.tobytes()


def test_sample_contract(samples):
    for s in samples:
        assert s.image.shape == (32, 32, 3) and s.image.min() >= 0 and s.image.max() <= 1
        assert set(np.unique(s.mask)) <= {0, 1}
        assert s.label == (ClassLabel.C1_UNHEALTHY if s.mask.any() else ClassLabel.C0_HEALTHY)


def test_no_lesions():
    out = synthesize(SyntheticSpec(size=32, radius=(5.0, 10.0), lesion_count=(0, 0)), 3)
    assert all(s.label == ClassLabel.C0_HEALTHY and not s.mask.any() for s in out)


def test_spec_validation():
    with pytest.raises(DataError):
        SyntheticSpec(size=32)  # default radius does not fit
    with pytest.raises(DataError):
        SyntheticSpec(hair_rate=2.0)
    with pytest.raises(DataError):
        synthesize(SyntheticSpec(), 0)


def test_counterfactual(samples):
    s = next(s for s in samples if s.mask.any())
    h = healthy_counterfactual(s)
    assert h.label == ClassLabel.C0_HEALTHY and not h.mask.any()
    assert h.image.shape == s.image.shape
    # the patch moves towards skin colour
    m = s.mask.astype(bool)
    skin = s.image[~m].mean(0)
    assert np.abs(h.image[m].mean(0) - skin).sum() < np.abs(s.image[m].mean(0) - skin).sum()
    empty = healthy_counterfactual(h)
    np.testing.assert_array_equal(empty.image, h.image)


def test_training_pool_pairs_counterfactuals(samples):
    pool = training_pool(samples)
    sick = sum(s.label == ClassLabel.C1_UNHEALTHY for s in samples)
    assert len(pool) == len(samples) + sick


def test_augment_identity_and_rotation(samples, rng):
    s = samples[0]
    same = augment(s, rng, AugmentConfig(0.0, 0.0, 0.0))
    np.testing.assert_array_equal(same.image, s.image)
    np.testing.assert_array_equal(same.mask, s.mask)
    rot = augment(s, np.random.default_rng(1), AugmentConfig(p_blur=0, p_rotate=1.0, p_sharpen=0))
    assert rot.mask.sum() == s.mask.sum()


def test_blur_leaves_mask(samples):
    s = samples[1]
    out = augment(s, np.random.default_rng(0), AugmentConfig(p_blur=1.0, p_rotate=0, p_sharpen=0, blur_sigma=(1.0, 1.0)))
    assert evaluate(out.mask, s.mask).dice == 1.0


def test_dataset_round_trip(tmp_path, samples):
    write_dataset(tmp_path, {"train": samples[:4], "test": samples[4:]})
    back = read_dataset(tmp_path, "train")
    assert [s.id for s in back] == [s.id for s in samples[:4]]
    for a, b in zip(back, samples):
        np.testing.assert_array_equal(a.mask, b.mask)
        assert np.abs(a.image - b.image).max() <= 0.5 / 255 + 1e-12
    with pytest.raises(DataError):
        write_dataset(tmp_path, {"holdout": samples})
    with pytest.raises(DataError):
        read_dataset(tmp_path / "none", "train")
