import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from memshard.augment import OPS, AugmentConfig, apply_op, augment, brightness, contrast, horizontal_flip
from memshard.errors import InvalidConfigError


@pytest.fixture
def img():
    return np.random.default_rng(0).random(64)


@pytest.mark.parametrize("op", OPS)
def test_every_op_is_identity_at_level_zero(op, img):
    out = apply_op(op, img, 0.0, np.random.default_rng(1))
    assert np.array_equal(out, img) and out is not img


def test_augment_identity_at_zero_strength(img):
    out = augment(img, 0.0, AugmentConfig(magnitude=10, ops_per_call=4), np.random.default_rng(0))
    assert np.array_equal(out, img)


def test_augment_approaches_identity_as_strength_vanishes(img):
    cfg = AugmentConfig(magnitude=10, ops_per_call=2, enabled_ops=("brightness", "contrast", "additive-gaussian"))
    devs = [np.mean([np.abs(augment(img, rho, cfg, np.random.default_rng(s)) - img).max() for s in range(30)])
            for rho in (0.5, 0.1, 0.01, 1e-4)]
    assert devs == sorted(devs, reverse=True)
    assert devs[-1] < 1e-4


def test_flip_twice_restores(img):
    rng = np.random.default_rng(3)
    once = horizontal_flip(img, 1.0, rng)
    twice = horizontal_flip(once, 1.0, rng)
    assert not np.array_equal(once, img)
    assert np.array_equal(twice, img)


def test_flip_mirrors_columns():
    x = np.arange(4.0) / 4
    assert horizontal_flip(x, 1.0, np.random.default_rng(0)).tolist() == [0.25, 0.0, 0.75, 0.5]


def test_brightness_hand_value():
    x = np.full(4, 0.5)
    assert brightness(x, 0.1) == pytest.approx(np.full(4, 0.6))
    assert brightness(np.full(4, 0.95), 0.1).max() == 1.0


def test_brightness_op_at_level_point_two():
    x = np.full(4, 0.5)
    seen = set()
    for s in range(20):
        v = apply_op("brightness", x, 0.2, np.random.default_rng(s))
        assert np.allclose(v, v[0])
        seen.add(round(float(v[0]), 12))
    assert seen == {0.6, 0.4}


def test_contrast_keeps_mean_when_unclipped():
    x = np.array([0.4, 0.6, 0.5, 0.5])
    assert contrast(x, 0.5).tolist() == pytest.approx([0.45, 0.55, 0.5, 0.5])


def test_translate_shifts_and_replicates_edges():
    x = np.arange(16.0).reshape(4, 4) / 16
    idx = {k: np.clip(np.arange(4) - k, 0, 3) for k in (1, -1)}
    want = {tuple(x[idx[k], :].ravel()) for k in idx} | {tuple(x[:, idx[k]].ravel()) for k in idx}
    outs = {tuple(apply_op("translate", x.ravel(), 0.5, np.random.default_rng(s))) for s in range(40)}
    assert outs == want  # shift of round(0.5 * 0.5 * 4) = 1 pixel, two axes, two signs


def test_cutout_zeroes_a_square(img):
    out = apply_op("cutout", img, 1.0, np.random.default_rng(0))
    assert np.count_nonzero(out == 0) >= 16


@settings(max_examples=60, deadline=None)
@given(rho=st.floats(0, 1), seed=st.integers(0, 2**31), mag=st.integers(1, 10), k=st.integers(1, 4))
def test_output_stays_in_range(rho, seed, mag, k):
    x = np.random.default_rng(seed).random(64)
    out = augment(x, rho, AugmentConfig(magnitude=mag, ops_per_call=k), np.random.default_rng(seed))
    assert out.shape == x.shape
    assert out.min() >= 0 and out.max() <= 1


def test_mean_deviation_grows_with_strength(img):
    cfg = AugmentConfig(magnitude=10)
    devs = []
    for rho in (0.1, 0.3, 0.6, 1.0):
        rng = np.random.default_rng(0)
        devs.append(np.mean([np.abs(augment(img, rho, cfg, rng) - img).mean() for _ in range(1000)]))
    assert all(a < b for a, b in zip(devs, devs[1:]))


def test_same_seed_same_output(img):
    cfg = AugmentConfig()
    a = augment(img, 0.7, cfg, np.random.default_rng(9))
    b = augment(img, 0.7, cfg, np.random.default_rng(9))
    assert np.array_equal(a, b)


def test_input_not_mutated(img):
    ref = img.copy()
    augment(img, 1.0, AugmentConfig(magnitude=10, ops_per_call=6), np.random.default_rng(0))
    assert np.array_equal(img, ref)


@pytest.mark.parametrize("kw", [{"magnitude": 0}, {"ops_per_call": 0}, {"enabled_ops": ()},
                                {"enabled_ops": ("rotate",)}])
def test_config_validation(kw):
    with pytest.raises(InvalidConfigError):
        AugmentConfig(**kw)


def test_strength_out_of_range_rejected(img):
    with pytest.raises(InvalidConfigError):
        augment(img, 1.5, AugmentConfig(), np.random.default_rng(0))


def test_non_square_image_rejected():
    with pytest.raises(InvalidConfigError):
        apply_op("translate", np.zeros(10), 1.0, np.random.default_rng(0))


def test_config_round_trip():
    c = AugmentConfig(magnitude=5, ops_per_call=1, enabled_ops=("cutout",))
    assert AugmentConfig.from_dict(c.to_dict()) == c
