import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from proxysign.sampler import (
    AugmentSpec,
    apply_proxy,
    augment_clip,
    center_augment,
    center_proxy_indices,
    draw_augment,
    random_crop,
    random_rotation,
    resample,
    resize_short_side,
    sample_proxy_indices,
    sample_rng,
)


def test_fixed_draws_example():
    plan = sample_proxy_indices(8, 4, draws=[1, 0, 1, 0])
    assert plan.indices == (1, 2, 5, 6)
    assert plan.pad_count == 0


@pytest.mark.parametrize("seed", range(5))
def test_step_one_ignores_rng(seed):
    plan = sample_proxy_indices(4, 4, np.random.default_rng(seed))
    assert plan.indices == (0, 1, 2, 3)


def test_short_clip_padding():
    plan = sample_proxy_indices(3, 4, np.random.default_rng(0))
    assert plan.indices == (0, 1, 2)
    assert plan.pad_count == 1
    assert list(plan.full_indices()) == [0, 1, 2, 2]


@pytest.mark.parametrize("N, T", [(0, 4), (4, 0), (-1, 3)])
def test_invalid_sizes(N, T):
    with pytest.raises(ValueError):
        sample_proxy_indices(N, T, np.random.default_rng(0))


def test_bad_draws():
    with pytest.raises(ValueError):
        sample_proxy_indices(8, 4, draws=[2, 0, 0, 0])
    with pytest.raises(ValueError):
        sample_proxy_indices(8, 4, draws=[0, 0, 0])


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 400), st.integers(1, 64), st.integers(0, 2**32 - 1))
def test_plan_invariants(N, T, seed):
    plan = sample_proxy_indices(N, T, np.random.default_rng(seed))
    idx = np.array(plan.indices)
    assert len(plan.full_indices()) == T
    assert np.all(idx < N)
    if N >= T:
        step = N // T
        assert plan.pad_count == 0
        assert np.all(np.diff(idx) > 0)
        assert np.all((idx >= step * np.arange(T)) & (idx < step * (np.arange(T) + 1)))
        assert idx.max() <= step * T - 1
    else:
        assert list(idx) == list(range(N)) and plan.pad_count == T - N


def test_same_rng_state_same_plan():
    a = sample_proxy_indices(64, 16, np.random.default_rng(7))
    b = sample_proxy_indices(64, 16, np.random.default_rng(7))
    assert a == b


def test_epoch_diversity():
    differ = sum(sample_proxy_indices(64, 16, sample_rng(0, e, "clip")) !=
                 sample_proxy_indices(64, 16, sample_rng(0, e + 1, "clip")) for e in range(0, 2000, 2))
    assert differ / 1000 >= 0.99


def test_sample_rng_independent_of_call_order():
    a = [sample_rng(3, 1, c).integers(0, 1 << 30) for c in ("a", "b", "c")]
    b = [sample_rng(3, 1, c).integers(0, 1 << 30) for c in ("c", "b", "a")][::-1]
    assert a == b


def test_center_plan():
    plan = center_proxy_indices(64, 16)
    assert plan.indices == tuple(2 + 4 * i for i in range(16))
    assert center_proxy_indices(5, 16).pad_count == 11


def test_apply_proxy_padding():
    frames = np.array(["a", "b", "c"])
    plan = sample_proxy_indices(3, 4, np.random.default_rng(0))
    assert list(apply_proxy(frames, plan)) == ["a", "b", "c", "c"]


def test_apply_proxy_identity_and_mismatch():
    frames = np.arange(10 * 2).reshape(10, 2)
    plan = sample_proxy_indices(10, 10, np.random.default_rng(0))
    np.testing.assert_array_equal(apply_proxy(frames, plan), frames)
    with pytest.raises(ValueError):
        apply_proxy(frames[:9], plan)


# --- spatial augmentation ------------------------------------------------------

def test_crop_identity():
    f = np.random.default_rng(0).integers(0, 256, (112, 112, 3), dtype=np.uint8)
    np.testing.assert_array_equal(random_crop(f, AugmentSpec(0, 0)), f)


def test_crop_bottom_right():
    f = np.arange(128 * 128).reshape(128, 128)
    out = random_crop(f, AugmentSpec(16, 16))
    np.testing.assert_array_equal(out, f[16:, 16:])


def test_crop_too_small():
    with pytest.raises(ValueError):
        random_crop(np.zeros((100, 128)), AugmentSpec(0, 0))


def test_rotation_zero_is_exact():
    f = np.random.default_rng(0).integers(0, 256, (40, 50, 3), dtype=np.uint8)
    out = random_rotation(f, AugmentSpec(0, 0, 32, 0.0))
    assert out.dtype == f.dtype and out.tobytes() == f.tobytes()


def test_rotation_round_trip_on_gradient():
    yy, xx = np.mgrid[0:128, 0:128]
    f = np.clip(xx + 0.5 * yy, 0, 255).astype(np.uint8)
    there = random_rotation(f, AugmentSpec(0, 0, 112, 10.0))
    back = random_rotation(there, AugmentSpec(0, 0, 112, -10.0))
    inner = (slice(24, -24), slice(24, -24))
    assert np.abs(back[inner].astype(int) - f[inner].astype(int)).max() < 2


@pytest.mark.parametrize("angle", [-10.0, -3.3, 4.0, 10.0])
def test_rotation_of_constant(angle):
    f = np.full((30, 40), 77, np.uint8)
    np.testing.assert_array_equal(random_rotation(f, AugmentSpec(0, 0, 16, angle)), f)


def test_rotation_angle_bound():
    with pytest.raises(ValueError):
        AugmentSpec(0, 0, 112, 10.5)


def test_rotation_moves_content():
    f = np.zeros((41, 41), np.float64)
    f[20, 35] = 1.0  # 15 px right of centre
    out = random_rotation(f, AugmentSpec(0, 0, 8, 10.0))
    y, x = np.unravel_index(np.argmax(out), out.shape)
    assert abs(x - 20 - 15 * np.cos(np.deg2rad(10))) <= 1
    assert abs(abs(y - 20) - 15 * np.sin(np.deg2rad(10))) <= 1


def test_augment_is_temporally_consistent():
    clip = np.repeat(np.random.default_rng(0).integers(0, 256, (1, 40, 48, 3), dtype=np.uint8), 5, axis=0)
    spec = draw_augment(np.random.default_rng(3), (40, 48), 32)
    out = augment_clip(clip, spec)
    assert out.shape == (5, 32, 32, 3)
    for t in range(1, 5):
        np.testing.assert_array_equal(out[t], out[0])


@settings(max_examples=100, deadline=None)
@given(st.integers(32, 80), st.integers(32, 80), st.integers(0, 2**32 - 1))
def test_draw_augment_window_inside(h, w, seed):
    spec = draw_augment(np.random.default_rng(seed), (h, w), 32)
    assert 0 <= spec.crop_top <= h - 32 and 0 <= spec.crop_left <= w - 32
    assert abs(spec.angle) <= 10


def test_center_augment():
    spec = center_augment((128, 171), 112)
    assert (spec.crop_top, spec.crop_left, spec.angle) == (8, 29, 0.0)


def test_resize_short_side():
    f = np.zeros((48, 64, 3), np.uint8)
    assert resize_short_side(f, 40).shape == (40, 53, 3)
    assert resize_short_side(np.zeros((64, 48)), 40).shape == (53, 40)
    g = np.full((48, 64), 1234, np.uint16)
    np.testing.assert_array_equal(resize_short_side(g, 24), np.full((24, 32), 1234, np.uint16))


def test_resample_identity_and_edge_replication():
    f = np.arange(20, dtype=np.float64).reshape(4, 5)
    np.testing.assert_array_equal(resample(f, 0, 0, 4, 5, 4, 5), f)
    out = resample(f, -2, -2, 4, 5, 4, 5)
    np.testing.assert_array_equal(out[:2, :2], np.full((2, 2), f[0, 0]))
