"""Pyramid decomposition: dims recurrence, resampling oracles, merge."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pyradiff.errors import ConfigurationError, ContractError
from pyradiff.pyramid import (
    Pyramid,
    decompose,
    downsample,
    level_dims,
    merge,
    upsample,
)


# ---- dimension recurrence ----


def test_dims_240_alpha_half_three_levels():
    pyr = decompose(np.zeros((240, 240)), alpha=0.5, num_levels=3)
    assert pyr.dims == ((240, 240), (120, 120), (60, 60))


def test_dims_512_two_levels():
    pyr = decompose(np.zeros((512, 512)), alpha=0.5, num_levels=2)
    assert pyr.dims == ((512, 512), (256, 256))


def test_dims_floor_recurrence_non_dyadic():
    assert level_dims(100, 100, 0.7, 3) == [(100, 100), (70, 70), (49, 49)]


def test_level_dims_matches_decompose():
    for size, alpha, levels in ((64, 0.5, 3), (128, 0.5, 4), (96, 0.75, 3)):
        pyr = decompose(np.zeros((size, size)), alpha=alpha, num_levels=levels)
        assert list(pyr.dims) == level_dims(size, size, alpha, levels)


# ---- downsample oracles ----


def test_constant_image_is_fixed_point():
    img = np.full((64, 64), 0.42)
    pyr = decompose(img, alpha=0.5, num_levels=3)
    for lvl in pyr.levels:
        assert np.max(np.abs(lvl - 0.42)) < 1e-12


def test_downsample_two_by_two_example():
    out = downsample(np.array([[1.0, 1.0], [3.0, 3.0]]), alpha=0.5)
    assert out.shape == (1, 1)
    assert abs(out[0, 0] - 2.0) < 1e-15


def test_downsample_block_mean_oracle():
    rng = np.random.default_rng(10)
    img = rng.standard_normal((8, 8))
    expected = np.zeros((4, 4))
    for i in range(4):
        for j in range(4):
            expected[i, j] = img[2 * i : 2 * i + 2, 2 * j : 2 * j + 2].mean()
    got = downsample(img, alpha=0.5)
    assert np.max(np.abs(got - expected)) < 1e-12


def test_downsample_preserves_mean_for_integer_factor():
    rng = np.random.default_rng(11)
    img = rng.standard_normal((32, 32))
    assert abs(downsample(img, 0.5).mean() - img.mean()) < 1e-12


def test_downsample_bilinear_path_dims():
    out = downsample(np.zeros((8, 8)), alpha=0.75)
    assert out.shape == (6, 6)


def test_downsample_below_one_pixel_rejected():
    with pytest.raises(ContractError):
        downsample(np.zeros((2, 2)), alpha=0.25)


# ---- upsample oracles ----


def test_upsample_constant():
    out = upsample(np.full((4, 4), -0.3), 2.0)
    assert out.shape == (8, 8)
    assert np.max(np.abs(out + 0.3)) < 1e-12


def test_upsample_single_pixel():
    out = upsample(np.array([[5.0]]), 2.0)
    assert out.shape == (2, 2)
    assert np.max(np.abs(out - 5.0)) < 1e-15


def test_upsample_out_dims_override():
    out = upsample(np.zeros((3, 3)), 2.0, out_dims=(7, 5))
    assert out.shape == (7, 5)


def test_ramp_round_trip_error_small():
    # up by 2 then down by 2 should nearly reproduce smooth ramps
    yy, xx = np.mgrid[0:64, 0:64] / 63.0
    for ramp in (xx, yy, (xx + yy) / 2.0):
        back = downsample(upsample(ramp, 2.0), 0.5)
        assert np.max(np.abs(back - ramp)) < 0.01


# ---- merge ----


def test_merge_pairs_without_blending():
    coarse = np.ones((8, 8))
    fine = np.zeros((8, 8))
    cond = merge(coarse, fine)
    assert cond.coarse is coarse
    assert cond.source is fine


def test_merge_dim_mismatch_rejected():
    with pytest.raises(ContractError):
        merge(np.zeros((4, 4)), np.zeros((8, 8)))


# ---- validation ----


def test_alpha_out_of_range_rejected():
    for alpha in (0.0, 1.0, 1.5, -0.5):
        with pytest.raises(ConfigurationError):
            decompose(np.zeros((16, 16)), alpha=alpha, num_levels=2)


def test_single_level_decompose_rejected():
    with pytest.raises(ConfigurationError):
        decompose(np.zeros((16, 16)), alpha=0.5, num_levels=1)


def test_trivial_pyramid_constructible_directly():
    # the dataclass itself places no minimum on the level count
    pyr = Pyramid(levels=(np.zeros((8, 8)),), alpha=0.5)
    assert pyr.num_levels == 1


def test_patch_divisibility_names_offending_level():
    with pytest.raises(ConfigurationError) as err:
        decompose(np.zeros((240, 240)), alpha=0.5, num_levels=3, patch_size=8)
    assert "level 2" in str(err.value)  # 60 is not divisible by 8


def test_patch_divisibility_accepts_valid_chain():
    pyr = decompose(np.zeros((64, 64)), alpha=0.5, num_levels=3, patch_size=8)
    assert pyr.dims == ((64, 64), (32, 32), (16, 16))


# ---- properties ----


@settings(max_examples=25, deadline=None)
@given(
    size=st.sampled_from([32, 48, 64, 96]),
    seed=st.integers(min_value=0, max_value=10_000),
)
def test_downsample_range_bounded_by_input(size, seed):
    # area averaging can never escape the input's value range
    rng = np.random.default_rng(seed)
    img = rng.uniform(-1.0, 1.0, size=(size, size))
    out = downsample(img, 0.5)
    assert out.min() >= img.min() - 1e-12
    assert out.max() <= img.max() + 1e-12


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(min_value=0, max_value=10_000))
def test_upsample_range_bounded_by_input(seed):
    rng = np.random.default_rng(seed)
    img = rng.uniform(-1.0, 1.0, size=(8, 8))
    out = upsample(img, 2.0)
    assert out.min() >= img.min() - 1e-12
    assert out.max() <= img.max() + 1e-12
