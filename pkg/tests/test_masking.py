"""Patchification round-trips and random mask-plan statistics."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chi2

from pyradiff.errors import ContractError, ShapeError
from pyradiff.masking import (
    MaskPlan,
    TokenBatch,
    full_mask_plan,
    level_mask_ratio,
    patchify,
    sample_mask,
    scatter,
    split,
    unpatchify,
)


def _batch(tokens: np.ndarray, patch_size: int = 2, channels: int = 1) -> TokenBatch:
    n = tokens.shape[1]
    return TokenBatch(tokens=tokens, patch_size=patch_size, grid=(1, n), channels=channels)


# ---- patchify ----


def test_patchify_4x4_p2_explicit():
    img = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    tb = patchify(img, 2)
    assert tb.tokens.shape == (1, 4, 4)
    assert tb.grid == (2, 2)
    # row-major patch order, row-major pixels inside each patch
    expected = np.array(
        [[0, 1, 4, 5], [2, 3, 6, 7], [8, 9, 12, 13], [10, 11, 14, 15]],
        dtype=np.float64,
    )
    assert np.array_equal(tb.tokens[0], expected)


def test_patchify_240_p8_token_count():
    tb = patchify(np.zeros((1, 1, 240, 240)), 8)
    assert tb.n_tokens == 900
    assert tb.tokens.shape == (1, 900, 64)


def test_patchify_round_trip_bit_exact():
    rng = np.random.default_rng(20)
    img = rng.standard_normal((3, 2, 16, 24))
    tb = patchify(img, 4)
    assert np.array_equal(unpatchify(tb), img)


def test_patchify_indivisible_dims_rejected():
    with pytest.raises(ShapeError):
        patchify(np.zeros((1, 1, 10, 10)), 4)


def test_patchify_wrong_rank_rejected():
    with pytest.raises(ShapeError):
        patchify(np.zeros((10, 10)), 2)


# ---- sample_mask ----


def test_mask_counts_64_tokens_ratio_075():
    plan = sample_mask(64, 0.75, rng=0)
    assert plan.n_masked == 48
    assert plan.n_visible == 16


def test_mask_ratio_zero_is_empty_masked_set():
    plan = sample_mask(64, 0.0, rng=0)
    assert plan.n_masked == 0
    assert plan.n_visible == 64


def test_mask_exact_floor_count_sweep():
    for n in (1, 7, 16, 64, 100, 900):
        for ratio in (0.0, 0.1, 0.25, 0.5, 0.75, 0.99):
            plan = sample_mask(n, ratio, rng=1)
            assert plan.n_masked == int(np.floor(ratio * n))
            assert plan.n_masked + plan.n_visible == n


def test_mask_sets_disjoint_sorted_cover():
    plan = sample_mask(100, 0.37, rng=2)
    both = np.concatenate([plan.masked_idx, plan.visible_idx])
    assert np.array_equal(np.sort(both), np.arange(100))
    assert np.array_equal(plan.masked_idx, np.sort(plan.masked_idx))
    assert np.array_equal(plan.visible_idx, np.sort(plan.visible_idx))


def test_mask_ratio_bounds_rejected():
    for ratio in (-0.1, 1.0, 1.5):
        with pytest.raises(ContractError):
            sample_mask(16, ratio, rng=0)


def test_mask_uniformity_frequency_and_chi_square():
    # N=16, ratio 0.5: every index should be masked half the time
    n, draws = 16, 100_000
    rng = np.random.default_rng(3)
    counts = np.zeros(n)
    for _ in range(draws):
        counts[sample_mask(n, 0.5, rng).masked_idx] += 1
    freq = counts / draws
    assert np.max(np.abs(freq - 0.5)) < 0.01
    # chi-square on inclusion counts; sampling without replacement gives
    # each count variance draws * p(1-p) * (n-k)/(n-1), hence the factor
    k = n // 2
    expected = draws * 0.5
    correction = (n - k) / (n - 1)
    stat = np.sum((counts - expected) ** 2 / (expected * 0.5 * correction))
    assert stat < chi2.ppf(0.99, n - 1)


def test_mask_deterministic_for_seed():
    a = sample_mask(64, 0.75, rng=42)
    b = sample_mask(64, 0.75, rng=42)
    assert np.array_equal(a.masked_idx, b.masked_idx)


# ---- full_mask_plan ----


def test_full_mask_plan_masks_everything():
    plan = full_mask_plan(9)
    assert plan.n_masked == 9
    assert plan.n_visible == 0
    assert plan.ratio == 1.0


# ---- level_mask_ratio ----


def test_level_ratios_linear_three_levels():
    ratios = [level_mask_ratio(n, 3, 0.75, 0.25) for n in range(3)]
    assert np.max(np.abs(np.array(ratios) - [0.75, 0.5, 0.25])) < 1e-15


def test_level_ratio_two_levels_endpoints():
    assert level_mask_ratio(0, 2, 0.75, 0.25) == 0.75
    assert level_mask_ratio(1, 2, 0.75, 0.25) == 0.25


def test_level_ratio_single_level_uses_fine():
    assert level_mask_ratio(0, 1, 0.75, 0.25) == 0.75


def test_level_ratio_bounds_validated():
    with pytest.raises(ContractError):
        level_mask_ratio(0, 3, 0.25, 0.75)  # fine below coarse
    with pytest.raises(ContractError):
        level_mask_ratio(0, 3, 1.0, 0.25)  # fine not below 1
    with pytest.raises(ContractError):
        level_mask_ratio(3, 3, 0.75, 0.25)  # level out of range


@settings(max_examples=50, deadline=None)
@given(
    levels=st.integers(min_value=2, max_value=6),
    fine=st.floats(min_value=0.01, max_value=0.99),
    coarse=st.floats(min_value=0.0, max_value=0.99),
)
def test_level_ratio_monotone_nonincreasing(levels, fine, coarse):
    if coarse > fine:
        fine, coarse = coarse, fine
    if fine >= 1.0:
        return
    ratios = [level_mask_ratio(n, levels, fine, coarse) for n in range(levels)]
    assert all(a >= b - 1e-12 for a, b in zip(ratios, ratios[1:]))
    assert all(0.0 <= r < 1.0 for r in ratios)


# ---- split / scatter ----


def test_split_scatter_round_trip_bit_exact():
    rng = np.random.default_rng(21)
    tokens = rng.standard_normal((2, 12, 8))
    plan = sample_mask(12, 0.5, rng=4)
    visible, masked = split(_batch(tokens), plan)
    assert masked.shape == (2, 6, 8)
    assert visible.shape == (2, 6, 8)
    back = scatter(visible, masked, plan)
    assert np.array_equal(back, tokens)


def test_split_empty_masked_returns_all_visible():
    rng = np.random.default_rng(22)
    tokens = rng.standard_normal((1, 8, 4))
    plan = sample_mask(8, 0.0, rng=5)
    visible, masked = split(_batch(tokens), plan)
    assert masked.shape == (1, 0, 4)
    assert np.array_equal(visible, tokens)


def test_scatter_full_mask_plan():
    rng = np.random.default_rng(23)
    tokens = rng.standard_normal((1, 6, 4))
    plan = full_mask_plan(6)
    visible, masked = split(_batch(tokens), plan)
    assert np.array_equal(scatter(visible, masked, plan), tokens)


def test_split_token_count_mismatch_rejected():
    tokens = np.zeros((1, 10, 4))
    plan = sample_mask(12, 0.5, rng=6)
    with pytest.raises(ContractError):
        split(_batch(tokens), plan)


def test_plan_overlap_rejected():
    bad = MaskPlan(
        masked_idx=np.array([0, 1]),
        visible_idx=np.array([1, 2]),
        ratio=0.5,
    )
    with pytest.raises(ContractError):
        split(_batch(np.zeros((1, 3, 2))), bad)


@settings(max_examples=40, deadline=None)
@given(
    n=st.integers(min_value=1, max_value=40),
    ratio=st.floats(min_value=0.0, max_value=0.95),
    seed=st.integers(min_value=0, max_value=10_000),
)
def test_split_scatter_property(n, ratio, seed):
    rng = np.random.default_rng(seed)
    tokens = rng.standard_normal((2, n, 3))
    plan = sample_mask(n, ratio, rng=seed)
    visible, masked = split(_batch(tokens), plan)
    assert np.array_equal(scatter(visible, masked, plan), tokens)
