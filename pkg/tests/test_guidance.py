import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advla.guidance import (PatchMask, bicubic_resize, build_artifacts, flatten_mask, keys_kernel,
                            mask_to_pixels, scores_to_grid, topk_count, topk_mask)


def direct_kernel(x):
    # Keys (1981) cubic with a = -1/2, written out as two polynomials
    x = abs(x)
    if x <= 1:
        return 1.5 * x ** 3 - 2.5 * x ** 2 + 1
    if x < 2:
        return -0.5 * x ** 3 + 2.5 * x ** 2 - 4 * x + 2
    return 0.0


def direct_resize_at(grid, H, W, i, j):
    g_h, g_w = grid.shape
    sy = (i + 0.5) * g_h / H - 0.5
    sx = (j + 0.5) * g_w / W - 0.5
    total = 0.0
    for ty in range(math.floor(sy) - 1, math.floor(sy) + 3):
        for tx in range(math.floor(sx) - 1, math.floor(sx) + 3):
            yy = min(max(ty, 0), g_h - 1)
            xx = min(max(tx, 0), g_w - 1)
            total += direct_kernel(sy - ty) * direct_kernel(sx - tx) * grid[yy, xx]
    return max(total, 0.0)


def test_keys_kernel_interpolating_values():
    assert keys_kernel(0.0) == 1.0
    np.testing.assert_array_equal(keys_kernel(np.array([1.0, -1.0, 2.0, 2.5, -3.0])), 0.0)


def test_keys_kernel_partition_of_unity():
    for f in np.linspace(0, 1, 11):
        taps = np.array([f + 1, f, f - 1, f - 2])
        assert keys_kernel(taps).sum() == pytest.approx(1.0, abs=1e-14)


def test_keys_kernel_matches_direct():
    xs = np.linspace(-2.5, 2.5, 101)
    np.testing.assert_allclose(keys_kernel(xs), [direct_kernel(x) for x in xs], atol=1e-15)


@pytest.mark.parametrize("c", [0.0, 0.015625, 1.0, 7.25])
def test_bicubic_constant_invariance(c):
    out = bicubic_resize(np.full((8, 8), c), 64, 64)
    assert np.max(np.abs(out - c)) < 1e-12


@pytest.mark.parametrize("pos", [(0, 0), (3, 4), (7, 7), (2, 6)])
def test_bicubic_impulse_matches_direct_evaluation(pos):
    grid = np.zeros((8, 8))
    grid[pos] = 1.0
    out = bicubic_resize(grid, 64, 64)
    rng = np.random.default_rng(hash(pos) % 2**32)
    for i, j in rng.integers(0, 64, (60, 2)):
        assert abs(out[i, j] - direct_resize_at(grid, 64, 64, i, j)) < 1e-10


def test_bicubic_random_grid_matches_direct(rng):
    grid = rng.uniform(0, 1, (4, 4))
    out = bicubic_resize(grid, 12, 20)
    for i in range(12):
        for j in range(20):
            assert abs(out[i, j] - direct_resize_at(grid, 12, 20, i, j)) < 1e-10


def test_bicubic_output_nonnegative(rng):
    grid = np.zeros((8, 8))
    grid[4, 4] = 1.0  # the kernel's negative lobes would dip below zero
    assert bicubic_resize(grid, 64, 64).min() == 0.0


def test_bicubic_rejects_bad_shapes():
    with pytest.raises(ValueError):
        bicubic_resize(np.ones((1, 4)), 8, 8)
    with pytest.raises(ValueError):
        bicubic_resize(np.ones((8, 8)), 4, 4)


def test_scores_to_grid_requires_square():
    assert scores_to_grid(np.arange(9)).shape == (3, 3)
    with pytest.raises(ValueError):
        scores_to_grid(np.arange(10))


@pytest.mark.parametrize("ratio,n,k", [(0.1, 64, 7), (0.1, 10, 1), (0.5, 64, 32), (1.0, 64, 64),
                                       (0.3, 10, 3), (0.01, 64, 1), (0.7, 10, 7)])
def test_topk_count_values(ratio, n, k):
    assert topk_count(ratio, n) == k


def test_topk_count_rejects_bad_ratio():
    for r in (0.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            topk_count(r, 64)


def test_topk_all_ties_selects_lowest_indices():
    m = topk_mask(np.ones(64), 0.1)
    np.testing.assert_array_equal(m.indices, np.arange(7))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=120),
       st.floats(0.01, 1.0))
def test_topk_properties(scores, ratio):
    s = np.array(scores)
    m = topk_mask(s, ratio)
    k = math.ceil(round(ratio * s.size, 9))
    assert m.k_count == min(max(k, 1), s.size)
    # every selected score beats or ties every unselected one, ties to the lower index
    sel, rest = m.indices, np.flatnonzero(~m.bits)
    if rest.size:
        assert s[sel].min() >= s[rest].max()
        cut = s[sel].min()
        tied_out = rest[s[rest] == cut]
        tied_in = sel[s[sel] == cut]
        if tied_out.size:
            assert tied_in.max() < tied_out.min()
    np.testing.assert_array_equal(topk_mask(s, ratio).bits, m.bits)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=16, max_size=16))
def test_topk_heavy_ties(values):
    s = np.array(values, dtype=float)
    m = topk_mask(s, 0.25)
    expect = sorted(range(16), key=lambda i: (-s[i], i))[:4]
    np.testing.assert_array_equal(m.indices, sorted(expect))


def test_mask_to_pixels_block_fill():
    bits = np.zeros(16, dtype=bool)
    bits[[0, 6]] = True
    px = mask_to_pixels(PatchMask(bits), 4, 4, 3)
    assert px.shape == (12, 12)
    for idx in range(16):
        gy, gx = divmod(idx, 4)
        block = px[gy * 3:(gy + 1) * 3, gx * 3:(gx + 1) * 3]
        assert np.all(block == float(bits[idx]))


def test_mask_to_pixels_size_mismatch():
    with pytest.raises(ValueError):
        mask_to_pixels(PatchMask(np.ones(10, dtype=bool)), 4, 4, 2)


def test_flatten_mask_broadcasts():
    bits = np.array([True, False, True])
    fm = flatten_mask(PatchMask(bits))
    assert fm.shape == (3, 1)
    np.testing.assert_array_equal((np.ones((3, 5)) * fm)[:, 0], [1, 0, 1])


def test_build_artifacts_consistent(rng):
    scores = rng.dirichlet(np.ones(64))
    art = build_artifacts(scores, 0.1, 8, 8, 8)
    assert art.weight_map.shape == (64, 64) and art.pixel_mask.shape == (64, 64)
    assert art.patch_mask.k_count == 7
    assert art.pixel_mask.sum() == 7 * 64
    np.testing.assert_array_equal(art.feature_mask[:, 0].astype(bool), art.patch_mask.bits)
    assert build_artifacts(scores, 0.1, 8, 8, 8, with_weight_map=False).weight_map is None
