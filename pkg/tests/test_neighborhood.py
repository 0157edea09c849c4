import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from natkit.errors import ConfigurationError
from natkit.neighborhood import (
    NeighborhoodSpec,
    bias_starts,
    neighborhood_indices,
    rel_bias_index,
    window_start,
    window_starts,
)

kernels = st.sampled_from([3, 5, 7, 9, 11])


@pytest.mark.parametrize(
    "i,n,L,expected",
    [(0, 7, 3, (0, 3)), (3, 7, 3, (2, 3)), (6, 7, 3, (4, 3)), (2, 5, 7, (0, 5))],
)
def test_window_start_examples(i, n, L, expected):
    assert tuple(window_start(i, n, L)) == expected


@pytest.mark.parametrize("L", [1, 2, 4, 0, -3])
def test_bad_kernel_rejected(L):
    with pytest.raises(ConfigurationError):
        NeighborhoodSpec(L)
    with pytest.raises(ConfigurationError):
        window_start(0, 5, L)


def test_index_out_of_range():
    with pytest.raises(IndexError):
        window_start(5, 5, 3)
    with pytest.raises(IndexError):
        window_start(-1, 5, 3)


def test_full_coverage_3x3():
    got = neighborhood_indices(0, 0, 3, 3, 3)
    assert got == [(r, c) for r in range(3) for c in range(3)]


def test_interior_centered():
    assert neighborhood_indices(2, 2, 5, 5, 3) == [(r, c) for r in (1, 2, 3) for c in (1, 2, 3)]


def test_corner_query_not_centered():
    # bottom-left corner of a 5x5 map keeps a full 3x3 window, shifted inward
    got = neighborhood_indices(4, 0, 5, 5, 3)
    assert got == [(r, c) for r in (2, 3, 4) for c in (0, 1, 2)]
    assert got[4] != (4, 0)


def test_cardinality_non_square():
    assert len(neighborhood_indices(0, 0, 2, 9, 5)) == 2 * 5
    assert len(neighborhood_indices(3, 3, 9, 9, 5)) == 25


@pytest.mark.parametrize("i,p,L,expected", [(0, 2, 3, 4), (3, 2, 3, 1)])
def test_rel_bias_index_examples(i, p, L, expected):
    assert rel_bias_index(i, p, L) == expected


def test_rel_bias_index_right_corner():
    n = 8
    assert rel_bias_index(n - 1, n - 3, 3, n=n) == 0


def test_rel_bias_index_outside_window():
    with pytest.raises(IndexError):
        rel_bias_index(0, 3, 3, n=7)
    with pytest.raises(IndexError):
        rel_bias_index(0, 3, 3)


@given(st.integers(1, 40), kernels)
def test_window_properties(n, L):
    prev = 0
    for i in range(n):
        g = window_start(i, n, L)
        assert g.start >= prev
        assert g.start <= i < g.start + g.len
        assert g.len == min(L, n)
        assert 0 <= g.start <= n - g.len
        if L >= n:
            assert g == (0, n)
        half = (L - 1) // 2
        if half <= i < n - half:
            assert g.start == i - half
        prev = g.start


@given(st.integers(1, 30), kernels)
def test_vectorized_starts_agree(n, L):
    assert window_starts(n, L).tolist() == [window_start(i, n, L).start for i in range(n)]
    assert bias_starts(n, L).tolist() == [rel_bias_index(i, window_start(i, n, L).start, L, n) for i in range(n)]


@given(st.integers(3, 25), kernels)
def test_bias_index_image_is_full_range(n, L):
    if L > n:
        return
    seen = set()
    for i in range(n):
        g = window_start(i, n, L)
        for p in range(g.start, g.start + g.len):
            seen.add(rel_bias_index(i, p, L, n))
    assert seen == set(range(2 * L - 1))


@given(st.integers(7, 20), st.integers(7, 20), st.sampled_from([3, 5, 7]), st.data())
def test_interior_translation_covariance(H, W, L, data):
    half = (L - 1) // 2
    i = data.draw(st.integers(half, H - half - 1))
    j = data.draw(st.integers(half, W - half - 1))
    d = data.draw(st.integers(half - i, H - half - 1 - i))
    e = data.draw(st.integers(half - j, W - half - 1 - j))
    base = neighborhood_indices(i, j, H, W, L)
    moved = neighborhood_indices(i + d, j + e, H, W, L)
    assert moved == [(r + d, c + e) for r, c in base]


def test_equal_to_whole_map_when_kernel_large():
    H, W = 4, 6
    everything = [(r, c) for r in range(H) for c in range(W)]
    for i in range(H):
        for j in range(W):
            assert neighborhood_indices(i, j, H, W, 7) == everything
    assert np.all(window_starts(6, 7) == 0)
