import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mrgeo.maps import FeatureMap, View
from mrgeo.rgam import (
    SATELLITE_GRID,
    STREET_GRID,
    GridError,
    GridSpec,
    build_descriptor,
    partition_grid,
    pooled_descriptor,
)
from mrgeo.tensor import Region, Tensor


def fmap(arr, view=View.SATELLITE):
    return FeatureMap(Tensor(arr), view)


def test_partition_examples():
    assert [(r.top, r.left) for r in partition_grid(4, 4, SATELLITE_GRID)] == \
        [(0, 0), (0, 2), (2, 0), (2, 2)]
    assert all((r.height, r.width) == (2, 2) for r in partition_grid(4, 4, SATELLITE_GRID))
    street = partition_grid(2, 8, STREET_GRID)
    assert [(r.top, r.left, r.height, r.width) for r in street] == \
        [(0, 0, 2, 2), (0, 2, 2, 2), (0, 4, 2, 2), (0, 6, 2, 2)]
    with pytest.raises(GridError, match="divisible by 2"):
        partition_grid(3, 4, SATELLITE_GRID)


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4))
def test_partition_is_exact_cover(rows, cols, th, tw):
    h, w = rows * th, cols * tw
    cover = np.zeros((h, w), dtype=int)
    for r in partition_grid(h, w, GridSpec(rows, cols)):
        cover[r.top:r.top + r.height, r.left:r.left + r.width] += 1
    assert np.all(cover == 1)


def test_constant_regions_descriptor():
    x = np.zeros((1, 4, 4))
    for value, r in enumerate(partition_grid(4, 4, SATELLITE_GRID), start=1):
        x[0, r.top:r.top + r.height, r.left:r.left + r.width] = value
    d = build_descriptor(fmap(x), SATELLITE_GRID, normalize=False)
    assert d.values.data.tolist() == [1.0, 2.0, 3.0, 4.0] and not d.normalized


@pytest.mark.parametrize("c", [1, 4, 32, 768])
def test_descriptor_length_is_four_c(c):
    x = fmap(np.random.default_rng(c).normal(size=(c, 2, 2)))
    assert build_descriptor(x, SATELLITE_GRID).dim == 4 * c
    assert build_descriptor(FeatureMap(Tensor(np.ones((c, 1, 4))), View.STREET),
                            STREET_GRID).dim == 4 * c


def test_paper_scale_descriptor_is_3072():
    assert build_descriptor(fmap(np.ones((768, 2, 2))), SATELLITE_GRID).dim == 3072


def test_normalized_descriptor_has_unit_norm():
    d = build_descriptor(fmap(np.random.default_rng(0).normal(size=(5, 4, 4))), SATELLITE_GRID)
    assert abs(np.linalg.norm(d.values.data) - 1.0) <= 1e-9


def _swap(x, a: Region, b: Region):
    out = x.copy()
    sa = np.s_[:, a.top:a.top + a.height, a.left:a.left + a.width]
    sb = np.s_[:, b.top:b.top + b.height, b.left:b.left + b.width]
    out[sa], out[sb] = x[sb], x[sa]
    return out


def test_block_swap_swaps_only_those_blocks():
    c = 3
    x = np.random.default_rng(1).normal(size=(c, 4, 4))
    regions = partition_grid(4, 4, SATELLITE_GRID)
    base = build_descriptor(fmap(x), SATELLITE_GRID, normalize=False).values.data.reshape(4, c)
    swapped = build_descriptor(fmap(_swap(x, regions[1], regions[2])), SATELLITE_GRID,
                               normalize=False).values.data.reshape(4, c)
    assert np.array_equal(swapped[[0, 3]], base[[0, 3]])
    assert np.array_equal(swapped[1], base[2]) and np.array_equal(swapped[2], base[1])


@given(st.integers(0, 3), st.integers(0, 2**32 - 1))
def test_region_locality(j, seed):
    rng = np.random.default_rng(seed)
    c = 2
    x = rng.normal(size=(c, 4, 4))
    r = partition_grid(4, 4, SATELLITE_GRID)[j]
    y = x.copy()
    y[:, r.top:r.top + r.height, r.left:r.left + r.width] += rng.normal(size=(c, 2, 2))
    dx = build_descriptor(fmap(x), SATELLITE_GRID, normalize=False).values.data.reshape(4, c)
    dy = build_descriptor(fmap(y), SATELLITE_GRID, normalize=False).values.data.reshape(4, c)
    untouched = [i for i in range(4) if i != j]
    assert np.array_equal(dx[untouched], dy[untouched])


def test_order_sensitivity():
    x = np.random.default_rng(2).normal(size=(2, 4, 4))
    regions = partition_grid(4, 4, SATELLITE_GRID)
    a = build_descriptor(fmap(x), SATELLITE_GRID).values.data
    b = build_descriptor(fmap(_swap(x, regions[0], regions[3])), SATELLITE_GRID).values.data
    assert not np.allclose(a, b)


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**32 - 1))
def test_pooling_linearity(a, b, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(2, 2, 8)), rng.normal(size=(2, 2, 8))

    def d(arr):
        return build_descriptor(fmap(arr, View.STREET), STREET_GRID, normalize=False).values.data

    np.testing.assert_allclose(d(a * x + b * y), a * d(x) + b * d(y), atol=1e-12)


def test_pooled_descriptor_has_length_c():
    out = pooled_descriptor(Tensor(np.random.default_rng(3).normal(size=(6, 4, 4))))
    assert out.shape == (6,) and abs(np.linalg.norm(out.data) - 1) < 1e-12
