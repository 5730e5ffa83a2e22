import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mrgeo import tensor as T
from mrgeo.gradcheck import random_sarm, sarm_suite
from mrgeo.maps import FeatureMap, View
from mrgeo.sarm import (
    SarmParams,
    fixed_ratio_fusion,
    gate_values,
    gated_fusion,
    global_attention,
    local_attention,
    sarm_forward,
    window_mask,
)
from mrgeo.tensor import ShapeError, Tensor

from oracles import attention_loop, gated_fusion_loop, window_loop


def fmap(arr, view=View.STREET):
    return FeatureMap(Tensor(arr), view)


def params(c, k=3, seed=0):
    return random_sarm(c, k, np.random.default_rng(seed))


def tied(c, k, seed=0):
    """Local branch sharing the global branch's projection values."""
    p = params(c, k, seed)
    return SarmParams(p.wq_global, p.wk_global, p.wv_global, Tensor(p.wq_global.data),
                      Tensor(p.wk_global.data), Tensor(p.wv_global.data), p.gate_weight,
                      p.gate_bias, k=k)


def test_singleton_map_returns_value_projection():
    p = params(3)
    x = np.random.default_rng(1).normal(size=(3, 1, 1))
    out = global_attention(fmap(x), p).values.data
    np.testing.assert_allclose(out[:, 0, 0], x[:, 0, 0] @ p.wv_global.data, atol=1e-15)


def test_constant_map_gives_constant_output():
    p = params(2)
    x = np.broadcast_to(np.array([0.3, -1.2])[:, None, None], (2, 3, 4)).copy()
    out = global_attention(fmap(x), p).values.data
    np.testing.assert_allclose(out, np.broadcast_to(out[:, :1, :1], out.shape), atol=1e-14)


def test_global_attention_matches_loop_2x2():
    p = params(2, seed=3)
    x = np.random.default_rng(4).normal(size=(2, 2, 2))
    expected = attention_loop(x, p.wq_global.data, p.wk_global.data, p.wv_global.data)
    np.testing.assert_allclose(global_attention(fmap(x), p).values.data, expected, atol=1e-10)


def test_local_k1_attends_only_to_self():
    p = params(3, k=1)
    x = np.random.default_rng(5).normal(size=(3, 3, 4))
    out = local_attention(fmap(x), p).values.data
    expected = np.einsum("chw,cd->dhw", x, p.wv_local.data)
    np.testing.assert_allclose(out, expected, atol=1e-14)


def test_corner_window_is_clipped_2x2():
    mask = window_mask((3, 3), 3)
    assert mask[0].sum() == 4
    assert sorted(divmod(j, 3) for j in np.flatnonzero(mask[0])) == window_loop(3, 3, 3, 0, 0)
    p = params(2, k=3, seed=6)
    x = np.random.default_rng(7).normal(size=(2, 3, 3))
    expected = attention_loop(x, p.wq_local.data, p.wk_local.data, p.wv_local.data, window=3)
    np.testing.assert_allclose(local_attention(fmap(x), p).values.data, expected, atol=1e-10)


@given(st.integers(1, 5), st.integers(1, 5), st.sampled_from([1, 3, 5]))
def test_window_mask_matches_enumeration(h, w, k):
    mask = window_mask((h, w), k)
    for i in range(h * w):
        r, s = divmod(i, w)
        assert sorted(divmod(j, w) for j in np.flatnonzero(mask[i])) == window_loop(h, w, k, r, s)


@pytest.mark.parametrize("shape", [(2, 3, 3), (3, 2, 4), (2, 4, 1)])
def test_covering_window_equals_global(shape):
    c, h, w = shape
    k = 2 * max(h, w) - 1
    p = tied(c, k, seed=8)
    x = fmap(np.random.default_rng(9).normal(size=shape))
    np.testing.assert_allclose(local_attention(x, p).values.data,
                               global_attention(x, p).values.data, atol=1e-10)


def test_even_window_rejected():
    with pytest.raises(ValueError, match="odd"):
        params(2, k=2)
    with pytest.raises(ValueError):
        window_mask((3, 3), 4)


def test_channel_mismatch_rejected():
    with pytest.raises(ShapeError):
        global_attention(fmap(np.zeros((3, 2, 2))), params(2))


def test_global_attention_permutation_equivariant():
    p = params(2, seed=10)
    x = np.random.default_rng(11).normal(size=(2, 2, 2))
    base = global_attention(fmap(x), p).values.data.reshape(2, 4)
    for perm in itertools.permutations(range(4)):
        xp = x.reshape(2, 4)[:, perm].reshape(2, 2, 2)
        out = global_attention(fmap(xp), p).values.data.reshape(2, 4)
        np.testing.assert_allclose(out, base[:, perm], atol=1e-12)


# -- gate ----------------------------------------------------------------------

def _branches(c=3, seed=12):
    rng = np.random.default_rng(seed)
    return fmap(rng.normal(size=(c, 2, 3))), fmap(rng.normal(size=(c, 2, 3)))


def _with_gate(p, weight, bias):
    return SarmParams(p.wq_global, p.wk_global, p.wv_global, p.wq_local, p.wk_local,
                      p.wv_local, Tensor(weight), Tensor(bias), k=p.k)


@pytest.mark.parametrize("bias,expected_scale", [(-1e3, 0.0), (1e3, 1.0)])
def test_gate_limits(bias, expected_scale):
    o_l, o_h = _branches()
    p = params(3)
    p = _with_gate(p, p.gate_weight.data, np.full(3, bias))
    out = gated_fusion(o_l, o_h, p).values.data
    np.testing.assert_allclose(out, o_l.values.data + expected_scale * o_h.values.data,
                               rtol=0, atol=1e-9)


def test_zero_gate_is_half():
    o_l, o_h = _branches()
    p = _with_gate(params(3), np.zeros((6, 3)), np.zeros(3))
    out = gated_fusion(o_l, o_h, p).values.data
    np.testing.assert_allclose(out, o_l.values.data + 0.5 * o_h.values.data, atol=1e-15)


def test_gated_fusion_matches_loop():
    o_l, o_h = _branches(seed=13)
    p = params(3, seed=14)
    expected = gated_fusion_loop(o_l.values.data, o_h.values.data, p.gate_weight.data.tolist(),
                                 p.gate_bias.data.tolist())
    np.testing.assert_allclose(gated_fusion(o_l, o_h, p).values.data, expected, atol=1e-12)


@settings(max_examples=30)
@given(st.integers(0, 10_000))
def test_gate_strictly_inside_unit_interval_and_fusion_bracketed(seed):
    rng = np.random.default_rng(seed)
    o_l = Tensor(rng.normal(size=(6, 3)))
    o_h = Tensor(np.abs(rng.normal(size=(6, 3))))
    p = params(3, seed=seed)
    g = gate_values(o_l, o_h, p).data
    assert np.all((g > 0) & (g < 1))
    fused = o_l.data + g * o_h.data
    assert np.all(fused >= o_l.data) and np.all(fused <= o_l.data + o_h.data)


def test_forward_with_closed_gate_equals_global():
    p = params(3, seed=15)
    p = _with_gate(p, p.gate_weight.data, np.full(3, -1e3))
    x = fmap(np.random.default_rng(16).normal(size=(3, 3, 3)))
    np.testing.assert_allclose(sarm_forward(x, p).values.data,
                               global_attention(x, p).values.data, atol=1e-9)


def test_identity_projections_on_single_position():
    c = 2
    eye = np.eye(c)
    rng = np.random.default_rng(17)
    gw, gb = rng.normal(size=(2 * c, c)), rng.normal(size=c)
    p = SarmParams(*(Tensor(eye) for _ in range(6)), Tensor(gw), Tensor(gb), k=3)
    x = rng.normal(size=c)
    out = sarm_forward(fmap(x.reshape(c, 1, 1)), p).values.data.reshape(c)
    gate = 1 / (1 + np.exp(-(np.concatenate([x, x]) @ gw + gb)))
    np.testing.assert_allclose(out, x + gate * x, atol=1e-14)


def test_fixed_ratio_fusion_examples():
    o_l, o_h = _branches()
    np.testing.assert_array_equal(fixed_ratio_fusion(o_l, o_h, 1, 0).values.data, o_l.values.data)
    np.testing.assert_array_equal(fixed_ratio_fusion(o_l, o_h, 0, 1).values.data, o_h.values.data)
    ones = fmap(np.ones((2, 2, 2)))
    np.testing.assert_array_equal(fixed_ratio_fusion(ones, ones, 2, 1).values.data, 3.0)
    with pytest.raises(ValueError):
        fixed_ratio_fusion(o_l, o_h, -1, 1)


def test_fusion_shape_mismatch():
    with pytest.raises(ShapeError):
        gated_fusion(fmap(np.zeros((3, 2, 2))), fmap(np.zeros((3, 2, 3))), params(3))


def test_batched_forward_matches_per_item():
    p = params(3, seed=18)
    x = np.random.default_rng(19).normal(size=(2, 3, 2, 4))
    batched = sarm_forward(fmap(x), p).values.data
    for b in range(2):
        np.testing.assert_allclose(batched[b], sarm_forward(fmap(x[b]), p).values.data,
                                   atol=1e-13)


def test_all_sarm_gradients_pass_fd():
    results = sarm_suite()
    assert results and all(r.passed() for r in results), [r for r in results if not r.passed()]
    assert {r.case for r in results} >= {"2x3x3 k=3"}
