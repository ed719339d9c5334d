import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poserec import numerics as nx
from poserec.errors import EmptyItemError, ShapeError
from poserec.item_encoder import N_FACTORS, ItemEncoder, ItemRecord, merge_factors


@pytest.fixture(scope="module")
def encoder():
    return ItemEncoder(np.random.default_rng(0), factor_dim=32)


def test_one_hot_weights_select_a_factor():
    f = np.random.default_rng(0).normal(size=(9, 16))
    w = np.zeros(9)
    w[0] = 1.0
    assert np.array_equal(merge_factors(f, w).data, f[0])


def test_identical_factors_scale_by_weight_sum():
    rng = np.random.default_rng(1)
    f = np.tile(rng.normal(size=16), (9, 1))
    w = rng.normal(size=9)
    np.testing.assert_allclose(merge_factors(f, w).data, w.sum() * f[0], atol=1e-12)


def test_merge_matches_component_loop():
    rng = np.random.default_rng(2)
    f, w = rng.normal(size=(9, 20)), rng.normal(size=9)
    expected = [sum(w[j] * f[j, c] for j in range(9)) for c in range(20)]
    np.testing.assert_allclose(merge_factors(f, w).data, expected, atol=1e-12)


def test_batched_merge_matches_single():
    rng = np.random.default_rng(3)
    f, w = rng.normal(size=(4, 9, 8)), rng.normal(size=9)
    batch = merge_factors(f, w).data
    for n in range(4):
        np.testing.assert_allclose(batch[n], merge_factors(f[n], w).data, atol=1e-14)


def test_all_masked_raises():
    with pytest.raises(EmptyItemError):
        merge_factors(np.ones((9, 4)), np.ones(9), mask=np.zeros(9, dtype=bool))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 8), st.floats(-1e3, 1e3))
def test_mask_dominates_weight(j, value):
    rng = np.random.default_rng(j)
    f, w = rng.normal(size=(9, 8)), rng.normal(size=9)
    mask = np.ones(9, dtype=bool)
    mask[j] = False
    w2 = w.copy()
    w2[j] = value
    assert np.array_equal(merge_factors(f, w, mask).data, merge_factors(f, w2, mask).data)


def test_output_dims(encoder):
    item = ItemRecord("x", "cat", np.random.default_rng(0).normal(size=(N_FACTORS, 32)))
    emb = encoder.encode_item(item)
    assert emb.e_i.shape == (256,) and emb.e_ic.shape == (64,)


def test_zero_merge_gives_bias(encoder):
    rng = np.random.default_rng(0)
    enc = ItemEncoder(rng, factor_dim=32)
    enc.b2.data[:] = rng.normal(size=256)
    emb = enc.encode_item(ItemRecord("z", "cat", np.zeros((9, 32))))
    assert np.array_equal(emb.e_i.data, enc.b2.data)


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3))
def test_projection_is_affine(alpha, beta):
    rng = np.random.default_rng(5)
    enc = ItemEncoder(rng, factor_dim=32)
    enc.b2.data[:] = rng.normal(size=256)
    enc.b3.data[:] = rng.normal(size=64)
    s1, s2 = rng.normal(size=32), rng.normal(size=32)
    mix = enc.project(alpha * s1 + beta * s2)
    p1, p2 = enc.project(s1), enc.project(s2)
    for head, bias in (("e_i", enc.b2.data), ("e_ic", enc.b3.data)):
        want = alpha * getattr(p1, head).data + beta * getattr(p2, head).data - (alpha + beta - 1) * bias
        np.testing.assert_allclose(getattr(mix, head).data, want, atol=1e-9)


def test_gradcheck_through_both_heads():
    rng = np.random.default_rng(8)
    enc = ItemEncoder(rng, factor_dim=12, embed_dim=8, proto_dim=4)
    f = rng.normal(size=(3, 9, 12))
    wi, wc = rng.normal(size=(3, 8)), rng.normal(size=(3, 4))

    def forward():
        emb = enc.encode(f)
        return nx.tsum(emb.e_i * wi) + nx.tsum(emb.e_ic * wc)

    report = nx.gradcheck(forward, enc.parameters())
    assert report.max_rel_error < 1e-6, report.per_param


def test_initial_weights_average_factors(encoder):
    np.testing.assert_allclose(encoder.w.data, 1 / 9)


def test_bad_factor_shape(encoder):
    with pytest.raises(ShapeError):
        encoder.encode(np.zeros((8, 32)))
    with pytest.raises(ShapeError):
        ItemRecord("x", "c", np.zeros(9))
