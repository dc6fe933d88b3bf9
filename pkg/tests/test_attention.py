import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rtlab.attention import (
    BiasSpec, EmptyAttentionError, SoftmaxAccumulator, acc_finalize, acc_update_tile, alibi_slopes,
    attn_reference,
)
from rtlab.core_math import ShapeError


def absorb_all(q, keys, values, splits, bias=None, pos_q=0, pos_kv=None):
    acc = SoftmaxAccumulator.fresh(values.shape[1])
    start = 0
    for stop in list(splits) + [len(keys)]:
        if stop > start:
            pk = None if pos_kv is None else pos_kv[start:stop]
            acc = acc_update_tile(acc, q, keys[start:stop], values[start:stop], bias, pos_q, pk)
        start = stop
    return acc_finalize(acc)


def test_single_pair_returns_its_value():
    v = np.array([[1.0, -2.0, 3.0]])
    np.testing.assert_array_equal(attn_reference(np.ones((1, 3)), v, np.ones(3)), v[0])


def test_two_pairs_sigmoid_oracle():
    t = 3.0
    keys = np.array([[t, 0.0], [0.0, 0.0]])
    q = np.array([1.0, 0.0])
    values = np.eye(2)
    sig = 1 / (1 + np.exp(-t))
    np.testing.assert_allclose(attn_reference(keys, values, q), [sig, 1 - sig], rtol=1e-14)
    np.testing.assert_allclose(absorb_all(q, keys, values, [1]), [sig, 1 - sig], rtol=1e-14)


def test_reference_rejects_empty_and_bad_shapes():
    with pytest.raises(ValueError):
        attn_reference(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(2))
    with pytest.raises(ShapeError):
        attn_reference(np.zeros((2, 2)), np.zeros((3, 2)), np.zeros(2))


def test_large_logits_stay_finite():
    keys = np.array([[1000.0], [999.0]])
    out = attn_reference(keys, np.eye(2), np.array([1.0]))
    np.testing.assert_allclose(out, [1 / (1 + np.exp(-1)), 1 / (1 + np.exp(1))])


def test_finalize_empty_raises():
    with pytest.raises(EmptyAttentionError):
        acc_finalize(SoftmaxAccumulator.fresh(3))


def test_empty_tile_rejected():
    with pytest.raises(ValueError):
        acc_update_tile(SoftmaxAccumulator.fresh(2), np.ones(2), np.zeros((0, 2)), np.zeros((0, 2)))


def test_tiles_then_concat_match(rng):
    q, keys, values = rng.normal(size=4), rng.normal(size=(8, 4)), rng.normal(size=(8, 3))
    np.testing.assert_allclose(absorb_all(q, keys, values, [3]), absorb_all(q, keys, values, []), atol=1e-12)


def test_low_tile_keeps_max(rng):
    q = np.array([1.0, 0.0])
    acc = acc_update_tile(SoftmaxAccumulator.fresh(2), q, np.array([[5.0, 0.0]]), np.ones((1, 2)))
    acc2 = acc_update_tile(acc, q, np.array([[-3.0, 0.0]]), np.ones((1, 2)))
    assert acc2.m == acc.m == 5.0


def test_random_16_pairs_match_reference(rng):
    q, keys, values = rng.normal(size=8), rng.normal(size=(16, 8)), rng.normal(size=(16, 8))
    np.testing.assert_allclose(absorb_all(q, keys, values, [2, 7, 8, 13]),
                               attn_reference(keys, values, q), atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 100_000), n=st.integers(1, 64), d=st.integers(1, 8), data=st.data())
def test_tile_partition_and_order_invariance(seed, n, d, data):
    rng = np.random.default_rng(seed)
    q, keys, values = rng.normal(size=d), rng.normal(size=(n, d)), rng.normal(size=(n, d))
    perm = rng.permutation(n)
    splits = sorted(data.draw(st.lists(st.integers(1, max(n - 1, 1)), max_size=6, unique=True)))
    out = absorb_all(q, keys[perm], values[perm], [s for s in splits if s < n])
    ref = attn_reference(keys, values, q)
    np.testing.assert_allclose(out, ref, atol=1e-12, rtol=0)
    # convex combination of the values
    assert np.all(out >= values.min(axis=0) - 1e-12)
    assert np.all(out <= values.max(axis=0) + 1e-12)


def test_bias_shift_invariance(rng):
    q, keys, values = rng.normal(size=4), rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    shifted = np.concatenate([keys, np.ones((6, 1))], axis=1)
    qs = np.concatenate([q, [7.5]])  # adds 7.5 to every logit
    np.testing.assert_allclose(attn_reference(shifted, values, qs), attn_reference(keys, values, q), atol=1e-12)


def test_alibi_values_and_slopes():
    assert alibi_slopes(2) == [2.0 ** -4, 2.0 ** -8]
    b = BiasSpec("alibi", slope=0.5).matrix([5], np.arange(6))
    np.testing.assert_allclose(b[0], [-2.5, -2.0, -1.5, -1.0, -0.5, 0.0])
    capped = BiasSpec("alibi", slope=1.0).matrix([20], [0])
    assert capped[0, 0] == -8.0
    assert BiasSpec("alibi").for_head(1, 2).slope == 2.0 ** -8


def test_prev_token_bias_and_none():
    b = BiasSpec("prev_token", strength=4.0).matrix([3], np.arange(4))
    np.testing.assert_array_equal(b[0], [0, 0, 4.0, 0])
    assert BiasSpec().matrix([0], [0]) is None
    with pytest.raises(ValueError):
        BiasSpec("rope")


def test_bias_in_tiles_matches_reference(rng):
    q, keys, values = rng.normal(size=4), rng.normal(size=(9, 4)), rng.normal(size=(9, 2))
    bias = BiasSpec("alibi", slope=0.3)
    pos = np.arange(9)
    np.testing.assert_allclose(absorb_all(q, keys, values, [4], bias, 9, pos),
                               attn_reference(keys, values, q, bias, 9, pos), atol=1e-12)
