from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shufflemamba import tensor as T
from shufflemamba.rng import RngStream
from shufflemamba.shuffle import (Permutation, adjacency_statistics, apply_inverse_shuffle,
                                  apply_shuffle, sample_permutation)
from shufflemamba.tensor import Tensor


def test_length_one_is_identity():
    assert sample_permutation(RngStream(0), 1).forward.tolist() == [0]


def test_rejects_empty():
    with pytest.raises(ValueError):
        sample_permutation(RngStream(0), 0)


def test_uniform_over_six_orders():
    s = RngStream(1, 2)
    n = 60_000
    counts = Counter(tuple(sample_permutation(s, 3).forward) for _ in range(n))
    assert len(counts) == 6
    for c in counts.values():
        assert abs(c / n - 1 / 6) <= 0.01


def test_deterministic():
    a = sample_permutation(RngStream(9, 4), 50).forward
    b = sample_permutation(RngStream(9, 4), 50).forward
    c = sample_permutation(RngStream(9, 5), 50).forward
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_hand_example():
    perm = Permutation.from_forward([2, 0, 1])
    assert perm.inverse.tolist() == [1, 2, 0]
    x = np.array([[10.0], [20.0], [30.0]])
    y = apply_shuffle(Tensor(x), perm).data
    assert y.ravel().tolist() == [30.0, 10.0, 20.0]
    assert np.array_equal(apply_inverse_shuffle(Tensor(y), perm).data, x)


def test_not_a_permutation():
    with pytest.raises(ValueError):
        Permutation.from_forward([0, 0, 1])


def test_length_mismatch():
    with pytest.raises(ValueError, match="length"):
        apply_shuffle(Tensor(np.zeros((4, 2))), Permutation.identity(5))


@given(st.integers(1, 80), st.integers(1, 6), st.integers(0, 2**32))
@settings(max_examples=40, deadline=None)
def test_roundtrip_bit_exact(L, D, seed):
    perm = sample_permutation(RngStream(seed), L)
    x = np.random.default_rng(seed).normal(size=(L, D))
    assert np.array_equal(apply_inverse_shuffle(apply_shuffle(Tensor(x), perm), perm).data, x)
    assert np.array_equal(apply_shuffle(apply_inverse_shuffle(Tensor(x), perm), perm).data, x)
    assert np.array_equal(perm.forward[perm.inverse], np.arange(L))


def test_batched_per_row_perms():
    s = RngStream(3)
    perms = [sample_permutation(s, 6) for _ in range(3)]
    x = np.random.default_rng(0).normal(size=(3, 6, 2))
    y = apply_shuffle(Tensor(x), perms).data
    for b in range(3):
        assert np.array_equal(y[b], x[b][perms[b].forward])
    assert np.array_equal(apply_inverse_shuffle(Tensor(y), perms).data, x)


def test_gradient_roundtrip():
    perm = sample_permutation(RngStream(4), 7)
    x = Tensor(np.random.default_rng(1).normal(size=(7, 3)), requires_grad=True)
    w = np.random.default_rng(2).normal(size=(7, 3))
    T.tsum(apply_shuffle(x, perm) * w).backward()
    assert np.array_equal(x.grad, w[perm.inverse])


def test_adjacency_two_tokens():
    stats = adjacency_statistics(2, 100, RngStream(5))
    assert stats[0, 1] == 1.0 and stats[1, 0] == 1.0


def test_adjacency_uniform_and_symmetric():
    L = 8
    stats = adjacency_statistics(L, 20_000, RngStream(6))
    assert np.array_equal(stats, stats.T)
    off = stats[~np.eye(L, dtype=bool)]
    assert np.all(np.abs(off - 2 / L) < 0.02)
    ordered = adjacency_statistics(L, 20_000, RngStream(6), ordered=True)
    assert np.all(np.abs(ordered[~np.eye(L, dtype=bool)] - 1 / L) < 0.015)


def test_serialization_roundtrip():
    perm = sample_permutation(RngStream(7), 20)
    back = Permutation.loads(perm.dumps())
    assert np.array_equal(back.forward, perm.forward)
    assert np.array_equal(back.inverse, perm.inverse)
