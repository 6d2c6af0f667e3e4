import os
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shufflemamba import io
from shufflemamba import tensor as T
from shufflemamba.rng import RngStream, rng_uniform
from shufflemamba.tensor import Tensor, gradcheck

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


def triple_loop(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


class TestMatmul:
    def test_identity(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(T.matmul(Tensor(np.eye(2)), Tensor(x)).data, x)

    def test_row_times_column(self):
        assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]

    def test_against_triple_loop(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        assert np.max(np.abs(T.matmul(Tensor(a), Tensor(b)).data - triple_loop(a, b))) < 1e-12

    @given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31))
    @settings(max_examples=30, deadline=None)
    def test_associativity(self, m, k, n, q, seed):
        rng = np.random.default_rng(seed)
        a, b, c = (Tensor(rng.normal(size=s)) for s in ((m, k), (k, n), (n, q)))
        lhs = T.matmul(T.matmul(a, b), c).data
        rhs = T.matmul(a, T.matmul(b, c)).data
        oracle = triple_loop(triple_loop(a.data, b.data), c.data)
        assert np.max(np.abs(lhs - rhs)) < 1e-10
        assert np.max(np.abs(lhs - oracle)) < 1e-10

    def test_shape_mismatch_names_both(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_batched_broadcast_grad(self):
        rng = np.random.default_rng(1)
        a = Tensor(rng.normal(size=(2, 3, 4)))
        b = Tensor(rng.normal(size=(4, 2)))
        gradcheck(lambda: T.tsum(T.matmul(a, b) ** 2), [a, b])


class TestDepthwiseConv:
    def test_delta_kernel_is_identity(self):
        x = np.random.default_rng(0).normal(size=(3, 5, 6))
        k = np.zeros((3, 3, 3))
        k[:, 1, 1] = 1.0
        assert np.array_equal(T.depthwise_conv(Tensor(x), Tensor(k)).data, x)

    def test_hand_convolution(self):
        out = T.depthwise_conv(Tensor([[1.0, 2.0, 3.0]]), Tensor([[1.0, 1.0, 1.0]]))
        assert out.data.tolist() == [[3.0, 6.0, 5.0]]

    def test_channels_independent(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(2, 6, 6))
        k = Tensor(rng.normal(size=(2, 3, 3)))
        base = T.depthwise_conv(Tensor(x), k).data
        x2 = x.copy()
        x2[0] += rng.normal(size=(6, 6))
        out = T.depthwise_conv(Tensor(x2), k).data
        assert np.array_equal(out[1], base[1])
        assert not np.array_equal(out[0], base[0])

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            T.depthwise_conv(Tensor(np.ones((1, 5))), Tensor(np.ones((1, 2))))

    @pytest.mark.parametrize("shape,kshape", [((2, 3, 7), (3, 3)), ((2, 3, 5, 4), (3, 3, 3)),
                                              ((1, 2, 6, 6), (2, 5, 5))])
    def test_gradcheck(self, shape, kshape):
        rng = np.random.default_rng(3)
        x, k = Tensor(rng.normal(size=shape)), Tensor(rng.normal(size=kshape))
        w = rng.normal(size=shape)
        gradcheck(lambda: T.tsum(T.depthwise_conv(x, k) * w), [x, k])

    def test_valid_padding_gradcheck(self):
        rng = np.random.default_rng(4)
        x, k = Tensor(rng.normal(size=(1, 2, 6, 7))), Tensor(rng.normal(size=(2, 3, 3)))
        gradcheck(lambda: T.tsum(T.depthwise_conv(x, k, padding="valid") ** 2), [x, k])


def test_conv2d_gradcheck():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(2, 3, 4, 5)))
    w = Tensor(rng.normal(size=(2, 3, 3, 3)))
    b = Tensor(rng.normal(size=2))
    gradcheck(lambda: T.tsum(T.conv2d(x, w, b) ** 2), [x, w, b])


def test_conv2d_matches_loop():
    rng = np.random.default_rng(6)
    x, w = rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(3, 2, 3, 3))
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((1, 3, 4, 4))
    for o in range(3):
        for i in range(4):
            for j in range(4):
                ref[0, o, i, j] = np.sum(xp[0, :, i:i + 3, j:j + 3] * w[o])
    assert np.allclose(T.conv2d(Tensor(x), Tensor(w)).data, ref, atol=1e-12)


class TestLayerNorm:
    def test_constant_vector(self):
        out = T.layer_norm(Tensor(np.full(4, 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
        assert np.array_equal(out.data, np.zeros(4))

    def test_two_values(self):
        out = T.layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
        assert np.allclose(out.data, [-1.0, 1.0], atol=1e-10)

    def test_moments(self):
        x = Tensor(np.random.default_rng(7).normal(size=(5, 16)))
        out = T.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16)), eps=1e-6).data
        assert np.all(np.abs(out.mean(-1)) < 1e-7)
        assert np.all(np.abs(out.var(-1) - 1.0) < 1e-4)

    def test_gradcheck(self):
        rng = np.random.default_rng(8)
        x, g, b = Tensor(rng.normal(size=(3, 6))), Tensor(rng.normal(size=6)), Tensor(rng.normal(size=6))
        w = rng.normal(size=(3, 6))
        gradcheck(lambda: T.tsum(T.layer_norm(x, g, b) * w), [x, g, b])


class TestActivations:
    def test_values(self):
        zero = Tensor(np.zeros(1))
        assert T.silu(zero).data[0] == 0.0
        assert T.sigmoid(zero).data[0] == 0.5
        assert abs(T.softplus(zero).data[0] - np.log(2.0)) < 1e-15

    @pytest.mark.parametrize("op", [T.silu, T.sigmoid, T.softplus, T.exp, T.tabs])
    def test_gradcheck(self, op):
        x = Tensor(np.random.default_rng(9).normal(size=(4, 3)) * 2 + 0.1)
        gradcheck(lambda: T.tsum(op(x) * x), [x])

    def test_softplus_large_inputs_finite(self):
        assert np.isfinite(T.softplus(Tensor([800.0, -800.0])).data).all()


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(5.0), requires_grad=True)
        T.tsum(x).backward()
        assert np.array_equal(x.grad, np.ones(5))

    def test_square(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        T.tsum(x * x).backward()
        assert x.grad.tolist() == [2.0, 4.0]

    def test_non_scalar_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            (x * 2.0).backward()

    def test_reused_node_accumulates(self):
        x = Tensor([3.0], requires_grad=True)
        y = x * x
        T.tsum(y + y * x).backward()
        assert np.allclose(x.grad, 2 * 3.0 + 3 * 9.0)

    def test_composite_gradcheck(self):
        rng = np.random.default_rng(10)
        a = Tensor(rng.normal(size=(3, 4)))
        b = Tensor(rng.normal(size=(4,)))
        c = Tensor(rng.uniform(0.5, 2.0, size=(3, 1)))

        def f():
            h = T.silu(T.matmul(a, T.reshape(b, (4, 1))) / c)
            z = T.concat([h, T.transpose(a, (1, 0))[:3, :1]], axis=1)
            return T.mean(T.softplus(z) * T.sqrt(c)) + T.tsum(T.log(c) ** 2)

        gradcheck(f, [a, b, c])

    def test_getitem_fancy_index_accumulates(self):
        x = Tensor(np.arange(4.0), requires_grad=True)
        T.tsum(x[np.array([0, 0, 2])]).backward()
        assert x.grad.tolist() == [2.0, 0.0, 1.0, 0.0]

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with T.no_grad():
            y = x * 2.0
        assert not y.requires_grad and y._parents == ()

    @pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
    def test_debug_mode_flags_nan(self):
        T.set_debug(True)
        try:
            with pytest.raises(FloatingPointError, match="log"):
                T.log(Tensor([-1.0]))
        finally:
            T.set_debug(False)


class TestRng:
    def test_same_stream_same_values(self):
        assert np.array_equal(rng_uniform(RngStream(3, 1), 32), rng_uniform(RngStream(3, 1), 32))

    def test_streams_differ(self):
        a, b = RngStream(3, 1).uniform(16), RngStream(3, 2).uniform(16)
        assert not np.any(a == b)

    def test_mean(self):
        assert 0.49 <= RngStream(11, 0).uniform(100_000).mean() <= 0.51

    def test_counter_advances_and_replays(self):
        s = RngStream(5, 9)
        first = s.uniform(10)
        second = s.uniform(10)
        assert not np.array_equal(first[:8], second[:8])
        replay = RngStream(5, 9, counter=3)
        assert np.array_equal(replay.uniform(10), second)

    def test_golden_sequence(self):
        with open(os.path.join(FIXTURES, "rng_golden.txt")) as fh:
            for line in fh:
                seed, *vals = line.split()
                got = RngStream(int(seed), 7).uniform(16)
                assert got.tolist() == [float(v) for v in vals]


class TestTensorFiles:
    def test_layout(self, tmp_path):
        arr = np.arange(6, dtype=np.float32).reshape(2, 3)
        path = tmp_path / "a.smt"
        io.save_tensor(path, arr)
        raw = path.read_bytes()
        assert raw[:4] == b"SMT1"
        assert struct.unpack("<3I", raw[4:16]) == (2, 2, 3)
        assert np.array_equal(np.frombuffer(raw[16:], "<f4"), arr.ravel())
        assert np.array_equal(io.load_tensor(path), arr)

    def test_checkpoint_roundtrip(self, tmp_path):
        named = {"m.0.in_proj": np.ones((2, 3)), "head.0.bias": np.arange(4.0)}
        io.save_checkpoint(tmp_path / "c.smt", named)
        back = io.load_checkpoint(tmp_path / "c.smt")
        assert list(back) == list(named)
        for k in named:
            assert np.array_equal(back[k], named[k].astype(np.float32))

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOPE" + bytes(8))
        with pytest.raises(ValueError):
            io.load_tensor(tmp_path / "x")
