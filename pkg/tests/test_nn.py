"""Tests for the tensor kernels, gradients, Adam and checkpoints."""

import io

import numpy as np
import pytest

from trajseg.nn import (
    AdamState,
    CHECKPOINT_FORMAT,
    Tensor,
    adam_step,
    conv1d,
    dense,
    dropout,
    flatten,
    glorot_uniform,
    grad_check,
    hadamard,
    he_uniform,
    load_checkpoint,
    maxpool1d,
    ppp,
    relu,
    save_checkpoint,
    scale,
    sigmoid,
    weighted_sum,
)


def _t(data):
    return Tensor(np.asarray(data, dtype=np.float64))


class TestTensor:
    def test_float64_and_grad_shape(self):
        t = _t([[1, 2], [3, 4]])
        assert t.data.dtype == np.float64
        assert t.grad.shape == t.data.shape
        assert np.all(t.grad == 0.0)

    def test_backward_requires_scalar(self):
        with pytest.raises(ValueError):
            _t([1.0, 2.0]).backward()

    def test_shared_subgraph_accumulates(self):
        x = _t([1.0, 2.0, 3.0])
        a = scale(x, 2.0)
        b = scale(x, 3.0)
        total = weighted_sum(a, np.ones(3))
        total2 = weighted_sum(b, np.ones(3))
        joined = Tensor(
            total.data + total2.data, parents=(total, total2)
        )
        joined.backward_fn = lambda: (
            total.grad.__iadd__(joined.grad),
            total2.grad.__iadd__(joined.grad),
        )
        joined.backward()
        assert np.allclose(x.grad, 5.0)


class TestConv1d:
    def test_hand_example(self):
        x = _t([[[1.0, 2.0, 3.0]]])
        w = _t([[[1.0, 0.0, -1.0]]])
        b = _t([0.0])
        out = conv1d(x, w, b)
        assert out.data.shape == (1, 1, 1)
        assert out.data[0, 0, 0] == -2.0

    def test_zero_input_zero_bias(self):
        x = _t(np.zeros((2, 3, 8)))
        w = _t(np.random.default_rng(0).normal(size=(4, 3, 3)))
        b = _t(np.zeros(4))
        assert np.all(conv1d(x, w, b, padding=1).data == 0.0)

    def test_identity_kernel(self):
        rng = np.random.default_rng(1)
        x = _t(rng.normal(size=(1, 1, 7)))
        w = _t([[[0.0, 1.0, 0.0]]])
        b = _t([0.0])
        out = conv1d(x, w, b, padding=1)
        assert np.allclose(out.data, x.data)

    def test_linearity_in_x(self):
        rng = np.random.default_rng(2)
        xd = rng.normal(size=(2, 3, 10))
        w = _t(rng.normal(size=(4, 3, 3)))
        b = _t(np.zeros(4))
        out1 = conv1d(_t(xd), w, b, padding=1).data
        out2 = conv1d(_t(2.5 * xd), w, b, padding=1).data
        assert np.allclose(out2, 2.5 * out1)

    def test_stride_and_padding_shape(self):
        x = _t(np.zeros((1, 2, 11)))
        w = _t(np.zeros((3, 2, 4)))
        b = _t(np.zeros(3))
        out = conv1d(x, w, b, stride=2, padding=1)
        assert out.data.shape == (1, 3, (11 + 2 - 4) // 2 + 1)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ValueError):
            conv1d(_t(np.zeros((1, 2, 5))), _t(np.zeros((3, 4, 3))), _t(np.zeros(3)))

    def test_empty_output_rejected(self):
        with pytest.raises(ValueError):
            conv1d(_t(np.zeros((1, 1, 2))), _t(np.zeros((1, 1, 5))), _t(np.zeros(1)))


class TestMaxPool:
    def test_hand_example(self):
        out = maxpool1d(_t([[[1.0, 3.0, 2.0, 5.0]]]), size=2)
        assert list(out.data[0, 0]) == [3.0, 5.0]

    def test_constant(self):
        out = maxpool1d(_t(np.full((1, 2, 8), 4.2)), size=2)
        assert np.all(out.data == 4.2)

    def test_global(self):
        rng = np.random.default_rng(3)
        xd = rng.normal(size=(2, 3, 9))
        out = maxpool1d(_t(xd), size=9)
        assert np.allclose(out.data[:, :, 0], xd.max(axis=2))

    def test_overlapping_stride(self):
        out = maxpool1d(_t([[[1.0, 5.0, 2.0, 4.0]]]), size=2, stride=1)
        assert list(out.data[0, 0]) == [5.0, 5.0, 4.0]

    def test_odd_length_truncates(self):
        out = maxpool1d(_t([[[1.0, 2.0, 3.0, 4.0, 9.0]]]), size=2)
        assert list(out.data[0, 0]) == [2.0, 4.0]


class TestPpp:
    def test_window_equal_length_is_global(self):
        rng = np.random.default_rng(4)
        xd = rng.normal(size=(2, 3, 6))
        out = ppp(_t(xd), [6])
        pooled = out.data[:, 3:, :]
        assert np.allclose(pooled, xd.max(axis=2, keepdims=True))

    def test_window_one_copies(self):
        rng = np.random.default_rng(5)
        xd = rng.normal(size=(1, 2, 5))
        out = ppp(_t(xd), [1])
        assert np.allclose(out.data[:, 2:, :], xd)

    def test_hand_example(self):
        out = ppp(_t([[[1.0, 4.0, 2.0]]]), [3])
        assert list(out.data[0, 0]) == [1.0, 4.0, 2.0]
        assert list(out.data[0, 1]) == [4.0, 4.0, 4.0]

    def test_sliding_window_edges(self):
        out = ppp(_t([[[5.0, 1.0, 1.0, 1.0, 7.0]]]), [3])
        assert list(out.data[0, 1]) == [5.0, 5.0, 1.0, 7.0, 7.0]

    def test_channel_law(self):
        x = _t(np.zeros((2, 4, 10)))
        out = ppp(x, [3, 5, 10])
        assert out.data.shape == (2, 4 * 4, 10)

    def test_oversize_window_rejected(self):
        with pytest.raises(ValueError):
            ppp(_t(np.zeros((1, 1, 4))), [5])


class TestActivations:
    def test_sigmoid_values(self):
        out = sigmoid(_t([0.0, 1.0, 50.0, -50.0]))
        assert out.data[0] == 0.5
        assert out.data[1] == pytest.approx(0.7310585786, abs=1e-10)
        assert out.data[2] == pytest.approx(1.0, abs=1e-12)
        assert out.data[3] == pytest.approx(0.0, abs=1e-12)

    def test_sigmoid_no_overflow(self):
        out = sigmoid(_t([-1000.0, 1000.0]))
        assert np.all(np.isfinite(out.data))

    def test_relu(self):
        out = relu(_t([-2.0, 0.0, 3.0]))
        assert list(out.data) == [0.0, 0.0, 3.0]

    def test_dense_values(self):
        x = _t([[1.0, 2.0]])
        w = _t([[1.0, 0.0], [0.0, 1.0]])
        b = _t([10.0, 20.0])
        assert list(dense(x, w, b).data[0]) == [11.0, 22.0]


class TestDropout:
    def test_off_is_identity(self):
        x = _t([1.0, 2.0])
        assert dropout(x, 0.5, training=False) is x

    def test_p_zero_is_identity(self):
        x = _t([1.0, 2.0])
        assert dropout(x, 0.0, training=True) is x

    def test_training_scales_kept_units(self):
        rng = np.random.default_rng(6)
        x = _t(np.ones(10000))
        out = dropout(x, 0.5, training=True, rng=rng)
        kept = out.data[out.data != 0.0]
        assert np.allclose(kept, 2.0)
        assert abs(out.data.mean() - 1.0) < 0.1

    def test_requires_rng_when_training(self):
        with pytest.raises(ValueError):
            dropout(_t([1.0]), 0.5, training=True)

    def test_bad_rate_rejected(self):
        with pytest.raises(ValueError):
            dropout(_t([1.0]), 1.0, training=True, rng=np.random.default_rng(0))


class TestGradients:
    def _check(self, fn, tensors, tol=1e-4):
        report = grad_check(fn, tensors)
        assert report.ok(tol), f"max rel error {report.max_rel_error}"

    def test_conv1d(self):
        rng = np.random.default_rng(10)
        x = _t(rng.normal(size=(2, 3, 8)))
        w = _t(rng.normal(size=(4, 3, 3)))
        b = _t(rng.normal(size=4))
        c = rng.normal(size=(2, 4, 8))
        self._check(lambda x, w, b: weighted_sum(conv1d(x, w, b, padding=1), c), [x, w, b])

    def test_conv1d_strided(self):
        rng = np.random.default_rng(11)
        x = _t(rng.normal(size=(1, 2, 9)))
        w = _t(rng.normal(size=(3, 2, 4)))
        b = _t(rng.normal(size=3))
        c = rng.normal(size=(1, 3, 4))
        self._check(
            lambda x, w, b: weighted_sum(conv1d(x, w, b, stride=2, padding=1), c), [x, w, b]
        )

    def test_maxpool_fast_path(self):
        rng = np.random.default_rng(12)
        x = _t(rng.normal(size=(2, 3, 8)))
        c = rng.normal(size=(2, 3, 4))
        self._check(lambda x: weighted_sum(maxpool1d(x, 2), c), [x])

    def test_maxpool_overlapping(self):
        rng = np.random.default_rng(13)
        x = _t(rng.normal(size=(1, 2, 7)))
        c = rng.normal(size=(1, 2, 6))
        self._check(lambda x: weighted_sum(maxpool1d(x, 2, stride=1), c), [x])

    def test_ppp(self):
        rng = np.random.default_rng(14)
        x = _t(rng.normal(size=(2, 2, 6)))
        c = rng.normal(size=(2, 6, 6))
        self._check(lambda x: weighted_sum(ppp(x, [3, 6]), c), [x])

    def test_hadamard(self):
        rng = np.random.default_rng(34)
        x = _t(rng.normal(size=(2, 3, 5)))
        mask = (rng.random((2, 1, 5)) > 0.4).astype(float)
        c = rng.normal(size=(2, 3, 5))
        self._check(lambda x: weighted_sum(hadamard(x, mask), c), [x])

    def test_dense(self):
        rng = np.random.default_rng(15)
        x = _t(rng.normal(size=(3, 5)))
        w = _t(rng.normal(size=(5, 4)))
        b = _t(rng.normal(size=4))
        c = rng.normal(size=(3, 4))
        self._check(lambda x, w, b: weighted_sum(dense(x, w, b), c), [x, w, b])

    def test_sigmoid(self):
        rng = np.random.default_rng(16)
        x = _t(rng.normal(size=(4, 3)))
        c = rng.normal(size=(4, 3))
        self._check(lambda x: weighted_sum(sigmoid(x), c), [x])

    def test_relu_composite(self):
        rng = np.random.default_rng(17)
        # keep inputs away from the kink at 0
        xd = rng.normal(size=(2, 6))
        xd[np.abs(xd) < 0.05] += 0.1
        x = _t(xd)
        w = _t(rng.normal(size=(6, 3)))
        b = _t(rng.normal(size=3))
        c = rng.normal(size=(2, 3))
        self._check(lambda x, w, b: weighted_sum(relu(dense(x, w, b)), c), [x, w, b])

    def test_conv_relu_pool_composite(self):
        rng = np.random.default_rng(18)
        x = _t(rng.normal(size=(1, 2, 8)) + 0.2)
        w = _t(rng.normal(size=(3, 2, 3)))
        b = _t(rng.normal(size=3) + 0.3)
        c = rng.normal(size=(1, 3, 4))

        def fn(x, w, b):
            return weighted_sum(maxpool1d(relu(conv1d(x, w, b, padding=1)), 2), c)

        self._check(fn, [x, w, b])

    def test_dropout_training_grad(self):
        rng = np.random.default_rng(19)
        x = _t(rng.normal(size=(3, 4)))
        c = rng.normal(size=(3, 4))

        def fn(x):
            drop_rng = np.random.default_rng(7)
            return weighted_sum(dropout(x, 0.5, training=True, rng=drop_rng), c)

        self._check(fn, [x])

    def test_flatten_scale(self):
        rng = np.random.default_rng(20)
        x = _t(rng.normal(size=(2, 3, 4)))
        c = rng.normal(size=(2, 12))
        self._check(lambda x: weighted_sum(scale(flatten(x), 1.7), c), [x])


class TestAdam:
    def test_first_step_magnitude(self):
        # with bias correction the first update is ~lr regardless of g scale
        p = _t([100.0])
        p.grad[...] = 123.456
        state = AdamState.for_params([p], lr=0.001)
        adam_step([p], state)
        assert p.data[0] == pytest.approx(100.0 - 0.001, abs=1e-6)

    def test_quadratic_convergence(self):
        rng = np.random.default_rng(21)
        target = rng.normal(size=5)
        p = _t(np.zeros(5))
        state = AdamState.for_params([p], lr=0.05)
        for _ in range(500):
            p.zero_grad()
            p.grad[...] = 2.0 * (p.data - target)
            adam_step([p], state)
        assert np.max(np.abs(p.data - target)) < 1e-3

    def test_state_shape_mismatch_rejected(self):
        p = _t([1.0])
        state = AdamState.for_params([p, _t([2.0])], lr=0.01)
        with pytest.raises(ValueError):
            adam_step([p], state)


class TestInit:
    def test_glorot_bounds(self):
        rng = np.random.default_rng(22)
        w = glorot_uniform(rng, (50, 50), fan_in=50, fan_out=50)
        limit = np.sqrt(6.0 / 100)
        assert np.all(np.abs(w) <= limit)
        assert np.std(w) > 0.1 * limit

    def test_he_bounds(self):
        rng = np.random.default_rng(23)
        w = he_uniform(rng, (50, 50), fan_in=50)
        limit = np.sqrt(6.0 / 50)
        assert np.all(np.abs(w) <= limit)
        # uniform on (-limit, limit) has variance limit^2/3 = 2/fan_in
        assert abs(np.var(w) - 2.0 / 50) < 0.2 * (2.0 / 50)

    def test_hadamard_values_and_expand_rejected(self):
        x = _t([[1.0, -2.0], [3.0, 4.0]])
        out = hadamard(x, np.array([[0.0, 1.0], [1.0, 0.0]]))
        assert np.array_equal(out.data, [[0.0, -2.0], [3.0, 0.0]])
        with pytest.raises(ValueError):
            hadamard(_t([1.0, 2.0]), np.ones((3, 2)))


class TestCheckpoint:
    def _params(self):
        rng = np.random.default_rng(23)
        return [
            ("conv0.w", rng.normal(size=(4, 3, 3))),
            ("conv0.b", rng.normal(size=4)),
            ("head.w", rng.normal(size=(12, 17))),
        ]

    def test_round_trip(self):
        params = self._params()
        buf = io.BytesIO()
        save_checkpoint(buf, params, {"framework": "trajyolo"})
        buf.seek(0)
        meta, loaded = load_checkpoint(buf)
        assert meta["framework"] == "trajyolo"
        assert meta["n_params"] == 3
        for (n1, a1), (n2, a2) in zip(params, loaded):
            assert n1 == n2
            assert np.array_equal(a1, a2)

    def test_byte_deterministic(self):
        params = self._params()
        b1, b2 = io.BytesIO(), io.BytesIO()
        save_checkpoint(b1, params, {"x": 1})
        save_checkpoint(b2, params, {"x": 1})
        assert b1.getvalue() == b2.getvalue()

    def test_format_line(self):
        buf = io.BytesIO()
        save_checkpoint(buf, [], {})
        assert buf.getvalue().startswith(CHECKPOINT_FORMAT.encode() + b"\n")

    def test_bad_format_rejected(self):
        buf = io.BytesIO(b"other-format\n{}\n")
        with pytest.raises(ValueError):
            load_checkpoint(buf)

    def test_truncation_detected(self):
        buf = io.BytesIO()
        save_checkpoint(buf, self._params(), {})
        data = buf.getvalue()[:-20]
        with pytest.raises(ValueError):
            load_checkpoint(io.BytesIO(data))
