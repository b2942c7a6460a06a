"""Tensor-engine tests: forward oracles, gradient checks, and file format."""

import numpy as np
import pytest

from oracles import (
    bilinear_oracle,
    broadcast_mul_oracle,
    conv2d_oracle,
    fully_connected_oracle,
    inflate_kernel,
)
from roanet import _kernels
from roanet import tensor as T
from roanet.tensor import (
    BatchNormParams,
    EmptyOutput,
    IndivisibleExtent,
    ShapeMismatch,
    Tensor,
)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def away_from_kinks(rng, lo, hi, shape):
    """Coordinates with fractional parts in [0.2, 0.8] (no integer-grid kinks)."""
    base = rng.integers(int(np.floor(lo)), int(np.ceil(hi)) - 1, size=shape).astype(np.float64)
    return base + rng.uniform(0.2, 0.8, size=shape)


class TestConv2d:
    def test_scalar_kernel(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.full((1, 1, 1, 1), 2.0))
        out = T.conv2d(x, w)
        assert np.array_equal(out.data, np.full((1, 1, 3, 3), 2.0))

    def test_identity_kernel(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 5, 7)))
        w = np.zeros((3, 3, 3, 3))
        for c in range(3):
            w[c, c, 1, 1] = 1.0
        out = T.conv2d(x, Tensor(w), padding=1)
        assert np.array_equal(out.data, x.data)

    def test_matches_oracle_small(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 5, 5)))
        w = Tensor(rng.standard_normal((3, 2, 3, 3)))
        b = Tensor(rng.standard_normal(3))
        out = T.conv2d(x, w, b, padding=1)
        ref = conv2d_oracle(x.data, w.data, b.data, padding=1)
        assert np.abs(out.data - ref).max() < 1e-6

    def test_bit_exact_f64_sweep(self, rng):
        """Double precision equals the naive loop bit-for-bit on shapes up to 2x4x9x9."""
        for _ in range(30):
            n = int(rng.integers(1, 3))
            c = int(rng.integers(1, 5))
            o = int(rng.integers(1, 4))
            k = int(rng.choice([1, 3, 5]))
            stride = int(rng.integers(1, 3))
            padding = int(rng.integers(0, 3))
            dilation = int(rng.integers(1, 3))
            h = int(rng.integers(dilation * (k - 1) + 1, 10))
            w_ = int(rng.integers(dilation * (k - 1) + 1, 10))
            x = rng.standard_normal((n, c, h, w_))
            w = rng.standard_normal((o, c, k, k))
            b = rng.standard_normal(o)
            out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding, dilation)
            ref = conv2d_oracle(x, w, b, stride, padding, dilation)
            assert np.array_equal(out.data, ref)

    def test_f32_correctly_rounded(self, rng):
        """float32 output is the float64 sum rounded once: relative error ~2^-24.

        1e-6 is measured relative to the output magnitude (for unit-scale
        outputs that is an absolute 1e-6); no float32 op can beat its own ulp
        on large values.
        """
        x = rng.standard_normal((2, 4, 9, 9)).astype(np.float32)
        w = rng.standard_normal((3, 4, 7, 7)).astype(np.float32)
        out = T.conv2d(Tensor(x), Tensor(w), padding=3)
        ref = conv2d_oracle(x, w, padding=3)
        err = np.abs(out.data.astype(np.float64) - ref).max() / max(1.0, np.abs(ref).max())
        assert err < 1e-6

    def test_dilation_equals_inflated_kernel(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 12, 12)))
        w = rng.standard_normal((2, 2, 3, 3))
        out_d = T.conv2d(x, Tensor(w), padding=2, dilation=2)
        out_i = T.conv2d(x, Tensor(inflate_kernel(w, 2)), padding=2, dilation=1)
        assert np.allclose(out_d.data, out_i.data, rtol=0, atol=0)

    def test_channel_mismatch(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 5, 5)))
        w = Tensor(rng.standard_normal((1, 3, 3, 3)))
        with pytest.raises(ShapeMismatch):
            T.conv2d(x, w)

    def test_empty_output(self, rng):
        x = Tensor(rng.standard_normal((1, 1, 2, 2)))
        w = Tensor(rng.standard_normal((1, 1, 5, 5)))
        with pytest.raises(EmptyOutput):
            T.conv2d(x, w)

    def test_gradcheck_k7(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 9, 9)), requires_grad=True)
        w = Tensor(rng.standard_normal((2, 2, 7, 7)) * 0.2, requires_grad=True)
        b = Tensor(rng.standard_normal(2), requires_grad=True)
        err = T.grad_check(lambda: T.conv2d(x, w, b, padding=3), [x, w, b])
        assert err < 1e-4

    def test_gradcheck_strided_dilated(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 10, 11)), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.3, requires_grad=True)
        err = T.grad_check(lambda: T.conv2d(x, w, stride=2, padding=2, dilation=2), [x, w])
        assert err < 1e-4

    def test_fast_accumulation_mode(self, rng):
        """Fast mode stays within ordinary float32 rounding of the exact sum."""
        x = rng.standard_normal((1, 4, 8, 8)).astype(np.float32)
        w = rng.standard_normal((2, 4, 5, 5)).astype(np.float32)
        with T.fast_accumulation():
            out = T.conv2d(Tensor(x), Tensor(w), padding=2)
        ref = conv2d_oracle(x, w, padding=2)
        assert np.abs(out.data.astype(np.float64) - ref).max() < 1e-4


class TestBilinearSample:
    def test_on_grid_point(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 4, 5)))
        pts = Tensor(np.array([[[1.0, 2.0]]]))
        out = T.bilinear_sample(x, pts)
        assert np.array_equal(out.data[0, :, 0], x.data[0, :, 1, 2])

    def test_midpoint(self):
        x = Tensor(np.array([[[[0.0, 1.0]]]]))
        out = T.bilinear_sample(x, Tensor(np.array([[[0.0, 0.5]]])))
        assert out.data[0, 0, 0] == pytest.approx(0.5)

    def test_matches_oracle(self, rng):
        x = Tensor(rng.standard_normal((1, 1, 4, 4)))
        pts = Tensor(rng.uniform(-1.0, 4.0, (1, 40, 2)))
        out = T.bilinear_sample(x, pts)
        ref = bilinear_oracle(x.data, pts.data)
        assert np.abs(out.data - ref).max() < 1e-6

    def test_out_of_bounds_zero(self, rng):
        x = Tensor(rng.standard_normal((1, 3, 4, 4)))
        pts = Tensor(np.array([[[-5.0, -5.0], [100.0, 2.0]]]))
        out = T.bilinear_sample(x, pts)
        assert np.array_equal(out.data, np.zeros((1, 3, 2)))

    def test_numpy_fallback_matches_jit(self, rng, monkeypatch):
        if not _kernels.HAVE_NUMBA:
            pytest.skip("numba unavailable; fallback is already the active path")
        x = rng.standard_normal((2, 3, 5, 6))
        pts = rng.uniform(-1.0, 6.0, (2, 25, 2))
        fast = T.bilinear_sample(Tensor(x), Tensor(pts)).data
        monkeypatch.setattr(_kernels, "HAVE_NUMBA", False)
        slow = T.bilinear_sample(Tensor(x), Tensor(pts)).data
        assert np.allclose(fast, slow, atol=1e-12)

    def test_fallback_gradients_match_jit(self, rng, monkeypatch):
        if not _kernels.HAVE_NUMBA:
            pytest.skip("numba unavailable")
        x_data = rng.standard_normal((1, 2, 5, 5))
        p_data = away_from_kinks(rng, 0, 5, (1, 9, 2))

        def run():
            x = Tensor(x_data.copy(), requires_grad=True)
            p = Tensor(p_data.copy(), requires_grad=True)
            T.sum_all(T.bilinear_sample(x, p)).backward()
            return x.grad, p.grad

        gx_fast, gp_fast = run()
        monkeypatch.setattr(_kernels, "HAVE_NUMBA", False)
        gx_slow, gp_slow = run()
        assert np.allclose(gx_fast, gx_slow, atol=1e-12)
        assert np.allclose(gp_fast, gp_slow, atol=1e-12)

    def test_gradcheck_values_and_coords(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 6, 6)), requires_grad=True)
        pts = Tensor(away_from_kinks(rng, 0, 6, (1, 12, 2)), requires_grad=True)
        err = T.grad_check(lambda: T.bilinear_sample(x, pts), [x, pts])
        assert err < 1e-4

    def test_batch_mismatch(self, rng):
        x = Tensor(rng.standard_normal((2, 1, 4, 4)))
        with pytest.raises(ShapeMismatch):
            T.bilinear_sample(x, Tensor(np.zeros((1, 3, 2))))


class TestElementwise:
    def test_relu_sign_cases(self):
        out = T.relu(Tensor([-1.0, 0.0, 2.0]))
        assert np.array_equal(out.data, [0.0, 0.0, 2.0])

    def test_sigmoid_at_zero(self):
        assert T.sigmoid(Tensor([0.0])).data[0] == pytest.approx(0.5)

    def test_sigmoid_extremes_finite(self):
        out = T.sigmoid(Tensor([-1000.0, 1000.0]))
        assert np.all(np.isfinite(out.data))
        assert out.data[0] == pytest.approx(0.0)
        assert out.data[1] == pytest.approx(1.0)

    def test_broadcast_mul_matches_loop(self, rng):
        feats = rng.standard_normal((2, 3, 4, 5))
        gate = rng.standard_normal((2, 1, 4, 5))
        out = T.mul(Tensor(feats), Tensor(gate))
        assert np.abs(out.data - broadcast_mul_oracle(feats, gate)).max() < 1e-6

    def test_mul_linearity(self, rng):
        a = rng.standard_normal((3, 4))
        a2 = rng.standard_normal((3, 4))
        b = rng.standard_normal((3, 4))
        left = T.mul(Tensor(a + a2), Tensor(b)).data
        right = T.mul(Tensor(a), Tensor(b)).data + T.mul(Tensor(a2), Tensor(b)).data
        assert np.abs(left - right).max() < 1e-6

    def test_non_broadcastable(self, rng):
        with pytest.raises(ShapeMismatch):
            T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))

    def test_broadcast_gradients(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
        g = Tensor(rng.standard_normal((2, 1, 4, 4)), requires_grad=True)
        err = T.grad_check(lambda: T.mul(x, g), [x, g])
        assert err < 1e-8

    def test_elementwise_gradchecks(self, rng):
        x = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
        y = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
        assert T.grad_check(lambda: T.add(x, y), [x, y]) < 1e-8
        assert T.grad_check(lambda: T.sub(x, y), [x, y]) < 1e-8
        assert T.grad_check(lambda: T.scale(x, -2.5), [x]) < 1e-8
        assert T.grad_check(lambda: T.sigmoid(x), [x]) < 1e-4
        # relu/abs away from their kink at zero
        z = Tensor(np.sign(x.data) * (np.abs(x.data) + 0.5), requires_grad=True)
        assert T.grad_check(lambda: T.relu(z), [z]) < 1e-4
        assert T.grad_check(lambda: T.absolute(z), [z]) < 1e-4


class TestPoolResize:
    def test_constant_preservation(self):
        x = Tensor(np.full((1, 2, 4, 4), 3.25))
        assert np.allclose(T.global_avg_pool(x).data, 3.25)
        assert np.allclose(T.avg_downsample(x, 2).data, 3.25)
        assert np.allclose(T.bilinear_upsample(x, 2).data, 3.25)

    def test_global_avg_pool_mean(self):
        x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2))
        out = T.global_avg_pool(x)
        assert out.shape == (1, 1, 1, 1)
        assert out.data[0, 0, 0, 0] == pytest.approx(2.5)

    def test_indivisible_stride(self, rng):
        with pytest.raises(IndivisibleExtent):
            T.avg_downsample(Tensor(rng.standard_normal((1, 1, 5, 4))), 2)

    def test_round_trip_smooth_map(self, rng):
        """Upsample x2 then block-average recovers a smooth map within 10% of its range."""
        coarse = Tensor(rng.uniform(0.5, 1.5, (1, 1, 4, 6)))
        smooth = T.bilinear_upsample(coarse, 4).data
        x = Tensor(smooth)
        rt = T.avg_downsample(T.bilinear_upsample(x, 2), 2)
        rel = np.abs(rt.data - x.data).max() / np.abs(x.data).max()
        assert rel < 0.1

    def test_upsample_shapes_and_values(self):
        x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2))
        out = T.bilinear_upsample(x, 2)
        assert out.shape == (1, 1, 4, 4)
        # centre columns interpolate halfway between the two source columns
        assert out.data[0, 0, 0, 1] == pytest.approx(0.25)
        assert out.data[0, 0, 0, 2] == pytest.approx(0.75)

    def test_pool_gradchecks(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4, 6)), requires_grad=True)
        assert T.grad_check(lambda: T.global_avg_pool(x), [x]) < 1e-8
        assert T.grad_check(lambda: T.avg_downsample(x, 2), [x]) < 1e-8
        assert T.grad_check(lambda: T.bilinear_upsample(x, 3), [x]) < 1e-8


class TestFullyConnected:
    def test_identity(self, rng):
        x = Tensor(rng.standard_normal((4, 3)))
        out = T.fully_connected(x, Tensor(np.eye(3)))
        assert np.allclose(out.data, x.data)

    def test_zero_weight_bias_rows(self, rng):
        x = Tensor(rng.standard_normal((4, 3)))
        b = np.array([1.0, -2.0])
        out = T.fully_connected(x, Tensor(np.zeros((2, 3))), Tensor(b))
        assert np.allclose(out.data, np.tile(b, (4, 1)))

    def test_matches_oracle(self, rng):
        x = rng.standard_normal((2, 3))
        w = rng.standard_normal((4, 3))
        b = rng.standard_normal(4)
        out = T.fully_connected(Tensor(x), Tensor(w), Tensor(b))
        assert np.abs(out.data - fully_connected_oracle(x, w, b)).max() < 1e-6

    def test_inner_dim_mismatch(self, rng):
        with pytest.raises(ShapeMismatch):
            T.fully_connected(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))

    def test_gradcheck_linear_is_exact(self, rng):
        x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        w = Tensor(rng.standard_normal((2, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal(2), requires_grad=True)
        err = T.grad_check(lambda: T.fully_connected(x, w, b), [x, w, b])
        assert err < 1e-8


class TestBatchNorm:
    def test_identity_mode_passthrough(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4, 4)))
        assert T.batch_norm(x, BatchNormParams(3), mode="identity") is x

    def test_constant_input_gives_beta(self, rng):
        params = BatchNormParams(2, dtype=np.float64)
        params.beta.data[:] = [0.7, -0.3]
        x = Tensor(np.stack([np.full((4, 4), 5.0), np.full((4, 4), -1.0)])[None])
        out = T.batch_norm(x, params, mode="train")
        assert np.allclose(out.data[0, 0], 0.7, atol=1e-6)
        assert np.allclose(out.data[0, 1], -0.3, atol=1e-6)

    def test_train_statistics(self, rng):
        params = BatchNormParams(3, dtype=np.float64)
        x = Tensor(rng.standard_normal((4, 3, 8, 8)) * 2.0 + 1.0)
        out = T.batch_norm(x, params, mode="train")
        mean = out.data.mean(axis=(0, 2, 3))
        var = out.data.var(axis=(0, 2, 3))
        assert np.abs(mean).max() < 1e-5
        assert np.abs(var - 1.0).max() < 1e-5

    def test_running_stats_and_eval(self, rng):
        params = BatchNormParams(2, momentum=1.0, dtype=np.float64)
        x = rng.standard_normal((2, 2, 4, 4)) * 3.0 + 0.5
        T.batch_norm(Tensor(x), params, mode="train")
        assert np.allclose(params.running_mean, x.mean(axis=(0, 2, 3)), atol=1e-6)
        out = T.batch_norm(Tensor(x), params, mode="eval")
        expected = (x - x.mean(axis=(0, 2, 3))[None, :, None, None]) / np.sqrt(
            x.var(axis=(0, 2, 3))[None, :, None, None] + params.eps
        )
        assert np.allclose(out.data, expected, atol=1e-6)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeMismatch):
            T.batch_norm(Tensor(np.zeros((1, 3, 2, 2))), BatchNormParams(4), mode="train")

    def test_gradcheck_train_and_eval(self, rng):
        for mode in ("train", "eval"):
            params = BatchNormParams(2, dtype=np.float64)
            params.gamma.data[:] = rng.uniform(0.5, 1.5, 2)
            params.beta.data[:] = rng.standard_normal(2)
            x = Tensor(rng.standard_normal((3, 2, 4, 4)), requires_grad=True)
            err = T.grad_check(lambda: T.batch_norm(x, params, mode=mode), [x, params.gamma, params.beta])
            assert err < 1e-4, mode


class TestAutodiffPlumbing:
    def test_reused_tensor_accumulates(self, rng):
        x = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
        out = T.sum_all(T.add(T.mul(x, x), x))  # d/dx (x^2 + x) = 2x + 1
        out.backward()
        assert np.allclose(x.grad, 2 * x.data + 1)

    def test_backward_requires_scalar(self, rng):
        x = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
        with pytest.raises(ValueError):
            T.add(x, x).backward()

    def test_reshape_transpose_concat_gradcheck(self, rng):
        a = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((2, 5, 4)), requires_grad=True)
        assert T.grad_check(lambda: T.reshape(a, (2, 12)), [a]) < 1e-8
        assert T.grad_check(lambda: T.transpose(a, (2, 0, 1)), [a]) < 1e-8
        assert T.grad_check(lambda: T.concat([a, b], axis=1), [a, b]) < 1e-8

    def test_determinism(self, rng):
        x = rng.standard_normal((2, 3, 8, 8))
        w = rng.standard_normal((4, 3, 3, 3))
        a = T.conv2d(Tensor(x), Tensor(w), padding=1).data
        b = T.conv2d(Tensor(x), Tensor(w), padding=1).data
        assert np.array_equal(a, b)

    def test_finite_outputs(self, rng):
        x = Tensor(rng.standard_normal((2, 4, 8, 8)) * 50)
        w = Tensor(rng.standard_normal((4, 4, 3, 3)))
        results = [
            T.conv2d(x, w, padding=1).data,
            T.sigmoid(x).data,
            T.relu(x).data,
            T.global_avg_pool(x).data,
            T.bilinear_upsample(x, 2).data,
            T.avg_downsample(x, 2).data,
        ]
        for r in results:
            assert np.all(np.isfinite(r))

    def test_grad_check_rejects_float32(self, rng):
        x = Tensor(rng.standard_normal((2, 2)).astype(np.float32), requires_grad=True)
        with pytest.raises(ValueError):
            T.grad_check(lambda: T.relu(x), [x])


class TestTensorFile:
    def test_round_trip(self, rng, tmp_path):
        for dtype in (np.float32, np.float64):
            arr = rng.standard_normal((2, 3, 4)).astype(dtype)
            path = tmp_path / f"t_{np.dtype(dtype).name}.roat"
            T.save_tensor(path, arr)
            back = T.load_tensor(path)
            assert back.dtype == dtype
            assert np.array_equal(back.data, arr)

    def test_header_layout(self, rng, tmp_path):
        arr = np.arange(6, dtype=np.float32).reshape(2, 3)
        path = tmp_path / "t.roat"
        T.save_tensor(path, arr)
        blob = path.read_bytes()
        assert blob[:4] == b"ROAT"
        assert blob[4] == 0  # float32 code
        assert blob[5] == 2  # rank
        assert int.from_bytes(blob[6:10], "little") == 2
        assert int.from_bytes(blob[10:14], "little") == 3
        assert len(blob) == 14 + 6 * 4

    def test_bad_magic_and_truncation(self, tmp_path):
        path = tmp_path / "bad.roat"
        path.write_bytes(b"NOPE" + bytes(10))
        with pytest.raises(ValueError):
            T.load_tensor(path)
        path.write_bytes(b"ROAT" + bytes([0, 1, 4, 0, 0, 0]) + bytes(4))  # claims 4 floats, has 1
        with pytest.raises(ValueError):
            T.load_tensor(path)
