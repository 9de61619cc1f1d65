"""
Tests for the tensor engine: ops, backward, optimizer, checkpoints, gradient checks
"""

import numpy as np
import pytest

from lmreg.errors import CheckpointFormatError, DomainError, GraphError, NonFiniteError, ShapeError
from lmreg.tensorcore import (
    AdamState,
    Graph,
    Tensor,
    adam_step,
    backward,
    bce,
    concat_channels,
    conv3d,
    exp,
    gather_voxels,
    get_dtype,
    gradcheck,
    he_init,
    linear,
    load_checkpoint,
    log,
    maxpool3d,
    no_grad,
    pairwise_l2sq,
    precision,
    relu,
    run_gradcheck_suite,
    save_checkpoint,
    sigmoid,
    upsample_trilinear,
)


def naive_conv(x, w, b):
    n, cin, d, h, wd = x.shape
    cout, _, k, _, _ = w.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    out = np.zeros((n, cout, d, h, wd))
    for o in range(cout):
        for z in range(d):
            for y in range(h):
                for xx in range(wd):
                    for c in range(cin):
                        for i in range(k):
                            for j in range(k):
                                for l in range(k):
                                    out[0, o, z, y, xx] += w[o, c, i, j, l] * xp[0, c, z + i, y + j, xx + l]
        out[:, o] += b[o]
    return out


class TestPrecision:
    """Test element type switching and graph recording"""

    def test_precision_context_restores(self):
        """precision() switches the dtype only inside the block"""
        before = get_dtype()
        with precision("float64"):
            assert Tensor([1.0]).data.dtype == np.float64
        assert get_dtype() == before

    def test_unknown_precision(self):
        """Unknown precision names are rejected"""
        with pytest.raises(DomainError):
            with precision("float16"):
                pass

    def test_no_grad_records_nothing(self):
        """Ops under no_grad produce leaf tensors"""
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = (x * x).sum()
        assert not y.requires_grad
        assert y._prev == ()


class TestConv3d:
    """Test the 3D convolution forward pass"""

    def test_dirac_kernel_is_identity(self):
        """A centered unit kernel copies each channel"""
        with precision("float64"):
            x = Tensor(np.random.default_rng(0).standard_normal((1, 2, 4, 4, 4)))
            w = np.zeros((2, 2, 3, 3, 3))
            w[0, 0, 1, 1, 1] = 1.0
            w[1, 1, 1, 1, 1] = 1.0
            out = conv3d(x, Tensor(w), Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data, x.data)

    def test_ones_kernel_sums_neighbourhood(self):
        """All-ones kernel on constant input gives 27 in the interior"""
        x = Tensor(np.ones((1, 1, 5, 5, 5)))
        out = conv3d(x, Tensor(np.ones((1, 1, 3, 3, 3))))
        assert out.data[0, 0, 2, 2, 2] == pytest.approx(27.0)
        assert out.data[0, 0, 0, 0, 0] == pytest.approx(8.0)

    def test_matches_direct_loop(self):
        """Forward pass agrees with a direct nested-loop convolution"""
        rng = np.random.default_rng(3)
        x = rng.standard_normal((1, 2, 4, 4, 4))
        w = rng.standard_normal((3, 2, 3, 3, 3))
        b = rng.standard_normal(3)
        with precision("float64"):
            out = conv3d(Tensor(x), Tensor(w), Tensor(b))
        np.testing.assert_allclose(out.data, naive_conv(x, w, b), atol=1e-6)

    def test_channel_mismatch(self):
        """Weight input channels must match the input"""
        with pytest.raises(ShapeError):
            conv3d(Tensor(np.zeros((1, 2, 4, 4, 4))), Tensor(np.zeros((1, 3, 3, 3, 3))))


class TestActivations:
    """Test relu and sigmoid"""

    def test_relu_values(self):
        """relu clamps negatives to zero"""
        np.testing.assert_allclose(relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])

    def test_sigmoid_at_zero(self):
        """sigmoid(0) = 0.5 with derivative 0.25"""
        with precision("float64"):
            x = Tensor([0.0], requires_grad=True)
            backward(sigmoid(x).sum())
            h = 1e-4
            fd = (sigmoid(Tensor([h])).item() - sigmoid(Tensor([-h])).item()) / (2 * h)
        assert sigmoid(Tensor([0.0])).item() == pytest.approx(0.5)
        assert x.grad[0] == pytest.approx(0.25)
        assert fd == pytest.approx(0.25, abs=1e-8)


class TestMaxPool:
    """Test 2x2x2 max pooling"""

    def test_constant_input_routes_to_first(self):
        """Ties send the gradient to the first element of each window"""
        x = Tensor(np.ones((1, 1, 4, 4, 4)), requires_grad=True)
        out = maxpool3d(x)
        backward(out.sum())
        np.testing.assert_allclose(out.data, 1.0)
        expected = np.zeros((4, 4, 4))
        expected[::2, ::2, ::2] = 1.0
        np.testing.assert_allclose(x.grad[0, 0], expected)

    def test_ramp_picks_last(self):
        """A strictly increasing ramp selects the last element of each window"""
        ramp = np.arange(64, dtype=float).reshape(1, 1, 4, 4, 4)
        out = maxpool3d(Tensor(ramp))
        np.testing.assert_allclose(out.data, ramp[:, :, 1::2, 1::2, 1::2])

    def test_matches_windowed_max(self):
        """Output equals a direct windowed max"""
        with precision("float64"):
            x = np.random.default_rng(5).standard_normal((1, 2, 8, 8, 8))
            out = maxpool3d(Tensor(x)).data
        expected = np.zeros((1, 2, 4, 4, 4))
        for c in range(2):
            for i in range(4):
                for j in range(4):
                    for k in range(4):
                        expected[0, c, i, j, k] = x[0, c, 2 * i:2 * i + 2, 2 * j:2 * j + 2, 2 * k:2 * k + 2].max()
        np.testing.assert_array_equal(out, expected)

    def test_odd_dims(self):
        """Odd spatial dims are rejected"""
        with pytest.raises(ShapeError):
            maxpool3d(Tensor(np.zeros((1, 1, 3, 4, 4))))


class TestUpsample:
    """Test trilinear upsampling"""

    def test_factor_one(self):
        """Factor 1 is the identity"""
        x = np.random.default_rng(0).standard_normal((1, 1, 3, 3, 3)).astype(np.float32)
        np.testing.assert_allclose(upsample_trilinear(Tensor(x), 1).data, x)

    def test_constant(self):
        """Constant input stays constant"""
        out = upsample_trilinear(Tensor(np.full((1, 2, 2, 3, 2), 4.0)), 2)
        assert out.shape == (1, 2, 4, 6, 4)
        np.testing.assert_allclose(out.data, 4.0, rtol=1e-6)

    def test_gradient(self):
        """Backward matches finite differences in float64"""
        rng = np.random.default_rng(2)
        with precision("float64"):
            x = Tensor(rng.standard_normal((1, 1, 2, 3, 2)), requires_grad=True)
            weights = Tensor(rng.standard_normal((1, 1, 4, 6, 4)))
            err = gradcheck(lambda: (upsample_trilinear(x, 2) * weights).sum(), [x], rng)
        assert err < 1e-4


class TestDescriptorOps:
    """Test linear, concat, distances, gather and cross entropy"""

    def test_identical_descriptors(self):
        """Distance between identical descriptors is zero"""
        a = Tensor([[1.0, 2.0, 3.0]])
        assert pairwise_l2sq(a, a).item() == 0.0

    def test_bce_half(self):
        """bce(0.5, 1) = ln 2"""
        with precision("float64"):
            assert bce(Tensor([0.5]), [1.0]).item() == pytest.approx(np.log(2.0), abs=1e-4)

    def test_bce_rejects_soft_labels(self):
        """Targets must be exactly 0 or 1"""
        with pytest.raises(DomainError):
            bce(Tensor([0.5]), [0.3])

    def test_linear_matches_matmul(self):
        """linear() equals x @ W.T + b"""
        rng = np.random.default_rng(4)
        x, w, b = rng.standard_normal((5, 4)), rng.standard_normal((3, 4)), rng.standard_normal(3)
        with precision("float64"):
            out = linear(Tensor(x), Tensor(w), Tensor(b)).data
        expected = np.array([[sum(x[i, k] * w[j, k] for k in range(4)) + b[j] for j in range(3)] for i in range(5)])
        np.testing.assert_allclose(out, expected, atol=1e-6)

    def test_concat_channels(self):
        """Channels are stacked along axis 1"""
        a = Tensor(np.zeros((1, 2, 2, 2, 2)))
        b = Tensor(np.ones((1, 3, 2, 2, 2)))
        out = concat_channels(a, b)
        assert out.shape == (1, 5, 2, 2, 2)
        assert out.data[0, 2:].min() == 1.0

    def test_gather_voxels(self):
        """Gathered rows are the channel vectors at each index"""
        fmap = np.arange(2 * 8, dtype=float).reshape(1, 2, 2, 2, 2)
        out = gather_voxels(Tensor(fmap), [[0, 0, 0], [1, 1, 1]]).data
        np.testing.assert_allclose(out, [[0.0, 8.0], [7.0, 15.0]])

    def test_gather_out_of_range(self):
        """Indices outside the map are rejected"""
        with pytest.raises(ShapeError):
            gather_voxels(Tensor(np.zeros((1, 1, 2, 2, 2))), [[2, 0, 0]])


class TestBackward:
    """Test graph traversal and gradient accumulation"""

    def test_sum_gradient(self):
        """d sum(x) / dx is all ones"""
        x = Tensor(np.arange(4.0), requires_grad=True)
        backward(x.sum())
        np.testing.assert_allclose(x.grad, 1.0)

    def test_square_gradient(self):
        """d sum(x*x) / dx = 2x"""
        x = Tensor(np.arange(4.0), requires_grad=True)
        backward((x * x).sum())
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_gradients_accumulate(self):
        """A second backward adds to leaf gradients"""
        x = Tensor(np.ones(2), requires_grad=True)
        backward(x.sum())
        backward(x.sum())
        np.testing.assert_allclose(x.grad, 2.0)

    def test_non_scalar_loss(self):
        """backward needs a single-element loss"""
        x = Tensor(np.ones(2), requires_grad=True)
        with pytest.raises(GraphError):
            backward(x * 2.0)

    def test_disconnected_loss(self):
        """A loss without trainable inputs cannot be differentiated"""
        with pytest.raises(GraphError):
            backward(Tensor(np.ones(2)).sum())

    def test_cycle_detected(self):
        """Cycles in the recorded graph are reported"""
        a = Tensor(1.0, requires_grad=True)
        b = a * 2.0
        a._prev = (b,)
        with pytest.raises(GraphError):
            Graph.from_loss(b)

    def test_leaves(self):
        """Graph leaves are the trainable inputs"""
        x = Tensor(np.ones(2), requires_grad=True)
        graph = backward((x * 3.0).sum())
        assert graph.leaves() == [x]

    def test_log_domain(self):
        """log of a non-positive entry is a domain error"""
        with pytest.raises(DomainError):
            log(Tensor([0.0]))

    def test_overflow_is_non_finite(self):
        """Overflowing results raise instead of propagating inf"""
        with pytest.raises(NonFiniteError):
            with np.errstate(over="ignore"):
                exp(Tensor([1000.0]))


class TestInitAndAdam:
    """Test He initialization and the Adam update"""

    def test_he_std(self):
        """fan_in=2 gives unit standard deviation"""
        w = he_init((100000,), 2, np.random.default_rng(0))
        assert abs(w.data.std() - 1.0) < 0.02

    def test_he_deterministic(self):
        """Same seed gives the same weights"""
        a = he_init((2, 3, 3, 3, 3), 27 * 3, np.random.default_rng(9))
        b = he_init((2, 3, 3, 3, 3), 27 * 3, np.random.default_rng(9))
        np.testing.assert_array_equal(a.data, b.data)

    def test_defaults(self):
        """Learning rate and weight decay default to 1e-4"""
        state = AdamState()
        assert state.lr == 1e-4
        assert state.weight_decay == 1e-4

    def test_zero_grad_no_decay(self):
        """Zero gradient and zero decay leave parameters unchanged"""
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        adam_step({"p": p}, {"p": np.zeros(2)}, AdamState(weight_decay=0.0))
        np.testing.assert_allclose(p.data, [1.0, -2.0])

    def test_first_step_is_signed_lr(self):
        """The bias-corrected first step moves each entry by lr against the gradient sign"""
        with precision("float64"):
            p = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
            adam_step({"p": p}, {"p": np.array([3.0, -0.2, 1e-3])}, AdamState(lr=0.01, weight_decay=0.0))
        np.testing.assert_allclose(p.data, [0.99, -1.99, 0.49], atol=1e-6)

    def test_gradient_shape_checked(self):
        """Gradients must match parameter shapes"""
        p = Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(ShapeError):
            adam_step({"p": p}, {"p": np.zeros(2)}, AdamState())


class TestCheckpoint:
    """Test binary checkpoint files"""

    def test_roundtrip(self, tmp_path):
        """Parameters and the config echo survive save/load"""
        params = {"conv.0.w": np.arange(24, dtype=np.float32).reshape(2, 3, 4), "fc.b": np.ones(3, np.float32)}
        path = save_checkpoint(tmp_path / "m.ckpt", params, "net.K=8\n")
        loaded, text = load_checkpoint(path)
        assert text == "net.K=8\n"
        assert list(loaded) == list(params)
        for k in params:
            np.testing.assert_array_equal(loaded[k], params[k])

    def test_bad_magic(self, tmp_path):
        """Files without the magic header are rejected"""
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        """Truncated payloads are detected"""
        path = save_checkpoint(tmp_path / "m.ckpt", {"w": np.ones(10, np.float32)})
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)

    def test_missing(self, tmp_path):
        """A missing file is a checkpoint error"""
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(tmp_path / "nope.ckpt")


class TestGradcheck:
    """Test the finite-difference check over every op"""

    def test_suite_passes(self):
        """Every op agrees with central differences in float64"""
        errors = run_gradcheck_suite(seed=0)
        assert set(errors) >= {"conv3d", "maxpool3d", "upsample_trilinear", "bce", "gather_voxels"}
        assert max(errors.values()) < 1e-4
