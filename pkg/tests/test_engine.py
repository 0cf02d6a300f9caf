"""
Engine tests: op forwards, tape backward, finite-difference gradient checks
on the raw float64 kernels, Adam and Kaiming initialization.
"""
import math

import numpy as np
import pytest

from app.engine import ops
from app.engine.ops import OPS, forward_op
from app.engine.optim import AdamState, adam_step, kaiming_init
from app.engine.tensor import AutodiffTape, Context, Tensor, backward
from app.errors import AutodiffError, NonFiniteError, ShapeMismatchError, UnknownOpError

H = 1e-3
TOLERANCE = 1e-3


def numeric_grad(fn, arrays, k):
    x = arrays[k]
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + H
        plus = fn()
        x[idx] = orig - H
        minus = fn()
        x[idx] = orig
        grad[idx] = (plus - minus) / (2 * H)
    return grad


def relative_error(a, b):
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return np.linalg.norm(a - b) / scale


def check_op(name, arrays, wrt, **attrs):
    """Analytic kernel gradients vs central differences of sum(out * upstream)."""
    op = OPS[name]
    rng = np.random.default_rng(99)
    out = op.forward(Context(), *arrays, **attrs)
    upstream = rng.normal(size=out.shape) if out.ndim else np.asarray(1.3)

    def fn():
        return float(np.sum(op.forward(Context(), *arrays, **attrs) * upstream))

    ctx = Context()
    op.forward(ctx, *arrays, **attrs)
    grads = op.backward(ctx, upstream)
    for k in wrt:
        err = relative_error(grads[k], numeric_grad(fn, arrays, k))
        assert err < TOLERANCE, f"{name} input {k}: relative error {err:.2e}"


def away_from_zero(rng, shape):
    return np.sign(rng.normal(size=shape)) * (0.1 + np.abs(rng.normal(size=shape)))


class TestForward:
    def test_conv_all_ones_center(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        b = Tensor(np.zeros(1))
        out = ops.conv2d(x, w, b, stride=1, padding=1)
        assert out.shape == (1, 1, 3, 3)
        assert out.data[0, 0, 1, 1] == 9.0

    def test_relu_negative(self):
        assert ops.relu(Tensor([-2.0])).data[0] == 0.0

    def test_dense_identity(self):
        out = ops.dense(Tensor([[1.0, 2.0]]), Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([0.0, 0.0]))
        np.testing.assert_array_equal(out.data, [[1.0, 2.0]])

    def test_softmax_crossentropy_uniform_logits(self):
        loss = ops.loss("softmax_crossentropy", Tensor(np.zeros((3, 5))), Tensor(np.array([0, 2, 4])))
        assert loss.item() == pytest.approx(math.log(5), abs=1e-5)

    def test_batchnorm_training_normalizes(self, rng):
        x = rng.normal(1.0, 2.0, size=(16, 3, 4, 4))
        out = ops.batchnorm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), training=True, update_stats=False)
        np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-5)
        np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 1.0, atol=1e-4)

    def test_batchnorm_updates_running_stats(self, rng):
        x = rng.normal(2.0, 1.0, size=(8, 2))
        mean, var = np.zeros(2, dtype=np.float32), np.ones(2, dtype=np.float32)
        ops.batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                      running_mean=mean, running_var=var, training=True)
        np.testing.assert_allclose(mean, 0.1 * x.mean(axis=0), rtol=1e-5)

    def test_maxpool_and_global_average(self):
        x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
        np.testing.assert_array_equal(ops.maxpool2x2(Tensor(x)).data[0, 0], [[5, 7], [13, 15]])
        assert ops.avgpool_global(Tensor(x)).data[0, 0] == pytest.approx(7.5)

    def test_unknown_op(self):
        with pytest.raises(UnknownOpError):
            forward_op("softmax", [Tensor([1.0])])

    def test_non_finite_input(self):
        with pytest.raises(NonFiniteError):
            ops.relu(Tensor([np.nan, 1.0]))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            ops.dense(Tensor(np.ones((1, 3))), Tensor(np.ones((2, 2))), Tensor(np.zeros(2)))


class TestBackward:
    def test_mse_gradient(self):
        x = Tensor([3.0], requires_grad=True)
        with AutodiffTape() as tape:
            loss = ops.loss("mse", x, Tensor([0.0]))
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [6.0])

    def test_grads_accumulate(self):
        x = Tensor([3.0], requires_grad=True)
        with AutodiffTape() as tape:
            loss = ops.loss("mse", x, Tensor([0.0]))
        tape.backward(loss)
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [12.0])
        x.zero_grad()
        np.testing.assert_array_equal(x.grad, [0.0])

    def test_module_backward(self):
        w = Tensor([[2.0]], requires_grad=True)
        with AutodiffTape():
            out = ops.dense(Tensor([[1.5]]), w, Tensor([0.0]))
            loss = ops.loss("mse", out, Tensor([[0.0]]))
        backward(loss)
        np.testing.assert_allclose(w.grad, [[2 * 3.0 * 1.5]])

    def test_non_scalar_loss(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with AutodiffTape() as tape:
            out = ops.relu(x)
        with pytest.raises(AutodiffError):
            tape.backward(out)

    def test_empty_tape(self):
        with pytest.raises(AutodiffError):
            AutodiffTape().backward(Tensor(1.0))

    def test_loss_off_tape(self):
        with pytest.raises(AutodiffError):
            backward(Tensor([1.0]))

    def test_nothing_recorded_outside_a_tape(self):
        x = Tensor([3.0], requires_grad=True)
        loss = ops.loss("mse", ops.relu(x), Tensor([0.0]))
        assert not loss.requires_grad and loss._tape is None
        with pytest.raises(AutodiffError):
            backward(loss)
        with AutodiffTape() as tape:
            loss = ops.loss("mse", x, Tensor([0.0]))
        assert len(tape.entries) == 1
        ops.relu(x)
        assert len(tape.entries) == 1


@pytest.mark.parametrize("seed", range(4))
class TestGradientCheck:
    def test_conv2d(self, seed):
        rng = np.random.default_rng(seed)
        c, d = rng.integers(1, 4), rng.integers(1, 4)
        stride, padding = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        arrays = [rng.normal(size=(2, c, 5, 5)), rng.normal(size=(d, c, 3, 3)), rng.normal(size=d)]
        check_op("conv2d", arrays, [0, 1, 2], stride=stride, padding=padding)

    def test_dense(self, seed):
        rng = np.random.default_rng(seed)
        n, i, o = rng.integers(1, 5, size=3)
        check_op("dense", [rng.normal(size=(n, i)), rng.normal(size=(o, i)), rng.normal(size=o)], [0, 1, 2])

    def test_batchnorm_training(self, seed):
        rng = np.random.default_rng(seed)
        shape = (4, 3, 3, 3) if seed % 2 else (6, 3)
        arrays = [rng.normal(size=shape), rng.uniform(0.5, 1.5, 3), rng.normal(size=3)]
        check_op("batchnorm", arrays, [0, 1, 2], training=True, update_stats=False)

    def test_batchnorm_eval(self, seed):
        rng = np.random.default_rng(seed)
        arrays = [rng.normal(size=(4, 3, 3, 3)), rng.uniform(0.5, 1.5, 3), rng.normal(size=3)]
        check_op("batchnorm", arrays, [0, 1, 2], running_mean=rng.normal(size=3),
                 running_var=rng.uniform(0.5, 2.0, 3), training=False)

    def test_relu(self, seed):
        rng = np.random.default_rng(seed)
        check_op("relu", [away_from_zero(rng, (3, 4, 2))], [0])

    def test_maxpool(self, seed):
        rng = np.random.default_rng(seed)
        shape = (2, 2, 5, 4)
        # distinct values spaced well beyond the finite-difference step
        x = rng.permutation(int(np.prod(shape))).reshape(shape) * 0.01
        check_op("maxpool2x2", [x.astype(np.float64)], [0])

    def test_avgpool_global(self, seed):
        rng = np.random.default_rng(seed)
        check_op("avgpool_global", [rng.normal(size=(2, 3, 4, 5))], [0])

    def test_softmax_crossentropy(self, seed):
        rng = np.random.default_rng(seed)
        logits = rng.normal(size=(5, 4))
        check_op("softmax_crossentropy", [logits, rng.integers(0, 4, size=5)], [0])

    def test_mse(self, seed):
        rng = np.random.default_rng(seed)
        check_op("mse", [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))], [0, 1])

    def test_sigmoid_bce(self, seed):
        rng = np.random.default_rng(seed)
        check_op("sigmoid_bce", [rng.normal(size=(3, 6)), rng.integers(0, 2, size=(3, 6)).astype(float)], [0, 1])


class TestAdam:
    def test_first_step_magnitude_is_lr(self):
        p = Tensor([0.5], requires_grad=True)
        p.grad = np.array([1.0], dtype=np.float32)
        state = AdamState.create([p])
        adam_step([p], 0.001, state)
        assert p.data[0] == pytest.approx(0.499, abs=1e-6)
        np.testing.assert_array_equal(p.grad, [1.0])

    def test_zero_grad_leaves_params(self):
        p = Tensor([0.5, -2.0], requires_grad=True)
        p.grad = np.zeros(2, dtype=np.float32)
        state = AdamState.create([p])
        for _ in range(5):
            adam_step([p], 0.01, state)
        np.testing.assert_array_equal(p.data, [0.5, -2.0])

    def test_quadratic_descent(self):
        p = Tensor([0.0], requires_grad=True)
        state = AdamState.create([p])
        for _ in range(10):
            p.grad = (2.0 * (p.data - 3.0)).astype(np.float32)
            adam_step([p], 0.1, state)
        assert abs(p.data[0] - 3.0) < 3.0

    def test_mask_limits_updates_and_buffers(self):
        p = Tensor(np.ones(6), requires_grad=True)
        p.grad = np.ones(6, dtype=np.float32)
        mask = np.array([1, 0, 1, 0, 0, 1], dtype=bool)
        state = AdamState.create([p], [mask])
        assert state.buffer_size == 3
        adam_step([p], 0.1, state)
        np.testing.assert_array_equal(p.data[~mask], 1.0)
        assert np.all(p.data[mask] < 1.0)

    def test_missing_grad(self):
        p = Tensor([1.0], requires_grad=True)
        with pytest.raises(AutodiffError):
            adam_step([p], 0.1, AdamState.create([p]))


class TestKaiming:
    def test_std(self):
        t = kaiming_init((64, 16, 3, 3), np.random.default_rng(0))
        assert t.data.std() == pytest.approx(math.sqrt(2 / 144), rel=0.1)

    def test_dense_fan_in(self):
        t = kaiming_init((200, 50), np.random.default_rng(0))
        assert t.data.std() == pytest.approx(math.sqrt(2 / 50), rel=0.1)

    def test_deterministic(self):
        a = kaiming_init((4, 3, 3, 3), np.random.default_rng(7))
        b = kaiming_init((4, 3, 3, 3), np.random.default_rng(7))
        c = kaiming_init((4, 3, 3, 3), np.random.default_rng(8))
        np.testing.assert_array_equal(a.data, b.data)
        assert not np.array_equal(a.data, c.data)
