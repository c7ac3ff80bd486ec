"""Tests for the numerical kernels."""

import math
import os
import tempfile
import unittest

import numpy as np

from workflow_predictor.errors import FormatError, NumericError, ShapeMismatch
from workflow_predictor.nn_core import (
    CHECKPOINT_MAGIC,
    AdamState,
    LinearLayer,
    adam_step,
    bce_loss,
    bce_loss_batch,
    check_finite,
    leaky_relu,
    leaky_relu_backward,
    linear_backward,
    linear_forward,
    load_checkpoint,
    masked_softmax,
    masked_softmax_backward,
    save_checkpoint,
    sigmoid,
)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)))


class TestLinear(unittest.TestCase):
    """Test the linear layer."""

    def test_identity(self):
        """Test W = I and b = 0 pass inputs through."""
        layer = LinearLayer(3, 3)
        layer.W = np.eye(3)
        x = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(linear_forward(layer, x), x)

    def test_zero_upstream(self):
        """Test a zero upstream gradient gives zero gradients everywhere."""
        layer = LinearLayer(4, 3, np.random.default_rng(0))
        x = np.ones((2, 4))
        dx = linear_backward(layer, x, np.zeros((2, 3)))
        self.assertFalse(dx.any())
        self.assertFalse(layer.gradW.any())
        self.assertFalse(layer.gradb.any())

    def test_shape_mismatch(self):
        """Test incompatible inputs raise ShapeMismatch."""
        layer = LinearLayer(4, 3)
        with self.assertRaises(ShapeMismatch):
            linear_forward(layer, np.ones((2, 5)))
        with self.assertRaises(ShapeMismatch):
            linear_backward(layer, np.ones((2, 4)), np.ones((2, 2)))

    def test_finite_differences(self):
        """Test analytic gradients of a random 3x4 layer against central differences."""
        # Setup
        rng = np.random.default_rng(1)
        layer = LinearLayer(4, 3, rng)
        layer.b = rng.uniform(-1, 1, 3)
        x = rng.uniform(-1, 1, (5, 4))
        R = rng.uniform(-1, 1, (5, 3))

        def loss() -> float:
            return float(np.sum(linear_forward(layer, x) * R))

        # Execute
        dx = linear_backward(layer, x, R)
        h = 1e-5
        numeric = {}
        for name, tensor in (("W", layer.W), ("b", layer.b), ("x", x)):
            grad = np.zeros_like(tensor)
            for idx in np.ndindex(tensor.shape):
                saved = tensor[idx]
                tensor[idx] = saved + h
                up = loss()
                tensor[idx] = saved - h
                down = loss()
                tensor[idx] = saved
                grad[idx] = (up - down) / (2 * h)
            numeric[name] = grad

        # Assert
        self.assertLess(relative_error(layer.gradW, numeric["W"]), 1e-6)
        self.assertLess(relative_error(layer.gradb, numeric["b"]), 1e-6)
        self.assertLess(relative_error(dx, numeric["x"]), 1e-6)


class TestActivations(unittest.TestCase):
    """Test activations and the loss."""

    def test_bce_at_zero(self):
        """Test the symmetric point of the loss."""
        loss, grad = bce_loss(0.0, 1)
        self.assertAlmostEqual(loss, math.log(2), places=12)
        self.assertAlmostEqual(grad, -0.5, places=12)
        loss, grad = bce_loss(0.0, 0)
        self.assertAlmostEqual(loss, math.log(2), places=12)
        self.assertAlmostEqual(grad, 0.5, places=12)

    def test_bce_at_two(self):
        """Test a positive logit with a positive label."""
        loss, grad = bce_loss(2.0, 1)
        self.assertAlmostEqual(loss, 0.126928, places=6)
        self.assertAlmostEqual(grad, -0.119203, places=6)

    def test_bce_stable(self):
        """Test extreme logits stay finite."""
        for logit in (-1e6, -50.0, 50.0, 1e6):
            for label in (0, 1):
                loss, grad = bce_loss(logit, label)
                self.assertTrue(math.isfinite(loss) and math.isfinite(grad))

    def test_bce_batch_matches_scalar(self):
        """Test the batch loss is the mean of scalar losses."""
        logits = np.array([-3.0, 0.5, 2.0])
        labels = np.array([0.0, 1.0, 1.0])
        loss, grads = bce_loss_batch(logits, labels)
        scalar = [bce_loss(float(z), int(e)) for z, e in zip(logits, labels)]
        self.assertAlmostEqual(loss, sum(s[0] for s in scalar) / 3, places=12)
        np.testing.assert_allclose(grads, [s[1] / 3 for s in scalar], atol=1e-15)

    def test_sigmoid_scalar_and_array(self):
        """Test sigmoid keeps scalars scalar and never overflows."""
        self.assertEqual(sigmoid(0.0), 0.5)
        out = sigmoid(np.array([-1000.0, 0.0, 1000.0]))
        np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])

    def test_leaky_relu(self):
        """Test the negative slope and its derivative."""
        x = np.array([-2.0, 3.0])
        np.testing.assert_allclose(leaky_relu(x), [-0.4, 3.0])
        np.testing.assert_allclose(leaky_relu_backward(x, np.ones(2)), [0.2, 1.0])

    def test_masked_softmax(self):
        """Test masked entries get zero weight and the backward pass matches differences."""
        rng = np.random.default_rng(2)
        scores = rng.normal(size=(3, 3))
        mask = np.array([[True, False, True], [False, True, False], [True, True, True]])
        alpha = masked_softmax(scores, mask)
        np.testing.assert_allclose(alpha.sum(axis=1), np.ones(3))
        self.assertTrue(np.all(alpha[~mask] == 0.0))

        upstream = rng.normal(size=(3, 3))
        analytic = masked_softmax_backward(alpha, upstream)
        h = 1e-6
        for idx in zip(*np.nonzero(mask)):
            bumped = scores.copy()
            bumped[idx] += h
            lowered = scores.copy()
            lowered[idx] -= h
            numeric = (np.sum(masked_softmax(bumped, mask) * upstream) - np.sum(masked_softmax(lowered, mask) * upstream)) / (2 * h)
            self.assertAlmostEqual(analytic[idx], numeric, places=7)


class TestAdam(unittest.TestCase):
    """Test the Adam update."""

    def test_zero_gradient_is_identity(self):
        """Test zero gradients without decay leave parameters alone."""
        params = {"w": np.array([1.0, -2.0])}
        adam_step(AdamState(weight_decay=0.0), params, {"w": np.zeros(2)})
        np.testing.assert_array_equal(params["w"], [1.0, -2.0])

    def test_zero_learning_rate_is_identity(self):
        """Test lr = 0 changes nothing even with decay."""
        params = {"w": np.array([0.3])}
        adam_step(AdamState(lr=0.0), params, {"w": np.array([4.0])})
        np.testing.assert_array_equal(params["w"], [0.3])

    def test_single_step(self):
        """Test one step with unit gradient moves by lr / (1 + eps)."""
        params = {"p": np.array([1.0])}
        adam_step(AdamState(weight_decay=0.0), params, {"p": np.array([1.0])})
        self.assertAlmostEqual(params["p"][0], 1.0 - 1e-4 / (1.0 + 1e-8), places=15)

    def test_decoupled_decay_applied_first(self):
        """Test decoupled decay shrinks the parameter before the moment update."""
        params = {"p": np.array([1.0])}
        adam_step(AdamState(), params, {"p": np.array([1.0])})
        expected = 1.0 - 1e-4 * 5e-4 - 1e-4 / (1.0 + 1e-8)
        self.assertAlmostEqual(params["p"][0], expected, places=12)

    def test_coupled_decay(self):
        """Test coupled decay folds into the gradient instead."""
        params = {"p": np.array([1.0])}
        adam_step(AdamState(coupled_weight_decay=True), params, {"p": np.array([1.0])})
        self.assertAlmostEqual(params["p"][0], 1.0 - 1e-4 / (1.0 + 1e-8), places=12)

    def test_descends_quadratic(self):
        """Test 100 steps on p^2 shrink |p| monotonically."""
        state = AdamState(lr=0.005, weight_decay=0.0)
        params = {"p": np.array([1.0])}
        previous = 1.0
        for _ in range(100):
            adam_step(state, params, {"p": 2.0 * params["p"]})
            current = abs(params["p"][0])
            self.assertLess(current, previous)
            previous = current
        self.assertEqual(state.step, 100)

    def test_shape_mismatch(self):
        """Test mismatched gradients are rejected."""
        with self.assertRaises(ShapeMismatch):
            adam_step(AdamState(), {"w": np.zeros(2)}, {"w": np.zeros(3)})

    def test_check_finite(self):
        """Test non-finite parameters raise NumericError."""
        with self.assertRaises(NumericError):
            check_finite({"w": np.array([1.0, np.nan])}, "test")


class TestCheckpoint(unittest.TestCase):
    """Test the checkpoint file format."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "model.ckpt")

    def tearDown(self):
        self.tmp.cleanup()

    def test_round_trip(self):
        """Test tensors and metadata survive a save and load."""
        rng = np.random.default_rng(3)
        params = {"b": rng.normal(size=4), "a.W": rng.normal(size=(2, 3)), "s": np.array(1.5)}
        save_checkpoint(self.path, params, {"arch": "gcn"})
        loaded, meta = load_checkpoint(self.path)
        self.assertEqual(meta, {"arch": "gcn"})
        self.assertEqual(sorted(loaded), sorted(params))
        for name in params:
            np.testing.assert_array_equal(loaded[name], params[name])

    def test_bytes_are_deterministic(self):
        """Test saving the same tensors twice gives identical bytes."""
        params = {"w": np.arange(6.0).reshape(2, 3)}
        other = os.path.join(self.tmp.name, "other.ckpt")
        save_checkpoint(self.path, params, {"k": 1})
        save_checkpoint(other, params, {"k": 1})
        with open(self.path, "rb") as a, open(other, "rb") as b:
            self.assertEqual(a.read(), b.read())

    def test_truncated_and_corrupt_files(self):
        """Test damaged checkpoints are format errors."""
        # Setup
        save_checkpoint(self.path, {"w": np.arange(6.0).reshape(2, 3)}, {"k": 1})
        with open(self.path, "rb") as handle:
            blob = handle.read()
        header_start = len(CHECKPOINT_MAGIC) + 6
        damaged = {
            "prefix": blob[:12],
            "header": blob[:header_start + 5],
            "tensor": blob[:-8],
            "json": blob[:header_start] + b"\xff" + blob[header_start + 1:],
        }

        for label, data in damaged.items():
            # Execute
            with open(self.path, "wb") as handle:
                handle.write(data)

            # Assert
            with self.assertRaises(FormatError, msg=label):
                load_checkpoint(self.path)

    def test_bad_magic(self):
        """Test a foreign file is rejected."""
        with open(self.path, "wb") as handle:
            handle.write(b"not a checkpoint")
        with self.assertRaises(FormatError):
            load_checkpoint(self.path)


if __name__ == "__main__":
    unittest.main()
