import math

import torch
from django.test import SimpleTestCase

from adcore.autodiff import (
    LossTape, cross_entropy, forward_loss, gradient, hessian_vector, hvp, jvp_outputs, leaf, vjp_outputs,
)
from adcore.finitediff import central_gradient, directional_gradient_difference, output_difference
from adcore.params import DTYPE, LayerSegment, ParamVector
from dataio.datasets import Batch
from hesslens.exceptions import ConfigurationError, DimensionError
from nnmodels.networks import build
from nnmodels.specs import ModelSpec


def tiny_mlp(seed=3, samples=6):
    params, registry = build(ModelSpec.mlp([4, 8, 3]), seed=seed)
    generator = torch.Generator().manual_seed(seed + 100)
    inputs = torch.randn(samples, 4, dtype=DTYPE, generator=generator)
    labels = torch.tensor([i % 3 for i in range(samples)])
    return params, registry, Batch(inputs, labels)


def relative_error(actual, expected):
    return float(torch.linalg.norm(actual - expected) / max(float(torch.linalg.norm(expected)), 1e-300))


class ParamVectorTest(SimpleTestCase):
    def setUp(self):
        self.params = ParamVector.from_sizes(torch.arange(7, dtype=DTYPE), [('a', 3), ('b', 4)])

    def test_layer_map_covers_vector(self):
        """Test that segments are contiguous and cover every coordinate"""
        self.assertEqual(self.params.dim, 7)
        self.assertEqual(self.params.num_layers, 2)
        self.assertEqual([s.length for s in self.params.layer_map], [3, 4])
        self.assertEqual(self.params.layer(1).tolist(), [3.0, 4.0, 5.0, 6.0])

    def test_gap_in_layer_map_rejected(self):
        """Test that a non-contiguous layer map is a configuration error"""
        with self.assertRaises(ConfigurationError):
            ParamVector(torch.zeros(5, dtype=DTYPE), [LayerSegment('a', 0, 2), LayerSegment('b', 3, 2)])

    def test_short_layer_map_rejected(self):
        """Test that a layer map not reaching D is a dimension error"""
        with self.assertRaises(DimensionError):
            ParamVector(torch.zeros(5, dtype=DTYPE), [LayerSegment('a', 0, 3)])

    def test_embed_zero_pads(self):
        """Test that embedding a layer slice zero-pads the rest"""
        full = self.params.embed(0, torch.ones(3, dtype=DTYPE))
        self.assertEqual(full.tolist(), [1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0])

    def test_bad_layer_index(self):
        """Test that an out-of-range layer index is rejected"""
        with self.assertRaises(ConfigurationError):
            self.params.segment(2)


class ForwardLossTest(SimpleTestCase):
    def setUp(self):
        self.params, self.registry, self.batch = tiny_mlp()
        self.fn = self.registry.function()

    def test_uniform_logits(self):
        """Test that uniform logits over 10 classes give ln 10"""
        loss = cross_entropy(torch.zeros(4, 10, dtype=DTYPE), torch.tensor([0, 3, 7, 9]))
        self.assertAlmostEqual(float(loss), math.log(10), places=12)

    def test_saturated_logits(self):
        """Test that a logit of 50 on the true class drives the loss to zero"""
        logits = torch.zeros(2, 3, dtype=DTYPE)
        logits[0, 1] = 50.0
        logits[1, 2] = 50.0
        self.assertLess(float(cross_entropy(logits, torch.tensor([1, 2]))), 1e-9)

    def test_matches_direct_evaluation(self):
        """Test that the taped loss equals a hand-unrolled evaluation"""
        values = self.params.values
        w0, b0 = values[:32].view(8, 4), values[32:40]
        w1, b1 = values[40:64].view(3, 8), values[64:67]
        logits = torch.relu(self.batch.inputs @ w0.T + b0) @ w1.T + b1
        expected = -torch.log_softmax(logits, dim=1)[torch.arange(6), self.batch.labels].mean()
        tape = forward_loss(self.fn, self.params, self.batch)
        self.assertAlmostEqual(tape.value(), float(expected), places=12)

    def test_bit_identical_repeat(self):
        """Test that identical inputs give a bit-identical loss"""
        first = forward_loss(self.fn, self.params, self.batch).value()
        second = forward_loss(self.fn, self.params, self.batch).value()
        self.assertEqual(first, second)

    def test_empty_batch(self):
        """Test that an empty batch is rejected"""
        empty = Batch(torch.zeros(0, 4, dtype=DTYPE), torch.zeros(0, dtype=torch.long))
        with self.assertRaises(ConfigurationError):
            forward_loss(self.fn, self.params, empty)

    def test_shape_mismatch(self):
        """Test that inputs of the wrong width are a configuration error"""
        wrong = Batch(torch.zeros(2, 5, dtype=DTYPE), torch.tensor([0, 1]))
        with self.assertRaises(ConfigurationError):
            forward_loss(self.fn, self.params, wrong)


class GradientTest(SimpleTestCase):
    def setUp(self):
        self.params, self.registry, self.batch = tiny_mlp()
        self.fn = self.registry.function()

    def test_quadratic_gradient(self):
        """Test that ½θᵀAθ has gradient Aθ"""
        a = torch.tensor([[2.0, 0.5], [0.5, 1.0]], dtype=DTYPE)
        params = ParamVector.from_sizes(torch.tensor([1.0, -2.0], dtype=DTYPE), [('q', 2)])
        theta = leaf(params)
        tape = LossTape(0.5 * theta @ a @ theta, None, theta, params.layer_map)
        self.assertTrue(torch.allclose(gradient(tape).values, a @ params.values, atol=1e-14))

    def test_stationary_point(self):
        """Test that the gradient vanishes at a stationary point"""
        params = ParamVector.from_sizes(torch.tensor([2.0], dtype=DTYPE), [('w', 1)])
        theta = leaf(params)
        tape = LossTape(((theta - 2.0) ** 2).sum(), None, theta, params.layer_map)
        self.assertEqual(gradient(tape).values.tolist(), [0.0])

    def test_central_differences(self):
        """Test that the gradient agrees with central differences per coordinate"""
        grad = gradient(forward_loss(self.fn, self.params, self.batch)).values

        def loss_fn(values):
            return cross_entropy(self.fn(values, self.batch.inputs), self.batch.labels)

        numeric = central_gradient(loss_fn, self.params.values, eps=1e-5)
        scale = torch.clamp(torch.abs(numeric), min=1e-3)
        self.assertLess(float(torch.max(torch.abs(grad - numeric) / scale)), 1e-6)
        self.assertEqual(gradient(forward_loss(self.fn, self.params, self.batch)).layer_map, self.params.layer_map)


class HessianVectorTest(SimpleTestCase):
    def setUp(self):
        self.params, self.registry, self.batch = tiny_mlp()
        self.fn = self.registry.function()
        generator = torch.Generator().manual_seed(11)
        self.v1 = torch.randn(self.params.dim, dtype=DTYPE, generator=generator)
        self.v2 = torch.randn(self.params.dim, dtype=DTYPE, generator=generator)

    def product(self, v):
        return hvp(self.fn, self.params, self.batch, v).values

    def test_zero_direction(self):
        """Test that Hess·0 is the zero vector"""
        self.assertEqual(float(torch.abs(self.product(torch.zeros(self.params.dim, dtype=DTYPE))).max()), 0.0)

    def test_quadratic(self):
        """Test that the Hessian of ½θᵀAθ applied to v is Av"""
        a = torch.tensor([[3.0, 1.0, 0.0], [1.0, 2.0, -1.0], [0.0, -1.0, 4.0]], dtype=DTYPE)
        params = ParamVector.from_sizes(torch.tensor([0.3, -0.7, 1.1], dtype=DTYPE), [('q', 3)])
        v = torch.tensor([1.0, 2.0, -0.5], dtype=DTYPE)
        theta = leaf(params)
        result = hessian_vector(0.5 * theta @ a @ theta, theta, v)
        self.assertTrue(torch.allclose(result, a @ v, atol=1e-13))

    def test_gradient_differences(self):
        """Test that the HVP agrees with differences of gradients"""

        def grad_fn(values):
            return gradient(forward_loss(self.fn, self.registry.wrap(values), self.batch)).values

        numeric = directional_gradient_difference(grad_fn, self.params.values, self.v1, eps=1e-4)
        self.assertLess(relative_error(self.product(self.v1), numeric), 1e-4)

    def test_linearity(self):
        """Test that the HVP is linear in its direction"""
        combined = self.product(2.0 * self.v1 - 0.5 * self.v2)
        expected = 2.0 * self.product(self.v1) - 0.5 * self.product(self.v2)
        self.assertLess(relative_error(combined, expected), 1e-10)

    def test_symmetry(self):
        """Test that ⟨Hv1, v2⟩ equals ⟨v1, Hv2⟩"""
        left = float(self.product(self.v1) @ self.v2)
        right = float(self.v1 @ self.product(self.v2))
        self.assertLess(abs(left - right), 1e-9 * max(abs(left), abs(right), 1e-12))

    def test_dimension_mismatch(self):
        """Test that a direction of the wrong length is rejected"""
        with self.assertRaises(DimensionError):
            self.product(torch.ones(5, dtype=DTYPE))


class ConvHessianVectorTest(SimpleTestCase):
    def setUp(self):
        spec = ModelSpec.lenet((1, 12, 12), (2, 3), (8,), 3, kernel_size=3)
        self.params, self.registry = build(spec, seed=4)
        self.fn = self.registry.function()
        generator = torch.Generator().manual_seed(21)
        inputs = torch.randn(6, 1, 12, 12, dtype=DTYPE, generator=generator)
        self.batch = Batch(inputs, torch.tensor([0, 1, 2, 0, 1, 2]))
        self.directions = torch.randn(20, self.params.dim, dtype=DTYPE, generator=generator)

    def loss(self, values):
        return cross_entropy(self.fn(values, self.batch.inputs), self.batch.labels)

    def test_dense_hessian(self):
        """Test that conv-net HVPs match the dense autograd Hessian in 20 directions"""
        dense = torch.autograd.functional.hessian(self.loss, self.params.values.detach().clone())
        for v in self.directions:
            product = hvp(self.fn, self.params, self.batch, v).values
            self.assertLess(relative_error(product, dense @ v), 1e-10)

    def test_gradient_differences(self):
        """Test that conv-net HVPs agree with small-step gradient differences"""

        def grad_fn(values):
            return gradient(forward_loss(self.fn, self.registry.wrap(values), self.batch)).values

        errors = sorted(
            relative_error(
                hvp(self.fn, self.params, self.batch, v).values,
                directional_gradient_difference(grad_fn, self.params.values, v, eps=1e-7),
            )
            for v in self.directions
        )
        # a step that crosses a ReLU kink spoils that one direction
        self.assertLess(errors[len(errors) // 2], 1e-4)


class OutputProductsTest(SimpleTestCase):
    def setUp(self):
        self.params, self.registry, self.batch = tiny_mlp()
        self.fn = self.registry.function()
        generator = torch.Generator().manual_seed(5)
        self.v = torch.randn(self.params.dim, dtype=DTYPE, generator=generator)
        self.u = torch.randn(3, dtype=DTYPE, generator=generator)

    def test_linear_model_jvp(self):
        """Test that perturbing W of f = Wx moves the outputs by ΔW·x"""
        x = torch.tensor([[1.0, -2.0, 0.5]], dtype=DTYPE)
        params = ParamVector.from_sizes(torch.zeros(6, dtype=DTYPE), [('w', 6)])
        delta = torch.tensor([[0.1, 0.2, 0.3], [-1.0, 0.0, 2.0]], dtype=DTYPE)

        def linear(theta, inputs):
            return inputs @ theta.view(2, 3).T

        result = jvp_outputs(linear, params, x, delta.reshape(-1))
        self.assertTrue(torch.allclose(result, x @ delta.T, atol=1e-15))

    def test_linear_model_vjp_rows(self):
        """Test that the linear-model Jacobian rows are copies of x"""
        x = torch.tensor([[1.0, -2.0, 0.5]], dtype=DTYPE)
        params = ParamVector.from_sizes(torch.zeros(6, dtype=DTYPE), [('w', 6)])

        def linear(theta, inputs):
            return inputs @ theta.view(2, 3).T

        row = vjp_outputs(linear, params, x, torch.tensor([[0.0, 1.0]], dtype=DTYPE)).values
        self.assertEqual(row.tolist(), [0.0, 0.0, 0.0, 1.0, -2.0, 0.5])

    def test_jvp_finite_differences(self):
        """Test that the JVP matches output differences"""
        numeric = output_difference(self.fn, self.params.values, self.batch.inputs, self.v, eps=1e-4)
        exact = jvp_outputs(self.fn, self.params, self.batch.inputs, self.v)
        self.assertLess(relative_error(exact, numeric), 1e-4)

    def test_single_sample_shape(self):
        """Test that a single sample yields a length-C vector"""
        self.assertEqual(tuple(jvp_outputs(self.fn, self.params, self.batch.inputs[0], self.v).shape), (3,))

    def test_zero_direction(self):
        """Test that J·0 is zero"""
        result = jvp_outputs(self.fn, self.params, self.batch.inputs[0], torch.zeros(self.params.dim, dtype=DTYPE))
        self.assertEqual(result.tolist(), [0.0, 0.0, 0.0])

    def test_adjoint_identity(self):
        """Test that ⟨Jv, u⟩ equals ⟨v, Jᵀu⟩"""
        sample = self.batch.inputs[1]
        left = float(jvp_outputs(self.fn, self.params, sample, self.v) @ self.u)
        right = float(self.v @ vjp_outputs(self.fn, self.params, sample, self.u).values)
        self.assertLess(abs(left - right), 1e-10 * max(abs(left), 1e-12))

    def test_unit_cotangent_is_output_gradient(self):
        """Test that Jᵀe_c is the gradient of f_c"""
        sample = self.batch.inputs[2]
        theta = leaf(self.params)
        expected = torch.autograd.grad(self.fn(theta, sample.unsqueeze(0))[0, 1], theta)[0]
        result = vjp_outputs(self.fn, self.params, sample, torch.tensor([0.0, 1.0, 0.0], dtype=DTYPE)).values
        self.assertTrue(torch.allclose(result, expected, atol=1e-14))

    def test_cotangent_mismatch(self):
        """Test that a cotangent of the wrong length is rejected"""
        with self.assertRaises(DimensionError):
            vjp_outputs(self.fn, self.params, self.batch.inputs[0], torch.ones(4, dtype=DTYPE))
