import torch
from django.test import SimpleTestCase

from adcore.params import DTYPE
from dataio.datasets import Batch
from hesslens.exceptions import ConfigurationError, DenseLimitError, DimensionError
from hessops.curvature import logit_curvature
from hessops.operators import (
    DenseOperator, build_operator, gauss_newton_op, h_residual_op, hessian_op, layer_hessian_op, materialize_dense,
)
from hessops.oracles import autograd_hessian, explicit_gauss_newton, finite_difference_hessian
from nnmodels.networks import build
from nnmodels.specs import ModelSpec, parse_model_spec


def probe_batch(features, classes, samples=10, seed=0):
    generator = torch.Generator().manual_seed(seed)
    inputs = torch.randn(samples, features, dtype=DTYPE, generator=generator)
    return Batch(inputs, torch.tensor([i % classes for i in range(samples)]))


def random_vectors(dim, count, seed=1):
    generator = torch.Generator().manual_seed(seed)
    return [torch.randn(dim, dtype=DTYPE, generator=generator) for _ in range(count)]


class LogitCurvatureTest(SimpleTestCase):
    def setUp(self):
        generator = torch.Generator().manual_seed(2)
        self.curvature = logit_curvature(3.0 * torch.randn(5, 4, dtype=DTYPE, generator=generator))

    def test_softmax_form(self):
        """Test that B equals diag(p) − p pᵀ with zero row sums"""
        p = self.curvature.probabilities
        expected = torch.diag_embed(p) - p.unsqueeze(2) * p.unsqueeze(1)
        self.assertTrue(torch.allclose(self.curvature.hessian, expected, atol=1e-15))
        self.assertLess(float(self.curvature.hessian.sum(dim=2).abs().max()), 1e-15)

    def test_positive_semidefinite(self):
        """Test that every B has no negative eigenvalues beyond rounding"""
        self.assertGreater(float(torch.linalg.eigvalsh(self.curvature.hessian).min()), -1e-14)

    def test_square_root(self):
        """Test that the symmetric root squares to B"""
        root = self.curvature.sqrt
        self.assertTrue(torch.allclose(root @ root, self.curvature.hessian, atol=1e-10))
        self.assertTrue(torch.allclose(root, root.transpose(1, 2), atol=1e-15))

    def test_class_factor(self):
        """Test that the per-class factor reproduces B as R Rᵀ"""
        factor = self.curvature.factor
        self.assertTrue(torch.allclose(factor @ factor.transpose(1, 2), self.curvature.hessian, atol=1e-14))

    def test_saturated_logits(self):
        """Test that one-hot probabilities give a vanishing curvature"""
        logits = torch.tensor([[60.0, 0.0, 0.0]], dtype=DTYPE)
        self.assertLess(float(logit_curvature(logits).hessian.abs().max()), 1e-20)


class HessianOperatorTest(SimpleTestCase):
    def setUp(self):
        self.spec = ModelSpec.mlp([4, 6, 5, 3])
        self.params, self.registry = build(self.spec, seed=3)
        self.probe = probe_batch(4, 3)
        self.op = hessian_op(self.params, self.registry, self.probe)

    def test_zero_vector(self):
        """Test that the Hessian maps zero to zero"""
        self.assertEqual(float(self.op.apply(torch.zeros(self.op.dim, dtype=DTYPE)).abs().max()), 0.0)

    def test_matches_finite_difference_hessian(self):
        """Test that operator columns match a finite-difference dense Hessian"""
        dense = materialize_dense(self.op).matrix
        oracle = finite_difference_hessian(self.params, self.registry, self.probe)
        self.assertLess(float((dense - oracle).abs().max()), 1e-5)

    def test_matches_autograd_hessian(self):
        """Test that operator columns match torch's functional Hessian"""
        dense = materialize_dense(self.op).matrix
        oracle = autograd_hessian(self.params, self.registry, self.probe)
        self.assertLess(float((dense - oracle).abs().max()), 1e-10)

    def test_symmetry(self):
        """Test that ⟨Hv1, v2⟩ equals ⟨v1, Hv2⟩ on 20 random pairs"""
        vectors = random_vectors(self.op.dim, 40)
        for v1, v2 in zip(vectors[::2], vectors[1::2]):
            left = self.op.apply(v1)
            scale = float(torch.linalg.norm(left) * torch.linalg.norm(v2))
            self.assertLess(abs(float(left @ v2) - float(v1 @ self.op.apply(v2))), 1e-9 * scale)

    def test_linearity(self):
        """Test that the operator is linear"""
        v1, v2 = random_vectors(self.op.dim, 2)
        combined = self.op.apply(1.5 * v1 + 3.0 * v2)
        expected = 1.5 * self.op.apply(v1) + 3.0 * self.op.apply(v2)
        self.assertLess(float(torch.linalg.norm(combined - expected) / torch.linalg.norm(expected)), 1e-9)

    def test_dimension_mismatch(self):
        """Test that a vector of the wrong size is rejected"""
        with self.assertRaises(DimensionError):
            self.op.apply(torch.ones(self.op.dim + 1, dtype=DTYPE))

    def test_empty_probe_set(self):
        """Test that an empty probe set is a configuration error"""
        empty = Batch(torch.zeros(0, 4, dtype=DTYPE), torch.zeros(0, dtype=torch.long))
        with self.assertRaises(ConfigurationError):
            hessian_op(self.params, self.registry, empty)


class LayerHessianTest(SimpleTestCase):
    def setUp(self):
        self.params, self.registry = build(ModelSpec.mlp([4, 6, 5, 3]), seed=8)
        self.probe = probe_batch(4, 3, seed=4)
        self.full = materialize_dense(hessian_op(self.params, self.registry, self.probe))

    def test_block_extraction(self):
        """Test that each layer operator equals the diagonal block of the full Hessian"""
        for layer in range(self.registry.num_layers):
            op = layer_hessian_op(self.params, self.registry, layer, self.probe)
            block = materialize_dense(op).matrix
            expected = self.full.block(self.params.segment(layer))
            with self.subTest(layer=layer):
                self.assertEqual(op.dim, self.params.segment(layer).length)
                self.assertLess(float((block - expected).abs().max()), 1e-10)
                self.assertTrue(
                    torch.allclose(torch.linalg.eigvalsh(block), torch.linalg.eigvalsh(expected), atol=1e-10)
                )

    def test_zero_vector(self):
        """Test that a layer operator maps zero to zero"""
        op = layer_hessian_op(self.params, self.registry, 1, self.probe)
        self.assertEqual(float(op.apply(torch.zeros(op.dim, dtype=DTYPE)).abs().max()), 0.0)

    def test_trace_identity(self):
        """Test that layer traces sum to the full trace"""
        total = sum(
            float(torch.trace(materialize_dense(layer_hessian_op(self.params, self.registry, l, self.probe)).matrix))
            for l in range(self.registry.num_layers)
        )
        full_trace = float(torch.trace(self.full.matrix))
        scale = float(torch.diagonal(self.full.matrix).abs().sum())
        self.assertLess(abs(total - full_trace), 1e-10 * scale)

    def test_bad_layer_index(self):
        """Test that a layer index outside [0, L) is rejected"""
        with self.assertRaises(ConfigurationError):
            layer_hessian_op(self.params, self.registry, self.registry.num_layers, self.probe)


class GaussNewtonTest(SimpleTestCase):
    def setUp(self):
        self.params, self.registry = build(ModelSpec.mlp([4, 6, 5, 3]), seed=5)
        self.probe = probe_batch(4, 3, seed=7)
        self.g = gauss_newton_op(self.params, self.registry, self.probe)
        self.h = hessian_op(self.params, self.registry, self.probe)

    def test_explicit_jacobian_oracle(self):
        """Test that G matches Ave Jᵀ B J from explicit Jacobians"""
        dense = materialize_dense(self.g).matrix
        oracle = explicit_gauss_newton(self.params, self.registry, self.probe)
        self.assertLess(float((dense - oracle).abs().max()), 1e-8)

    def test_layer_block(self):
        """Test that G_l is the diagonal block of G"""
        oracle = explicit_gauss_newton(self.params, self.registry, self.probe, layer=1)
        dense = materialize_dense(gauss_newton_op(self.params, self.registry, self.probe, layer=1)).matrix
        self.assertLess(float((dense - oracle).abs().max()), 1e-8)

    def test_positive_semidefinite(self):
        """Test that ⟨v, Gv⟩ is nonnegative on 100 random directions"""
        for v in random_vectors(self.g.dim, 100, seed=9):
            self.assertGreaterEqual(float(v @ self.g.apply(v)), -1e-10)

    def test_symmetry(self):
        """Test that G is symmetric on random pairs"""
        v1, v2 = random_vectors(self.g.dim, 2, seed=3)
        left = float(self.g.apply(v1) @ v2)
        right = float(v1 @ self.g.apply(v2))
        self.assertLess(abs(left - right), 1e-9 * max(abs(left), 1e-12))

    def test_residual_reconstruction(self):
        """Test that H + G reconstructs the Hessian"""
        residual = h_residual_op(self.h, self.g)
        for v in random_vectors(self.g.dim, 3, seed=4):
            self.assertTrue(torch.allclose(residual.apply(v) + self.g.apply(v), self.h.apply(v), atol=1e-12))

    def test_residual_needs_matching_operators(self):
        """Test that operators of different scopes cannot be subtracted"""
        layer_g = gauss_newton_op(self.params, self.registry, self.probe, layer=0)
        with self.assertRaises(DimensionError):
            h_residual_op(self.h, layer_g)

    def test_build_by_name(self):
        """Test that short operator names resolve to the right kinds"""
        self.assertEqual(build_operator('hessian', self.params, self.registry, self.probe).kind, 'hessian')
        self.assertEqual(build_operator('g', self.params, self.registry, self.probe, layer=2).kind, 'layer-gauss-newton')
        self.assertEqual(build_operator('h', self.params, self.registry, self.probe).kind, 'h-residual')
        with self.assertRaises(ConfigurationError):
            build_operator('fisher', self.params, self.registry, self.probe)


class LinearModelTest(SimpleTestCase):
    def setUp(self):
        self.params, self.registry = build(ModelSpec.mlp([5, 3]), seed=1)
        self.probe = probe_batch(5, 3, seed=2)
        self.h = hessian_op(self.params, self.registry, self.probe)
        self.g = gauss_newton_op(self.params, self.registry, self.probe)

    def test_gauss_newton_equals_hessian(self):
        """Test that G·v equals Hess·v when the outputs are linear in θ"""
        for v in random_vectors(self.h.dim, 3):
            expected = self.h.apply(v)
            error = torch.linalg.norm(self.g.apply(v) - expected) / torch.linalg.norm(expected)
            self.assertLess(float(error), 1e-8)

    def test_residual_vanishes(self):
        """Test that the residual H is negligible for a linear softmax model"""
        residual = h_residual_op(self.h, self.g)
        for v in random_vectors(self.h.dim, 3, seed=6):
            self.assertLessEqual(
                float(torch.linalg.norm(residual.apply(v))), 1e-8 * float(torch.linalg.norm(self.h.apply(v)))
            )


class BatchNormOperatorTest(SimpleTestCase):
    def test_eval_mode_operators_symmetric(self):
        """Test that operators on a batch-norm model are symmetric"""
        params, registry = build(parse_model_spec('mlp+bn:4,6,6,3'), seed=2)
        probe = probe_batch(4, 3, seed=5)
        for op in (hessian_op(params, registry, probe), gauss_newton_op(params, registry, probe)):
            dense = materialize_dense(op)
            with self.subTest(kind=op.kind):
                self.assertLess(dense.asymmetry, 1e-9)


class MaterializeDenseTest(SimpleTestCase):
    def test_identity(self):
        """Test that the identity operator materializes to I"""
        dense = materialize_dense(DenseOperator.identity(5))
        self.assertTrue(torch.equal(dense.matrix, torch.eye(5, dtype=DTYPE)))
        self.assertEqual(dense.asymmetry, 0.0)

    def test_hessian_asymmetry(self):
        """Test that a materialized Hessian is symmetric to rounding"""
        params, registry = build(ModelSpec.mlp([3, 4, 4, 2]), seed=0)
        dense = materialize_dense(hessian_op(params, registry, probe_batch(3, 2)))
        self.assertLessEqual(dense.asymmetry, 1e-9)

    def test_dense_limit(self):
        """Test that the dimension guard refuses large operators"""
        with self.assertRaises(DenseLimitError):
            materialize_dense(DenseOperator.identity(12), max_dim=10)
