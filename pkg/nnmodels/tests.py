import torch
from django.test import SimpleTestCase

from adcore.autodiff import forward_loss, gradient
from adcore.params import DTYPE
from dataio.datasets import Batch
from hesslens.exceptions import ConfigurationError
from nnmodels.networks import build, expected_parameter_count, forward, plan_layers
from nnmodels.specs import ModelSpec, parse_model_spec


def random_inputs(shape, seed=0):
    return torch.randn(*shape, dtype=DTYPE, generator=torch.Generator().manual_seed(seed))


class ModelSpecTest(SimpleTestCase):
    def test_parse_mlp(self):
        """Test that the mlp syntax yields input-to-class widths"""
        spec = parse_model_spec('mlp:4,8,3')
        self.assertEqual(spec.architecture, 'mlp')
        self.assertEqual(spec.widths, (4, 8, 3))
        self.assertEqual(spec.num_classes, 3)
        self.assertFalse(spec.batch_norm)

    def test_parse_batch_norm_suffix(self):
        """Test that +bn switches batch normalization on"""
        spec = parse_model_spec('mlp-skip+bn:16,32,32,32,3')
        self.assertEqual(spec.architecture, 'mlp-skip')
        self.assertTrue(spec.batch_norm)

    def test_parse_lenet(self):
        """Test that the lenet syntax fills the convolutional stem"""
        spec = parse_model_spec('lenet:28x28:6,16:120,84:10')
        self.assertEqual(spec.input_shape, (1, 28, 28))
        self.assertEqual(spec.channels, (6, 16))
        self.assertEqual(spec.feature_map_size(), (4, 4))

    def test_invalid_specs(self):
        """Test that zero widths, C < 2 and unknown architectures are rejected"""
        for text in ('mlp:4,0,3', 'mlp:4,1', 'resnet:4,3', 'mlp+dropout:4,3', 'lenet:8x8:6,16:10:10'):
            with self.subTest(text=text), self.assertRaises(ConfigurationError):
                parse_model_spec(text)

    def test_json_round_trip(self):
        """Test that a spec survives its dict form"""
        spec = parse_model_spec('lenet+bn:28x28:6,16:120,84:10')
        self.assertEqual(ModelSpec.from_dict(spec.to_dict()), spec)


class BuildTest(SimpleTestCase):
    def test_deterministic(self):
        """Test that building twice with one seed gives bit-identical parameters"""
        spec = ModelSpec.mlp([4, 8, 3])
        first, _ = build(spec, seed=7)
        second, _ = build(spec, seed=7)
        self.assertTrue(torch.equal(first.values, second.values))

    def test_tiny_mlp_counts(self):
        """Test that mlp [4,8,3] has 67 parameters in 2 layers"""
        with self.assertLogs('nnmodels.networks', level='WARNING'):
            params, registry = build(ModelSpec.mlp([4, 8, 3]), seed=7)
        self.assertEqual(params.dim, 67)
        self.assertEqual(registry.num_layers, 2)
        self.assertEqual(params.layer_names, ['fc0', 'fc1'])

    def test_initialization(self):
        """Test that biases start at zero and weights within the Kaiming bound"""
        params, registry = build(ModelSpec.mlp([16, 32, 32, 3], batch_norm=True), seed=1)
        for layer in registry.layers:
            tensors = layer.unpack(params.values)
            if layer.kind == 'batchnorm':
                self.assertTrue(torch.all(tensors['weight'] == 1))
                self.assertTrue(torch.all(tensors['bias'] == 0))
            else:
                self.assertTrue(torch.all(tensors['bias'] == 0))
                bound = (6.0 / tensors['weight'].shape[1]) ** 0.5
                self.assertLessEqual(float(tensors['weight'].abs().max()), bound)

    def test_parameter_count_formula(self):
        """Test that the closed-form count matches the registry total"""
        for text in ('mlp:4,8,3', 'mlp+bn:16,32,32,3', 'mlp-skip+bn:16,32,32,32,3', 'lenet+bn:28x28:6,16:120,84:10'):
            spec = parse_model_spec(text)
            params, registry = build(spec, seed=0)
            with self.subTest(text=text):
                self.assertEqual(params.dim, expected_parameter_count(spec))
                self.assertEqual(registry.layer_map, params.layer_map)

    def test_batch_norm_entries_follow_owner(self):
        """Test that batch-norm entries sit right after the layer they normalize"""
        layers = plan_layers(parse_model_spec('mlp+bn:16,32,32,3'))
        self.assertEqual([layer.name for layer in layers], ['fc0', 'fc0.bn', 'fc1', 'fc1.bn', 'fc2'])
        self.assertEqual(layers[1].attached_to, 0)


class ForwardTest(SimpleTestCase):
    def test_lenet_output_shape(self):
        """Test that lenet on 28x28 inputs returns C scores per sample"""
        params, registry = build(parse_model_spec('lenet:28x28:6,16:120,84:10'), seed=0)
        logits = forward(params, registry, random_inputs((2, 1, 28, 28)))
        self.assertEqual(tuple(logits.shape), (2, 10))

    def test_zero_head(self):
        """Test that a zero-weight linear head gives all-zero logits"""
        params, registry = build(ModelSpec.mlp([4, 8, 8, 3]), seed=2)
        values = params.values.clone()
        values[params.segment(registry.num_layers - 1).slice] = 0.0
        logits = forward(registry.wrap(values), registry, random_inputs((5, 4)))
        self.assertEqual(float(logits.abs().max()), 0.0)

    def test_zeroed_residual_branch(self):
        """Test that a zeroed residual branch reduces the skip model to the plain path"""
        skip_params, skip_registry = build(ModelSpec.mlp([4, 8, 8, 3], skip=True), seed=4)
        self.assertEqual(skip_registry.names, ['fc0', 'block1', 'fc2'])
        values = skip_params.values.clone()
        values[skip_params.segment(1).slice] = 0.0
        plain_params, plain_registry = build(ModelSpec.mlp([4, 8, 3]), seed=4)
        plain_values = torch.cat([values[skip_params.segment(0).slice], values[skip_params.segment(2).slice]])
        x = random_inputs((6, 4))
        skip_out = forward(skip_registry.wrap(values), skip_registry, x)
        plain_out = forward(plain_registry.wrap(plain_values), plain_registry, x)
        self.assertTrue(torch.allclose(skip_out, plain_out, atol=1e-14))

    def test_unrolled_matrix_arithmetic(self):
        """Test that the forward pass matches hand-unrolled matrices"""
        params, registry = build(ModelSpec.mlp([4, 8, 3]), seed=9)
        x = random_inputs((7, 4))
        v = params.values
        expected = torch.relu(x @ v[:32].view(8, 4).T + v[32:40]) @ v[40:64].view(3, 8).T + v[64:67]
        self.assertTrue(torch.allclose(forward(params, registry, x), expected, atol=1e-14))

    def test_shape_mismatch(self):
        """Test that inputs of the wrong shape raise a configuration error"""
        params, registry = build(parse_model_spec('lenet:28x28:6,16:120,84:10'), seed=0)
        with self.assertRaises(ConfigurationError):
            forward(params, registry, random_inputs((2, 1, 20, 20)))


class BatchNormTest(SimpleTestCase):
    def setUp(self):
        self.params, self.registry = build(parse_model_spec('mlp+bn:6,10,10,3'), seed=5)
        self.x = random_inputs((12, 6), seed=3)

    def test_eval_mode_batch_size_independent(self):
        """Test that eval mode scores do not depend on the rest of the batch"""
        running = self.registry.initial_running_stats()
        fn = self.registry.function(running=running, training=False)
        full = fn(self.params.values, self.x)
        part = fn(self.params.values, self.x[:3])
        self.assertTrue(torch.allclose(full[:3], part, atol=1e-14))
        self.assertTrue(torch.equal(full, fn(self.params.values, self.x)))

    def test_training_mode_updates_running_stats(self):
        """Test that a training pass folds batch statistics in with momentum 0.1"""
        running = self.registry.initial_running_stats()
        forward(self.params, self.registry, self.x, training=True, running=running)
        mean, var = running.get('fc0.bn')
        pre = self.x @ self.params.values[:60].view(10, 6).T + self.params.values[60:70]
        self.assertTrue(torch.allclose(mean, 0.1 * pre.mean(dim=0), atol=1e-14))
        self.assertTrue(torch.allclose(var, 0.9 + 0.1 * pre.var(dim=0, unbiased=True), atol=1e-14))

    def test_training_mode_uses_batch_statistics(self):
        """Test that training-mode scores change with the batch composition"""
        fn = self.registry.function(training=True)
        full = fn(self.params.values, self.x)
        part = fn(self.params.values, self.x[:4])
        self.assertFalse(torch.allclose(full[:4], part))

    def test_every_slice_receives_gradient(self):
        """Test that no registry slice is dead on a random batch"""
        batch = Batch(self.x, torch.tensor([i % 3 for i in range(12)]))
        grad = gradient(forward_loss(self.registry.function(), self.params, batch))
        for index, name in enumerate(self.registry.names):
            with self.subTest(layer=name):
                self.assertGreater(float(grad.layer(index).abs().sum()), 0.0)
