import csv
import struct
import tempfile
from pathlib import Path

import numpy as np
import torch
from django.test import SimpleTestCase

from dataio.datasets import (
    BatchPlan, Dataset, batch_order, batches, export_csv, make_blobs, nearest_centroid_accuracy, probe_set,
)
from dataio.idx import MNIST_MEAN, MNIST_STD, load_idx, read_idx, write_idx
from dataio.sources import load_source
from hesslens.exceptions import ConfigurationError, FormatError, LabelRangeError


def idx_bytes(magic, dims, payload):
    return struct.pack('>I', magic) + struct.pack(f'>{len(dims)}I', *dims) + bytes(payload)


class IdxTest(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        self.pixels = [0, 255, 128, 64, 10, 20, 30, 40]
        self.images = self.root / 'images'
        self.labels = self.root / 'labels'
        self.images.write_bytes(idx_bytes(0x00000803, (2, 2, 2), self.pixels))
        self.labels.write_bytes(idx_bytes(0x00000801, (2,), [7, 2]))

    def tearDown(self):
        self.tmp.cleanup()

    def test_exact_recovery(self):
        """Test that a hand-written two-image pair decodes exactly"""
        dataset = load_idx(self.images, self.labels)
        self.assertEqual(tuple(dataset.inputs.shape), (2, 1, 2, 2))
        self.assertEqual(dataset.labels.tolist(), [7, 2])
        recovered = (dataset.inputs * MNIST_STD + MNIST_MEAN) * 255.0
        self.assertTrue(np.allclose(recovered.reshape(-1).numpy(), self.pixels, atol=1e-9))

    def test_wrong_magic(self):
        """Test that a label file passed as images is a format error"""
        with self.assertRaises(FormatError):
            load_idx(self.labels, self.labels)

    def test_label_out_of_range(self):
        """Test that label 255 with ten classes is a range error"""
        self.labels.write_bytes(idx_bytes(0x00000801, (2,), [255, 1]))
        with self.assertRaises(LabelRangeError):
            load_idx(self.images, self.labels, num_classes=10)

    def test_count_mismatch(self):
        """Test that differing image and label counts are a format error"""
        self.labels.write_bytes(idx_bytes(0x00000801, (3,), [1, 2, 3]))
        with self.assertRaises(FormatError):
            load_idx(self.images, self.labels)

    def test_truncated_payload(self):
        """Test that a short payload is a format error"""
        self.images.write_bytes(idx_bytes(0x00000803, (2, 2, 2), self.pixels[:5]))
        with self.assertRaises(FormatError):
            load_idx(self.images, self.labels)

    def test_truncated_header(self):
        """Test that a file shorter than its header is a format error"""
        self.images.write_bytes(struct.pack('>I', 0x00000803) + b'\x00\x00')
        with self.assertRaises(FormatError):
            read_idx(self.images)

    def test_write_read_identity(self):
        """Test that writing then reading an array is the identity"""
        array = np.arange(60, dtype=np.uint8).reshape(3, 4, 5)
        path = write_idx(self.root / 'cube', array)
        self.assertTrue(np.array_equal(read_idx(path), array))


class BlobsTest(SimpleTestCase):
    def test_separable_classes(self):
        """Test that well-separated blobs are solved by a nearest-centroid classifier"""
        dataset = make_blobs(3, 100, 16, 6.0, seed=0)
        self.assertGreaterEqual(nearest_centroid_accuracy(dataset), 0.99)

    def test_zero_separation(self):
        """Test that zero separation puts every class mean near the origin"""
        dataset = make_blobs(3, 100, 16, 0.0, seed=1)
        for c in range(3):
            mean = dataset.inputs[dataset.labels == c].mean(dim=0)
            self.assertLess(float(mean.abs().max()), 0.6)

    def test_seed_determinism(self):
        """Test that the same seed gives identical datasets"""
        first = make_blobs(3, 20, 5, 6.0, seed=4)
        second = make_blobs(3, 20, 5, 6.0, seed=4)
        self.assertTrue(torch.equal(first.inputs, second.inputs))
        self.assertTrue(torch.equal(first.labels, second.labels))

    def test_balanced_and_standardized(self):
        """Test that blobs are class-balanced with standardized features"""
        dataset = make_blobs(4, 50, 6, 3.0, seed=2)
        self.assertEqual(dataset.class_counts, [50, 50, 50, 50])
        self.assertEqual(sum(dataset.class_counts), len(dataset))
        self.assertTrue(torch.allclose(dataset.inputs.mean(dim=0), torch.zeros(6, dtype=torch.float64), atol=1e-12))
        self.assertTrue(
            torch.allclose(dataset.inputs.std(dim=0, unbiased=False), torch.ones(6, dtype=torch.float64), atol=1e-12)
        )

    def test_more_classes_than_dimensions(self):
        """Test that blobs still build when C exceeds the dimension"""
        dataset = make_blobs(5, 10, 2, 4.0, seed=0)
        self.assertEqual(dataset.input_shape, (2,))

    def test_train_test_split(self):
        """Test that a positive test count returns both splits"""
        train, test = make_blobs(3, 40, 4, 6.0, seed=0, test_per_class=10)
        self.assertEqual((len(train), len(test)), (120, 30))

    def test_csv_export(self):
        """Test that CSV export writes the f0..f{d-1},label header"""
        dataset = make_blobs(2, 3, 3, 2.0, seed=0)
        with tempfile.TemporaryDirectory() as tmp:
            path = export_csv(dataset, Path(tmp) / 'blobs.csv')
            with open(path) as handle:
                rows = list(csv.reader(handle))
        self.assertEqual(rows[0], ['f0', 'f1', 'f2', 'label'])
        self.assertEqual(len(rows), 7)
        self.assertAlmostEqual(float(rows[1][0]), float(dataset.inputs[0, 0]), places=15)


class BatchingTest(SimpleTestCase):
    def setUp(self):
        self.dataset = Dataset.from_arrays(np.arange(10.0).reshape(10, 1), np.arange(10) % 2, 2)

    def test_sizes(self):
        """Test that N=10 with batch 4 gives sizes 4, 4, 2"""
        sizes = [len(batch) for batch in batches(self.dataset, BatchPlan(4, seed=0))]
        self.assertEqual(sizes, [4, 4, 2])

    def test_repeatable(self):
        """Test that the same plan yields the same order"""
        plan = BatchPlan(3, seed=5, epoch=2)
        self.assertEqual(batch_order(10, plan).tolist(), batch_order(10, plan).tolist())
        self.assertNotEqual(batch_order(10, plan).tolist(), batch_order(10, BatchPlan(3, seed=5, epoch=3)).tolist())

    def test_partition(self):
        """Test that the batches partition the index set"""
        seen = torch.cat([batch.inputs.reshape(-1) for batch in batches(self.dataset, BatchPlan(4, seed=1))])
        self.assertEqual(sorted(int(x) for x in seen), list(range(10)))

    def test_zero_batch_size(self):
        """Test that batch size 0 is a configuration error"""
        with self.assertRaises(ConfigurationError):
            batches(self.dataset, BatchPlan(0, seed=0))

    def test_probe_set_size(self):
        """Test that the probe set holds min(N, size) samples"""
        self.assertEqual(len(probe_set(self.dataset, size=4, seed=0)), 4)
        self.assertEqual(len(probe_set(self.dataset, size=2048, seed=0)), 10)


class SourcesTest(SimpleTestCase):
    def test_blobs_source(self):
        """Test that the blobs source string is honoured"""
        train, test = load_source('blobs:C=4,n=25,dim=8,sep=5,seed=3,test=5')
        self.assertEqual(train.num_classes, 4)
        self.assertEqual(len(train), 100)
        self.assertEqual(len(test), 20)

    def test_unknown_option(self):
        """Test that an unknown blobs key is rejected"""
        with self.assertRaises(ConfigurationError):
            load_source('blobs:C=3,colour=red')

    def test_idx_directory(self):
        """Test that a directory with train files loads without a test split"""
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            (root / 'train-images-idx3-ubyte').write_bytes(idx_bytes(0x00000803, (1, 2, 2), [1, 2, 3, 4]))
            (root / 'train-labels-idx1-ubyte').write_bytes(idx_bytes(0x00000801, (1,), [3]))
            train, test = load_source(tmp)
        self.assertEqual(len(train), 1)
        self.assertIsNone(test)

    def test_missing_source(self):
        """Test that a nonexistent path is a configuration error"""
        with self.assertRaises(ConfigurationError):
            load_source('/nonexistent/hesslens/data')
