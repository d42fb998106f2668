"""
IDX (MNIST-family) decoding and encoding.

Layout, all integers big-endian:
  [0:4]   magic 0x0000 08 NN  (0x08 = unsigned byte, NN = number of dims)
  [4:..]  NN 32-bit dimension sizes
  [..]    unsigned byte payload, row-major
"""
import logging
import struct
from pathlib import Path

import numpy as np

from hesslens.exceptions import FormatError, LabelRangeError

from .datasets import Dataset

logger = logging.getLogger(__name__)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
MNIST_MEAN = 0.1307
MNIST_STD = 0.3081


def read_idx(path, expected_magic=None):
    """Raw unsigned-byte array stored in an IDX file."""
    payload = Path(path).read_bytes()
    if len(payload) < 4:
        raise FormatError(f'{path}: truncated header')
    (magic,) = struct.unpack('>I', payload[:4])
    if expected_magic is not None and magic != expected_magic:
        raise FormatError(f'{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}')
    if magic >> 8 != 0x08:
        raise FormatError(f'{path}: unsupported element type in magic 0x{magic:08x}')
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if ndim == 0 or len(payload) < header:
        raise FormatError(f'{path}: truncated dimension table')
    dims = struct.unpack(f'>{ndim}I', payload[4:header])
    count = int(np.prod(dims))
    if len(payload) - header < count:
        raise FormatError(f'{path}: expected {count} data bytes, found {len(payload) - header}')
    return np.frombuffer(payload, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx(path, array):
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack('>I', 0x00000800 | array.ndim) + struct.pack(f'>{array.ndim}I', *array.shape)
    Path(path).write_bytes(header + array.tobytes())
    return path


def load_idx(images_path, labels_path, num_classes=10):
    """
    MNIST-style image/label pair, pixels scaled to [0, 1] and standardized
    with the conventional mean 0.1307 and stdev 0.3081. Images come back
    shaped (N, 1, rows, cols).
    """
    images = read_idx(images_path, IMAGES_MAGIC)
    labels = read_idx(labels_path, LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f'{images.shape[0]} images but {labels.shape[0]} labels')
    if labels.size and int(labels.max()) >= num_classes:
        raise LabelRangeError(f'label {int(labels.max())} outside [0, {num_classes})')
    pixels = images.astype(np.float64) / 255.0
    pixels = (pixels - MNIST_MEAN) / MNIST_STD
    logger.info('loaded %d images of %s from %s', images.shape[0], images.shape[1:], images_path)
    return Dataset.from_arrays(
        pixels.reshape(images.shape[0], 1, *images.shape[1:]),
        labels.astype(np.int64),
        num_classes,
        name=Path(images_path).name,
    )
