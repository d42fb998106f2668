"""``--data`` source strings: synthetic blobs, an IDX directory or an explicit IDX pair."""
import logging
from pathlib import Path

from hesslens.exceptions import ConfigurationError

from .datasets import make_blobs
from .idx import load_idx

logger = logging.getLogger(__name__)

TRAIN_FILES = ('train-images-idx3-ubyte', 'train-labels-idx1-ubyte')
TEST_FILES = ('t10k-images-idx3-ubyte', 't10k-labels-idx1-ubyte')

BLOB_DEFAULTS = {'C': 3, 'n': 500, 'dim': 16, 'sep': 6.0, 'seed': 0, 'test': 0}


def parse_blob_options(text):
    options = dict(BLOB_DEFAULTS)
    for item in filter(None, (part.strip() for part in text.split(','))):
        key, sep, value = item.partition('=')
        if not sep or key not in BLOB_DEFAULTS:
            raise ConfigurationError(f'unknown blobs option {item!r}; expected keys {sorted(BLOB_DEFAULTS)}')
        try:
            options[key] = float(value) if key == 'sep' else int(value)
        except ValueError as exc:
            raise ConfigurationError(f'blobs option {key} needs a number, got {value!r}') from exc
    return options


def load_source(text, num_classes=10):
    """
    Resolve a data source string into ``(train, test)``; ``test`` may be None.

    - ``blobs:C=3,n=500,dim=16,sep=6[,seed=S,test=N]``
    - ``idx:IMAGES,LABELS``
    - a directory holding ``train-*-idx?-ubyte`` and optionally ``t10k-*`` files
    """
    if text.startswith('blobs'):
        options = parse_blob_options(text.partition(':')[2])
        result = make_blobs(
            options['C'], options['n'], options['dim'], options['sep'], options['seed'],
            test_per_class=options['test'],
        )
        train, test = result if options['test'] else (result, None)
        logger.info('synthesized %d blob samples over %d classes', len(train), train.num_classes)
        return train, test

    if text.startswith('idx:'):
        try:
            images, labels = text[len('idx:'):].split(',')
        except ValueError as exc:
            raise ConfigurationError(f'expected idx:IMAGES,LABELS, got {text!r}') from exc
        return load_idx(images, labels, num_classes), None

    root = Path(text)
    if not root.is_dir():
        raise ConfigurationError(f'data source {text!r} is neither blobs:, idx: nor a directory')
    train_paths = [root / name for name in TRAIN_FILES]
    missing = [str(p) for p in train_paths if not p.exists()]
    if missing:
        raise ConfigurationError(f'missing IDX files: {", ".join(missing)}')
    train = load_idx(*train_paths, num_classes=num_classes)
    test_paths = [root / name for name in TEST_FILES]
    test = load_idx(*test_paths, num_classes=num_classes) if all(p.exists() for p in test_paths) else None
    return train, test
