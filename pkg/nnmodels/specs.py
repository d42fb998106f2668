"""Model specifications and the ``--model`` text syntax."""
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

from hesslens.exceptions import ConfigurationError

logger = logging.getLogger(__name__)

ARCHITECTURES = ('mlp', 'mlp-skip', 'lenet')
ACTIVATIONS = ('relu',)


@dataclass(frozen=True)
class ModelSpec:
    """
    Architecture description.

    For ``mlp`` and ``mlp-skip`` the widths run from the input dimension to
    the class count. For ``lenet`` the widths are the hidden fully connected
    sizes; ``channels`` and ``input_shape`` describe the convolutional stem.
    """

    architecture: str
    widths: tuple
    num_classes: int
    batch_norm: bool = False
    activation: str = 'relu'
    channels: tuple = ()
    input_shape: tuple = ()
    kernel_size: int = 5

    def __post_init__(self):
        object.__setattr__(self, 'widths', tuple(int(w) for w in self.widths))
        object.__setattr__(self, 'channels', tuple(int(c) for c in self.channels))
        if not self.input_shape and self.architecture in ('mlp', 'mlp-skip') and self.widths:
            object.__setattr__(self, 'input_shape', (self.widths[0],))
        object.__setattr__(self, 'input_shape', tuple(int(s) for s in self.input_shape))

    @classmethod
    def mlp(cls, widths, batch_norm=False, skip=False):
        widths = tuple(widths)
        return cls(
            architecture='mlp-skip' if skip else 'mlp',
            widths=widths,
            num_classes=widths[-1] if widths else 0,
            batch_norm=batch_norm,
        )

    @classmethod
    def lenet(cls, input_shape, channels, widths, num_classes, batch_norm=False, kernel_size=5):
        return cls(
            architecture='lenet',
            widths=tuple(widths),
            num_classes=num_classes,
            batch_norm=batch_norm,
            channels=tuple(channels),
            input_shape=tuple(input_shape),
            kernel_size=kernel_size,
        )

    def validate(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigurationError(f'unknown architecture {self.architecture!r}; expected one of {ARCHITECTURES}')
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f'unsupported activation {self.activation!r}')
        if self.num_classes < 2:
            raise ConfigurationError(f'class count must be at least 2, got {self.num_classes}')
        if any(w <= 0 for w in self.widths) or any(c <= 0 for c in self.channels):
            raise ConfigurationError('every width and channel count must be positive')
        if self.architecture in ('mlp', 'mlp-skip'):
            if len(self.widths) < 2:
                raise ConfigurationError('an MLP needs at least an input and an output width')
            if self.widths[-1] != self.num_classes:
                raise ConfigurationError(
                    f'output width {self.widths[-1]} does not match class count {self.num_classes}'
                )
        else:
            if len(self.input_shape) != 3 or not self.channels:
                raise ConfigurationError('lenet needs input_shape (channels, height, width) and conv channels')
            height, width = self.feature_map_size()
            if height <= 0 or width <= 0:
                raise ConfigurationError(
                    f'input {self.input_shape[1:]} is too small for {len(self.channels)} conv blocks '
                    f'with kernel {self.kernel_size}'
                )
        return self

    def feature_map_size(self):
        """Spatial size after the conv/pool stem (valid convolutions, 2×2 average pooling)."""
        height, width = self.input_shape[1:]
        for _ in self.channels:
            height = (height - self.kernel_size + 1) // 2
            width = (width - self.kernel_size + 1) // 2
        return height, width

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(**data).validate()
        except TypeError as exc:
            raise ConfigurationError(f'invalid model spec fields: {exc}') from exc

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def parse_model_spec(text):
    """
    Parse ``--model`` values.

    Accepted forms: ``mlp:4,8,3``, ``mlp-skip:16,32,32,32,3``,
    ``lenet:28x28:6,16:120,84:10`` (input HxW, conv channels, hidden widths,
    classes), any of them with ``+bn`` after the architecture, or a path to
    a JSON file holding a serialized ModelSpec.
    """
    path = Path(text)
    if text.endswith('.json') and path.exists():
        return ModelSpec.from_dict(json.loads(path.read_text()))

    head, _, rest = text.partition(':')
    architecture, _, suffix = head.partition('+')
    if suffix not in ('', 'bn'):
        raise ConfigurationError(f'unknown model option {suffix!r} in {text!r}')
    batch_norm = suffix == 'bn'
    try:
        if architecture in ('mlp', 'mlp-skip'):
            widths = _ints(rest)
            return ModelSpec.mlp(widths, batch_norm=batch_norm, skip=architecture == 'mlp-skip').validate()
        if architecture == 'lenet':
            shape, channels, widths, classes = rest.split(':')
            height, width = (int(s) for s in shape.lower().split('x'))
            return ModelSpec.lenet(
                (1, height, width), _ints(channels), _ints(widths), int(classes), batch_norm=batch_norm
            ).validate()
    except ValueError as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(f'cannot parse model spec {text!r}: {exc}') from exc
    raise ConfigurationError(f'unknown architecture {architecture!r} in {text!r}')


def _ints(text):
    return tuple(int(part) for part in text.split(',') if part.strip())
