"""Training configuration."""
import hashlib
import json
from dataclasses import asdict, dataclass

from .serializers import TrainConfigSerializer, validated


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-2
    momentum: float = 0.9
    l2: float = 1e-3
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0
    htr_gamma: float = 0.0
    htr_frequency: int = 0
    htr_layers: str = 'all'
    htr_probes: int = 1
    htr_layer_weights: dict = None
    metric_probes: int = 20
    metric_lanczos_steps: int = 32
    probe_set_size: int = 2048
    checkpoint_every: int = 0
    divergence_threshold: float = 1e6
    strict_determinism: bool = True

    @classmethod
    def from_options(cls, **options):
        """Validated config; raises ConfigurationError listing every bad field."""
        options = {key: value for key, value in options.items() if value is not None}
        if isinstance(options.get('htr_layers'), (list, tuple)):
            options['htr_layers'] = ','.join(str(i) for i in options['htr_layers'])
        return cls(**validated(TrainConfigSerializer, options))

    def validate(self):
        return TrainConfig.from_options(**self.to_dict())

    @property
    def htr_active(self):
        return self.htr_gamma > 0 and self.htr_frequency > 0

    def to_dict(self):
        data = asdict(self)
        if self.htr_layer_weights is not None:
            data['htr_layer_weights'] = {str(k): v for k, v in sorted(self.htr_layer_weights.items())}
        return data

    def config_hash(self):
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]
