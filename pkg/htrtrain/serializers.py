from rest_framework import serializers

from hesslens.exceptions import ConfigurationError

from .regularizer import SELECTION_MODES


class TrainConfigSerializer(serializers.Serializer):
    lr = serializers.FloatField(default=1e-2)
    momentum = serializers.FloatField(default=0.9, min_value=0.0)
    l2 = serializers.FloatField(default=1e-3, min_value=0.0)
    batch_size = serializers.IntegerField(default=64, min_value=1)
    epochs = serializers.IntegerField(default=10, min_value=0)
    seed = serializers.IntegerField(default=0, min_value=0)
    htr_gamma = serializers.FloatField(default=0.0, min_value=0.0)
    htr_frequency = serializers.IntegerField(default=0, min_value=0)
    htr_layers = serializers.CharField(default='all')
    htr_probes = serializers.IntegerField(default=1, min_value=1)
    htr_layer_weights = serializers.DictField(
        child=serializers.FloatField(min_value=0.0), required=False, allow_null=True, default=None
    )
    metric_probes = serializers.IntegerField(default=20, min_value=0)
    metric_lanczos_steps = serializers.IntegerField(default=32, min_value=1)
    probe_set_size = serializers.IntegerField(default=2048, min_value=1)
    checkpoint_every = serializers.IntegerField(default=0, min_value=0)
    divergence_threshold = serializers.FloatField(default=1e6)
    strict_determinism = serializers.BooleanField(default=True)

    def validate_lr(self, value):
        if not value > 0:
            raise serializers.ValidationError('Learning rate must be positive.')
        return value

    def validate_divergence_threshold(self, value):
        if not value > 0:
            raise serializers.ValidationError('Divergence threshold must be positive.')
        return value

    def validate_htr_layers(self, value):
        value = value.strip()
        if value in SELECTION_MODES:
            return value
        try:
            indices = [int(part) for part in value.split(',') if part.strip()]
        except ValueError:
            raise serializers.ValidationError("Use 'all', 'middle' or a comma-separated list of layer indices.")
        if not indices or min(indices) < 0:
            raise serializers.ValidationError('Explicit layer lists need nonnegative indices.')
        return ','.join(str(i) for i in indices)

    def validate_htr_layer_weights(self, value):
        if value is None:
            return None
        try:
            return {int(layer): float(weight) for layer, weight in value.items()}
        except ValueError:
            raise serializers.ValidationError('Layer weight keys must be layer indices.')


class SpectrumOptionsSerializer(serializers.Serializer):
    operator = serializers.CharField(default='hessian')
    scope = serializers.CharField(default='full')
    lanczos_m = serializers.IntegerField(min_value=1)
    grid_k = serializers.IntegerField(min_value=2)
    kappa = serializers.FloatField()
    probes = serializers.IntegerField(min_value=1)

    def validate_operator(self, value):
        names = [name.strip() for name in value.split(',') if name.strip()]
        unknown = [name for name in names if name not in ('hessian', 'g', 'h')]
        if not names or unknown:
            raise serializers.ValidationError(f'Unknown operator(s) {unknown or value!r}; use hessian, g or h.')
        return names

    def validate_scope(self, value):
        if value in ('full', 'layers') or value.startswith('layer:'):
            if value.startswith('layer:') and not value[len('layer:'):].isdigit():
                raise serializers.ValidationError('Use layer:K with a nonnegative integer K.')
            return value
        raise serializers.ValidationError('Scope must be full, layers or layer:K.')

    def validate_kappa(self, value):
        if not value > 1:
            raise serializers.ValidationError('Kappa must exceed 1.')
        return value


def validated(serializer_class, data):
    """Run ``serializer_class`` on ``data`` and return the validated mapping or raise ConfigurationError."""
    serializer = serializer_class(data=data)
    if not serializer.is_valid():
        raise ConfigurationError(format_errors(serializer.errors))
    return dict(serializer.validated_data)


def format_errors(errors):
    parts = []
    for field, messages in errors.items():
        text = ' '.join(str(m) for m in messages) if isinstance(messages, (list, tuple)) else str(messages)
        parts.append(f'{field}: {text}')
    return '; '.join(parts)
