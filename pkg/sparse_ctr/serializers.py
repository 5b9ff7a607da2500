from rest_framework import serializers

from .networks import ModelKind
from .pruning import NAMED_GOALS, EmbeddingMode


class IntegerListField(serializers.Field):
    """Lista de enteros positivos escrita como '400,400,400'"""
    default_error_messages = {
        'invalid': 'Se esperaba una lista de enteros separados por comas.',
        'not_positive': 'Todos los valores deben ser enteros positivos.',
    }

    def to_internal_value(self, data):
        if isinstance(data, str):
            parts = [part.strip() for part in data.split(',') if part.strip()]
        elif isinstance(data, (list, tuple)):
            parts = list(data)
        else:
            self.fail('invalid')
        try:
            values = [int(part) for part in parts]
        except (TypeError, ValueError):
            self.fail('invalid')
        if any(value < 1 for value in values):
            self.fail('not_positive')
        return values

    def to_representation(self, value):
        return ','.join(str(v) for v in value)


def _unit_interval(value, closed_low=True):
    low_ok = value >= 0 if closed_low else value > 0
    if not (low_ok and value < 1):
        interval = '[0, 1)' if closed_low else '(0, 1)'
        raise serializers.ValidationError(f'Debe estar en {interval}.')
    return value


class DataSectionSerializer(serializers.Serializer):
    n_numeric = serializers.IntegerField(min_value=0, default=13)
    n_categorical = serializers.IntegerField(min_value=0, default=26)
    min_freq = serializers.IntegerField(min_value=1, default=8)
    floor_log = serializers.BooleanField(default=False)
    clip_negative = serializers.BooleanField(default=False)
    train_fraction = serializers.FloatField(default=0.9)
    chunk_size = serializers.IntegerField(min_value=1, default=100_000)

    def validate_train_fraction(self, value):
        if not 0 < value < 1:
            raise serializers.ValidationError('Debe estar en (0, 1).')
        return value

    def validate(self, data):
        if data['n_numeric'] + data['n_categorical'] < 1:
            raise serializers.ValidationError('El esquema necesita al menos un campo.')
        return data


class ModelSectionSerializer(serializers.Serializer):
    kind = serializers.ChoiceField(choices=ModelKind.choices, default=ModelKind.DEEPFWFM)
    embed_dim = serializers.IntegerField(min_value=1, default=10)
    mlp_widths = IntegerListField(default=[400, 400, 400])
    init_std = serializers.FloatField(default=0.01)

    def validate_init_std(self, value):
        if value <= 0:
            raise serializers.ValidationError('Debe ser > 0.')
        return value

    def validate(self, data):
        if data['kind'] == ModelKind.DEEPFWFM and not data['mlp_widths']:
            raise serializers.ValidationError({'mlp_widths': 'DeepFwFM necesita al menos una capa oculta.'})
        return data


class TrainSectionSerializer(serializers.Serializer):
    learning_rate = serializers.FloatField(default=0.001)
    l2 = serializers.FloatField(min_value=0, default=3e-7)
    batch_size = serializers.IntegerField(min_value=1, default=2048)
    epochs = serializers.IntegerField(min_value=0, default=10)
    dropout = serializers.FloatField(default=0.5)
    workers = serializers.IntegerField(min_value=1, default=1)

    def validate_learning_rate(self, value):
        if value <= 0:
            raise serializers.ValidationError('Debe ser > 0.')
        return value

    def validate_dropout(self, value):
        return _unit_interval(value)


class PruneSectionSerializer(serializers.Serializer):
    goal = serializers.ChoiceField(choices=sorted(NAMED_GOALS), allow_blank=True, default='')
    target_dnn = serializers.FloatField(default=0.0)
    target_r = serializers.FloatField(default=0.0)
    target_emb = serializers.FloatField(default=0.0)
    damping = serializers.FloatField(default=0.99)
    frequency = serializers.IntegerField(min_value=1, default=100)
    every = serializers.IntegerField(min_value=1, default=10)
    warmup_epochs = serializers.IntegerField(min_value=0, default=2)
    embedding_mode = serializers.ChoiceField(choices=EmbeddingMode.choices, default=EmbeddingMode.GLOBAL)
    freeze_masks = serializers.BooleanField(default=False)

    def validate_target_dnn(self, value):
        return _unit_interval(value)

    def validate_target_r(self, value):
        return _unit_interval(value)

    def validate_target_emb(self, value):
        return _unit_interval(value)

    def validate_damping(self, value):
        return _unit_interval(value, closed_low=False)

    def validate(self, data):
        if data['goal'] and any(data[name] > 0 for name in ('target_dnn', 'target_r', 'target_emb')):
            raise serializers.ValidationError(
                {'goal': 'No se combina con prune.target_dnn, target_r ni target_emb.'}
            )
        return data


class PathsSectionSerializer(serializers.Serializer):
    data = serializers.CharField(allow_blank=True, default='')
    dictionary = serializers.CharField(allow_blank=True, default='')
    dataset = serializers.CharField(allow_blank=True, default='')
    checkpoint = serializers.CharField(allow_blank=True, default='')
    metrics = serializers.CharField(allow_blank=True, default='')


class BenchSectionSerializer(serializers.Serializer):
    repetitions = serializers.IntegerField(min_value=1, default=1000)
    warmup = serializers.IntegerField(min_value=0, default=50)
    threads = serializers.IntegerField(min_value=1, default=1)


class RunConfigSerializer(serializers.Serializer):
    """Configuración completa de una corrida; cada sección se valida por separado"""
    data = DataSectionSerializer()
    model = ModelSectionSerializer()
    train = TrainSectionSerializer()
    prune = PruneSectionSerializer()
    paths = PathsSectionSerializer()
    bench = BenchSectionSerializer()
    seed = serializers.IntegerField(min_value=0, default=2020)
    preset = serializers.CharField(allow_blank=True, default='')

    SECTIONS = ('data', 'model', 'train', 'prune', 'paths', 'bench')
