"""
Configuración de corrida: archivo key=value con prefijos de sección,
presets y overrides de línea de comandos, validados con DRF.

Precedencia: defaults < preset < archivo < --set < flags del comando.
"""
import logging
import os
from dataclasses import dataclass

from decouple import RepositoryEnv
from django.conf import settings
from rest_framework.settings import api_settings

from .data import FieldSchema
from .exceptions import ConfigError
from .networks import ModelConfig
from .pruning import PruneSchedule
from .serializers import RunConfigSerializer
from .training import TrainConfig

logger = logging.getLogger(__name__)

TOP_LEVEL_KEYS = ('seed', 'preset')

PRESETS = {
    'criteo': {},
    'avazu': {
        'data.n_numeric': '0',
        'data.n_categorical': '23',
        'data.min_freq': '5',
        'data.train_fraction': '0.8',
        'model.embed_dim': '20',
        'model.mlp_widths': '300,300,300',
        'train.l2': '6e-7',
    },
}


def read_config_file(path):
    """key=value por línea; '#' inicia un comentario"""
    if not os.path.exists(path):
        raise ConfigError(f'archivo de configuración no encontrado: {path}')
    return dict(RepositoryEnv(path).data)


def parse_overrides(pairs):
    overrides = {}
    errors = []
    for pair in pairs or ():
        key, sep, value = pair.partition('=')
        if not sep or not key.strip():
            errors.append(f'override mal formado (se espera clave=valor): {pair!r}')
            continue
        overrides[key.strip()] = value.strip()
    if errors:
        raise ConfigError(errors)
    return overrides


def _nest(flat):
    """{'train.l2': '1'} -> {'train': {'l2': '1'}}; reporta claves desconocidas"""
    fields = RunConfigSerializer().fields
    nested = {section: {} for section in RunConfigSerializer.SECTIONS}
    errors = []
    for key, value in flat.items():
        if key in TOP_LEVEL_KEYS:
            nested[key] = value
            continue
        section, _, name = key.partition('.')
        if section not in nested or not name:
            errors.append(f'{key}: clave desconocida')
        elif name not in fields[section].fields:
            errors.append(f'{key}: clave desconocida')
        else:
            nested[section][name] = value
    return nested, errors


def _flatten_errors(errors, prefix=''):
    lines = []
    if isinstance(errors, dict):
        for key, value in errors.items():
            if key == api_settings.NON_FIELD_ERRORS_KEY:
                lines.extend(_flatten_errors(value, prefix))
            else:
                lines.extend(_flatten_errors(value, f'{prefix}.{key}' if prefix else str(key)))
    elif isinstance(errors, (list, tuple)):
        for value in errors:
            lines.extend(_flatten_errors(value, prefix))
    else:
        lines.append(f'{prefix}: {errors}' if prefix else str(errors))
    return lines


@dataclass(frozen=True)
class RunConfig:
    values: dict

    def __getitem__(self, key):
        section, _, name = key.partition('.')
        if name:
            return self.values[section][name]
        return self.values[key]

    @property
    def seed(self):
        return self.values['seed']

    def schema(self):
        data = self.values['data']
        return FieldSchema.from_counts(data['n_numeric'], data['n_categorical'])

    def model_config(self, n_features, field_offsets=None, dtype=None):
        model = self.values['model']
        schema = self.schema()
        return ModelConfig(
            kind=model['kind'],
            n_fields=schema.n_fields,
            n_features=n_features,
            embed_dim=model['embed_dim'],
            mlp_widths=tuple(model['mlp_widths']),
            dropout_rate=self.values['train']['dropout'],
            init_std=model['init_std'],
            dtype=dtype or settings.CTR_PARAM_DTYPE,
            field_offsets=None if field_offsets is None else tuple(int(o) for o in field_offsets),
        )

    def train_config(self):
        train = self.values['train']
        return TrainConfig(
            learning_rate=train['learning_rate'],
            l2_penalty=train['l2'],
            batch_size=train['batch_size'],
            epochs=train['epochs'],
            dropout_rate=train['dropout'],
            seed=self.seed,
            workers=train['workers'],
        )

    def prune_schedule(self):
        prune = dict(self.values['prune'])
        goal = prune.pop('goal')
        if goal:
            for name in ('target_dnn', 'target_r', 'target_emb'):
                del prune[name]
            return PruneSchedule.from_goal(goal, **prune)
        return PruneSchedule(**prune)

    def require_paths(self, must_exist=(), must_be_set=()):
        """Valida todas las rutas antes de empezar; reporta todos los problemas juntos"""
        errors = []
        for name in tuple(must_exist) + tuple(must_be_set):
            if not self.values['paths'][name]:
                errors.append(f'paths.{name}: ruta requerida')
        for name in must_exist:
            path = self.values['paths'][name]
            if path and not os.path.exists(path):
                errors.append(f'paths.{name}: no existe {path}')
        for name in must_be_set:
            path = self.values['paths'][name]
            parent = os.path.dirname(os.path.abspath(path)) if path else ''
            if path and not os.path.isdir(parent):
                errors.append(f'paths.{name}: el directorio {parent} no existe')
        if errors:
            raise ConfigError(errors)

    def echo_lines(self):
        """Configuración efectiva, una línea key=value por clave, en orden estable"""
        lines = []
        for section in RunConfigSerializer.SECTIONS:
            for name in sorted(self.values[section]):
                value = self.values[section][name]
                if isinstance(value, (list, tuple)):
                    value = ','.join(str(v) for v in value)
                elif isinstance(value, bool):
                    value = str(value).lower()
                lines.append(f'{section}.{name}={value}')
        lines.append(f'preset={self.values["preset"]}')
        lines.append(f'seed={self.values["seed"]}')
        return lines


def load_run_config(path=None, overrides=(), preset=None, extra=None):
    """
    Combina todas las fuentes y valida. Cualquier error (en todas las
    secciones) sale junto en un solo ConfigError.
    """
    file_values = read_config_file(path) if path else {}
    set_values = parse_overrides(overrides)
    extra = {key: value for key, value in (extra or {}).items() if value is not None}

    preset = preset or set_values.get('preset') or file_values.get('preset') or 'criteo'
    if preset not in PRESETS:
        raise ConfigError([f'preset: desconocido {preset!r} (opciones: {", ".join(PRESETS)})'])

    flat = dict(PRESETS[preset])
    flat.update(file_values)
    flat.update(set_values)
    flat.update({key: str(value) for key, value in extra.items()})
    flat['preset'] = preset

    nested, errors = _nest(flat)
    serializer = RunConfigSerializer(data=nested)
    if not serializer.is_valid():
        errors.extend(_flatten_errors(serializer.errors))
    if errors:
        raise ConfigError(errors)
    logger.debug('configuración efectiva: %s', serializer.validated_data)
    return RunConfig(values=_plain(serializer.validated_data))


def _plain(data):
    if isinstance(data, dict):
        return {key: _plain(value) for key, value in data.items()}
    return data
