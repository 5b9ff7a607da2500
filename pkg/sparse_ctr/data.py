"""
Ingesta de filas estilo Criteo: diccionarios de features con umbral de
frecuencia, normalización de campos numéricos y codificación de muestras.

Formato de entrada (TSV): etiqueta 0/1, luego columnas numéricas, luego
columnas categóricas. Cadena vacía = valor faltante.
"""
import hashlib
import logging
import math
import os
from collections import Counter
from dataclasses import dataclass, field, replace
from types import MappingProxyType

import numpy as np

from .exceptions import ConfigError, InputError, ParseError

logger = logging.getLogger(__name__)

DEFAULT_TOKEN = ''


@dataclass(frozen=True)
class FieldSchema:
    """Posiciones numéricas y categóricas de los n campos"""
    n_fields: int
    numeric_fields: tuple = ()
    categorical_fields: tuple = ()

    def __post_init__(self):
        errors = []
        if self.n_fields < 1:
            errors.append('n_fields debe ser >= 1')
        numeric = set(self.numeric_fields)
        categorical = set(self.categorical_fields)
        if numeric & categorical:
            errors.append(f'campos numéricos y categóricos se solapan: {sorted(numeric & categorical)}')
        if numeric | categorical != set(range(self.n_fields)):
            errors.append('los campos numéricos y categóricos deben cubrir exactamente 0..n_fields-1')
        if len(self.numeric_fields) + len(self.categorical_fields) != self.n_fields:
            errors.append('posiciones de campo repetidas')
        if errors:
            raise ConfigError(errors)

    @classmethod
    def from_counts(cls, n_numeric, n_categorical):
        """Disposición Criteo: primero numéricos, luego categóricos"""
        return cls(
            n_fields=n_numeric + n_categorical,
            numeric_fields=tuple(range(n_numeric)),
            categorical_fields=tuple(range(n_numeric, n_numeric + n_categorical)),
        )

    @property
    def n_columns(self):
        return self.n_fields + 1

    def is_numeric(self, field_id):
        return field_id in self.numeric_fields

    def describe(self):
        numeric = ','.join(str(f) for f in self.numeric_fields)
        return f'n_fields={self.n_fields}\tnumeric={numeric}'


def transform_numeric(x, floor=False):
    """(ln x)^2 si x > 2; identidad en otro caso. `floor` trunca como la receta de la competencia."""
    try:
        x = float(x)
    except (TypeError, ValueError) as exc:
        raise InputError(f'valor numérico inválido: {x!r}') from exc
    if not math.isfinite(x) or x < 0:
        raise InputError(f'valor numérico fuera de dominio: {x!r}')
    if x > 2:
        x = math.log(x) ** 2
        if floor:
            x = float(math.floor(x))
    return x


@dataclass(frozen=True)
class FeatureDictionary:
    """
    Mapa token -> índice por campo. Cada campo ocupa el rango contiguo
    [field_offsets[f], field_offsets[f+1]); el primer índice es su default.
    """
    schema: FieldSchema
    min_freq: int
    token_maps: tuple
    field_offsets: tuple

    @property
    def total_features(self):
        return self.field_offsets[-1]

    def default_index(self, field_id):
        return self.field_offsets[field_id]

    def lookup(self, field_id, token):
        return self.token_maps[field_id].get(token, self.field_offsets[field_id])

    def field_range(self, field_id):
        return self.field_offsets[field_id], self.field_offsets[field_id + 1]

    def field_cardinalities(self):
        return [self.field_offsets[f + 1] - self.field_offsets[f] for f in range(self.schema.n_fields)]

    def entries(self):
        """(field_id, token, index) en orden de índice; el default lleva token vacío"""
        for field_id in range(self.schema.n_fields):
            yield field_id, DEFAULT_TOKEN, self.field_offsets[field_id]
            for token, index in sorted(self.token_maps[field_id].items(), key=lambda item: item[1]):
                yield field_id, token, index

    @property
    def hash(self):
        digest = hashlib.sha256()
        digest.update(f'#@schema\t{self.schema.describe()}\n'.encode('utf-8'))
        for field_id, token, index in self.entries():
            digest.update(f'{field_id}\t{token}\t{index}\n'.encode('utf-8'))
        return digest.hexdigest()


@dataclass
class Batch:
    indices: np.ndarray
    values: np.ndarray
    labels: np.ndarray = None

    def __len__(self):
        return self.indices.shape[0]


@dataclass
class Sample:
    """Una instancia: exactamente un (índice, valor) por campo"""
    label: int
    indices: np.ndarray
    values: np.ndarray

    def to_batch(self):
        return Batch(
            indices=self.indices[None, :],
            values=self.values[None, :],
            labels=np.array([self.label], dtype=np.int8),
        )


@dataclass
class EncodedDataset:
    labels: np.ndarray
    indices: np.ndarray
    values: np.ndarray
    field_offsets: np.ndarray
    dictionary_hash: str = ''
    is_test: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.is_test is None:
            self.is_test = np.zeros(len(self.labels), dtype=bool)

    def __len__(self):
        return len(self.labels)

    @property
    def n_fields(self):
        return self.indices.shape[1]

    @property
    def n_features(self):
        return int(self.field_offsets[-1])

    def subset(self, rows):
        return replace(
            self,
            labels=self.labels[rows],
            indices=self.indices[rows],
            values=self.values[rows],
            is_test=self.is_test[rows],
        )

    def batch(self, rows=None):
        if rows is None:
            return Batch(self.indices, self.values, self.labels)
        return Batch(self.indices[rows], self.values[rows], self.labels[rows])

    def batches(self, order, batch_size):
        for start in range(0, len(order), batch_size):
            yield self.batch(order[start:start + batch_size])

    def sample(self, i):
        return Sample(int(self.labels[i]), self.indices[i], self.values[i])

    def train_part(self):
        return self.subset(~self.is_test)

    def test_part(self):
        return self.subset(self.is_test)

    def save(self, path):
        """Escritura atómica en .npz (temporal + rename)"""
        tmp_path = f'{path}.tmp'
        with open(tmp_path, 'wb') as fh:
            np.savez(
                fh,
                labels=self.labels,
                indices=self.indices,
                values=self.values,
                is_test=self.is_test,
                field_offsets=self.field_offsets,
                dictionary_hash=np.array(self.dictionary_hash),
            )
        os.replace(tmp_path, path)

    @classmethod
    def load(cls, path):
        try:
            with np.load(path, allow_pickle=False) as archive:
                return cls(
                    labels=archive['labels'],
                    indices=archive['indices'],
                    values=archive['values'],
                    field_offsets=archive['field_offsets'],
                    dictionary_hash=str(archive['dictionary_hash']),
                    is_test=archive['is_test'],
                )
        except (OSError, KeyError, ValueError) as exc:
            raise InputError(f'dataset codificado ilegible {path}: {exc}') from exc


def _check_arity(tokens, schema, row_number):
    if len(tokens) != schema.n_columns:
        raise ParseError(
            f'se esperaban {schema.n_columns} columnas, hay {len(tokens)}',
            row=row_number,
        )


def read_tsv(path, schema, chunk_size=100_000):
    """
    Recorre el TSV línea a línea; cada fila sale como lista de tokens str.
    Una fila con más o menos columnas que el esquema es un ParseError con su número.
    """
    with open(path, encoding='utf-8', newline='') as fh:
        for row_number, line in enumerate(fh, start=1):
            tokens = line.rstrip('\r\n').split('\t')
            _check_arity(tokens, schema, row_number)
            if row_number % chunk_size == 0:
                logger.debug('%s: %d filas leídas', path, row_number)
            yield tokens


def build_dictionary(rows, schema, min_freq):
    """
    Cuenta tokens por campo y asigna índices densos. Tokens con frecuencia
    menor que min_freq (y los vacíos) quedan en el default del campo.
    """
    if min_freq < 1:
        raise ConfigError('min_freq debe ser >= 1')

    counters = [Counter() for _ in range(schema.n_fields)]
    categorical = schema.categorical_fields
    n_rows = 0
    for row_number, tokens in enumerate(rows, start=1):
        _check_arity(tokens, schema, row_number)
        for field_id in categorical:
            token = tokens[field_id + 1]
            if token != DEFAULT_TOKEN:
                counters[field_id][token] += 1
        n_rows += 1

    token_maps = []
    offsets = [0]
    for field_id in range(schema.n_fields):
        # El default ocupa el primer índice del rango
        next_index = offsets[-1] + 1
        token_map = {}
        if not schema.is_numeric(field_id):
            kept = sorted(token for token, count in counters[field_id].items() if count >= min_freq)
            for token in kept:
                token_map[token] = next_index
                next_index += 1
        token_maps.append(MappingProxyType(token_map))
        offsets.append(next_index)

    dictionary = FeatureDictionary(
        schema=schema,
        min_freq=min_freq,
        token_maps=tuple(token_maps),
        field_offsets=tuple(offsets),
    )
    logger.info('Diccionario construido: %d filas, m=%d features', n_rows, dictionary.total_features)
    return dictionary


def save_dictionary(dictionary, path, header_lines=()):
    """Una línea por entrada: field_id<TAB>token<TAB>index"""
    tmp_path = f'{path}.tmp'
    with open(tmp_path, 'w', encoding='utf-8', newline='\n') as fh:
        fh.write(f'#@schema\t{dictionary.schema.describe()}\n')
        fh.write(f'#@min_freq\t{dictionary.min_freq}\n')
        for line in header_lines:
            fh.write(f'# {line}\n')
        for field_id, token, index in dictionary.entries():
            fh.write(f'{field_id}\t{token}\t{index}\n')
    os.replace(tmp_path, path)


def load_dictionary(path):
    n_fields = None
    numeric = ()
    min_freq = 1
    entries = []
    with open(path, encoding='utf-8') as fh:
        for line_number, line in enumerate(fh, start=1):
            line = line.rstrip('\n')
            if line.startswith('#@schema'):
                parts = dict(part.split('=', 1) for part in line.split('\t')[1:])
                n_fields = int(parts['n_fields'])
                numeric = tuple(int(f) for f in parts['numeric'].split(',') if f)
                continue
            if line.startswith('#@min_freq'):
                min_freq = int(line.split('\t')[1])
                continue
            if line.startswith('#') or not line:
                continue
            parts = line.split('\t')
            if len(parts) != 3:
                raise ParseError('entrada de diccionario mal formada', row=line_number)
            try:
                entries.append((int(parts[0]), parts[1], int(parts[2])))
            except ValueError as exc:
                raise ParseError('entrada de diccionario mal formada', row=line_number) from exc

    if n_fields is None:
        raise ParseError(f'{path}: falta la cabecera #@schema')
    schema = FieldSchema(
        n_fields=n_fields,
        numeric_fields=numeric,
        categorical_fields=tuple(f for f in range(n_fields) if f not in numeric),
    )

    token_maps = [{} for _ in range(n_fields)]
    defaults = {}
    for field_id, token, index in entries:
        if token == DEFAULT_TOKEN:
            defaults[field_id] = index
        else:
            token_maps[field_id][token] = index
    if sorted(defaults) != list(range(n_fields)):
        raise ParseError(f'{path}: cada campo necesita exactamente un default')

    offsets = [defaults[f] for f in range(n_fields)] + [len(entries)]
    for field_id in range(n_fields):
        expected = offsets[field_id + 1] - offsets[field_id] - 1
        if len(token_maps[field_id]) != expected:
            raise ParseError(f'{path}: rango de índices no contiguo en el campo {field_id}')

    return FeatureDictionary(
        schema=schema,
        min_freq=min_freq,
        token_maps=tuple(MappingProxyType(m) for m in token_maps),
        field_offsets=tuple(offsets),
    )


def encode_sample(row, dictionary, floor_log=False, clip_negative=False, row_number=None):
    """Fila cruda -> Sample; tokens no vistos van al default del campo"""
    schema = dictionary.schema
    if len(row) == schema.n_fields:
        raise ParseError('falta la columna de etiqueta', row=row_number)
    _check_arity(row, schema, row_number)
    label = row[0]
    if label not in ('0', '1'):
        raise ParseError(f'etiqueta inválida {label!r}', row=row_number)

    indices = np.empty(schema.n_fields, dtype=np.int64)
    values = np.ones(schema.n_fields, dtype=np.float64)
    for field_id in range(schema.n_fields):
        token = row[field_id + 1]
        if schema.is_numeric(field_id):
            indices[field_id] = dictionary.default_index(field_id)
            if token == DEFAULT_TOKEN:
                values[field_id] = 0.0
                continue
            try:
                raw = float(token)
                if clip_negative and raw < 0:
                    raw = 0.0
                values[field_id] = transform_numeric(raw, floor=floor_log)
            except (ValueError, InputError) as exc:
                raise ParseError(f'campo {field_id}: {exc}', row=row_number) from exc
        else:
            indices[field_id] = dictionary.lookup(field_id, token)
    return Sample(label=int(label), indices=indices, values=values)


def encode_rows(rows, dictionary, floor_log=False, clip_negative=False):
    labels, indices, values = [], [], []
    for row_number, row in enumerate(rows, start=1):
        sample = encode_sample(row, dictionary, floor_log, clip_negative, row_number)
        labels.append(sample.label)
        indices.append(sample.indices)
        values.append(sample.values)
    if not labels:
        raise InputError('no hay filas para codificar')
    return EncodedDataset(
        labels=np.asarray(labels, dtype=np.int8),
        indices=np.stack(indices),
        values=np.stack(values),
        field_offsets=np.asarray(dictionary.field_offsets, dtype=np.int64),
        dictionary_hash=dictionary.hash,
    )


def split_mask(n_samples, train_fraction, seed):
    """Máscara is_test determinista para una semilla dada"""
    if not 0 < train_fraction < 1:
        raise InputError(f'train_fraction debe estar en (0, 1), se recibió {train_fraction}')
    if n_samples == 0:
        raise InputError('no se puede particionar una entrada vacía')
    rng = np.random.default_rng(seed)
    permutation = rng.permutation(n_samples)
    n_train = int(round(train_fraction * n_samples))
    is_test = np.ones(n_samples, dtype=bool)
    is_test[permutation[:n_train]] = False
    return is_test


def split_dataset(samples, train_fraction, seed):
    """(train, test) a partir de un EncodedDataset o de una secuencia de muestras"""
    is_test = split_mask(len(samples), train_fraction, seed)
    if isinstance(samples, EncodedDataset):
        return samples.subset(~is_test), samples.subset(is_test)
    train = [s for s, t in zip(samples, is_test) if not t]
    test = [s for s, t in zip(samples, is_test) if t]
    return train, test
