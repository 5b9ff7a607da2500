"""
Formato binario de checkpoints (ver docs/checkpoint_format.md).

    magic b'CTRPRUNE' | uint32 versión | uint32 len + JSON de metadatos |
    uint32 n_secciones | secciones | uint32 CRC-32 de todo lo anterior

Todo en little-endian. Los tensores conservan su dtype, por lo que
load(save(m)) reproduce los parámetros bit a bit.
"""
import json
import logging
import math
import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np
from django.db import models

from .exceptions import CheckpointError, CtrError
from .networks import ModelConfig, params_from_tensors
from .pruning import sparsity_report
from .sparse_infer import CrsMatrix, PairList, SparseModel
from .training import AdamState

logger = logging.getLogger(__name__)

MAGIC = b'CTRPRUNE'
VERSION = 1


class SectionEncoding(models.IntegerChoices):
    DENSE = 0, 'dense'
    CRS = 1, 'crs'
    SPARSE_ROWS = 2, 'sparse_rows'
    PAIRS = 3, 'pairs'


class CheckpointFormat(models.TextChoices):
    DENSE = 'dense', 'Parámetros densos'
    SPARSE = 'sparse', 'Modelo compilado'


DTYPE_CODES = {
    1: np.dtype('<f4'),
    2: np.dtype('<f8'),
    3: np.dtype('<i8'),
    4: np.dtype('u1'),
    5: np.dtype('<u2'),
    6: np.dtype('<i4'),
}
_CODE_BY_DTYPE = {dtype: code for code, dtype in DTYPE_CODES.items()}

ADAM_FIRST_PREFIX = 'adam.m.'
ADAM_SECOND_PREFIX = 'adam.v.'


def _dtype_code(array, section):
    code = _CODE_BY_DTYPE.get(array.dtype.newbyteorder('<'))
    if code is None:
        raise CheckpointError(f'dtype no soportado: {array.dtype}', section)
    return code


def _index_dtype(limit):
    """El entero sin signo más chico que representa valores < limit"""
    if limit <= 256:
        return np.dtype('u1')
    if limit <= 65536:
        return np.dtype('<u2')
    return np.dtype('<i8')


def _encode_array(array, section):
    array = np.ascontiguousarray(array)
    code = _dtype_code(array, section)
    header = struct.pack('<BB', code, array.ndim) + struct.pack(f'<{array.ndim}Q', *array.shape)
    return header + array.astype(DTYPE_CODES[code], copy=False).tobytes()


def _encode_section(name, encoding, arrays):
    encoded_name = name.encode('utf-8')
    chunks = [
        struct.pack('<H', len(encoded_name)),
        encoded_name,
        struct.pack('<BB', int(encoding), len(arrays)),
    ]
    chunks.extend(_encode_array(array, name) for array in arrays)
    return b''.join(chunks)


def _crs_arrays(matrix):
    return [
        np.array([matrix.n_rows, matrix.n_cols], dtype='<i8'),
        matrix.row_ptr.astype('<i8'),
        matrix.col_idx.astype(_index_dtype(matrix.n_cols)),
        matrix.values,
    ]


def _sparse_rows_arrays(matrix):
    """Conteo por fila + columnas en u1 (k <= 255) o u2; filas vacías solo cuestan su conteo"""
    index_dtype = np.dtype('u1') if matrix.n_cols <= 255 else np.dtype('<u2')
    return [
        np.array([matrix.n_rows, matrix.n_cols], dtype='<i8'),
        np.diff(matrix.row_ptr).astype(index_dtype),
        matrix.col_idx.astype(index_dtype),
        matrix.values,
    ]


def _pairs_arrays(pairs, n_fields):
    index_dtype = _index_dtype(n_fields)
    return [
        np.array([n_fields], dtype='<i8'),
        pairs.left.astype(index_dtype),
        pairs.right.astype(index_dtype),
        pairs.weights,
    ]


def _model_sections(model):
    if isinstance(model, SparseModel):
        sections = [('w0', SectionEncoding.DENSE, [model.w0])]
        if model.linear is not None:
            sections.append(('w', SectionEncoding.DENSE, [model.linear]))
        if model.embeddings is not None:
            sections.append(('e', SectionEncoding.SPARSE_ROWS, _sparse_rows_arrays(model.embeddings)))
        if model.field_vectors is not None:
            sections.append(('v', SectionEncoding.DENSE, [model.field_vectors]))
            sections.append(('R', SectionEncoding.PAIRS, _pairs_arrays(model.pairs, model.config.n_fields)))
        for i, (weight, bias) in enumerate(model.layers):
            sections.append((f'mlp.{i}.weight', SectionEncoding.CRS, _crs_arrays(weight)))
            sections.append((f'mlp.{i}.bias', SectionEncoding.DENSE, [bias]))
        if model.output is not None:
            sections.append(('out.weight', SectionEncoding.CRS, _crs_arrays(model.output[0])))
            sections.append(('out.bias', SectionEncoding.DENSE, [model.output[1]]))
        return sections
    return [(name, SectionEncoding.DENSE, [tensor]) for name, tensor in model.items()]


def save_checkpoint(model, path, dictionary_hash='', config_echo=(), adam_state=None, train_state=None):
    """Escribe parámetros densos o un SparseModel; escritura atómica (temporal + rename)"""
    is_sparse = isinstance(model, SparseModel)
    dense = model.densify() if is_sparse else model
    metadata = {
        'format': CheckpointFormat.SPARSE if is_sparse else CheckpointFormat.DENSE,
        'model_config': model.config.to_dict(),
        'dictionary_hash': dictionary_hash,
        'sparsity': sparsity_report(dense).as_dict(),
        'config_echo': list(config_echo),
    }
    sections = _model_sections(model)
    if adam_state is not None:
        metadata['adam'] = {
            't': adam_state.t,
            'beta1': adam_state.beta1,
            'beta2': adam_state.beta2,
            'epsilon': adam_state.epsilon,
        }
        for name in sorted(adam_state.m):
            sections.append((ADAM_FIRST_PREFIX + name, SectionEncoding.DENSE, [adam_state.m[name]]))
            sections.append((ADAM_SECOND_PREFIX + name, SectionEncoding.DENSE, [adam_state.v[name]]))
    if train_state is not None:
        metadata['train_state'] = train_state

    encoded_metadata = json.dumps(metadata, sort_keys=True).encode('utf-8')
    body = b''.join([
        MAGIC,
        struct.pack('<I', VERSION),
        struct.pack('<I', len(encoded_metadata)),
        encoded_metadata,
        struct.pack('<I', len(sections)),
        *(_encode_section(name, encoding, arrays) for name, encoding, arrays in sections),
    ])
    tmp_path = f'{path}.tmp'
    with open(tmp_path, 'wb') as fh:
        fh.write(body)
        fh.write(struct.pack('<I', zlib.crc32(body)))
    os.replace(tmp_path, path)
    logger.info('Checkpoint %s escrito: %d bytes, %d secciones', path, len(body) + 4, len(sections))


class _Reader:
    """Cursor sobre los bytes del archivo con chequeo de límites"""

    def __init__(self, data):
        self.data = data
        self.offset = 0

    def take(self, size, section):
        end = self.offset + size
        if size < 0 or end > len(self.data):
            raise CheckpointError('archivo truncado', section)
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt, section):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), section))

    def array(self, section):
        code, ndim = self.unpack('<BB', section)
        dtype = DTYPE_CODES.get(code)
        if dtype is None:
            raise CheckpointError(f'código de dtype desconocido: {code}', section)
        shape = self.unpack(f'<{ndim}Q', section)
        count = math.prod(shape)
        raw = self.take(count * dtype.itemsize, section)
        return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder('='))


@dataclass
class LoadedCheckpoint:
    metadata: dict
    params: object = None
    sparse_model: SparseModel = None
    adam_state: AdamState = None

    @property
    def model(self):
        return self.sparse_model if self.sparse_model is not None else self.params

    @property
    def is_sparse(self):
        return self.sparse_model is not None

    @property
    def dictionary_hash(self):
        return self.metadata.get('dictionary_hash', '')

    @property
    def train_state(self):
        return self.metadata.get('train_state')

    def dense_params(self):
        return self.sparse_model.densify() if self.is_sparse else self.params


def _crs_from_arrays(arrays, section):
    dims, row_ptr, col_idx, values = arrays
    return CrsMatrix(int(dims[0]), int(dims[1]), row_ptr.astype(np.int64), col_idx.astype(np.int64), values)


def _sparse_rows_from_arrays(arrays, section):
    dims, counts, col_idx, values = arrays
    row_ptr = np.concatenate([[0], np.cumsum(counts, dtype=np.int64)])
    return CrsMatrix(int(dims[0]), int(dims[1]), row_ptr, col_idx.astype(np.int64), values)


def _pairs_from_arrays(arrays, section):
    _, left, right, weights = arrays
    return PairList(left=left.astype(np.int64), right=right.astype(np.int64), weights=weights)


_DECODERS = {
    SectionEncoding.CRS: _crs_from_arrays,
    SectionEncoding.SPARSE_ROWS: _sparse_rows_from_arrays,
    SectionEncoding.PAIRS: _pairs_from_arrays,
}


def _decode_section(encoding, arrays, name):
    if encoding == SectionEncoding.DENSE:
        if len(arrays) != 1:
            raise CheckpointError('una sección densa lleva exactamente un arreglo', name)
        return arrays[0]
    if len(arrays) != 4:
        raise CheckpointError(f'la codificación {encoding} lleva cuatro arreglos', name)
    try:
        return _DECODERS[encoding](arrays, name)
    except CtrError as exc:
        raise CheckpointError(str(exc), name) from exc


def _build_sparse_model(config, decoded):
    layers = []
    i = 0
    while f'mlp.{i}.weight' in decoded:
        layers.append((decoded[f'mlp.{i}.weight'], decoded[f'mlp.{i}.bias']))
        i += 1
    output = None
    if 'out.weight' in decoded:
        output = (decoded['out.weight'], decoded['out.bias'])
    return SparseModel(
        config=config,
        w0=decoded['w0'],
        linear=decoded.get('w'),
        field_vectors=decoded.get('v'),
        embeddings=decoded.get('e'),
        pairs=decoded.get('R'),
        layers=tuple(layers),
        output=output,
    )


def load_checkpoint(path):
    """Lee y valida un checkpoint completo; cualquier defecto nombra la sección culpable"""
    try:
        with open(path, 'rb') as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f'no se pudo leer {path}: {exc}', 'archivo') from exc

    reader = _Reader(data)
    if reader.take(len(MAGIC), 'magic') != MAGIC:
        raise CheckpointError('magic inválido', 'magic')
    (version,) = reader.unpack('<I', 'version')
    if version != VERSION:
        raise CheckpointError(f'versión {version} no soportada (se espera {VERSION})', 'version')
    (metadata_len,) = reader.unpack('<I', 'metadata')
    try:
        metadata = json.loads(reader.take(metadata_len, 'metadata').decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f'metadatos ilegibles: {exc}', 'metadata') from exc

    (n_sections,) = reader.unpack('<I', 'secciones')
    decoded = {}
    for position in range(n_sections):
        label = f'#{position}'
        (name_len,) = reader.unpack('<H', label)
        try:
            name = reader.take(name_len, label).decode('utf-8')
        except UnicodeDecodeError as exc:
            raise CheckpointError('nombre ilegible', label) from exc
        encoding, n_arrays = reader.unpack('<BB', name)
        if encoding not in SectionEncoding.values:
            raise CheckpointError(f'codificación desconocida: {encoding}', name)
        arrays = [reader.array(name) for _ in range(n_arrays)]
        decoded[name] = (SectionEncoding(encoding), arrays)

    body_end = reader.offset
    (stored_crc,) = reader.unpack('<I', 'checksum')
    if reader.offset != len(data):
        raise CheckpointError('bytes sobrantes tras el checksum', 'checksum')
    if zlib.crc32(data[:body_end]) != stored_crc:
        raise CheckpointError('checksum CRC-32 no coincide', 'checksum')

    try:
        config = ModelConfig.from_dict(metadata['model_config'])
    except (KeyError, TypeError, CtrError) as exc:
        raise CheckpointError(f'configuración de modelo inválida: {exc}', 'metadata') from exc

    tensors = {}
    adam_first, adam_second = {}, {}
    for name, (encoding, arrays) in decoded.items():
        value = _decode_section(encoding, arrays, name)
        if name.startswith(ADAM_FIRST_PREFIX):
            adam_first[name[len(ADAM_FIRST_PREFIX):]] = value
        elif name.startswith(ADAM_SECOND_PREFIX):
            adam_second[name[len(ADAM_SECOND_PREFIX):]] = value
        else:
            tensors[name] = value

    loaded = LoadedCheckpoint(metadata=metadata)
    if metadata.get('format') == CheckpointFormat.SPARSE:
        try:
            loaded.sparse_model = _build_sparse_model(config, tensors)
        except KeyError as exc:
            raise CheckpointError('sección faltante', exc.args[0]) from exc
    else:
        loaded.params = params_from_tensors(config, tensors)
    if 'adam' in metadata:
        adam = metadata['adam']
        loaded.adam_state = AdamState(
            m=adam_first, v=adam_second, t=adam['t'],
            beta1=adam['beta1'], beta2=adam['beta2'], epsilon=adam['epsilon'],
        )
    return loaded
