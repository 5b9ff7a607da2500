"""
Ruta de inferencia dispersa: capas en CRS, lista de pares de campos
supervivientes y filas de embedding dispersas.

La salida de `sparse_forward` coincide con la pasada densa del modelo
enmascarado (sin dropout).
"""
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

try:
    from scipy.sparse._sparsetools import csr_matvec as _csr_matvec
except ImportError:
    _csr_matvec = None

from .exceptions import ModelMismatchError, ShapeError
from .networks import ModelKind, count_parameters, flops_estimate, params_from_tensors
from .pruning import sparsity_report

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class CrsMatrix:
    """Compressed row storage: row_ptr (n_rows+1), col_idx y values por no-cero"""
    n_rows: int
    n_cols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray
    _csr: sparse.csr_array = field(init=False, repr=False)

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ShapeError('CRS inválida: ' + '; '.join(problems))
        self._csr = sparse.csr_array(
            (self.values, self.col_idx, self.row_ptr),
            shape=(self.n_rows, self.n_cols),
        )

    def problems(self):
        row_ptr, col_idx = self.row_ptr, self.col_idx
        if len(row_ptr) != self.n_rows + 1:
            return [f'row_ptr debe tener {self.n_rows + 1} entradas']
        found = []
        if row_ptr[0] != 0:
            found.append('row_ptr[0] debe ser 0')
        if np.any(np.diff(row_ptr) < 0):
            found.append('row_ptr debe ser no decreciente')
            return found
        if row_ptr[-1] != len(col_idx) or len(col_idx) != len(self.values):
            found.append('row_ptr[-1] debe ser igual a nnz')
            return found
        if len(col_idx) and (col_idx.min() < 0 or col_idx.max() >= self.n_cols):
            found.append(f'col_idx fuera de [0, {self.n_cols})')
        row_of = np.repeat(np.arange(self.n_rows), np.diff(row_ptr))
        same_row = row_of[1:] == row_of[:-1]
        if np.any(same_row & (np.diff(col_idx.astype(np.int64)) <= 0)):
            found.append('col_idx debe ser estrictamente creciente en cada fila')
        return found

    @property
    def nnz(self):
        return len(self.values)

    @property
    def shape(self):
        return self.n_rows, self.n_cols

    @property
    def dtype(self):
        return self.values.dtype

    def take_rows(self, rows):
        """Filas densas para índices de forma arbitraria: (*rows.shape, n_cols)"""
        rows = np.asarray(rows)
        return self.gather_rows(rows).reshape(*rows.shape, self.n_cols)

    def gather_rows(self, rows):
        """(len(rows), n_cols) densas, armadas con un solo scatter sobre row_ptr/col_idx"""
        rows = np.asarray(rows).ravel()
        starts = self.row_ptr[rows]
        counts = self.row_ptr[rows + 1] - starts
        out = np.zeros((len(rows), self.n_cols), dtype=self.dtype)
        total = int(counts.sum())
        if total:
            ends = np.cumsum(counts)
            source = np.arange(total) + np.repeat(starts - ends + counts, counts)
            out[np.repeat(np.arange(len(rows)), counts), self.col_idx[source]] = self.values[source]
        return out

    def row(self, i):
        return self.gather_rows([i])[0]

    def matvec_add(self, x, bias):
        """bias + M x para un vector x, en el dtype de la matriz"""
        out = np.array(bias, dtype=self.dtype)
        x = np.ascontiguousarray(x, dtype=self.dtype)
        csr = self._csr
        if _csr_matvec is None:
            out += csr @ x
        else:
            # Acumula sobre `out`
            _csr_matvec(self.n_rows, self.n_cols, csr.indptr, csr.indices, csr.data, x, out)
        return out


def to_crs(dense):
    dense = np.asarray(dense)
    if dense.ndim != 2:
        raise ShapeError(f'to_crs espera una matriz 2-D, llegó ndim={dense.ndim}')
    csr = sparse.csr_array(dense)
    csr.eliminate_zeros()
    csr.sort_indices()
    return CrsMatrix(
        n_rows=dense.shape[0],
        n_cols=dense.shape[1],
        row_ptr=csr.indptr.astype(np.int64),
        col_idx=csr.indices.astype(np.int64),
        values=csr.data.astype(dense.dtype),
    )


def from_crs(matrix):
    return matrix._csr.toarray()


def crs_matvec(matrix, x):
    """y = M x; x puede ser un vector (n_cols,) o un bloque (n_cols, B)"""
    x = np.asarray(x)
    if x.shape[0] != matrix.n_cols:
        raise ShapeError(f'crs_matvec: len(x)={x.shape[0]} pero la matriz tiene {matrix.n_cols} columnas')
    return matrix._csr @ x


@dataclass(frozen=True, eq=False)
class PairList:
    """Pares de campos (F, F') con F < F' y peso R no nulo, ordenados por (F, F')"""
    left: np.ndarray
    right: np.ndarray
    weights: np.ndarray

    @classmethod
    def from_matrix(cls, matrix):
        upper = np.triu(matrix, 1)
        # np.nonzero recorre en orden de filas: ya queda ordenado por (F, F')
        left, right = np.nonzero(upper)
        return cls(left=left.astype(np.int64), right=right.astype(np.int64), weights=upper[left, right])

    def __len__(self):
        return len(self.weights)

    def to_matrix(self, n_fields, dtype):
        matrix = np.zeros((n_fields, n_fields), dtype=dtype)
        matrix[self.left, self.right] = self.weights
        return matrix


@dataclass(frozen=True, eq=False)
class SparseModel:
    config: object
    w0: np.ndarray
    linear: np.ndarray = None
    field_vectors: np.ndarray = None
    embeddings: CrsMatrix = None
    pairs: PairList = None
    layers: tuple = ()
    output: tuple = None

    @property
    def kind(self):
        return self.config.kind

    def nnz_report(self):
        """No-ceros por componente; coincide con sparsity_report sobre el modelo podado"""
        dnn = sum(weight.nnz for weight, _ in self.layers)
        if self.output is not None:
            dnn += self.output[0].nnz
        return {
            'dnn': dnn,
            'R': len(self.pairs) if self.pairs is not None else 0,
            'emb': self.embeddings.nnz if self.embeddings is not None else 0,
        }

    def sparse_flops(self):
        """Multiply-adds por muestra de la ruta dispersa"""
        n, k = self.config.n_fields, self.config.embed_dim
        if self.kind == ModelKind.LR:
            shallow = n
        elif self.kind == ModelKind.FM:
            shallow = n + n * k
        else:
            shallow = n * k + len(self.pairs) * k
        return {'shallow': shallow, 'dnn': self.nnz_report()['dnn']}

    def densify(self):
        """Parámetros densos equivalentes (el modelo enmascarado)"""
        dtype = self.w0.dtype
        tensors = {'w0': self.w0.copy()}
        if self.linear is not None:
            tensors['w'] = self.linear.copy()
        if self.embeddings is not None:
            tensors['e'] = from_crs(self.embeddings)
        if self.field_vectors is not None:
            tensors['v'] = self.field_vectors.copy()
            tensors['R'] = self.pairs.to_matrix(self.config.n_fields, dtype)
        for i, (weight, bias) in enumerate(self.layers):
            tensors[f'mlp.{i}.weight'] = from_crs(weight)
            tensors[f'mlp.{i}.bias'] = bias.copy()
        if self.output is not None:
            tensors['out.weight'] = from_crs(self.output[0])
            tensors['out.bias'] = self.output[1].copy()
        return params_from_tensors(self.config, tensors)


def compile_sparse(params):
    """Estructuras compactas a partir de parámetros (ya podados)"""
    config = params.config
    kwargs = {'w0': params['w0'].copy()}
    if 'w' in params:
        kwargs['linear'] = params['w'].copy()
    if 'e' in params:
        kwargs['embeddings'] = to_crs(params['e'])
    if config.has_field_matrix:
        kwargs['field_vectors'] = params['v'].copy()
        kwargs['pairs'] = PairList.from_matrix(params['R'])
    if config.has_mlp:
        kwargs['layers'] = tuple(
            (to_crs(weight), bias.copy()) for weight, bias in params.mlp_layers()
        )
        kwargs['output'] = (to_crs(params['out.weight']), params['out.bias'].copy())
    model = SparseModel(config=config, **kwargs)
    logger.info('Modelo compilado: nnz=%s', model.nnz_report())
    return model


def _check_sparse_indices(indices, model):
    n_fields, n_features = model.config.n_fields, model.config.n_features
    if indices.shape[-1] != n_fields:
        raise ModelMismatchError(f'se esperaban {n_fields} campos por muestra, llegaron {indices.shape[-1]}')
    if indices.size and (indices.min() < 0 or indices.max() >= n_features):
        raise ModelMismatchError(
            f'índice de feature fuera de [0, {n_features}): el modelo y el diccionario no corresponden'
        )


def sparse_forward(sample, model):
    """Logit de una sola muestra recorriendo solo las estructuras dispersas"""
    indices = np.asarray(sample.indices)
    _check_sparse_indices(indices, model)
    dtype = model.w0.dtype
    values = np.asarray(sample.values).astype(dtype, copy=False)
    logit = model.w0[0]

    if model.linear is not None:
        logit = logit + model.linear[indices] @ values
    if model.embeddings is None:
        return logit

    embedded = model.embeddings.gather_rows(indices)
    embedded *= values[:, None]
    if model.kind == ModelKind.FM:
        summed = embedded.sum(axis=0)
        return logit + 0.5 * (summed @ summed - np.vdot(embedded, embedded))

    logit = logit + np.vdot(embedded, model.field_vectors)
    pairs = model.pairs
    if len(pairs):
        logit = logit + np.einsum('pk,pk,p->', embedded[pairs.left], embedded[pairs.right], pairs.weights)
    if model.layers:
        hidden = embedded.ravel()
        for weight, bias in model.layers:
            hidden = weight.matvec_add(hidden, bias)
            np.maximum(hidden, 0, out=hidden)
        out_weight, out_bias = model.output
        logit = logit + out_weight.matvec_add(hidden, out_bias)[0]
    return logit


def sparse_forward_batch(batch, model):
    """Versión vectorizada de sparse_forward para un lote (B, n)"""
    indices = np.asarray(batch.indices)
    _check_sparse_indices(indices, model)
    dtype = model.w0.dtype
    values = np.asarray(batch.values).astype(dtype)
    logits = np.full(len(indices), model.w0[0], dtype=dtype)

    if model.linear is not None:
        logits = logits + (model.linear[indices] * values).sum(axis=1)
    if model.embeddings is None:
        return logits

    embedded = model.embeddings.take_rows(indices) * values[..., None]
    if model.kind == ModelKind.FM:
        summed = embedded.sum(axis=1)
        return logits + 0.5 * ((summed ** 2).sum(axis=1) - (embedded ** 2).sum(axis=(1, 2)))

    logits = logits + np.einsum('bnk,nk->b', embedded, model.field_vectors)
    if len(model.pairs):
        products = np.einsum('bpk,bpk->bp', embedded[:, model.pairs.left], embedded[:, model.pairs.right])
        logits = logits + products @ model.pairs.weights
    if model.layers:
        hidden = embedded.reshape(len(indices), -1).T
        for weight, bias in model.layers:
            hidden = np.maximum(crs_matvec(weight, hidden) + bias[:, None], 0)
        out_weight, out_bias = model.output
        logits = logits + crs_matvec(out_weight, hidden)[0] + out_bias[0]
    return logits


def model_card_lines(model, config_echo=()):
    """Líneas de la ficha del modelo: nnz, esparsidad y FLOPs por componente"""
    dense = model.densify() if isinstance(model, SparseModel) else model
    compiled = model if isinstance(model, SparseModel) else compile_sparse(model)

    report = sparsity_report(dense)
    estimate = flops_estimate(compiled.config)
    sparse_flops = compiled.sparse_flops()
    lines = [f'# {line}' for line in config_echo]
    lines += [
        f'model_kind\t{compiled.kind}',
        f'params_nnz\t{count_parameters(dense).total}',
        f'params_dense\t{count_parameters(compiled.config).total}',
        f'dnn_nnz\t{report.dnn.nonzero}\t{report.dnn.size}\t{report.dnn.sparsity:.6f}',
        f'R_nnz\t{report.field_matrix.nonzero}\t{report.field_matrix.size}\t{report.field_matrix.sparsity:.6f}',
        f'emb_nnz\t{report.embeddings.nonzero}\t{report.embeddings.size}\t{report.embeddings.sparsity:.6f}',
        f'flops_dense_shallow\t{estimate.shallow}',
        f'flops_dense_dnn\t{estimate.dnn}',
        f'flops_dense_total\t{estimate.total}',
        f'flops_sparse_shallow\t{sparse_flops["shallow"]}',
        f'flops_sparse_dnn\t{sparse_flops["dnn"]}',
        f'flops_sparse_total\t{sparse_flops["shallow"] + sparse_flops["dnn"]}',
    ]
    return lines


def write_model_card(model, path, config_echo=()):
    with open(path, 'w', encoding='utf-8', newline='\n') as fh:
        for line in model_card_lines(model, config_echo):
            fh.write(line + '\n')
