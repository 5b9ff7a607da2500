"""
Contenedores de parámetros y pasadas forward de LR, FM, FwFM y DeepFwFM,
más la contabilidad de FLOPs y de parámetros.

Todas las pasadas trabajan sobre lotes: `indices` y `values` de forma (B, n),
un feature activo por campo. `_forward` devuelve además la caché que usa
el backward de training.py.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
from django.db import models

from .exceptions import ConfigError, ModelMismatchError

logger = logging.getLogger(__name__)


class ModelKind(models.TextChoices):
    LR = 'LR', 'Regresión logística'
    FM = 'FM', 'Factorization machine'
    FWFM = 'FwFM', 'Field-weighted FM'
    DEEPFWFM = 'DeepFwFM', 'FwFM + MLP'


# Arquitecturas solo para comparar complejidad
COMPARISON_ARCHITECTURES = ('DeepFM', 'xDeepFM')


@dataclass(frozen=True)
class ModelConfig:
    kind: str
    n_fields: int
    n_features: int
    embed_dim: int = 10
    mlp_widths: tuple = (400, 400, 400)
    dropout_rate: float = 0.5
    init_std: float = 0.01
    dtype: str = 'float32'
    field_offsets: tuple = None

    def __post_init__(self):
        errors = []
        if self.kind not in ModelKind.values:
            errors.append(f'model_kind desconocido: {self.kind}')
        if self.n_fields < 1:
            errors.append('n_fields debe ser >= 1')
        if self.n_features < self.n_fields:
            errors.append('n_features debe ser >= n_fields')
        if self.embed_dim < 1:
            errors.append('embed_dim debe ser >= 1')
        if any(width < 1 for width in self.mlp_widths):
            errors.append('los anchos del MLP deben ser positivos')
        if not 0 <= self.dropout_rate < 1:
            errors.append('dropout_rate debe estar en [0, 1)')
        if self.dtype not in ('float32', 'float64'):
            errors.append(f'dtype no soportado: {self.dtype}')
        if self.field_offsets is not None and len(self.field_offsets) != self.n_fields + 1:
            errors.append('field_offsets debe tener n_fields + 1 entradas')
        if errors:
            raise ConfigError(errors)

    @property
    def has_embeddings(self):
        return self.kind != ModelKind.LR

    @property
    def has_field_matrix(self):
        return self.kind in (ModelKind.FWFM, ModelKind.DEEPFWFM)

    @property
    def has_mlp(self):
        return self.kind == ModelKind.DEEPFWFM

    @property
    def mlp_input_width(self):
        return self.n_fields * self.embed_dim

    def to_dict(self):
        return {
            'kind': self.kind,
            'n_fields': self.n_fields,
            'n_features': self.n_features,
            'embed_dim': self.embed_dim,
            'mlp_widths': list(self.mlp_widths),
            'dropout_rate': self.dropout_rate,
            'init_std': self.init_std,
            'dtype': self.dtype,
            'field_offsets': None if self.field_offsets is None else list(self.field_offsets),
        }

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data['mlp_widths'] = tuple(data.get('mlp_widths', ()))
        if data.get('field_offsets') is not None:
            data['field_offsets'] = tuple(data['field_offsets'])
        return cls(**data)


@dataclass
class BaseParams:
    """Conjunto de tensores con nombre; base común de todos los modelos"""
    config: ModelConfig
    tensors: dict = field(default_factory=dict)

    # Nunca regularizados ni podados
    BIAS_NAMES = ('w0', 'out.bias')

    def __getitem__(self, name):
        return self.tensors[name]

    def __setitem__(self, name, value):
        self.tensors[name] = value

    def __contains__(self, name):
        return name in self.tensors

    def items(self):
        return self.tensors.items()

    def names(self):
        return list(self.tensors)

    @property
    def kind(self):
        return self.config.kind

    def copy(self):
        return type(self)(self.config, {name: t.copy() for name, t in self.tensors.items()})

    def zeros_like(self):
        return type(self)(self.config, {name: np.zeros_like(t) for name, t in self.tensors.items()})

    def is_bias(self, name):
        return name in self.BIAS_NAMES or name.endswith('.bias')

    def is_finite(self):
        return all(np.all(np.isfinite(t)) for t in self.tensors.values())


class LrFmParams(BaseParams):
    """w0, pesos lineales w (m) y, para FM, embeddings e (m x k)"""


class DeepFwFMParams(BaseParams):
    """w0, embeddings e, vectores de campo v (n x k), matriz de campos R (n x n) y MLP"""

    @property
    def n_layers(self):
        return len(self.config.mlp_widths) if self.config.has_mlp else 0

    def mlp_layers(self):
        return [
            (self.tensors[f'mlp.{i}.weight'], self.tensors[f'mlp.{i}.bias'])
            for i in range(self.n_layers)
        ]


# Conjunto de gradientes: misma clase y mismas formas que los parámetros
GradientSet = BaseParams


def _glorot(rng, fan_out, fan_in, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in)).astype(dtype)


def init_params(config, seed=0):
    """Inicialización: w y w0 en cero, embeddings/v/R ~ N(0, init_std), MLP Glorot"""
    rng = np.random.default_rng(seed)
    dtype = np.dtype(config.dtype)
    m, n, k = config.n_features, config.n_fields, config.embed_dim

    def normal(*shape):
        return (rng.standard_normal(shape) * config.init_std).astype(dtype)

    tensors = {'w0': np.zeros(1, dtype=dtype)}
    if config.kind in (ModelKind.LR, ModelKind.FM):
        tensors['w'] = np.zeros(m, dtype=dtype)
        if config.kind == ModelKind.FM:
            tensors['e'] = normal(m, k)
        return LrFmParams(config, tensors)

    tensors['e'] = normal(m, k)
    tensors['v'] = normal(n, k)
    tensors['R'] = normal(n, n)
    if config.has_mlp:
        fan_in = config.mlp_input_width
        for i, width in enumerate(config.mlp_widths):
            tensors[f'mlp.{i}.weight'] = _glorot(rng, width, fan_in, dtype)
            tensors[f'mlp.{i}.bias'] = np.zeros(width, dtype=dtype)
            fan_in = width
        tensors['out.weight'] = _glorot(rng, 1, fan_in, dtype)
        tensors['out.bias'] = np.zeros(1, dtype=dtype)
    return DeepFwFMParams(config, tensors)


def params_from_tensors(config, tensors):
    cls = LrFmParams if config.kind in (ModelKind.LR, ModelKind.FM) else DeepFwFMParams
    return cls(config, dict(tensors))


def _check_indices(batch, params):
    indices = batch.indices
    if indices.ndim != 2 or indices.shape[1] != params.config.n_fields:
        raise ModelMismatchError(
            f'se esperaban {params.config.n_fields} campos por muestra, llegaron {indices.shape[-1]}'
        )
    if indices.size and (indices.min() < 0 or indices.max() >= params.config.n_features):
        raise ModelMismatchError(
            f'índice de feature fuera de [0, {params.config.n_features}): '
            'el modelo y el diccionario no corresponden'
        )


def _active_embeddings(batch, params):
    """x_i * e_i para los features activos: (B, n, k)"""
    dtype = params['e'].dtype
    return params['e'][batch.indices] * batch.values.astype(dtype)[..., None]


@dataclass
class ForwardCache:
    logits: np.ndarray
    embedded: np.ndarray = None
    gram: np.ndarray = None
    layer_inputs: list = field(default_factory=list)
    pre_activations: list = field(default_factory=list)
    dropout_masks: list = field(default_factory=list)
    last_hidden: np.ndarray = None


def _linear_term(batch, params):
    dtype = params['w'].dtype
    return (params['w'][batch.indices] * batch.values.astype(dtype)).sum(axis=1)


def _mlp_forward(x, params, dropout_rate, rng, cache):
    if x.shape[1] != params.config.mlp_input_width:
        raise ConfigError(
            f'ancho de entrada del MLP {x.shape[1]} != n*k = {params.config.mlp_input_width}'
        )
    hidden = x
    for weight, bias in params.mlp_layers():
        cache.layer_inputs.append(hidden)
        z = hidden @ weight.T + bias
        cache.pre_activations.append(z)
        hidden = np.maximum(z, 0)
        mask = None
        if dropout_rate > 0:
            # Dropout invertido: la inferencia no necesita reescalar
            mask = (rng.random(hidden.shape) >= dropout_rate).astype(hidden.dtype) / (1.0 - dropout_rate)
            hidden = hidden * mask
        cache.dropout_masks.append(mask)
    cache.last_hidden = hidden
    return (hidden @ params['out.weight'].T)[:, 0] + params['out.bias'][0]


def _fwfm_terms(batch, params, cache):
    """Término lineal <x_i e_i, v_i> más pares ponderados por triu(R, 1)"""
    embedded = _active_embeddings(batch, params)
    cache.embedded = embedded
    linear = np.einsum('bnk,nk->b', embedded, params['v'])
    gram = np.einsum('bik,bjk->bij', embedded, embedded)
    cache.gram = gram
    return linear + np.einsum('bij,ij->b', gram, np.triu(params['R'], 1))


def _forward(batch, params, dropout_rate=0.0, rng=None):
    _check_indices(batch, params)
    kind = params.kind
    cache = ForwardCache(logits=None)
    logits = np.full(len(batch), params['w0'][0], dtype=params['w0'].dtype)

    if kind in (ModelKind.LR, ModelKind.FM):
        logits = logits + _linear_term(batch, params)
        if kind == ModelKind.FM:
            embedded = _active_embeddings(batch, params)
            summed = embedded.sum(axis=1)
            pair = 0.5 * (summed ** 2 - (embedded ** 2).sum(axis=1)).sum(axis=1)
            logits = logits + pair
            cache.embedded = embedded
        cache.logits = logits
        return cache

    logits = logits + _fwfm_terms(batch, params, cache)
    if kind == ModelKind.DEEPFWFM:
        embedded = cache.embedded
        flat = embedded.reshape(len(batch), -1)
        logits = logits + _mlp_forward(flat, params, dropout_rate, rng, cache)
    cache.logits = logits
    return cache


def forward_lr(batch, params):
    """w0 + sum_i x_i w_i"""
    _check_indices(batch, params)
    return params['w0'][0] + _linear_term(batch, params)


def forward_fm(batch, params):
    """w0 + sum x_i w_i + sum_{i<j} x_i x_j <e_i, e_j>"""
    return _forward(batch, params).logits


def forward_fwfm(batch, params):
    """w0 + sum x_i <e_i, v_F(i)> + sum_{i<j} x_i x_j <e_i, e_j> R_F(i),F(j)"""
    if params.kind not in (ModelKind.FWFM, ModelKind.DEEPFWFM):
        raise ModelMismatchError(f'forward_fwfm no aplica a un modelo {params.kind}')
    _check_indices(batch, params)
    # Solo la parte superficial, también para DeepFwFM
    return params['w0'][0] + _fwfm_terms(batch, params, ForwardCache(logits=None))


def forward_mlp(embedding_concat, params, dropout_active=False, rng=None):
    """Logit profundo: capas ReLU, dropout invertido opcional, salida escalar"""
    if dropout_active and rng is None:
        raise ConfigError('dropout activo requiere un rng')
    cache = ForwardCache(logits=None)
    rate = params.config.dropout_rate if dropout_active else 0.0
    return _mlp_forward(np.asarray(embedding_concat), params, rate, rng, cache)


def forward_deepfwfm(batch, params, dropout_active=False, rng=None):
    """FwFM (con w0) + MLP sobre la concatenación de x_i * e_i"""
    if dropout_active and rng is None:
        raise ConfigError('dropout activo requiere un rng')
    rate = params.config.dropout_rate if dropout_active else 0.0
    return _forward(batch, params, rate, rng).logits


FORWARDS = {
    ModelKind.LR: forward_lr,
    ModelKind.FM: forward_fm,
    ModelKind.FWFM: forward_fwfm,
    ModelKind.DEEPFWFM: forward_deepfwfm,
}


def forward(batch, params):
    """Pasada densa sin dropout según el tipo de modelo"""
    return FORWARDS[params.kind](batch, params)


def sigmoid(logits):
    return 0.5 * (1.0 + np.tanh(0.5 * logits))


def predict_proba(batch, params):
    return sigmoid(forward(batch, params))


@dataclass(frozen=True)
class FlopEstimate:
    shallow: int
    dnn: int
    dense_exact: int

    @property
    def total(self):
        return self.shallow + self.dnn


def flops_estimate(config, architecture=None, cin_widths=(100, 100, 100)):
    """
    Multiply-adds por muestra según las fórmulas de complejidad:
    shallow FM/DeepFM O(nk), FwFM O(n^2 k), xDeepFM O(n k h_c^2 l);
    DNN O(l h^2 + n k h), generalizado a sum h_i^2 + n k h_1.
    """
    architecture = architecture or config.kind
    n, k = config.n_fields, config.embed_dim
    widths = list(config.mlp_widths)

    if architecture == ModelKind.LR:
        shallow = n
    elif architecture in (ModelKind.FM, 'DeepFM'):
        shallow = n * k
    elif architecture in (ModelKind.FWFM, ModelKind.DEEPFWFM):
        shallow = n * n * k
    elif architecture == 'xDeepFM':
        shallow = sum(n * k * h_c * h_c for h_c in cin_widths)
    else:
        raise ConfigError(f'arquitectura desconocida: {architecture}')

    has_dnn = architecture in (ModelKind.DEEPFWFM,) + COMPARISON_ARCHITECTURES
    dnn = 0
    dense_exact = 0
    if has_dnn and widths:
        dnn = sum(h * h for h in widths) + n * k * widths[0]
        fan_in = n * k
        for width in widths:
            dense_exact += fan_in * width
            fan_in = width
        dense_exact += fan_in
    return FlopEstimate(shallow=shallow, dnn=dnn, dense_exact=dense_exact)


@dataclass(frozen=True)
class ParameterCount:
    bias: int = 0
    linear: int = 0
    embeddings: int = 0
    field_vectors: int = 0
    field_matrix: int = 0
    mlp: int = 0
    output: int = 0

    @property
    def total(self):
        return (self.bias + self.linear + self.embeddings + self.field_vectors
                + self.field_matrix + self.mlp + self.output)

    def as_dict(self):
        return {
            'bias': self.bias,
            'linear': self.linear,
            'embeddings': self.embeddings,
            'field_vectors': self.field_vectors,
            'field_matrix': self.field_matrix,
            'mlp': self.mlp,
            'output': self.output,
            'total': self.total,
        }


def count_parameters(params_or_config):
    """
    Conteo exacto por componente. Con una configuración cuenta el modelo denso;
    con parámetros cuenta no-ceros (un modelo podado reporta su tamaño real).
    R solo cuenta el triángulo superior estricto, que es lo que se usa.
    """
    if isinstance(params_or_config, ModelConfig):
        config = params_or_config
        m, n, k = config.n_features, config.n_fields, config.embed_dim
        linear = m if config.kind in (ModelKind.LR, ModelKind.FM) else 0
        embeddings = m * k if config.has_embeddings else 0
        field_vectors = n * k if config.has_field_matrix else 0
        field_matrix = n * (n - 1) // 2 if config.has_field_matrix else 0
        mlp = 0
        output = 0
        if config.has_mlp:
            fan_in = n * k
            for width in config.mlp_widths:
                mlp += width * fan_in + width
                fan_in = width
            output = fan_in + 1
        return ParameterCount(1, linear, embeddings, field_vectors, field_matrix, mlp, output)

    params = params_or_config

    def nnz(name):
        return int(np.count_nonzero(params[name])) if name in params else 0

    mlp = 0
    if isinstance(params, DeepFwFMParams):
        for weight, bias in params.mlp_layers():
            mlp += int(np.count_nonzero(weight)) + bias.size
    output = nnz('out.weight') + (1 if 'out.bias' in params else 0)
    field_matrix = int(np.count_nonzero(np.triu(params['R'], 1))) if 'R' in params else 0
    return ParameterCount(
        bias=1,
        linear=nnz('w'),
        embeddings=nnz('e'),
        field_vectors=nnz('v'),
        field_matrix=field_matrix,
        mlp=mlp,
        output=output,
    )
