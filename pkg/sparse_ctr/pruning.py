"""
Poda estructural por magnitud con tasa adaptativa s(k) = S (1 - D^(k/f)),
aplicada por separado a la DNN, a la matriz de campos R y a la tabla de
embeddings, intercalada con el reentrenamiento.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
from django.db import models

from .exceptions import ConfigError, InputError

logger = logging.getLogger(__name__)


class EmbeddingMode(models.TextChoices):
    GLOBAL = 'global', 'Umbral global'
    PER_FIELD = 'per_field', 'Umbral por campo'


class Component(models.TextChoices):
    DNN = 'dnn', 'Pesos de la DNN'
    FIELD_MATRIX = 'R', 'Matriz de campos'
    EMBEDDINGS = 'emb', 'Tabla de embeddings'


# Metas con nombre: (S_dnn, S_R, S_emb)
NAMED_GOALS = {
    'high_performance': (0.90, 0.90, 0.40),
    'low_memory': (0.90, 0.90, 0.90),
    'low_latency': (0.99, 0.95, 0.40),
}


@dataclass(frozen=True)
class PruneSchedule:
    target_dnn: float = 0.0
    target_r: float = 0.0
    target_emb: float = 0.0
    damping: float = 0.99
    frequency: int = 100
    every: int = 10
    warmup_epochs: int = 2
    embedding_mode: str = EmbeddingMode.GLOBAL
    freeze_masks: bool = False

    def __post_init__(self):
        errors = []
        for name in ('target_dnn', 'target_r', 'target_emb'):
            value = getattr(self, name)
            if not 0 <= value < 1:
                errors.append(f'{name} debe estar en [0, 1)')
        if not 0 < self.damping < 1:
            errors.append('damping debe estar en (0, 1)')
        if self.frequency < 1:
            errors.append('frequency debe ser >= 1')
        if self.every < 1:
            errors.append('every debe ser >= 1')
        if self.warmup_epochs < 0:
            errors.append('warmup_epochs debe ser >= 0')
        if self.embedding_mode not in EmbeddingMode.values:
            errors.append(f'embedding_mode desconocido: {self.embedding_mode}')
        if errors:
            raise ConfigError(errors)

    @classmethod
    def from_goal(cls, goal, **kwargs):
        try:
            target_dnn, target_r, target_emb = NAMED_GOALS[goal]
        except KeyError:
            raise ConfigError(f'meta de poda desconocida: {goal}')
        return cls(target_dnn=target_dnn, target_r=target_r, target_emb=target_emb, **kwargs)

    @property
    def targets(self):
        return {
            Component.DNN: self.target_dnn,
            Component.FIELD_MATRIX: self.target_r,
            Component.EMBEDDINGS: self.target_emb,
        }

    @property
    def enabled(self):
        return any(target > 0 for target in self.targets.values())


@dataclass
class PruneMask:
    """Máscaras booleanas por tensor (True = se conserva) y esparsidad lograda por componente"""
    masks: dict = field(default_factory=dict)
    achieved: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.masks[name]

    def __bool__(self):
        return bool(self.masks)

    def update(self, other):
        self.masks.update(other.masks)
        self.achieved.update(other.achieved)

    def apply(self, params):
        for name, keep in self.masks.items():
            params[name] *= keep


def sparse_rate_at(k, target, damping=0.99, frequency=100):
    """S (1 - D^(k/f)): no decreciente en k, acotada por S"""
    if k < 0:
        raise InputError(f'la iteración k debe ser >= 0, se recibió {k}')
    return target * (1.0 - damping ** (k / frequency))


def _keep_mask(magnitudes, rate):
    """Marca los floor(rate*N) menores; empates resueltos por menor índice plano"""
    flat = magnitudes.ravel()
    n_pruned = int(np.floor(rate * flat.size))
    keep = np.ones(flat.size, dtype=bool)
    if n_pruned:
        order = np.argsort(flat, kind='stable')
        keep[order[:n_pruned]] = False
    return keep.reshape(magnitudes.shape)


def prune_to_rate(tensor, rate, name='tensor'):
    """Máscara que elimina exactamente floor(rate*N) entradas de menor |valor|"""
    if not 0 <= rate < 1:
        raise InputError(f'rate debe estar en [0, 1), se recibió {rate}')
    keep = _keep_mask(np.abs(tensor), rate)
    achieved = 1.0 - keep.sum() / keep.size if keep.size else 0.0
    return PruneMask(masks={name: keep}, achieved={name: float(achieved)})


def embedding_threshold_mode(params, rate, mode=EmbeddingMode.GLOBAL):
    """Umbral global sobre las m*k entradas, o un ranking independiente por campo"""
    if not 0 <= rate < 1:
        raise InputError(f'rate debe estar en [0, 1), se recibió {rate}')
    table = params['e']
    if mode == EmbeddingMode.GLOBAL:
        keep = _keep_mask(np.abs(table), rate)
    elif mode == EmbeddingMode.PER_FIELD:
        offsets = params.config.field_offsets
        if offsets is None:
            raise ConfigError('el modo por campo necesita field_offsets en la configuración del modelo')
        keep = np.ones(table.shape, dtype=bool)
        for start, stop in zip(offsets[:-1], offsets[1:]):
            keep[start:stop] = _keep_mask(np.abs(table[start:stop]), rate)
    else:
        raise ConfigError(f'embedding_mode desconocido: {mode}')
    achieved = 1.0 - keep.sum() / keep.size
    return PruneMask(masks={'e': keep}, achieved={Component.EMBEDDINGS: float(achieved)})


def dnn_weight_names(params):
    if not params.config.has_mlp:
        return []
    return [f'mlp.{i}.weight' for i in range(params.n_layers)] + ['out.weight']


def _prune_dnn(params, rate):
    result = PruneMask()
    for name in dnn_weight_names(params):
        result.update(prune_to_rate(params[name], rate, name))
    return result


def _prune_field_matrix(params, rate):
    """Solo compite el triángulo superior estricto; el resto de R no se consume"""
    matrix = params['R']
    n = matrix.shape[0]
    rows, cols = np.triu_indices(n, 1)
    upper_keep = _keep_mask(np.abs(matrix[rows, cols]), rate)
    keep = np.ones(matrix.shape, dtype=bool)
    keep[rows, cols] = upper_keep
    return PruneMask(masks={'R': keep})


def _components(params):
    config = params.config
    available = []
    if config.has_mlp:
        available.append(Component.DNN)
    if config.has_field_matrix:
        available.append(Component.FIELD_MATRIX)
    if config.has_embeddings:
        available.append(Component.EMBEDDINGS)
    return available


def prune_hook(iteration, params, schedule, iterations_per_epoch):
    """
    Evento de poda tras el paso de optimización. k cuenta iteraciones
    posteriores al warm-up; solo actúa cuando k >= 0 y k es múltiplo de
    `every`. Devuelve la máscara aplicada o None si no hubo evento.
    """
    k = iteration - schedule.warmup_epochs * iterations_per_epoch
    if k < 0 or k % schedule.every != 0 or not schedule.enabled:
        return None

    result = PruneMask()
    for component in _components(params):
        target = schedule.targets[component]
        if target <= 0:
            continue
        rate = sparse_rate_at(k, target, schedule.damping, schedule.frequency)
        if component == Component.DNN:
            mask = _prune_dnn(params, rate)
        elif component == Component.FIELD_MATRIX:
            mask = _prune_field_matrix(params, rate)
        else:
            mask = embedding_threshold_mode(params, rate, schedule.embedding_mode)
        mask.apply(params)
        result.masks.update(mask.masks)

    report = sparsity_report(params)
    result.achieved = report.ratios()
    return result


@dataclass(frozen=True)
class ComponentSparsity:
    nonzero: int
    size: int

    @property
    def sparsity(self):
        return 1.0 - self.nonzero / self.size if self.size else 0.0


@dataclass(frozen=True)
class SparsityReport:
    dnn: ComponentSparsity
    field_matrix: ComponentSparsity
    embeddings: ComponentSparsity

    def ratios(self):
        return {
            Component.DNN: self.dnn.sparsity,
            Component.FIELD_MATRIX: self.field_matrix.sparsity,
            Component.EMBEDDINGS: self.embeddings.sparsity,
        }

    def as_dict(self):
        return {
            'dnn_nnz': self.dnn.nonzero,
            'dnn_size': self.dnn.size,
            's_dnn': self.dnn.sparsity,
            'R_nnz': self.field_matrix.nonzero,
            'R_size': self.field_matrix.size,
            's_R': self.field_matrix.sparsity,
            'emb_nnz': self.embeddings.nonzero,
            'emb_size': self.embeddings.size,
            's_emb': self.embeddings.sparsity,
        }


def sparsity_report(params):
    """Conteos exactos de no-ceros: pesos de la DNN, triángulo superior de R, embeddings"""
    dnn_nnz = dnn_size = 0
    for name in dnn_weight_names(params):
        dnn_nnz += int(np.count_nonzero(params[name]))
        dnn_size += params[name].size

    r_nnz = r_size = 0
    if 'R' in params:
        upper = params['R'][np.triu_indices(params['R'].shape[0], 1)]
        r_nnz, r_size = int(np.count_nonzero(upper)), upper.size

    emb_nnz = emb_size = 0
    if 'e' in params:
        emb_nnz, emb_size = int(np.count_nonzero(params['e'])), params['e'].size

    return SparsityReport(
        dnn=ComponentSparsity(dnn_nnz, dnn_size),
        field_matrix=ComponentSparsity(r_nnz, r_size),
        embeddings=ComponentSparsity(emb_nnz, emb_size),
    )


@dataclass
class PruneEvent:
    k: int
    iteration: int
    rates: dict
    achieved: dict

    def as_row(self):
        return {
            'record': 'prune',
            'event_k': self.k,
            's_dnn': self.achieved.get(Component.DNN),
            's_R': self.achieved.get(Component.FIELD_MATRIX),
            's_emb': self.achieved.get(Component.EMBEDDINGS),
        }


class Pruner:
    """
    Hook invocable por el Trainer. Registra cada evento y conserva las
    últimas máscaras; con freeze_masks las reaplica tras cada paso.
    """

    def __init__(self, schedule, iterations_per_epoch):
        if iterations_per_epoch < 1:
            raise ConfigError('iterations_per_epoch debe ser >= 1')
        self.schedule = schedule
        self.iterations_per_epoch = iterations_per_epoch
        self.events = []
        self.masks = PruneMask()

    @property
    def warmup_iterations(self):
        return self.schedule.warmup_epochs * self.iterations_per_epoch

    def adopt(self, params):
        """Reconstruye las máscaras a partir de los ceros actuales (al reanudar)"""
        names = dnn_weight_names(params) if self.schedule.target_dnn > 0 else []
        if self.schedule.target_r > 0 and 'R' in params:
            names.append('R')
        if self.schedule.target_emb > 0 and 'e' in params:
            names.append('e')
        self.masks = PruneMask(masks={name: params[name] != 0 for name in names})
        if 'R' in self.masks.masks:
            lower = np.tril(np.ones(params['R'].shape, dtype=bool))
            self.masks.masks['R'] |= lower

    def __call__(self, iteration, params):
        if self.schedule.freeze_masks and self.masks:
            self.masks.apply(params)
        mask = prune_hook(iteration, params, self.schedule, self.iterations_per_epoch)
        if mask is None:
            return params
        self.masks.masks.update(mask.masks)
        k = iteration - self.warmup_iterations
        rates = {
            component: sparse_rate_at(k, target, self.schedule.damping, self.schedule.frequency)
            for component, target in self.schedule.targets.items()
        }
        event = PruneEvent(k=k, iteration=iteration, rates=rates, achieved=dict(mask.achieved))
        self.events.append(event)
        logger.info(
            'poda k=%d: s_dnn=%.4f s_R=%.4f s_emb=%.4f',
            k, event.achieved[Component.DNN], event.achieved[Component.FIELD_MATRIX],
            event.achieved[Component.EMBEDDINGS],
        )
        return params
