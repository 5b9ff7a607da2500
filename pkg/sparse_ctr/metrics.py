"""Métricas de evaluación: LogLoss y AUC."""
import logging
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .exceptions import InputError, UndefinedMetricError
from .networks import predict_proba, sigmoid
from .sparse_infer import SparseModel, sparse_forward_batch

logger = logging.getLogger(__name__)

PROBABILITY_CLIP = 1e-7
EVAL_BATCH_SIZE = 4096


@dataclass(frozen=True)
class EvalResult:
    logloss: float
    auc: float
    n_samples: int

    def as_row(self):
        return {'logloss': self.logloss, 'auc': self.auc, 'n_samples': self.n_samples}


def _as_pair(predictions, labels):
    predictions = np.asarray(predictions, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if len(predictions) != len(labels):
        raise InputError(f'{len(predictions)} predicciones para {len(labels)} etiquetas')
    if len(labels) == 0:
        raise InputError('no hay muestras para evaluar')
    return predictions, labels


def eval_logloss(probabilities, labels):
    """Entropía cruzada media con p recortada a [1e-7, 1 - 1e-7]"""
    probabilities, labels = _as_pair(probabilities, labels)
    p = np.clip(probabilities, PROBABILITY_CLIP, 1.0 - PROBABILITY_CLIP)
    y = labels.astype(np.float64)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def eval_auc(scores, labels):
    """
    Probabilidad de que un positivo quede por encima de un negativo, con
    empates a 1/2. Rangos promedio (Mann-Whitney): O(N log N).
    """
    scores, labels = _as_pair(scores, labels)
    positive = labels == 1
    n_pos = int(positive.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError('AUC no está definida con una sola clase')
    ranks = rankdata(scores, method='average')
    rank_sum = ranks[positive].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _probabilities(model, dataset):
    order = np.arange(len(dataset))
    chunks = []
    for batch in dataset.batches(order, EVAL_BATCH_SIZE):
        if isinstance(model, SparseModel):
            chunks.append(sigmoid(sparse_forward_batch(batch, model)))
        elif callable(model):
            chunks.append(np.asarray(model(batch)))
        else:
            chunks.append(predict_proba(batch, model))
    return np.concatenate(chunks) if chunks else np.zeros(0)


def evaluate(model, dataset):
    """
    LogLoss y AUC sobre un EncodedDataset. `model` puede ser parámetros
    densos, un SparseModel o una función batch -> probabilidades.
    """
    probabilities = _probabilities(model, dataset)
    result = EvalResult(
        logloss=eval_logloss(probabilities, dataset.labels),
        auc=eval_auc(probabilities, dataset.labels),
        n_samples=len(dataset),
    )
    logger.debug('evaluación: %s', result)
    return result
