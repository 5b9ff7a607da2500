"""
Entrenamiento por mini-lotes con pérdida logística, backward manual,
penalización L2 y Adam.
"""
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, InputError, TrainingFault, UndefinedMetricError
from .metrics import evaluate
from .networks import ModelKind, _forward, sigmoid

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    l2_penalty: float = 3e-7
    batch_size: int = 2048
    epochs: int = 10
    dropout_rate: float = 0.5
    seed: int = 2020
    workers: int = 1

    def __post_init__(self):
        errors = []
        if not self.learning_rate > 0:
            errors.append('learning_rate debe ser > 0')
        if self.l2_penalty < 0:
            errors.append('l2_penalty debe ser >= 0')
        if self.batch_size < 1:
            errors.append('batch_size debe ser >= 1')
        if self.epochs < 0:
            errors.append('epochs debe ser >= 0')
        if not 0 <= self.dropout_rate < 1:
            errors.append('dropout_rate debe estar en [0, 1)')
        if self.workers < 1:
            errors.append('workers debe ser >= 1')
        if errors:
            raise ConfigError(errors)


@dataclass
class AdamState:
    """Momentos por parámetro, con la misma forma que cada tensor"""
    m: dict
    v: dict
    t: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    epsilon: float = ADAM_EPSILON

    @classmethod
    def fresh(cls, params):
        return cls(
            m={name: np.zeros_like(t) for name, t in params.items()},
            v={name: np.zeros_like(t) for name, t in params.items()},
        )


def loss(logit, label):
    """log(1 + exp(-y~ * logit)) con y~ = 2*label - 1, estable para |logit| grande"""
    signed = 2.0 * np.asarray(label, dtype=np.float64) - 1.0
    return np.logaddexp(0.0, -signed * logit)


def _regularized_names(params):
    return [name for name in params.names() if not params.is_bias(name)]


def _touched_rows(batch):
    return np.unique(batch.indices)


def l2_value(batch, params, l2_penalty):
    """lambda/2 * ||theta||^2; filas de embedding y pesos lineales solo si el lote las toca"""
    if l2_penalty == 0:
        return 0.0
    touched = _touched_rows(batch)
    total = 0.0
    for name in _regularized_names(params):
        tensor = params[name]
        if name in ('w', 'e'):
            tensor = tensor[touched]
        elif name == 'R':
            tensor = np.triu(tensor, 1)
        total += float(np.sum(tensor.astype(np.float64) ** 2))
    return 0.5 * l2_penalty * total


def objective(batch, params, l2_penalty):
    """Pérdida media + L2, sin dropout (es lo que verifica el oráculo de diferencias finitas)"""
    logits = _forward(batch, params).logits
    return float(np.mean(loss(logits, batch.labels))) + l2_value(batch, params, l2_penalty)


def _mlp_backward(upstream, params, cache, grads):
    dout = upstream[:, None]
    grads['out.weight'] = dout.T @ cache.last_hidden
    grads['out.bias'] = dout.sum(axis=0)
    hidden_grad = dout @ params['out.weight']
    for i in reversed(range(params.n_layers)):
        mask = cache.dropout_masks[i]
        if mask is not None:
            hidden_grad = hidden_grad * mask
        dz = hidden_grad * (cache.pre_activations[i] > 0)
        grads[f'mlp.{i}.weight'] = dz.T @ cache.layer_inputs[i]
        grads[f'mlp.{i}.bias'] = dz.sum(axis=0)
        hidden_grad = dz @ params[f'mlp.{i}.weight']
    return hidden_grad


def _data_gradients(batch, params, dropout_rate, rng, scale):
    """Gradiente de scale * sum(pérdidas) del lote, sin L2"""
    cache = _forward(batch, params, dropout_rate, rng)
    logits = cache.logits
    labels = batch.labels.astype(logits.dtype)
    upstream = (sigmoid(logits) - labels) * scale
    loss_sum = float(np.sum(loss(logits, batch.labels)))

    grads = params.zeros_like()
    dtype = params['w0'].dtype
    values = batch.values.astype(dtype)
    grads['w0'][0] = upstream.sum()

    embedded_grad = None
    if params.kind in (ModelKind.LR, ModelKind.FM):
        np.add.at(grads['w'], batch.indices, upstream[:, None] * values)
        if params.kind == ModelKind.FM:
            embedded = cache.embedded
            summed = embedded.sum(axis=1)
            embedded_grad = upstream[:, None, None] * (summed[:, None, :] - embedded)
    else:
        embedded = cache.embedded
        upper = np.triu(params['R'], 1)
        grads['v'] = np.einsum('b,bnk->nk', upstream, embedded)
        grads['R'] = np.triu(np.einsum('b,bij->ij', upstream, cache.gram), 1)
        embedded_grad = upstream[:, None, None] * (
            params['v'][None, :, :] + np.einsum('ij,bjk->bik', upper + upper.T, embedded)
        )
        if params.kind == ModelKind.DEEPFWFM:
            flat_grad = _mlp_backward(upstream, params, cache, grads)
            embedded_grad = embedded_grad + flat_grad.reshape(embedded_grad.shape)

    if embedded_grad is not None:
        # Solo reciben gradiente las filas de los features activos
        np.add.at(grads['e'], batch.indices, embedded_grad * values[..., None])
    return grads, loss_sum


def _add_l2(grads, batch, params, l2_penalty):
    if l2_penalty == 0:
        return grads
    touched = _touched_rows(batch)
    for name in _regularized_names(params):
        if name in ('w', 'e'):
            grads[name][touched] += l2_penalty * params[name][touched]
        elif name == 'R':
            grads[name] += l2_penalty * np.triu(params[name], 1)
        else:
            grads[name] += l2_penalty * params[name]
    return grads


def _check_finite(grads, batch_id):
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise TrainingFault(f'gradiente no finito en {name}', batch_id)


def backward(batch, params, config, rng, batch_id=0):
    """(gradiente medio + lambda*theta, pérdida media del lote)"""
    if len(batch) == 0:
        raise InputError('lote vacío')
    dropout_rate = config.dropout_rate if params.kind == ModelKind.DEEPFWFM else 0.0
    grads, loss_sum = _data_gradients(batch, params, dropout_rate, rng, 1.0 / len(batch))
    _add_l2(grads, batch, params, config.l2_penalty)
    _check_finite(grads, batch_id)
    return grads, loss_sum / len(batch)


def backward_parallel(batch, params, config, rng, executor, workers, batch_id=0):
    """Igual que backward, repartiendo el lote en fragmentos contiguos entre hilos"""
    if len(batch) == 0:
        raise InputError('lote vacío')
    dropout_rate = config.dropout_rate if params.kind == ModelKind.DEEPFWFM else 0.0
    scale = 1.0 / len(batch)
    shards = [rows for rows in np.array_split(np.arange(len(batch)), workers) if len(rows)]
    shard_rngs = rng.spawn(len(shards))

    def run(shard, shard_rng):
        sub = type(batch)(batch.indices[shard], batch.values[shard], batch.labels[shard])
        return _data_gradients(sub, params, dropout_rate, shard_rng, scale)

    results = list(executor.map(run, shards, shard_rngs))
    grads, loss_sum = results[0]
    for shard_grads, shard_loss in results[1:]:
        for name, grad in shard_grads.items():
            grads[name] += grad
        loss_sum += shard_loss
    _add_l2(grads, batch, params, config.l2_penalty)
    _check_finite(grads, batch_id)
    return grads, loss_sum / len(batch)


def adam_step(params, grads, state, learning_rate):
    """Actualización Adam con corrección de sesgo, en sitio"""
    state.t += 1
    bias_correction1 = 1.0 - state.beta1 ** state.t
    bias_correction2 = 1.0 - state.beta2 ** state.t
    step_size = learning_rate / bias_correction1
    for name, tensor in params.items():
        grad = grads[name]
        first = state.m[name]
        second = state.v[name]
        first *= state.beta1
        first += (1.0 - state.beta1) * grad
        second *= state.beta2
        second += (1.0 - state.beta2) * (grad * grad)
        denom = np.sqrt(second / bias_correction2) + state.epsilon
        tensor -= (step_size * first / denom).astype(tensor.dtype)
    return params, state


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    iteration: int = 0
    test_logloss: float = None
    test_auc: float = None
    wall_seconds: float = 0.0

    def as_row(self):
        return {
            'record': 'epoch',
            'epoch': self.epoch,
            'train_loss': self.train_loss,
            'test_logloss': self.test_logloss,
            'test_auc': self.test_auc,
            'wall_seconds': self.wall_seconds,
        }


def restore_rng(state):
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = state
    return rng


@dataclass
class Trainer:
    """
    Bucle de referencia: un hilo, determinista para una semilla. El hook de
    poda se llama después de cada paso de optimización.
    """
    params: object
    config: TrainConfig
    prune_hook: object = None
    adam_state: AdamState = None
    rng: np.random.Generator = None
    iteration: int = 0
    epochs_done: int = 0
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.adam_state is None:
            self.adam_state = AdamState.fresh(self.params)
        if self.rng is None:
            self.rng = np.random.default_rng(self.config.seed)

    @classmethod
    def resume(cls, params, config, adam_state, train_state, prune_hook=None):
        """Continúa una corrida: mismos momentos, contadores y estado del rng"""
        return cls(
            params=params,
            config=config,
            prune_hook=prune_hook,
            adam_state=adam_state,
            rng=restore_rng(train_state['rng_state']),
            iteration=train_state['iteration'],
            epochs_done=train_state['epochs_done'],
        )

    def state_dict(self):
        return {
            'iteration': self.iteration,
            'epochs_done': self.epochs_done,
            'rng_state': self.rng.bit_generator.state,
            'adam_t': self.adam_state.t,
        }

    def run(self, dataset, epochs=None, eval_set=None):
        epochs = self.config.epochs if epochs is None else epochs
        executor = None
        if self.config.workers > 1:
            executor = ThreadPoolExecutor(max_workers=self.config.workers)
        try:
            for _ in range(epochs):
                started = time.perf_counter()
                order = self.rng.permutation(len(dataset))
                total_loss = 0.0
                for batch in dataset.batches(order, self.config.batch_size):
                    if executor is None:
                        grads, batch_loss = backward(batch, self.params, self.config, self.rng, self.iteration)
                    else:
                        grads, batch_loss = backward_parallel(
                            batch, self.params, self.config, self.rng,
                            executor, self.config.workers, self.iteration,
                        )
                    adam_step(self.params, grads, self.adam_state, self.config.learning_rate)
                    self.iteration += 1
                    if self.prune_hook is not None:
                        self.prune_hook(self.iteration, self.params)
                    total_loss += batch_loss * len(batch)
                    logger.debug('iteración %d: pérdida %.6f', self.iteration, batch_loss)

                self.epochs_done += 1
                metrics = EpochMetrics(
                    epoch=self.epochs_done,
                    train_loss=total_loss / max(len(dataset), 1),
                    iteration=self.iteration,
                )
                if eval_set is not None and len(eval_set):
                    try:
                        result = evaluate(self.params, eval_set)
                        metrics.test_logloss = result.logloss
                        metrics.test_auc = result.auc
                    except UndefinedMetricError as exc:
                        logger.warning('época %d sin métricas de prueba: %s', self.epochs_done, exc)
                metrics.wall_seconds = time.perf_counter() - started
                self.history.append(metrics)
                logger.info(
                    'época %d: train_loss=%.6f test_logloss=%s test_auc=%s (%.1fs)',
                    metrics.epoch, metrics.train_loss, metrics.test_logloss,
                    metrics.test_auc, metrics.wall_seconds,
                )
        finally:
            if executor is not None:
                executor.shutdown()
        return self.history


def train_epochs(dataset, params, config, prune_hook=None, eval_set=None):
    """Atajo funcional sobre Trainer: (parámetros entrenados, métricas por época)"""
    trainer = Trainer(params=params, config=config, prune_hook=prune_hook)
    history = trainer.run(dataset, eval_set=eval_set)
    return trainer.params, history
