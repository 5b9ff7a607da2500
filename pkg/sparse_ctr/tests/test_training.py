import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from django.test import SimpleTestCase

from sparse_ctr.data import Batch, EncodedDataset
from sparse_ctr.exceptions import ConfigError, InputError, TrainingFault
from sparse_ctr.networks import ModelConfig, ModelKind, _forward, init_params
from sparse_ctr.training import (
    AdamState, TrainConfig, Trainer, adam_step, backward, backward_parallel, l2_value, loss, objective,
    train_epochs,
)

from .factories import ALL_KINDS, random_batch, random_params, tiny_config


def relu_pattern(batch, params):
    return [z > 0 for z in _forward(batch, params).pre_activations]


def gradient_mismatches(kind, seed, l2_penalty=0.01, step=1e-4):
    """(nombre, índice, analítico, numérico) de cada entrada que no coincide"""
    config = tiny_config(kind)
    params = random_params(config, seed=seed, scale=0.5)
    batch = random_batch(config, batch_size=6, seed=seed, numeric_fields=(0, 2))
    grads, _ = backward(batch, params, TrainConfig(dropout_rate=0.0, l2_penalty=l2_penalty), rng=None)
    base_pattern = relu_pattern(batch, params)

    mismatches = []
    for name, tensor in params.items():
        for index in np.ndindex(tensor.shape):
            original = tensor[index]
            tensor[index] = original + step
            plus = objective(batch, params, l2_penalty)
            plus_pattern = relu_pattern(batch, params)
            tensor[index] = original - step
            minus = objective(batch, params, l2_penalty)
            minus_pattern = relu_pattern(batch, params)
            tensor[index] = original
            # Saltar las entradas donde la perturbación cruza un quiebre de ReLU
            if any(not np.array_equal(a, b) for a, b in zip(base_pattern, plus_pattern)):
                continue
            if any(not np.array_equal(a, b) for a, b in zip(base_pattern, minus_pattern)):
                continue
            numeric = (plus - minus) / (2 * step)
            analytic = grads[name][index]
            if abs(analytic - numeric) > 1e-4 * max(abs(numeric), 1e-3):
                mismatches.append((name, index, analytic, numeric))
    return mismatches


def separable_dataset(n_samples=400, seed=0):
    """Campo 0 decide la etiqueta; campo 1 es ruido"""
    rng = np.random.default_rng(seed)
    first = rng.integers(0, 2, n_samples)
    second = 2 + rng.integers(0, 3, n_samples)
    return EncodedDataset(
        labels=first.astype(np.int8),
        indices=np.stack([first, second], axis=1),
        values=np.ones((n_samples, 2)),
        field_offsets=np.array([0, 2, 5]),
    )


class LossTests(SimpleTestCase):
    def test_reference_values(self):
        self.assertAlmostEqual(float(loss(0.0, 1)), math.log(2))
        self.assertAlmostEqual(float(loss(0.0, 0)), math.log(2))
        self.assertAlmostEqual(float(loss(2.0, 1)), math.log1p(math.exp(-2)))

    def test_stable_for_large_logits(self):
        self.assertAlmostEqual(float(loss(1000.0, 0)), 1000.0)
        self.assertEqual(float(loss(1000.0, 1)), 0.0)
        self.assertTrue(np.isfinite(loss(-1e6, 1)))
        self.assertAlmostEqual(float(loss(20.0, 1)), 2.06e-9, places=11)
        self.assertAlmostEqual(float(loss(-3.0, 0)), math.log1p(math.exp(-3)))


class GradientTests(SimpleTestCase):
    def test_matches_central_differences(self):
        for kind in ALL_KINDS:
            for seed in range(3):
                with self.subTest(kind=kind, seed=seed):
                    self.assertEqual(gradient_mismatches(kind, seed), [])

    def test_without_regularization(self):
        self.assertEqual(gradient_mismatches(ModelKind.DEEPFWFM, seed=9, l2_penalty=0.0), [])

    def test_untouched_embedding_rows_get_no_gradient(self):
        config = tiny_config(ModelKind.FWFM)
        params = random_params(config)
        batch = random_batch(config, batch_size=2)
        grads, _ = backward(batch, params, TrainConfig(l2_penalty=0.1), rng=None)
        untouched = np.setdiff1d(np.arange(config.n_features), batch.indices)
        self.assertTrue(len(untouched) > 0)
        self.assertFalse(np.any(grads['e'][untouched]))

    def test_lower_triangle_of_field_matrix_is_inert(self):
        config = tiny_config(ModelKind.FWFM)
        params = random_params(config)
        grads, _ = backward(random_batch(config), params, TrainConfig(l2_penalty=0.1), rng=None)
        np.testing.assert_array_equal(np.tril(grads['R']), 0)

    def test_biases_not_regularized(self):
        config = tiny_config(ModelKind.DEEPFWFM)
        params = random_params(config)
        batch = random_batch(config)
        without = objective(batch, params, 0.0)
        params['w0'][:] = 100.0
        params['out.bias'][:] += 5.0
        shifted_l2 = objective(batch, params, 0.5) - objective(batch, params, 0.0)
        self.assertAlmostEqual(shifted_l2, l2_value(batch, random_params(config), 0.5))
        self.assertNotEqual(without, objective(batch, params, 0.0))

    def test_nonfinite_gradient_names_the_batch(self):
        config = tiny_config(ModelKind.LR)
        params = init_params(config)
        params['w'][:] = np.nan
        with self.assertRaises(TrainingFault) as ctx:
            backward(random_batch(config), params, TrainConfig(), rng=None, batch_id=17)
        self.assertEqual(ctx.exception.batch_id, 17)

    def test_empty_batch(self):
        config = tiny_config(ModelKind.LR)
        batch = random_batch(config, batch_size=0)
        with self.assertRaises(InputError):
            backward(batch, init_params(config), TrainConfig(), rng=None)

    def test_parallel_matches_serial(self):
        config = tiny_config(ModelKind.FWFM)
        params = random_params(config, seed=2)
        batch = random_batch(config, batch_size=10, seed=2)
        train_config = TrainConfig(l2_penalty=0.01, dropout_rate=0.0)
        serial, serial_loss = backward(batch, params, train_config, rng=np.random.default_rng(0))
        with ThreadPoolExecutor(max_workers=3) as executor:
            parallel, parallel_loss = backward_parallel(
                batch, params, train_config, np.random.default_rng(0), executor, workers=3,
            )
        self.assertAlmostEqual(serial_loss, parallel_loss)
        for name, grad in serial.items():
            np.testing.assert_allclose(parallel[name], grad, atol=1e-12)


class BalancedBatchTests(SimpleTestCase):
    def setUp(self):
        self.config = ModelConfig(kind=ModelKind.LR, n_fields=1, n_features=2, dtype='float64')
        self.params = init_params(self.config)

    def test_zero_model_linear_gradient(self):
        batch = Batch(indices=np.array([[0], [1]]), values=np.array([[2.0], [3.0]]), labels=np.array([1, 0]))
        grads, batch_loss = backward(batch, self.params, TrainConfig(l2_penalty=0.0), rng=None)
        # sigmoid(0) - y = -1/2 para el positivo, +1/2 para el negativo, promediado sobre 2
        np.testing.assert_allclose(grads['w'], [-0.5 * 2.0 / 2, 0.5 * 3.0 / 2])
        self.assertAlmostEqual(grads['w0'][0], 0.0)
        self.assertAlmostEqual(batch_loss, math.log(2))

    def test_duplicated_sample_same_mean_gradient(self):
        once = Batch(indices=np.array([[1]]), values=np.array([[1.5]]), labels=np.array([1]))
        twice = Batch(indices=np.array([[1], [1]]), values=np.array([[1.5], [1.5]]), labels=np.array([1, 1]))
        grads_once, _ = backward(once, self.params, TrainConfig(l2_penalty=0.0), rng=None)
        grads_twice, _ = backward(twice, self.params, TrainConfig(l2_penalty=0.0), rng=None)
        for name, grad in grads_once.items():
            np.testing.assert_allclose(grads_twice[name], grad)


class AdamTests(SimpleTestCase):
    def test_first_step_moves_by_learning_rate(self):
        config = tiny_config(ModelKind.LR, dtype='float64')
        params = init_params(config)
        grads = params.zeros_like()
        grads['w0'][0] = 0.37
        grads['w'][3] = -2.5
        adam_step(params, grads, AdamState.fresh(params), learning_rate=0.001)
        self.assertAlmostEqual(params['w0'][0], -0.001, places=7)
        self.assertAlmostEqual(params['w'][3], 0.001, places=7)
        self.assertEqual(params['w'][0], 0.0)

    def test_zero_gradient_no_move(self):
        config = tiny_config(ModelKind.FM)
        params = random_params(config)
        before = params.copy()
        state = AdamState.fresh(params)
        adam_step(params, params.zeros_like(), state, learning_rate=0.1)
        self.assertEqual(state.t, 1)
        for name, tensor in params.items():
            np.testing.assert_array_equal(tensor, before[name])

    def test_second_identical_step_not_larger(self):
        config = tiny_config(ModelKind.LR)
        params = init_params(config)
        grads = params.zeros_like()
        grads['w'][:] = 0.8
        state = AdamState.fresh(params)
        adam_step(params, grads, state, learning_rate=0.01)
        first = params['w'].copy()
        adam_step(params, grads, state, learning_rate=0.01)
        second = params['w'] - first
        self.assertTrue(np.all(np.abs(second) <= np.abs(first) + 1e-8))


class TrainConfigTests(SimpleTestCase):
    def test_defaults(self):
        config = TrainConfig()
        self.assertEqual(config.learning_rate, 0.001)
        self.assertEqual(config.l2_penalty, 3e-7)
        self.assertEqual(config.batch_size, 2048)

    def test_collects_every_problem(self):
        with self.assertRaises(ConfigError) as ctx:
            TrainConfig(learning_rate=0, batch_size=0, dropout_rate=1.0)
        self.assertEqual(len(ctx.exception.errors), 3)


class TrainerTests(SimpleTestCase):
    def setUp(self):
        self.dataset = separable_dataset()
        self.config = TrainConfig(learning_rate=0.05, l2_penalty=0.0, batch_size=32, epochs=5, seed=3)
        model_config = ModelConfig(
            kind=ModelKind.LR, n_fields=2, n_features=5, dtype='float64', field_offsets=(0, 2, 5),
        )
        self.params = init_params(model_config)

    def test_loss_decreases_on_separable_data(self):
        _, history = train_epochs(self.dataset, self.params, self.config)
        self.assertEqual(len(history), 5)
        self.assertLess(history[-1].train_loss, 0.5 * history[0].train_loss)

    def test_deterministic_for_seed(self):
        first, _ = train_epochs(self.dataset, self.params.copy(), self.config)
        second, _ = train_epochs(self.dataset, self.params.copy(), self.config)
        for name, tensor in first.items():
            np.testing.assert_array_equal(tensor, second[name])

    def test_prune_hook_called_after_every_step(self):
        calls = []
        trainer = Trainer(self.params, self.config, prune_hook=lambda it, params: calls.append(it))
        trainer.run(self.dataset, epochs=2)
        per_epoch = math.ceil(len(self.dataset) / self.config.batch_size)
        self.assertEqual(calls, list(range(1, 2 * per_epoch + 1)))

    def test_eval_set_metrics(self):
        trainer = Trainer(self.params, self.config)
        history = trainer.run(self.dataset, epochs=1, eval_set=self.dataset.subset(np.arange(100)))
        self.assertIsNotNone(history[0].test_auc)
        self.assertEqual(history[0].as_row()['record'], 'epoch')

    def test_resume_continues_identically(self):
        straight = Trainer(self.params.copy(), self.config)
        straight.run(self.dataset, epochs=4)

        first = Trainer(self.params.copy(), self.config)
        first.run(self.dataset, epochs=2)
        resumed = Trainer.resume(first.params, self.config, first.adam_state, first.state_dict())
        resumed.run(self.dataset, epochs=2)

        self.assertEqual(resumed.iteration, straight.iteration)
        self.assertEqual(resumed.epochs_done, 4)
        for name, tensor in straight.params.items():
            np.testing.assert_array_equal(resumed.params[name], tensor)

    def test_zero_epochs_leaves_params_unchanged(self):
        before = self.params.copy()
        trained, history = train_epochs(self.dataset, self.params, TrainConfig(epochs=0))
        self.assertEqual(history, [])
        for name, tensor in trained.items():
            np.testing.assert_array_equal(tensor, before[name])
