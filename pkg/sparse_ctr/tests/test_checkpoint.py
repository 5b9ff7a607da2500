import os
import struct
import tempfile

import numpy as np
from django.test import SimpleTestCase

from sparse_ctr.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from sparse_ctr.data import EncodedDataset
from sparse_ctr.exceptions import CheckpointError
from sparse_ctr.networks import ModelConfig, ModelKind, count_parameters, forward, init_params
from sparse_ctr.pruning import prune_to_rate
from sparse_ctr.sparse_infer import compile_sparse, sparse_forward_batch
from sparse_ctr.training import AdamState, Trainer, TrainConfig

from .factories import random_batch, random_params, tiny_config


class CheckpointTestCase(SimpleTestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = self._tmp.name

    def tearDown(self):
        self._tmp.cleanup()

    def path(self, name):
        return os.path.join(self.tmp, name)


class DenseRoundTripTests(CheckpointTestCase):
    def test_bit_identical_parameters(self):
        for dtype in ('float32', 'float64'):
            config = tiny_config(ModelKind.DEEPFWFM, dtype=dtype)
            params = random_params(config, seed=1)
            save_checkpoint(params, self.path('model.ckpt'), dictionary_hash='abc123')
            loaded = load_checkpoint(self.path('model.ckpt'))
            self.assertFalse(loaded.is_sparse)
            self.assertEqual(loaded.dictionary_hash, 'abc123')
            self.assertEqual(loaded.params.config, config)
            self.assertEqual(loaded.params.names(), params.names())
            for name, tensor in params.items():
                self.assertEqual(loaded.params[name].dtype, tensor.dtype)
                np.testing.assert_array_equal(loaded.params[name], tensor)

    def test_metadata_round_trip(self):
        params = init_params(tiny_config(ModelKind.FM))
        save_checkpoint(params, self.path('fm.ckpt'), config_echo=['model.kind=FM', 'seed=2020'])
        metadata = load_checkpoint(self.path('fm.ckpt')).metadata
        self.assertEqual(metadata['config_echo'], ['model.kind=FM', 'seed=2020'])
        self.assertEqual(metadata['format'], 'dense')
        self.assertEqual(metadata['sparsity']['s_emb'], 0.0)

    def test_optimizer_and_training_state(self):
        config = tiny_config(ModelKind.FWFM)
        params = random_params(config, seed=2)
        trainer = Trainer(params, TrainConfig(batch_size=4, seed=5))
        batch = random_batch(config, batch_size=16, seed=2)
        dataset = EncodedDataset(
            labels=batch.labels, indices=batch.indices, values=batch.values,
            field_offsets=np.asarray(config.field_offsets),
        )
        trainer.run(dataset, epochs=1)
        save_checkpoint(
            trainer.params, self.path('train.ckpt'),
            adam_state=trainer.adam_state, train_state=trainer.state_dict(),
        )
        loaded = load_checkpoint(self.path('train.ckpt'))
        self.assertEqual(loaded.adam_state.t, trainer.adam_state.t)
        for name in params.names():
            np.testing.assert_array_equal(loaded.adam_state.m[name], trainer.adam_state.m[name])
            np.testing.assert_array_equal(loaded.adam_state.v[name], trainer.adam_state.v[name])
        self.assertEqual(loaded.train_state['iteration'], 4)
        self.assertEqual(loaded.train_state['rng_state'], trainer.rng.bit_generator.state)

    def test_saving_twice_gives_identical_bytes(self):
        params = random_params(tiny_config(ModelKind.DEEPFWFM), seed=3)
        save_checkpoint(compile_sparse(params), self.path('a.ckpt'))
        save_checkpoint(compile_sparse(params), self.path('b.ckpt'))
        with open(self.path('a.ckpt'), 'rb') as first, open(self.path('b.ckpt'), 'rb') as second:
            self.assertEqual(first.read(), second.read())

    def test_file_size_dominated_by_embeddings(self):
        config = ModelConfig(kind=ModelKind.FWFM, n_fields=39, n_features=50_000, embed_dim=10)
        save_checkpoint(init_params(config), self.path('big.ckpt'))
        size = os.path.getsize(self.path('big.ckpt'))
        embedding_bytes = 4 * 50_000 * 10
        self.assertGreater(embedding_bytes / size, 0.99)
        self.assertGreaterEqual(size, 4 * count_parameters(config).total)


class SparseRoundTripTests(CheckpointTestCase):
    def setUp(self):
        super().setUp()
        self.config = tiny_config(ModelKind.DEEPFWFM, n_fields=6, cardinality=5, mlp_widths=(16, 8))
        self.params = random_params(self.config, seed=4)
        for name in ('e', 'R', 'mlp.0.weight', 'mlp.1.weight', 'out.weight'):
            self.params[name] = self.params[name] * prune_to_rate(self.params[name], 0.7)['tensor']
        self.model = compile_sparse(self.params)

    def test_structures_survive(self):
        save_checkpoint(self.model, self.path('model.sparse'))
        loaded = load_checkpoint(self.path('model.sparse'))
        self.assertTrue(loaded.is_sparse)
        model = loaded.sparse_model
        self.assertEqual(model.nnz_report(), self.model.nnz_report())
        np.testing.assert_array_equal(model.pairs.left, self.model.pairs.left)
        np.testing.assert_array_equal(model.embeddings.row_ptr, self.model.embeddings.row_ptr)
        for (weight, bias), (expected_weight, expected_bias) in zip(model.layers, self.model.layers):
            np.testing.assert_array_equal(weight.col_idx, expected_weight.col_idx)
            np.testing.assert_array_equal(weight.values, expected_weight.values)
            np.testing.assert_array_equal(bias, expected_bias)

    def test_loaded_model_scores_like_dense(self):
        save_checkpoint(self.model, self.path('model.sparse'))
        model = load_checkpoint(self.path('model.sparse')).sparse_model
        batch = random_batch(self.config, batch_size=100, seed=4)
        np.testing.assert_allclose(sparse_forward_batch(batch, model), forward(batch, self.params), atol=1e-6, rtol=0)

    def test_sparse_embeddings_are_compact(self):
        config = ModelConfig(kind=ModelKind.FWFM, n_fields=4, n_features=2000, embed_dim=10)
        params = random_params(config, seed=6)
        params['e'] = params['e'] * prune_to_rate(params['e'], 0.8)['tensor']
        save_checkpoint(params, self.path('dense.ckpt'))
        save_checkpoint(compile_sparse(params), self.path('sparse.ckpt'))
        ratio = os.path.getsize(self.path('sparse.ckpt')) / os.path.getsize(self.path('dense.ckpt'))
        self.assertLess(ratio, 0.30)


class CorruptCheckpointTests(CheckpointTestCase):
    def setUp(self):
        super().setUp()
        self.params = random_params(tiny_config(ModelKind.FWFM), seed=8)
        save_checkpoint(self.params, self.path('model.ckpt'))
        with open(self.path('model.ckpt'), 'rb') as fh:
            self.data = fh.read()

    def _load_bytes(self, data):
        with open(self.path('broken.ckpt'), 'wb') as fh:
            fh.write(data)
        return load_checkpoint(self.path('broken.ckpt'))

    def test_truncated_anywhere(self):
        for cut in (0, 5, len(MAGIC) + 2, 40, len(self.data) // 2, len(self.data) - 1):
            with self.subTest(cut=cut):
                with self.assertRaises(CheckpointError):
                    self._load_bytes(self.data[:cut])

    def test_bad_magic(self):
        with self.assertRaises(CheckpointError) as ctx:
            self._load_bytes(b'NOTMAGIC' + self.data[len(MAGIC):])
        self.assertEqual(ctx.exception.section, 'magic')

    def test_unknown_version(self):
        data = self.data[:len(MAGIC)] + struct.pack('<I', 99) + self.data[len(MAGIC) + 4:]
        with self.assertRaises(CheckpointError) as ctx:
            self._load_bytes(data)
        self.assertEqual(ctx.exception.section, 'version')

    def test_flipped_payload_byte(self):
        data = bytearray(self.data)
        data[-6] ^= 0xFF
        with self.assertRaises(CheckpointError) as ctx:
            self._load_bytes(bytes(data))
        self.assertEqual(ctx.exception.section, 'checksum')

    def test_trailing_garbage(self):
        with self.assertRaises(CheckpointError):
            self._load_bytes(self.data + b'\x00')

    def test_missing_file(self):
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.path('no-existe.ckpt'))

    def test_adam_state_shapes_follow_params(self):
        state = AdamState.fresh(self.params)
        save_checkpoint(self.params, self.path('adam.ckpt'), adam_state=state, train_state={'iteration': 0})
        loaded = load_checkpoint(self.path('adam.ckpt'))
        for name, tensor in self.params.items():
            self.assertEqual(loaded.adam_state.m[name].shape, tensor.shape)
