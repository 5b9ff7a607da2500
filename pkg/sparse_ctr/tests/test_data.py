import math
import os
import tempfile

import numpy as np
from django.test import SimpleTestCase

from sparse_ctr.data import (
    EncodedDataset, FieldSchema, build_dictionary, encode_rows, encode_sample, load_dictionary,
    read_tsv, save_dictionary, split_dataset, split_mask, transform_numeric,
)
from sparse_ctr.exceptions import ConfigError, InputError, ParseError


class TransformNumericTests(SimpleTestCase):
    def test_small_values_unchanged(self):
        self.assertEqual(transform_numeric(0), 0.0)
        self.assertEqual(transform_numeric(1), 1.0)
        self.assertEqual(transform_numeric(2), 2.0)

    def test_log_squared_above_two(self):
        self.assertAlmostEqual(transform_numeric(math.e ** 2), 4.0)
        self.assertAlmostEqual(transform_numeric(100), math.log(100) ** 2)

    def test_floor_variant(self):
        self.assertEqual(transform_numeric(100, floor=True), 21.0)

    def test_monotone_on_each_piece(self):
        low = [transform_numeric(x) for x in np.linspace(0, 2, 50)]
        high = [transform_numeric(x) for x in np.linspace(2.01, 1e6, 200)]
        self.assertEqual(low, sorted(low))
        self.assertEqual(high, sorted(high))

    def test_rejects_out_of_domain(self):
        for bad in (-1, float('nan'), float('inf'), 'abc'):
            with self.assertRaises(InputError):
                transform_numeric(bad)


class FieldSchemaTests(SimpleTestCase):
    def test_criteo_layout(self):
        schema = FieldSchema.from_counts(13, 26)
        self.assertEqual(schema.n_fields, 39)
        self.assertEqual(schema.n_columns, 40)
        self.assertTrue(schema.is_numeric(12))
        self.assertFalse(schema.is_numeric(13))

    def test_overlap_rejected(self):
        with self.assertRaises(ConfigError):
            FieldSchema(n_fields=2, numeric_fields=(0,), categorical_fields=(0, 1))

    def test_incomplete_cover_rejected(self):
        with self.assertRaises(ConfigError):
            FieldSchema(n_fields=3, numeric_fields=(0,), categorical_fields=(1,))


class DictionaryTests(SimpleTestCase):
    def setUp(self):
        self.schema = FieldSchema.from_counts(1, 2)
        self.rows = [
            ['1', '5', 'a', 'x'],
            ['0', '', 'a', 'y'],
            ['0', '300', 'b', 'x'],
            ['1', '1', 'a', ''],
        ]

    def test_threshold_folds_rare_tokens_into_default(self):
        dictionary = build_dictionary(self.rows, self.schema, min_freq=2)
        # numérico: 1 feature; campo 1: default + 'a'; campo 2: default + 'x'
        self.assertEqual(dictionary.field_offsets, (0, 1, 3, 5))
        self.assertEqual(dictionary.total_features, 5)
        self.assertEqual(dictionary.lookup(1, 'a'), 2)
        self.assertEqual(dictionary.lookup(1, 'b'), dictionary.default_index(1))
        self.assertEqual(dictionary.lookup(2, 'nunca-visto'), 3)

    def test_min_freq_one_keeps_everything(self):
        dictionary = build_dictionary(self.rows, self.schema, min_freq=1)
        self.assertEqual(dictionary.field_cardinalities(), [1, 3, 3])

    def test_ranges_are_contiguous(self):
        dictionary = build_dictionary(self.rows, self.schema, min_freq=1)
        indices = [index for _, _, index in dictionary.entries()]
        self.assertEqual(indices, list(range(dictionary.total_features)))

    def test_invalid_min_freq(self):
        with self.assertRaises(ConfigError):
            build_dictionary(self.rows, self.schema, min_freq=0)

    def test_wrong_arity_names_the_row(self):
        rows = self.rows + [['1', '2', 'a']]
        with self.assertRaises(ParseError) as ctx:
            build_dictionary(rows, self.schema, min_freq=1)
        self.assertEqual(ctx.exception.row, 5)

    def test_save_and_load_preserve_mapping_and_hash(self):
        dictionary = build_dictionary(self.rows, self.schema, min_freq=1)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'dict.tsv')
            save_dictionary(dictionary, path, header_lines=['min_freq=1'])
            loaded = load_dictionary(path)
        self.assertEqual(loaded.field_offsets, dictionary.field_offsets)
        self.assertEqual(loaded.hash, dictionary.hash)
        self.assertEqual(loaded.lookup(2, 'y'), dictionary.lookup(2, 'y'))
        self.assertEqual(loaded.schema, self.schema)

    def test_hash_depends_on_content(self):
        first = build_dictionary(self.rows, self.schema, min_freq=1)
        second = build_dictionary(self.rows + [['0', '1', 'c', 'x']], self.schema, min_freq=1)
        self.assertNotEqual(first.hash, second.hash)

    def test_malformed_dictionary_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'dict.tsv')
            with open(path, 'w', encoding='utf-8') as fh:
                fh.write('#@schema\tn_fields=1\tnumeric=\n0\t\t0\n0\tsolo-dos\n')
            with self.assertRaises(ParseError):
                load_dictionary(path)


class EncodeTests(SimpleTestCase):
    def setUp(self):
        self.schema = FieldSchema.from_counts(1, 1)
        self.dictionary = build_dictionary([['1', '3', 'a'], ['0', '', 'b']], self.schema, min_freq=1)

    def test_known_tokens(self):
        sample = encode_sample(['1', '100', 'b'], self.dictionary)
        self.assertEqual(sample.label, 1)
        np.testing.assert_array_equal(sample.indices, [0, 3])
        np.testing.assert_allclose(sample.values, [math.log(100) ** 2, 1.0])

    def test_missing_numeric_is_zero(self):
        sample = encode_sample(['0', '', 'a'], self.dictionary)
        self.assertEqual(sample.values[0], 0.0)

    def test_unseen_token_maps_to_default(self):
        sample = encode_sample(['0', '1', 'zzz'], self.dictionary)
        self.assertEqual(sample.indices[1], self.dictionary.default_index(1))

    def test_every_index_inside_its_field_range(self):
        dataset = encode_rows([['1', '7', 'a'], ['0', '', 'q'], ['1', '0', 'b']], self.dictionary)
        for field_id in range(self.schema.n_fields):
            low, high = self.dictionary.field_range(field_id)
            column = dataset.indices[:, field_id]
            self.assertTrue(np.all((column >= low) & (column < high)))

    def test_negative_numeric(self):
        with self.assertRaises(ParseError):
            encode_sample(['1', '-3', 'a'], self.dictionary, row_number=4)
        sample = encode_sample(['1', '-3', 'a'], self.dictionary, clip_negative=True)
        self.assertEqual(sample.values[0], 0.0)

    def test_bad_label(self):
        with self.assertRaises(ParseError):
            encode_sample(['2', '1', 'a'], self.dictionary)

    def test_missing_label_column(self):
        with self.assertRaises(ParseError):
            encode_sample(['1', 'a'], self.dictionary)

    def test_empty_input(self):
        with self.assertRaises(InputError):
            encode_rows([], self.dictionary)

    def test_dataset_carries_dictionary_hash(self):
        dataset = encode_rows([['1', '7', 'a']], self.dictionary)
        self.assertEqual(dataset.dictionary_hash, self.dictionary.hash)


class ReadTsvTests(SimpleTestCase):
    def _write(self, directory, text):
        path = os.path.join(directory, 'input.tsv')
        with open(path, 'w', encoding='utf-8') as fh:
            fh.write(text)
        return path

    def test_rows_as_string_tokens(self):
        schema = FieldSchema.from_counts(1, 2)
        with tempfile.TemporaryDirectory() as tmp:
            path = self._write(tmp, '1\t5\ta\tx\n0\t\t\ty\n')
            rows = list(read_tsv(path, schema))
        self.assertEqual(rows, [['1', '5', 'a', 'x'], ['0', '', '', 'y']])

    def test_short_row_is_parse_error(self):
        schema = FieldSchema.from_counts(1, 2)
        with tempfile.TemporaryDirectory() as tmp:
            path = self._write(tmp, '1\t5\ta\tx\n0\t3\n')
            with self.assertRaises(ParseError) as ctx:
                list(read_tsv(path, schema))
        self.assertEqual(ctx.exception.row, 2)

    def test_extra_column_in_first_row(self):
        schema = FieldSchema.from_counts(1, 2)
        with tempfile.TemporaryDirectory() as tmp:
            path = self._write(tmp, '1\t5\ta\tx\tSOBRA\n0\t3\tb\ty\n')
            with self.assertRaises(ParseError) as ctx:
                list(read_tsv(path, schema))
        self.assertEqual(ctx.exception.row, 1)

    def test_extra_column_in_later_row(self):
        schema = FieldSchema.from_counts(1, 2)
        with tempfile.TemporaryDirectory() as tmp:
            path = self._write(tmp, '1\t5\ta\tx\n0\t3\tb\ty\n1\t1\tc\tz\tw\n')
            with self.assertRaises(ParseError) as ctx:
                list(read_tsv(path, schema))
        self.assertEqual(ctx.exception.row, 3)

    def test_blank_line_is_parse_error(self):
        schema = FieldSchema.from_counts(0, 1)
        with tempfile.TemporaryDirectory() as tmp:
            path = self._write(tmp, '1\ta\n\n0\tb\n')
            with self.assertRaises(ParseError) as ctx:
                list(read_tsv(path, schema))
        self.assertEqual(ctx.exception.row, 2)

    def test_windows_line_endings(self):
        schema = FieldSchema.from_counts(0, 1)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'crlf.tsv')
            with open(path, 'wb') as fh:
                fh.write(b'1\ta\r\n0\t\r\n')
            self.assertEqual(list(read_tsv(path, schema)), [['1', 'a'], ['0', '']])

    def test_empty_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = self._write(tmp, '')
            self.assertEqual(list(read_tsv(path, FieldSchema.from_counts(0, 1))), [])


class SplitTests(SimpleTestCase):
    def test_counts(self):
        is_test = split_mask(10, 0.9, seed=1)
        self.assertEqual(int((~is_test).sum()), 9)
        self.assertEqual(int(is_test.sum()), 1)

    def test_deterministic_for_seed(self):
        np.testing.assert_array_equal(split_mask(100, 0.8, 7), split_mask(100, 0.8, 7))
        self.assertFalse(np.array_equal(split_mask(100, 0.8, 7), split_mask(100, 0.8, 8)))

    def test_rejects_bad_fraction_and_empty_input(self):
        with self.assertRaises(InputError):
            split_mask(10, 1.0, 0)
        with self.assertRaises(InputError):
            split_mask(0, 0.5, 0)

    def test_split_list(self):
        train, test = split_dataset(list(range(20)), 0.75, seed=3)
        self.assertEqual(len(train), 15)
        self.assertEqual(sorted(train + test), list(range(20)))


class EncodedDatasetTests(SimpleTestCase):
    def setUp(self):
        rng = np.random.default_rng(0)
        self.dataset = EncodedDataset(
            labels=rng.integers(0, 2, 12).astype(np.int8),
            indices=rng.integers(0, 4, (12, 2)),
            values=np.ones((12, 2)),
            field_offsets=np.array([0, 2, 4]),
            dictionary_hash='abc',
            is_test=np.arange(12) % 4 == 0,
        )

    def test_parts(self):
        self.assertEqual(len(self.dataset.train_part()), 9)
        self.assertEqual(len(self.dataset.test_part()), 3)

    def test_batches_cover_order(self):
        order = np.arange(12)[::-1]
        sizes = [len(batch) for batch in self.dataset.batches(order, 5)]
        self.assertEqual(sizes, [5, 5, 2])

    def test_save_and_load(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'data.npz')
            self.dataset.save(path)
            loaded = EncodedDataset.load(path)
        np.testing.assert_array_equal(loaded.indices, self.dataset.indices)
        np.testing.assert_array_equal(loaded.is_test, self.dataset.is_test)
        self.assertEqual(loaded.dictionary_hash, 'abc')
        self.assertEqual(loaded.n_features, 4)

    def test_load_missing_file(self):
        with self.assertRaises(InputError):
            EncodedDataset.load('/nonexistent/data.npz')
