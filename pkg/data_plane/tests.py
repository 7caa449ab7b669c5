"""
Test cases for dataset ingestion, synthetic blobs and the archetype partitioner
"""
import gzip
import struct
import tempfile
from io import StringIO
from pathlib import Path

import numpy as np
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase

from .utils import (
    ArchetypeSpec,
    DatasetFormatError,
    LabeledDataset,
    PartitionError,
    _class_means,
    gen_synthetic,
    load_dataset,
    partition_archetypes,
    split_balanced_holdout,
)

# chi-square critical value, 9 degrees of freedom, p = 0.01
CHI2_9DF_P01 = 21.666


def write_idx(path, magic, shape, payload, opener=open):
    header = struct.pack('>I', magic) + struct.pack(f'>{len(shape)}I', *shape)
    with opener(path, 'wb') as handle:
        handle.write(header + bytes(payload))


class LoadDatasetTestCase(SimpleTestCase):
    """Test cases for load_dataset"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def write(self, name, text):
        path = self.dir / name
        path.write_text(text, encoding='utf-8')
        return path

    def test_csv_basic(self):
        """Test a 4-row CSV gives 4 examples and 2 classes"""
        path = self.write('small.csv', 'x1,x2,label\n0.1,0.2,0\n0.3,0.4,1\n0.5,0.6,0\n0.7,0.8,1\n')
        dataset = load_dataset(path, 'csv')
        self.assertEqual(len(dataset), 4)
        self.assertEqual(dataset.num_classes, 2)
        self.assertEqual(dataset.feature_dim, 2)
        self.assertAlmostEqual(dataset.features[0, 1], 0.2)

    def test_csv_scales_out_of_range_columns(self):
        """Test features outside [0, 1] are min-max scaled per column"""
        path = self.write('raw.csv', 'a,b,label\n-10,5,0\n10,5,1\n0,5,2\n')
        dataset = load_dataset(path, 'csv')
        self.assertEqual(dataset.features.min(), 0.0)
        self.assertEqual(dataset.features.max(), 1.0)
        np.testing.assert_allclose(dataset.features[:, 0], [0.0, 1.0, 0.5])
        np.testing.assert_allclose(dataset.features[:, 1], [0.0, 0.0, 0.0])

    def test_csv_row_length_error_names_line(self):
        """Test a short row is reported with its line number"""
        path = self.write('bad.csv', 'x1,x2,label\n0.1,0.2,0\n0.3,1\n')
        with self.assertRaises(DatasetFormatError) as ctx:
            load_dataset(path, 'csv')
        self.assertEqual(ctx.exception.line, 3)

    def test_csv_bad_labels(self):
        """Test non-integer and negative labels are rejected"""
        with self.assertRaises(DatasetFormatError):
            load_dataset(self.write('frac.csv', 'x,label\n0.1,0.5\n'), 'csv')
        with self.assertRaises(DatasetFormatError):
            load_dataset(self.write('neg.csv', 'x,label\n0.1,-1\n'), 'csv')
        with self.assertRaises(DatasetFormatError):
            load_dataset(self.write('word.csv', 'x,label\n0.1,cat\n'), 'csv')

    def test_csv_label_out_of_declared_range(self):
        """Test labels beyond a declared class count are rejected"""
        path = self.write('range.csv', 'x,label\n0.1,0\n0.2,3\n')
        with self.assertRaises(DatasetFormatError):
            load_dataset(path, 'csv', num_classes=3)

    def test_csv_empty(self):
        """Test empty and header-only files are rejected"""
        with self.assertRaises(DatasetFormatError):
            load_dataset(self.write('empty.csv', ''), 'csv')
        with self.assertRaises(DatasetFormatError):
            load_dataset(self.write('header.csv', 'x,label\n'), 'csv')

    def test_idx_pair(self):
        """Test IDX images/labels are accepted and 255 maps to 1.0"""
        images = self.dir / 'images.idx'
        labels = self.dir / 'labels.idx'
        write_idx(images, 0x00000803, (3, 2, 2), [0, 255, 51, 0] * 3)
        write_idx(labels, 0x00000801, (3,), [0, 1, 2])
        dataset = load_dataset(images, 'idx', labels_path=labels)
        self.assertEqual(len(dataset), 3)
        self.assertEqual(dataset.feature_dim, 4)
        self.assertEqual(dataset.num_classes, 3)
        self.assertEqual(dataset.features[0, 1], 1.0)
        self.assertAlmostEqual(dataset.features[0, 2], 0.2)

    def test_idx_gzip(self):
        """Test .gz IDX files are read transparently"""
        images = self.dir / 'images.idx.gz'
        labels = self.dir / 'labels.idx.gz'
        write_idx(images, 0x00000803, (2, 1, 1), [255, 0], opener=gzip.open)
        write_idx(labels, 0x00000801, (2,), [1, 0], opener=gzip.open)
        dataset = load_dataset(images, 'idx', labels_path=labels)
        self.assertEqual(list(dataset.labels), [1, 0])

    def test_idx_count_mismatch(self):
        """Test image and label counts must agree"""
        images = self.dir / 'images.idx'
        labels = self.dir / 'labels.idx'
        write_idx(images, 0x00000803, (3, 1, 1), [1, 2, 3])
        write_idx(labels, 0x00000801, (2,), [0, 1])
        with self.assertRaises(DatasetFormatError):
            load_dataset(images, 'idx', labels_path=labels)

    def test_idx_empty_pair(self):
        """Test a well-formed IDX pair with zero examples names the labels file"""
        images = self.dir / 'images.idx'
        labels = self.dir / 'labels.idx'
        write_idx(images, 0x00000803, (0, 2, 2), [])
        write_idx(labels, 0x00000801, (0,), [])
        with self.assertRaises(DatasetFormatError) as ctx:
            load_dataset(images, 'idx', labels_path=labels)
        self.assertEqual(ctx.exception.path, str(labels))
        self.assertIn('no examples', str(ctx.exception))

    def test_idx_bad_magic_and_truncation(self):
        """Test wrong magic numbers and short payloads are rejected"""
        images = self.dir / 'images.idx'
        labels = self.dir / 'labels.idx'
        write_idx(labels, 0x00000801, (2,), [0, 1])
        write_idx(images, 0x00000801, (2,), [0, 1])
        with self.assertRaises(DatasetFormatError):
            load_dataset(images, 'idx', labels_path=labels)
        write_idx(images, 0x00000803, (2, 2, 2), [0] * 5)
        with self.assertRaises(DatasetFormatError):
            load_dataset(images, 'idx', labels_path=labels)

    def test_missing_file_and_unknown_format(self):
        """Test missing files and unknown formats raise DatasetFormatError"""
        with self.assertRaises(DatasetFormatError):
            load_dataset(self.dir / 'nope.csv', 'csv')
        with self.assertRaises(DatasetFormatError):
            load_dataset(self.write('a.csv', 'x,label\n0,0\n'), 'parquet')


class LabeledDatasetTestCase(SimpleTestCase):
    """Test cases for LabeledDataset / ArchetypeSpec validation"""

    def test_rejects_mismatched_rows(self):
        """Test row count must equal label count"""
        with self.assertRaises(ValueError):
            LabeledDataset(np.zeros((3, 2)), [0, 1], 2)

    def test_rejects_labels_out_of_range(self):
        """Test labels must be below num_classes"""
        with self.assertRaises(ValueError):
            LabeledDataset(np.zeros((2, 2)), [0, 2], 2)

    def test_subset_keeps_num_classes(self):
        """Test subsets remember the class count of the source"""
        dataset = LabeledDataset(np.eye(3), [0, 1, 2], 5)
        part = dataset.subset([2])
        self.assertEqual(part.num_classes, 5)
        self.assertEqual(list(part.labels), [2])

    def test_archetype_spec_validation(self):
        """Test empty label sets and out-of-range bias are rejected"""
        with self.assertRaises(ValueError):
            ArchetypeSpec(frozenset(), 1.0)
        with self.assertRaises(ValueError):
            ArchetypeSpec(frozenset({0}), 1.5)
        self.assertEqual(ArchetypeSpec({2, 0}, 0.5).describe(), '{0,2}@0.5')


class GenSyntheticTestCase(SimpleTestCase):
    """Test cases for gen_synthetic"""

    def test_counts_per_label(self):
        """Test 3 classes x 50 gives exactly 50 examples per label"""
        dataset = gen_synthetic(3, 4, 50, 5.0, seed=1)
        self.assertEqual(len(dataset), 150)
        self.assertEqual(list(dataset.label_counts()), [50, 50, 50])

    def test_deterministic(self):
        """Test one seed always gives the same dataset"""
        first = gen_synthetic(4, 3, 20, 4.0, seed=9)
        second = gen_synthetic(4, 3, 20, 4.0, seed=9)
        self.assertTrue(np.array_equal(first.features, second.features))
        self.assertTrue(np.array_equal(first.labels, second.labels))

    def test_nearest_centroid_separates_classes(self):
        """Test separation 10 in 2-D lets a centroid classifier score >= 99%"""
        dataset = gen_synthetic(3, 2, 400, 10.0, seed=3)
        fit = np.arange(len(dataset)) % 2 == 0
        centroids = np.stack([
            dataset.features[fit & (dataset.labels == c)].mean(axis=0) for c in range(3)
        ])
        held_out = dataset.features[~fit]
        distances = np.linalg.norm(held_out[:, None, :] - centroids[None, :, :], axis=-1)
        accuracy = np.mean(np.argmin(distances, axis=1) == dataset.labels[~fit])
        self.assertGreaterEqual(accuracy, 0.99)

    def test_low_dimensional_means_on_a_circle(self):
        """Test 10 classes in 3-D sit on a circle with neighbours exactly `separation` apart"""
        means = _class_means(10, 3, 2.5, np.random.default_rng(4))
        radius = np.linalg.norm(means[:, :2], axis=1)
        np.testing.assert_allclose(radius, radius[0])
        self.assertTrue(np.all(means[:, 2] == 0.0))
        gaps = np.linalg.norm(means[:, None, :] - means[None, :, :], axis=-1)
        np.testing.assert_allclose(gaps[np.triu_indices(10, k=1)].min(), 2.5)
        np.testing.assert_allclose(np.sort(gaps, axis=1)[:, 1], 2.5)

    def test_circle_slots_follow_the_seed(self):
        """Test the class-to-slot order changes with the seed but not the spacing"""
        first = _class_means(10, 2, 2.5, np.random.default_rng(0))
        second = _class_means(10, 2, 2.5, np.random.default_rng(1))
        self.assertFalse(np.allclose(first, second))
        self.assertTrue(np.allclose(np.sort(np.round(first, 9), axis=0), np.sort(np.round(second, 9), axis=0)))

    def test_one_dimensional_means_on_a_line(self):
        """Test a single feature spaces the classes evenly along it"""
        means = _class_means(4, 1, 3.0, np.random.default_rng(2))
        np.testing.assert_allclose(np.sort(means[:, 0]), [-4.5, -1.5, 1.5, 4.5])

    def test_preconditions(self):
        """Test invalid generator arguments raise ValueError"""
        with self.assertRaises(ValueError):
            gen_synthetic(1, 2, 10, 1.0, seed=0)
        with self.assertRaises(ValueError):
            gen_synthetic(3, 2, 0, 1.0, seed=0)
        with self.assertRaises(ValueError):
            gen_synthetic(3, 2, 10, 0.0, seed=0)


class PartitionTestCase(SimpleTestCase):
    """Test cases for partition_archetypes and the balanced holdout"""

    def setUp(self):
        self.three = gen_synthetic(3, 4, 100, 6.0, seed=0)
        self.ten = gen_synthetic(10, 4, 500, 6.0, seed=0)

    def test_single_label_archetypes_are_pure(self):
        """Test bias 1.0 shards only contain their archetype's label"""
        specs = [ArchetypeSpec({i}, 1.0) for i in range(3)]
        shards = partition_archetypes(self.three, specs, 4, 40, 0.2, seed=1)
        self.assertEqual(len(shards), 12)
        for index, shard in enumerate(shards):
            self.assertEqual(shard.archetype_id, index // 4)
            self.assertTrue(np.all(shard.train.labels == shard.archetype_id))
            self.assertTrue(np.all(shard.validation.labels == shard.archetype_id))
            self.assertEqual(shard.n_k, 32)
            self.assertEqual(len(shard.validation), 8)

    def test_train_and_validation_disjoint(self):
        """Test no source example sits in both splits of a shard"""
        specs = [ArchetypeSpec({0, 1}, 0.5), ArchetypeSpec({2}, 0.9)]
        for shard in partition_archetypes(self.three, specs, 3, 50, 0.3, seed=4):
            self.assertEqual(np.intersect1d(shard.train_indices, shard.validation_indices).size, 0)
            self.assertEqual(np.unique(np.concatenate([shard.train_indices, shard.validation_indices])).size, 50)

    def test_deterministic(self):
        """Test identical inputs produce identical shards"""
        specs = [ArchetypeSpec({0}, 0.7), ArchetypeSpec({1, 2}, 0.7)]
        first = partition_archetypes(self.three, specs, 2, 30, seed=12)
        second = partition_archetypes(self.three, specs, 2, 30, seed=12)
        for a, b in zip(first, second):
            self.assertTrue(np.array_equal(a.train_indices, b.train_indices))
            self.assertTrue(np.array_equal(a.validation_indices, b.validation_indices))

    def test_all_label_spec_is_iid(self):
        """Test a spec covering every label gives a uniform label marginal"""
        spec = ArchetypeSpec(set(range(10)), 0.5)
        counts = np.zeros(10)
        for seed in range(20):
            shard = partition_archetypes(self.ten, [spec], 1, 200, seed=seed)[0]
            counts += np.bincount(np.concatenate([shard.train.labels, shard.validation.labels]), minlength=10)
        expected = counts.sum() / 10
        chi2 = float(np.sum((counts - expected) ** 2 / expected))
        self.assertLess(chi2, CHI2_9DF_P01)

    def test_bias_mixing_fraction(self):
        """Test bias 0.8 on {0,1} over 10 classes gives ~84% labels 0/1"""
        spec = ArchetypeSpec({0, 1}, 0.8)
        for shard in partition_archetypes(self.ten, [spec], 3, 1000, seed=7):
            labels = np.concatenate([shard.train.labels, shard.validation.labels])
            fraction = np.isin(labels, [0, 1]).mean()
            self.assertLess(abs(fraction - 0.84), 0.04)

    def test_errors(self):
        """Test unsatisfiable partition requests raise PartitionError"""
        with self.assertRaises(PartitionError):
            partition_archetypes(self.three, [], 1, 10)
        with self.assertRaises(PartitionError):
            partition_archetypes(self.three, [ArchetypeSpec({7}, 1.0)], 1, 10)
        with self.assertRaises(PartitionError):
            partition_archetypes(self.three, [ArchetypeSpec({0}, 0.0)], 1, 301)
        with self.assertRaises(PartitionError):
            partition_archetypes(self.three, [ArchetypeSpec({0}, 1.0)], 1, 150)

    def test_balanced_holdout(self):
        """Test the holdout takes the same count from every class"""
        test, remainder, remainder_indices = split_balanced_holdout(self.three, 10, seed=0)
        self.assertEqual(list(test.label_counts()), [10, 10, 10])
        self.assertEqual(len(remainder), 270)
        self.assertTrue(np.array_equal(remainder.labels, self.three.labels[remainder_indices]))
        with self.assertRaises(PartitionError):
            split_balanced_holdout(self.three, 100, seed=0)


class GenerateSyntheticCommandTestCase(SimpleTestCase):
    """Test cases for the generate_synthetic management command"""

    def test_writes_loadable_csv(self):
        """Test the command output loads back with the requested shape"""
        with tempfile.TemporaryDirectory() as tmp:
            target = Path(tmp) / 'blobs.csv'
            out = StringIO()
            call_command(
                'generate_synthetic', str(target),
                '--classes', '4', '--feature-dim', '3', '--per-class', '5', '--seed', '2',
                stdout=out,
            )
            self.assertIn('Wrote 20 examples', out.getvalue())
            dataset = load_dataset(target, 'csv')
            self.assertEqual(len(dataset), 20)
            self.assertEqual(dataset.feature_dim, 3)
            self.assertEqual(list(dataset.label_counts()), [5, 5, 5, 5])

    def test_rejects_bad_arguments(self):
        """Test invalid generator arguments become CommandError"""
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(CommandError):
                call_command('generate_synthetic', str(Path(tmp) / 'x.csv'), '--classes', '1', stdout=StringIO())
