import unittest
from itertools import islice
from pathlib import Path

import pytest
import torch

from pyMDL.mdl_data import (
    DATA_DIR_ENV,
    DomainDataset,
    DomainSource,
    build_datasets,
    data_dir,
    synthetic_domain,
)


class TestSyntheticDomain(unittest.TestCase):
    def test_shapes_and_balance(self):
        dataset = synthetic_domain(DomainSource("a", num_classes=4, n_train=40, n_val=20), 8, 1)
        self.assertEqual(tuple(dataset.train_inputs.shape), (40, 1, 8, 8))
        self.assertEqual(tuple(dataset.val_inputs.shape), (20, 1, 8, 8))
        self.assertEqual(torch.bincount(dataset.train_labels).tolist(), [10, 10, 10, 10])
        self.assertEqual(torch.bincount(dataset.val_labels).tolist(), [5, 5, 5, 5])

    def test_deterministic(self):
        source = DomainSource("a", n_train=32, n_val=16, seed=3)
        first, second = synthetic_domain(source), synthetic_domain(source)
        self.assertTrue(torch.equal(first.train_inputs, second.train_inputs))
        self.assertTrue(torch.equal(first.val_labels, second.val_labels))

    def test_domains_differ(self):
        a = synthetic_domain(DomainSource("a", n_train=32, n_val=16))
        b = synthetic_domain(DomainSource("b", n_train=32, n_val=16))
        self.assertFalse(torch.equal(a.train_inputs, b.train_inputs))

    def test_fixed_statistics(self):
        source = DomainSource("a", n_train=64, n_val=8, noise=0.0, contrast=1.0, offset=2.0)
        dataset = synthetic_domain(source, 8, 3)
        self.assertAlmostEqual(float(dataset.train_inputs.mean()), 2.0, delta=0.5)


class TestBatches(unittest.TestCase):
    def setUp(self):
        self.dataset = synthetic_domain(DomainSource("a", num_classes=3, n_train=30, n_val=10), 8, 1)

    def test_train_order_depends_on_seed(self):
        first = [b.labels.tolist() for b in islice(self.dataset.train_batches(8, 1), 6)]
        again = [b.labels.tolist() for b in islice(self.dataset.train_batches(8, 1), 6)]
        other = [b.labels.tolist() for b in islice(self.dataset.train_batches(8, 2), 6)]
        self.assertEqual(first, again)
        self.assertNotEqual(first, other)

    def test_train_batches_are_full(self):
        for batch in islice(self.dataset.train_batches(8, 0), 10):
            self.assertEqual(batch.labels.shape[0], 8)
        batch = next(self.dataset.train_batches(100, 0))
        self.assertEqual(batch.labels.shape[0], 30)

    def test_val_batches_cover_split(self):
        sizes = [b.labels.shape[0] for b in self.dataset.val_batches(4)]
        self.assertEqual(sizes, [4, 4, 2])

    def test_label_check(self):
        batch = next(self.dataset.train_batches(8, 0))
        with self.assertRaises(ValueError):
            batch.check(1)


class TestSources(unittest.TestCase):
    def test_invalid_sources(self):
        with self.assertRaises(ValueError):
            DomainSource("a", source="imagenet")
        with self.assertRaises(ValueError):
            DomainSource("a", source="torchvision:Places365")
        with self.assertRaises(ValueError):
            DomainSource("a", num_classes=1)
        with self.assertRaises(ValueError):
            DomainSource("a", n_val=0)

    def test_from_dict(self):
        source = DomainSource.from_dict({"domain_id": "a", "num_classes": 5})
        self.assertEqual(source.num_classes, 5)
        with self.assertRaises(ValueError):
            DomainSource.from_dict({"domain_id": "a", "classes": 5})

    def test_labels_out_of_range(self):
        with self.assertRaises(ValueError):
            DomainDataset(
                "a",
                2,
                torch.zeros(2, 1, 4, 4),
                torch.tensor([0, 2]),
                torch.zeros(1, 1, 4, 4),
                torch.tensor([0]),
            )

    def test_build_datasets(self):
        datasets = build_datasets([DomainSource("b", n_train=8, n_val=4), DomainSource("a", n_train=8, n_val=4)], 8)
        self.assertEqual(list(datasets), ["b", "a"])
        with self.assertRaises(ValueError):
            build_datasets([DomainSource("a"), DomainSource("a")])


@pytest.fixture
def cache_dir(tmp_path, monkeypatch):
    monkeypatch.setenv(DATA_DIR_ENV, str(tmp_path))
    return tmp_path


def test_data_dir_from_environment(cache_dir):
    assert data_dir() == Path(cache_dir)


def test_data_dir_default(monkeypatch):
    monkeypatch.delenv(DATA_DIR_ENV, raising=False)
    assert data_dir() == Path.home() / ".cache" / "pyMDL"
