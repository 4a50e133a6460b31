import json
import tempfile
import unittest
from pathlib import Path
from unittest import mock

import pytest

import pyMDL.mdl_bench as bench
from pyMDL.mdl_bench import (
    ConfigError,
    ExperimentConfig,
    ResultRow,
    ResultsTable,
    apply_overrides,
    cell_label,
    load_config,
    matrix_cells,
    read_results,
    run_matrix,
    write_results,
)
from pyMDL.mdl_report import emit_report, plot_accuracy_curves
from pyMDL.mdl_trainer import MetricsHistory


def tiny_document(**changes):
    document = {
        "name": "tiny",
        "architectures": ["toyT"],
        "strategies": ["bottom_specific"],
        "fractions": [0.2],
        "seeds": [0],
        "domains": [
            {"domain_id": "a", "num_classes": 3, "n_train": 16, "n_val": 8},
            {"domain_id": "b", "num_classes": 2, "n_train": 16, "n_val": 8},
        ],
        "image_size": 8,
        "in_channels": 1,
        "trainer": {"steps": 2, "batch_size": 8, "eval_every": 2, "eval_batch_size": 8},
    }
    document.update(changes)
    return document


def tiny_config(**changes):
    return ExperimentConfig.from_dict(tiny_document(**changes)).validate()


class TestConfig(unittest.TestCase):
    def test_defaults(self):
        config = tiny_config()
        self.assertEqual(config.resolved_domain_sets(), [("a", "b")])
        self.assertEqual(config.trainer.steps, 2)
        self.assertEqual(ExperimentConfig.from_dict(config.to_dict()), config)

    def test_invalid_configs(self):
        for changes in (
            {"strategies": []},
            {"strategies": ["middle_specific"]},
            {"fractions": [1.5]},
            {"fractions": [0.2, 0.2]},
            {"seeds": [-1]},
            {"domain_sets": [["a", "z"]]},
            {"domain_sets": [[]]},
            {"architectures": ["vgg_nothing"]},
            {"workers": 0},
            {"report_fraction": 0.5},
            {"trainer": {"lr": -1}},
            {"schema_version": 2},
        ):
            with self.assertRaises(ConfigError, msg=str(changes)):
                tiny_config(**changes)

    def test_unknown_field(self):
        with self.assertRaises(ConfigError):
            ExperimentConfig.from_dict(tiny_document(epochs=3))
        with self.assertRaises(ConfigError):
            ExperimentConfig.from_dict(tiny_document(trainer={"epochs": 3}))

    def test_overrides(self):
        document = apply_overrides(
            tiny_document(), ["trainer.lr=0.1", "fractions=[0,0.5]", "name=other run"]
        )
        self.assertEqual(document["trainer"]["lr"], 0.1)
        self.assertEqual(document["fractions"], [0, 0.5])
        self.assertEqual(document["name"], "other run")
        with self.assertRaises(ConfigError):
            apply_overrides(tiny_document(), ["trainer.lr"])
        with self.assertRaises(ConfigError):
            apply_overrides(tiny_document(), ["name.sub=1"])

    def test_digest(self):
        self.assertEqual(tiny_config().digest(), tiny_config().digest())
        self.assertNotEqual(tiny_config().digest(), tiny_config(seeds=[1]).digest())


def test_load_config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(tiny_document()))
    config = load_config(path, ["seeds=[3]"])
    assert config.seeds == [3]

    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(path)


class TestCells(unittest.TestCase):
    def test_grid_order(self):
        config = tiny_config(strategies=["top_specific", "bottom_specific"], fractions=[0.0, 1.0], seeds=[0, 1])
        cells = matrix_cells(config)
        self.assertEqual(len(cells), 8)
        self.assertEqual(cells[0]["strategy"], "top_specific")
        self.assertEqual([c["seed"] for c in cells[:2]], [0, 1])
        self.assertEqual(cell_label(cells[0]), "toyT_a+b_top_specific_0_s0")


class TestResults(unittest.TestCase):
    def row(self, **changes):
        values = dict(
            architecture="toyT",
            domain_set="a+b",
            strategy="random",
            fraction=0.2,
            seed=0,
            domain="a",
            val_accuracy=0.5,
            params_total=300,
            params_specific=18,
        )
        values.update(changes)
        return ResultRow(**values)

    def test_accuracy_range(self):
        with self.assertRaises(ValueError):
            self.row(val_accuracy=1.5)

    def test_duplicate_rows(self):
        table = ResultsTable()
        table.extend([self.row()])
        with self.assertRaises(ValueError):
            table.extend([self.row(val_accuracy=0.1)])

    def test_file_round_trip(self):
        table = ResultsTable()
        table.extend([self.row(), self.row(domain="b", val_accuracy=1 / 3), self.row(fraction=0.1)])
        with tempfile.TemporaryDirectory() as tmp:
            for sep, name in ((",", "results.csv"), ("\t", "results.tsv")):
                path = write_results(table, Path(tmp) / name, sep)
                self.assertEqual(read_results(path, sep), table)
            (Path(tmp) / "bad.csv").write_text("architecture,domain\ntoyT,a\n")
            with self.assertRaises(ValueError):
                read_results(Path(tmp) / "bad.csv")
            with self.assertRaises(FileNotFoundError):
                read_results(Path(tmp) / "missing.csv")


class TestRunMatrix(unittest.TestCase):
    def test_single_cell(self):
        table = run_matrix(tiny_config())
        self.assertEqual(len(table), 2)
        self.assertEqual([r.domain for r in table.rows], ["a", "b"])
        row = table.rows[0]
        self.assertEqual(row.params_specific, 18)
        self.assertEqual(row.domain_set, "a+b")
        self.assertIsInstance(table.histories[0], MetricsHistory)

    def test_domain_sets(self):
        domains = [
            {"domain_id": d, "num_classes": 2, "n_train": 8, "n_val": 4} for d in ("a", "b", "c", "d")
        ]
        config = tiny_config(
            domains=domains,
            strategies=["top_specific", "random", "bottom_specific"],
            domain_sets=[["a", "b"], ["a", "b", "c"], ["a", "b", "c", "d"]],
            trainer={"steps": 1, "batch_size": 4, "eval_every": 1},
        )
        table = run_matrix(config)
        self.assertEqual(len(table), 2 * 3 + 3 * 3 + 4 * 3)
        self.assertEqual(
            {r.domain_set for r in table.rows}, {"a+b", "a+b+c", "a+b+c+d"}
        )

    def test_rerun_is_identical(self):
        config = tiny_config(strategies=["random", "top_specific"])
        with tempfile.TemporaryDirectory() as tmp:
            first = write_results(run_matrix(config), Path(tmp) / "first.csv")
            second = write_results(run_matrix(config), Path(tmp) / "second.csv")
            self.assertEqual(first.read_bytes(), second.read_bytes())

    def test_failing_cell_is_recorded(self):
        real = bench.train_joint

        def flaky(model, datasets, cfg, progress=False):
            if model.plan.strategy == "top_specific":
                raise RuntimeError("out of memory")
            return real(model, datasets, cfg, progress=progress)

        config = tiny_config(strategies=["top_specific", "bottom_specific"])
        with mock.patch.object(bench, "train_joint", side_effect=flaky):
            table = run_matrix(config)
        self.assertEqual(len(table.failures), 1)
        self.assertEqual(table.failures[0].index, 0)
        self.assertIn("out of memory", table.failures[0].error)
        self.assertEqual({r.strategy for r in table.rows}, {"bottom_specific"})

    def test_ingestion_failure_fails_every_cell(self):
        config = tiny_config(strategies=["top_specific", "bottom_specific"])
        with mock.patch.object(bench, "build_datasets", side_effect=OSError("download failed")):
            table = run_matrix(config)
            job = bench._cell_job(config.to_dict(), 1, matrix_cells(config)[1])
        self.assertEqual(len(table), 0)
        self.assertEqual([f.index for f in table.failures], [0, 1])
        self.assertEqual(job, (1, None, "OSError: download failed"))

    def test_cells_recorded(self):
        table = run_matrix(tiny_config())
        self.assertEqual(table.cells[0]["strategy"], "bottom_specific")
        self.assertEqual(list(table.cells), list(table.histories))

    def test_histories_written(self):
        with tempfile.TemporaryDirectory() as tmp:
            run_matrix(tiny_config(), history_dir=tmp)
            files = sorted(p.name for p in Path(tmp).iterdir())
            self.assertEqual(files, ["0000_toyT_a+b_bottom_specific_0.2_s0.csv"])


@pytest.mark.slow
def test_workers_match_sequential():
    config = tiny_config(strategies=["random", "top_specific"], fractions=[0.0, 0.5])
    sequential = run_matrix(config)
    config.workers = 2
    assert run_matrix(config) == sequential


@pytest.mark.slow
def test_full_fraction_sweep():
    domains = [
        {"domain_id": d, "num_classes": 5, "n_train": 64, "n_val": 32} for d in ("a", "b", "c")
    ]
    config = tiny_config(
        architectures=["desk_cnn"],
        in_channels=3,
        image_size=16,
        domains=domains,
        strategies=["top_specific", "random", "bottom_specific"],
        fractions=[i / 10 for i in range(11)],
        trainer={"steps": 5, "batch_size": 16, "eval_every": 5},
    )
    table = run_matrix(config)
    assert len(table) == 99
    assert not table.failures

    with tempfile.TemporaryDirectory() as tmp:
        paths, curves = plot_accuracy_curves(table, tmp)
    assert len(paths) == 3
    for lines in curves.values():
        assert list(lines) == ["top_specific", "random", "bottom_specific", "independent"]
        assert len(lines["random"]) == 11


@pytest.mark.slow
def test_desk_grid_learns():
    domains = [
        {"domain_id": d, "num_classes": 10, "n_train": 512, "n_val": 256, "noise": 0.5}
        for d in ("a", "b", "c")
    ]
    config = tiny_config(
        architectures=["desk_cnn"],
        in_channels=3,
        image_size=16,
        domains=domains,
        strategies=["top_specific", "random", "bottom_specific"],
        fractions=[0.0, 0.2, 0.5, 1.0],
        trainer={"steps": 200, "batch_size": 32, "eval_every": 100},
    )
    table = run_matrix(config)
    assert len(table) == 3 * 4 * 3
    for row in table.rows:
        assert row.val_accuracy >= 0.3

    with tempfile.TemporaryDirectory() as tmp:
        artifacts = emit_report(table, tmp)
        assert artifacts.table_path.exists()
        assert len(artifacts.plot_paths) >= 3
