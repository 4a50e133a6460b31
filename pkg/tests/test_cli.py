import json
import shutil
from pathlib import Path
from unittest import mock

import pytest

from pyMDL.mdl_cli import (
    EXIT_INVALID,
    EXIT_OK,
    EXIT_PARTIAL,
    EXIT_RUNTIME,
    CommandInvocation,
    build_parser,
    main,
)
from pyMDL.mdl_planner import load_plan

FIXTURE = Path(__file__).parent / "data" / "results_fixture.csv"

CONFIG = {
    "name": "cli",
    "architectures": ["toyT"],
    "strategies": ["bottom_specific", "top_specific"],
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


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(CONFIG))
    return path


def test_plan_toy(tmp_path, capsys):
    code = main(["plan", "--arch", "toyT", "--strategy", "bottom_specific", "--fraction", "0.2", "--out", str(tmp_path)])
    assert code == EXIT_OK
    out = capsys.readouterr().out
    assert "achieved 18 / target 21.2" in out
    assert "  L0: 2/2 filters, 18 params {0,1}" in out
    plan = load_plan(tmp_path / "plan_toyT_bottom_specific_0.2.json")
    assert plan.selection == {0: (0, 1)}


def test_plan_empty_budget(tmp_path, capsys):
    code = main(["plan", "--arch", "toyT", "--strategy", "random", "--fraction", "0", "--out", str(tmp_path)])
    assert code == EXIT_OK
    assert "achieved 0 / target 0" in capsys.readouterr().out
    assert load_plan(tmp_path / "plan_toyT_random_0.json").is_empty()


def test_plan_invalid_fraction(tmp_path):
    code = main(["plan", "--arch", "toyT", "--strategy", "top_specific", "--fraction", "1.3", "--out", str(tmp_path)])
    assert code == EXIT_INVALID
    assert not list(tmp_path.iterdir())


def test_plan_unknown_architecture(tmp_path):
    code = main(["plan", "--arch", "vgg_nothing", "--strategy", "random", "--fraction", "0.2", "--out", str(tmp_path)])
    assert code == EXIT_INVALID


def test_train_and_eval(tmp_path, config_path, capsys):
    run = tmp_path / "run"
    code = main(["train", "--config", str(config_path), "--out", str(run), "--strategy", "top_specific", "-q"])
    assert code == EXIT_OK
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["status"] == "completed"
    assert manifest["cell"]["strategy"] == "top_specific"
    assert (run / "checkpoint" / "weights.safetensors").exists()
    assert (run / "history.csv").exists()
    trained = capsys.readouterr().out

    code = main(["eval", "--config", str(config_path), "--checkpoint", str(run / "checkpoint"), "--out", str(run), "-q"])
    assert code == EXIT_OK
    evaluated = json.loads((run / "eval.json").read_text())
    assert set(evaluated["accuracy"]) == {"a", "b"}
    assert capsys.readouterr().out == trained


def test_matrix_rerun_is_identical(tmp_path, config_path):
    first, second = tmp_path / "first", tmp_path / "second"
    assert main(["matrix", "--config", str(config_path), "--out", str(first), "--no-plots", "-q"]) == EXIT_OK
    assert main(["matrix", "--config", str(config_path), "--out", str(second), "--no-plots", "-q"]) == EXIT_OK
    assert (first / "results.csv").read_bytes() == (second / "results.csv").read_bytes()
    assert (first / "summary.csv").exists()

    manifest = json.loads((first / "manifest.json").read_text())
    assert manifest["status"] == "completed"
    assert manifest["rows"] == 4
    assert manifest["cells"] == ["toyT_a+b_bottom_specific_0.2_s0", "toyT_a+b_top_specific_0.2_s0"]
    assert "results.csv" in manifest["outputs"]
    assert len(list((first / "histories").iterdir())) == 2


def test_train_rerun_in_same_directory(tmp_path, config_path):
    run = tmp_path / "run"
    argv = ["train", "--config", str(config_path), "--out", str(run), "-q"]
    assert main(argv) == EXIT_OK
    history = (run / "history.csv").read_bytes()
    plan = (run / "plan.json").read_bytes()
    assert main(argv) == EXIT_OK
    assert (run / "history.csv").read_bytes() == history
    assert (run / "plan.json").read_bytes() == plan


def test_matrix_rerun_in_same_directory(tmp_path, config_path):
    out = tmp_path / "out"
    argv = ["matrix", "--config", str(config_path), "--out", str(out), "--no-plots", "-q"]
    assert main(argv) == EXIT_OK
    files = ["results.csv", "summary.csv", *sorted(f"histories/{p.name}" for p in (out / "histories").iterdir())]
    first = {name: (out / name).read_bytes() for name in files}
    assert main(argv) == EXIT_OK
    assert {name: (out / name).read_bytes() for name in files} == first
    assert len(list((out / "histories").iterdir())) == 2


def test_matrix_training_curves(tmp_path, config_path):
    out = tmp_path / "out"
    assert main(["matrix", "--config", str(config_path), "--out", str(out), "-q"]) == EXIT_OK
    curves = sorted(p.name for p in (out / "training").iterdir())
    assert curves == ["training_toyT_a_b_a.png", "training_toyT_a_b_b.png"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert "training/training_toyT_a_b_a.png" in manifest["outputs"]


def test_matrix_ingestion_failure(tmp_path, config_path):
    out = tmp_path / "out"
    with mock.patch("pyMDL.mdl_bench.build_datasets", side_effect=OSError("download failed")):
        code = main(["matrix", "--config", str(config_path), "--out", str(out), "--no-plots", "-q"])
    assert code == EXIT_PARTIAL
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "failed"
    assert len(manifest["failures"]) == 2
    assert all("download failed" in f["error"] for f in manifest["failures"])


def test_train_ingestion_failure(tmp_path, config_path):
    run = tmp_path / "run"
    with mock.patch("pyMDL.mdl_cli.build_datasets", side_effect=OSError("download failed")):
        code = main(["train", "--config", str(config_path), "--out", str(run), "-q"])
    assert code == EXIT_RUNTIME
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["status"] == "failed"
    assert manifest["error"] == "OSError: download failed"
    assert "finished_at" in manifest


def test_matrix_overrides(tmp_path, config_path):
    out = tmp_path / "out"
    code = main(
        ["matrix", "--config", str(config_path), "--out", str(out), "--no-plots", "-q", "--set", "strategies=[\"random\"]"]
    )
    assert code == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["strategies"] == ["random"]


def test_matrix_invalid_config(tmp_path, config_path):
    out = tmp_path / "out"
    code = main(["matrix", "--config", str(config_path), "--out", str(out), "--set", "strategies=[]"])
    assert code == EXIT_INVALID
    assert not (out / "results.csv").exists()


def test_matrix_needs_config(tmp_path):
    assert main(["matrix", "--out", str(tmp_path)]) == EXIT_INVALID


def test_report_fixture(tmp_path, capsys):
    code = main(["report", "--results", str(FIXTURE), "--out", str(tmp_path), "--no-plots"])
    assert code == EXIT_OK
    out = capsys.readouterr().out
    assert "10.67" in out
    assert "mobilenet_v2 fraction 0.2: bottom - top = +0.0225" in out
    assert (tmp_path / "findings.json").exists()


def test_report_tsv(tmp_path):
    results = tmp_path / "results.tsv"
    results.write_text(FIXTURE.read_text().replace(",", "\t"))
    code = main(["report", "--results", str(results), "--out", str(tmp_path / "r"), "--format", "tsv", "--no-plots"])
    assert code == EXIT_OK
    assert (tmp_path / "r" / "summary.tsv").exists()


def test_report_missing_results(tmp_path):
    assert main(["report", "--results", str(tmp_path / "none.csv"), "--out", str(tmp_path)]) == EXIT_INVALID


def test_report_corrupt_results(tmp_path):
    results = tmp_path / "results.csv"
    shutil.copy(FIXTURE, results)
    results.write_text(results.read_text().replace("0.8782", "1.8782"))
    assert main(["report", "--results", str(results), "--out", str(tmp_path / "r")]) == EXIT_INVALID


def test_invocation():
    args = build_parser().parse_args(["matrix", "--config", "c.json", "-v", "--set", "seeds=[1]"])
    inv = CommandInvocation.from_args(args)
    assert inv.overrides == ["seeds=[1]"]
    assert inv.progress
    with pytest.raises(ValueError):
        CommandInvocation("deploy")
