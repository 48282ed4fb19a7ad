import json
import subprocess
import sys

import numpy as np
import pytest

from dagmil.bagio import read_manifest, write_bag, Bag
from dagmil.cli import (
    EXIT_INVALID,
    EXIT_IO,
    EXIT_NUMERIC,
    EXIT_OK,
    main,
    parse_args,
)
from dagmil.dagnet import load_model


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["synth", "--out", str(out), "--bags", "18", "--patches", "16", "--dim", "8",
                 "--cluster-radius", "150", "--seed", "3"]) == EXIT_OK
    return out / "manifest.json"


@pytest.fixture(scope="module")
def trained(small_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--data", str(small_data), "--out", str(out), "--k", "4",
                 "--epochs", "2", "--patience", "2", "--seeds", "0,1"]) == EXIT_OK
    return out


def test_synth_defaults(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path)]) == EXIT_OK
    records = read_manifest(tmp_path / "manifest.json")
    assert len(records) == 300
    assert sorted({r["label"] for r in records}) == [0, 1, 2]
    assert "class 2\t100" in capsys.readouterr().out


def test_synth_is_byte_identical(tmp_path):
    args = ["--bags", "12", "--patches", "16", "--dim", "4", "--cluster-radius", "150",
            "--seed", "7"]
    assert main(["synth", "--out", str(tmp_path / "a"), *args]) == EXIT_OK
    assert main(["synth", "--out", str(tmp_path / "b"), *args]) == EXIT_OK
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_synth_rejects_one_class(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), "--classes", "1"]) == EXIT_INVALID
    assert "classes" in capsys.readouterr().err


def test_synth_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["synth", "--out", str(blocker / "sub"), "--bags", "6", "--patches", "16",
                 "--cluster-radius", "150"]) == EXIT_IO


def test_usage_errors_exit_one(capsys):
    assert main(["train"]) == EXIT_INVALID
    assert main(["nonsense"]) == EXIT_INVALID
    assert main(["train", "--data", "x", "--out", "y", "--k", "a,b"]) == EXIT_INVALID


def test_ablation_flags_map_to_config():
    base = parse_args(["train", "--data", "d", "--out", "o"])
    assert (base.no_offset, base.no_weight, base.no_coords) == (False, False, False)
    for flag, dest in (("--no-offset", "no_offset"), ("--no-weight", "no_weight"),
                       ("--no-coords", "no_coords")):
        args = parse_args(["train", "--data", "d", "--out", "o", flag])
        toggled = [name for name in ("no_offset", "no_weight", "no_coords") if getattr(args, name)]
        assert toggled == [dest]


def test_train_outputs(trained, capsys):
    report = json.loads((trained / "report.json").read_text())
    assert [r["seed"] for r in report["runs"]] == [0, 1]
    assert set(report) == {"runs", "mean", "std"}
    model = load_model(trained / "model_seed1.dagmodel")
    assert model.config.k == 4
    assert (trained / "history_seed0.json").exists()


def test_train_is_byte_identical(small_data, trained, tmp_path):
    assert main(["train", "--data", str(small_data), "--out", str(tmp_path), "--k", "4",
                 "--epochs", "2", "--patience", "2", "--seeds", "0,1"]) == EXIT_OK
    assert tree_bytes(tmp_path) == tree_bytes(trained)


def test_sweep_writes_one_report_per_value(small_data, tmp_path, capsys):
    assert main(["train", "--data", str(small_data), "--out", str(tmp_path), "--k", "2,4",
                 "--stride", "64,128", "--epochs", "1", "--patience", "1", "--seed", "0"]) == EXIT_OK
    names = sorted(p.name for p in tmp_path.glob("report*.json"))
    assert names == ["report_k2_stride128.json", "report_k2_stride64.json",
                     "report_k4_stride128.json", "report_k4_stride64.json"]
    rows = capsys.readouterr().out.strip().splitlines()
    assert len(rows) == 4 and all("ACC" in r for r in rows)


def test_config_file_and_override(small_data, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"# comment\ndata = {small_data}\nk = 2\nepochs = 1\npatience = 1\n"
                   "no_weight = true\nseeds = 0\n")
    args = parse_args(["train", "--out", "o", "--config", str(cfg)])
    assert args.k == [2] and args.no_weight and args.epochs == 1
    args = parse_args(["train", "--out", "o", "--config", str(cfg), "--k", "4"])
    assert args.k == [4]
    cfg.write_text("bogus = 1\n")
    assert main(["train", "--data", "d", "--out", "o", "--config", str(cfg)]) == EXIT_INVALID
    cfg.write_text("readout = median\n")
    assert main(["train", "--data", "d", "--out", "o", "--config", str(cfg)]) == EXIT_INVALID


def test_invalid_values_exit_one(small_data, tmp_path, capsys):
    assert main(["train", "--data", str(small_data), "--out", str(tmp_path), "--lr", "0"]) \
        == EXIT_INVALID
    assert "lr" in capsys.readouterr().err
    assert main(["train", "--data", str(small_data), "--out", str(tmp_path), "--k", "0"]) \
        == EXIT_INVALID


def test_missing_files_exit_two(tmp_path):
    assert main(["train", "--data", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == EXIT_IO
    assert main(["eval", "--model", str(tmp_path / "m"), "--data", "x"]) == EXIT_IO
    bad = tmp_path / "bad.dagbag"
    bad.write_bytes(b"NOPE" + bytes(16))
    model = tmp_path / "m.dagmodel"
    from dagmil.dagnet import DagConfig, DagModel, save_model
    save_model(DagModel(DagConfig(dim=8)), model)
    assert main(["heatmap", "--model", str(model), "--bag", str(bad),
                 "--out", str(tmp_path / "h")]) == EXIT_IO


def test_eval(trained, small_data, tmp_path, capsys):
    out = tmp_path / "m.json"
    assert main(["eval", "--model", str(trained / "model_seed0.dagmodel"),
                 "--data", str(small_data), "--out", str(out)]) == EXIT_OK
    metrics = json.loads(out.read_text())
    assert metrics["n"] == 18
    assert all(0 <= metrics[m] <= 1 for m in ("acc", "f1", "auc"))


def test_heatmap_rows(trained, small_data, tmp_path):
    assert main(["heatmap", "--model", str(trained / "model_seed0.dagmodel"),
                 "--data", str(small_data), "--out", str(tmp_path)]) == EXIT_OK
    files = sorted(tmp_path.glob("*.csv"))
    assert len(files) == 18
    lines = files[0].read_text().splitlines()
    assert lines[0] == "x,y,score"
    assert len(lines) == 1 + 16
    scores = np.array([float(line.split(",")[2]) for line in lines[1:]])
    assert scores.min() >= 0 and scores.max() <= 1


def test_heatmap_single_bag(trained, tmp_path):
    rng = np.random.default_rng(0)
    path = tmp_path / "one.dagbag"
    write_bag(Bag(rng.standard_normal((5, 8)), rng.uniform(0, 100, (5, 2)), 0), path)
    assert main(["heatmap", "--model", str(trained / "model_seed0.dagmodel"),
                 "--bag", str(path), "--out", str(tmp_path / "h")]) == EXIT_OK
    assert len((tmp_path / "h" / "one.csv").read_text().splitlines()) == 6
    assert main(["heatmap", "--model", str(trained / "model_seed0.dagmodel"),
                 "--out", str(tmp_path / "h")]) == EXIT_INVALID


def test_gradcheck_default(tmp_path, capsys):
    out = tmp_path / "g.tsv"
    assert main(["gradcheck", "--bags", "2", "--out", str(out)]) == EXIT_OK
    lines = out.read_text().splitlines()
    assert lines[0] == "parameter\tmax_rel_error\tstatus"
    assert all(line.endswith("ok") for line in lines[1:])


def test_gradcheck_failure_exits_three():
    # a huge step breaks the finite-difference approximation
    assert main(["gradcheck", "--bags", "1", "--epsilon", "10", "--tolerance", "1e-12"]) \
        == EXIT_NUMERIC


def test_bench(tmp_path, capsys):
    out = tmp_path / "b.tsv"
    assert main(["bench", "--points", "500,2000", "--queries", "500", "--repeats", "1",
                 "--out", str(out)]) == EXIT_OK
    rows = out.read_text().splitlines()
    assert rows[0].split("\t") == ["points", "queries", "kdtree_s", "bruteforce_s", "speedup"]
    assert len(rows) == 3


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "dagmil", "synth", "--out", str(tmp_path),
                           "--classes", "1"], capture_output=True, text=True)
    assert proc.returncode == EXIT_INVALID
