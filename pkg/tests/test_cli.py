import csv
import hashlib

import pytest

from d3dlab.cli import DEFAULTS, main
from d3dlab.datasets import load_dataset
from d3dlab.decoders import layer_sweep
from d3dlab.experiments import ABLATION_HEADER, ABLATION_METHODS, Recipe
from d3dlab.network import load_network

TINY = ["--set", "data.clips_per_class=5", "--set", "data.clip_extents=4,16,16", "--set", "train.base_width=4",
        "--set", "train.epochs=1", "--set", "train.teacher_epochs=1", "--set", "train.front_steps=2",
        "--set", "probe.steps=4", "--set", "probe.layers=Conv2C,Block3A", "--set", "probe.kinds=Simple,AllZeros"]


def rows(path):
    with open(path) as f:
        return list(csv.reader(f))


def digest(directory):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(directory.iterdir())}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["generate", "--out", str(root / "data"), *TINY]) == 0
    base = TINY + ["--set", f"dataset={root / 'data'}"]
    assert main(["train-baseline", "--out", str(root / "base"), *base]) == 0
    assert main(["train-teacher", "--out", str(root / "teacher"), *base]) == 0
    return root, base


def test_generate_outputs(work):
    root, _ = work
    names = set(digest(root / "data"))
    assert {"clips.bin", "flows.bin", "manifest.txt", "dataset_stats.csv", "resolved.cfg", "summary.txt"} <= names
    assert [r[0] for r in rows(root / "data" / "dataset_stats.csv")[1:]] == ["train", "val"]


def test_train_outputs(work):
    root, _ = work
    assert (root / "base" / "baseline.ckpt").exists()
    log = rows(root / "base" / "train_log.csv")
    assert log[0] == ["step", "loss_total", "loss_action", "loss_distill", "lr", "seconds"]
    assert rows(root / "teacher" / "metrics.csv")[1][0] == "teacher"


def test_train_d3d(work):
    root, base = work
    args = base + ["--set", f"teacher={root / 'teacher' / 'teacher.ckpt'}"]
    assert main(["train-d3d", "--out", str(root / "d3d"), *args]) == 0
    assert "lam=1.0" in (root / "d3d" / "summary.txt").read_text()


def test_rerun_from_resolved_config_is_identical(work, tmp_path):
    root, _ = work
    assert main(["train-baseline", "--out", str(tmp_path), "--config", str(root / "base" / "resolved.cfg")]) == 0
    first, again = digest(root / "base"), digest(tmp_path)
    for name in ("baseline.ckpt", "train_log.csv", "metrics.csv", "resolved.cfg"):
        assert first[name] == again[name], name


def test_regenerate_is_identical(work, tmp_path):
    root, _ = work
    assert main(["generate", "--out", str(tmp_path), "--config", str(root / "data" / "resolved.cfg")]) == 0
    first, again = digest(root / "data"), digest(tmp_path)
    for name in ("clips.bin", "flows.bin", "manifest.txt", "dataset_stats.csv"):
        assert first[name] == again[name], name


def test_sweep_matches_library(work):
    root, base = work
    ckpt = root / "base" / "baseline.ckpt"
    out = root / "sweep"
    assert main(["probe-sweep", "--out", str(out), *base, "--set", f"checkpoint={ckpt}"]) == 0
    ds = load_dataset(root / "data" / "manifest.txt")
    net = load_network(ckpt, Recipe(base_width=4).network(ds, 0))
    lib = layer_sweep(net, ["Simple", "AllZeros"], ["Conv2C", "Block3A"], ds, steps=4, lr=0.01, seed=0)
    table = rows(out / "sweep.csv")[1:]
    assert len(table) == len(lib) == 4
    for cli_row, row in zip(table, lib):
        assert cli_row == row.as_csv()
    assert (out / "sweep.svg").read_text().lstrip().startswith("<?xml")


def test_ablation_has_ten_rows(work):
    root, base = work
    out = root / "ablation"
    assert main(["ablation", "--out", str(out), *base]) == 0
    table = rows(out / "ablation.csv")
    assert tuple(table[0]) == ABLATION_HEADER
    assert [r[0] for r in table[1:]] == list(ABLATION_METHODS)
    assert all(0 <= float(r[1]) <= 1 for r in table[1:])
    assert (out / "ablation.md").read_text().count("\n") >= 12


def test_eval_and_reversal(work):
    root, base = work
    out = root / "eval"
    assert main(["eval", "--out", str(out), *base, "--set", f"checkpoint={root / 'base' / 'baseline.ckpt'}"]) == 0
    header, row = rows(out / "eval.csv")
    assert header == ["split", "accuracy", "reversed_accuracy"]
    assert 0 <= float(row[1]) <= 1 and 0 <= float(row[2]) <= 1


def test_flow_viz(work):
    root, base = work
    out = root / "viz"
    ckpt = str(root / "base" / "baseline.ckpt")
    assert main(["flow-viz", "--out", str(out), *base, "--set", f"baseline={ckpt}", "--set", f"d3d={ckpt}",
                 "--set", "probe.kinds=Simple", "--set", "viz.clips=2"]) == 0
    assert (out / "flow_grid.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert len(rows(out / "flow_viz.csv")) == 3


def test_commands_do_not_touch_inputs(work):
    root, _ = work
    before = digest(root / "data")
    test_eval_and_reversal(work)
    assert digest(root / "data") == before


def test_exit_codes(work, tmp_path, capsys):
    root, base = work
    assert main(["generate", "--out", str(tmp_path), "--set", "data.colour=red"]) == 2
    assert "colour" in capsys.readouterr().err
    assert main(["generate", "--out", str(tmp_path), "--set", "nonsense"]) == 2
    assert main(["train-baseline"]) == 2
    assert main(["train-baseline", "--out", str(tmp_path), "--set", "train.epochs=many"]) == 2
    missing = tmp_path / "nowhere"
    assert main(["train-baseline", "--out", str(tmp_path), "--set", f"dataset={missing}"]) == 3
    assert str(missing) in capsys.readouterr().err
    assert main(["train-baseline", "--out", str(tmp_path), "--config", str(missing)]) == 3
    assert main(["train-d3d", "--out", str(tmp_path), *base]) == 3
    assert "teacher" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_failure_exit_code(work, tmp_path):
    _, base = work
    args = base + ["--set", "train.lr=1e30", "--set", "train.epochs=30"]
    assert main(["train-baseline", "--out", str(tmp_path), *args]) == 4


def test_seed_flag_wins(tmp_path):
    from d3dlab.cli import ExperimentSpec

    cfg = ExperimentSpec("eval", None, tmp_path, 5, ["seed=2"]).resolve()
    assert cfg["seed"] == "5"
    assert set(cfg) == set(DEFAULTS)
