import json
import subprocess
import sys

import numpy as np
import pytest

from sglkt.cli import main
from sglkt.data import read_dataset
from sglkt.encoders import read_vocab
from sglkt.graph import read_adjacency_dump
from sglkt.metrics import parse_report

SMALL = ["rounds=3", "candidates=8", "k_min=2", "k_max=4", "d_v=6"]


def gen(out, **counts):
    argv = ["gen-data", "--out", str(out)]
    for s in SMALL:
        argv += ["--set", s]
    for k, v in {"train": 4, "val": 2, **counts}.items():
        argv += [f"--{k}", str(v)]
    assert main(argv) == 0


def train_run(data, out, *extra):
    argv = ["train", "--quiet", "--set", f"train_path={data / 'train.jsonl'}", "--set", f"output_dir={out}",
            "--set", "d_h=8", "--set", "epochs=1"]
    for e in extra:
        argv += ["--set", e]
    assert main(argv) == 0
    return out / "checkpoint.bin"


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    gen(root / "data", test=1)
    ck = train_run(root / "data", root / "run")
    return root, ck


def test_gen_data_layout(workspace):
    root, _ = workspace
    data = root / "data"
    assert sorted(p.name for p in data.iterdir()) == ["generator.json", "test.jsonl", "train.jsonl", "val.jsonl", "vocab.txt"]
    assert len(read_dataset(data / "train.jsonl")) == 4
    assert json.loads((data / "generator.json").read_text())["rounds"] == 3
    tokens = read_vocab(data / "vocab.txt")
    assert tokens[:2] == ["<pad>", "<s>"]


def test_gen_data_is_reproducible(tmp_path):
    gen(tmp_path / "a")
    gen(tmp_path / "b")
    for name in ("train.jsonl", "val.jsonl", "vocab.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_train_writes_config_log_and_checkpoint(workspace):
    root, ck = workspace
    run = root / "run"
    assert ck.exists()
    assert json.loads((run / "config.json").read_text())["d_h"] == 8
    assert [json.loads(x)["epoch"] for x in (run / "train_log.jsonl").read_text().splitlines()] == [0]


def test_eval_prints_and_writes_report(workspace, capsys):
    root, ck = workspace
    out = root / "report.txt"
    assert main(["eval", "--checkpoint", str(ck), "--data", str(root / "data" / "val.jsonl"), "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    assert printed == out.read_text()
    assert set(parse_report(printed)) == {"mrr", "r1", "r5", "r10", "mean", "ndcg", "overall", "graph_f1"}


def test_ensemble_eval_of_twins_equals_eval(workspace, capsys):
    root, ck = workspace
    val = str(root / "data" / "val.jsonl")
    main(["eval", "--checkpoint", str(ck), "--data", val])
    single = capsys.readouterr().out
    assert main(["ensemble-eval", "--checkpoints", str(ck), str(ck), "--data", val]) == 0
    assert capsys.readouterr().out == single


def test_dump_adj(workspace):
    root, ck = workspace
    out = root / "adj.txt"
    assert main(["dump-adj", "--checkpoint", str(ck), "--data", str(root / "data" / "val.jsonl"), "--out", str(out)]) == 0
    records = read_adjacency_dump(out)
    assert len(records) == 2 and records[0][1].A_b.shape == (4, 4)
    assert np.all(np.tril(records[0][1].A_hat) == 0)


def test_grad_check_ops_only(capsys):
    assert main(["grad-check", "--ops-only", "--max-coords", "5"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines and all(line.startswith("PASS ") for line in lines)


@pytest.mark.parametrize("argv, category", [
    (["eval", "--checkpoint", "/nonexistent/ck.bin", "--data", "x.jsonl"], "io"),
    (["train", "--set", "mode=bogus"], "config"),
    (["train", "--set", "d_h"], "config"),
    (["train"], "config"),
    (["gen-data", "--out", "unused", "--set", "topics=1"], "config"),
])
def test_errors_exit_2_with_category(argv, category, capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith(f"error: {category}: ")


def test_corrupt_checkpoint_is_a_parse_error(workspace, tmp_path, capsys):
    root, _ = workspace
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"\x00" * 64)
    assert main(["eval", "--checkpoint", str(bad), "--data", str(root / "data" / "val.jsonl")]) == 2
    assert capsys.readouterr().err.startswith("error: parse: ")


def test_incompatible_data_is_a_version_error(workspace, tmp_path, capsys):
    root, ck = workspace
    argv = ["gen-data", "--out", str(tmp_path / "wide"), "--train", "0", "--val", "1"]
    for s in SMALL[:-1] + ["d_v=7"]:
        argv += ["--set", s]
    main(argv)
    assert main(["eval", "--checkpoint", str(ck), "--data", str(tmp_path / "wide" / "val.jsonl")]) == 2
    assert capsys.readouterr().err.startswith("error: version: ")


def test_output_root_env_applies_to_relative_paths(workspace, tmp_path, monkeypatch):
    root, ck = workspace
    monkeypatch.setenv("SGLKT_OUTPUT_ROOT", str(tmp_path / "outroot"))
    gen("rel_data")
    assert (tmp_path / "outroot" / "rel_data" / "train.jsonl").exists()
    assert main(["eval", "--checkpoint", str(ck), "--data", str(root / "data" / "val.jsonl"), "--out", "r.txt"]) == 0
    assert (tmp_path / "outroot" / "r.txt").exists()
    absolute = tmp_path / "abs"
    gen(absolute)
    assert (absolute / "train.jsonl").exists()


def test_console_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "sglkt.cli", "train", "--set", "nope=1"], capture_output=True, text=True)
    assert proc.returncode == 2 and proc.stderr.startswith("error: config: ")
    help_text = subprocess.run([sys.executable, "-m", "sglkt.cli", "--help"], capture_output=True, text=True).stdout
    for name in ("gen-data", "train", "eval", "ensemble-eval", "dump-adj", "grad-check"):
        assert name in help_text
