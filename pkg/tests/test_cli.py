import csv
import json
import subprocess
import sys

import pytest

from smetod.checkpoint import read_header
from smetod.cli import main

SMALL = ["--d-model", "32", "--d-ff", "64", "--encoder-layers", "1", "--decoder-layers", "1", "--dropout", "0"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def fixture_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert run("gen-corpus", "--num-dialogues", 10, "--seed", 7, "--out", out) == 0
    return out


@pytest.fixture(scope="module")
def dst_run(fixture_corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("dst")
    rc = run(
        "train", "--task", "dst", "--corpus", fixture_corpus, *SMALL,
        "--lr", "3e-3", "--steps", 300, "--warmup-steps", 20, "--batch-size", 16, "--out", out,
    )
    assert rc == 0
    return out


def test_usage_errors_exit_1(capsys):
    assert run("frobnicate") == 1
    assert run("train", "--no-such-flag") == 1
    assert run("train", "--corpus", "x") == 1  # --task missing
    assert run("bench", "--experts", "3", "--slots-total", "32") == 1
    assert "usage" in capsys.readouterr().err


def test_runtime_errors_exit_2(tmp_path):
    assert run("eval", "--task", "dst", "--corpus", tmp_path, "--checkpoint", tmp_path / "missing.ckpt") == 2
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    assert run("pad-study", "--corpus", tmp_path, "--checkpoint", bad) == 2


def test_console_script_exit_codes(tmp_path):
    cmd = [sys.executable, "-m", "smetod.cli"]
    assert subprocess.run(cmd + ["bogus"], capture_output=True).returncode == 1
    r = subprocess.run(cmd + ["eval", "--corpus", str(tmp_path), "--checkpoint", str(tmp_path / "x")], capture_output=True)
    assert r.returncode == 2


def test_gen_corpus_is_byte_identical(fixture_corpus, tmp_path):
    out = tmp_path / "again"
    for _ in range(2):
        assert run("gen-corpus", "--num-dialogues", 10, "--seed", 7, "--out", out) == 0
        snapshot = {p.name: p.read_bytes() for p in out.iterdir()}
    for name, data in snapshot.items():
        if name != "manifest.json":  # the manifest echoes the differing --out path
            assert (fixture_corpus / name).read_bytes() == data, name
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 7 and manifest["command"] == "gen-corpus"
    assert manifest["settings"]["num_dialogues"] == 10 and manifest["version"]


def test_bench_writes_two_rows(tmp_path):
    assert run("bench", "--experts", "2,32", "--slots-total", 32, "--seq-len", 8, "--d-model", 16, "--d-ff", 32, "--out", tmp_path) == 0
    rows = list(csv.DictReader((tmp_path / "bench.csv").open()))
    assert [(r["m"], r["p"], r["total_slots"]) for r in rows] == [("2", "16", "32"), ("32", "1", "32")]
    assert json.loads((tmp_path / "manifest.json").read_text())["grid"] == [[2, 16], [32, 1]]


def test_config_file_and_flag_precedence(tmp_path, fixture_corpus):
    ini = tmp_path / "run.ini"
    ini.write_text("[model]\nd_model = 16\nheads = 2\n[train]\nsteps = 3\nlr = 0.01\n")
    out = tmp_path / "r"
    assert run("train", "--task", "nlu", "--corpus", fixture_corpus, "--config", ini, "--lr", "0.002", "--d-ff", 32, "--out", out) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["settings"]["d_model"] == 16
    assert manifest["settings"]["steps"] == 3
    assert manifest["lr"] == 0.002
    assert read_header(out / "nlu.ckpt")["config"]["d_model"] == 16
    bad = tmp_path / "bad.ini"
    bad.write_text("[model]\ncolour = red\n")
    assert run("train", "--task", "nlu", "--corpus", fixture_corpus, "--config", bad) == 1


def test_train_then_eval_overfits_dst_fixture(dst_run, fixture_corpus, tmp_path):
    assert (dst_run / "dst.ckpt").exists() and (dst_run / "train_log.jsonl").exists()
    assert run("eval", "--task", "dst", "--corpus", fixture_corpus, "--checkpoint", dst_run / "dst.ckpt", "--split", "train", "--out", tmp_path) == 0
    rows = dict(csv.reader((tmp_path / "eval.csv").open()))
    assert float(rows["jga"]) == 100.0
    assert json.loads((tmp_path / "manifest.json").read_text())["metrics"]["jga"] == 100.0


def test_train_log_is_reproducible(fixture_corpus, tmp_path):
    logs = []
    for name in ("a", "b"):
        assert run("train", "--task", "nlu", "--corpus", fixture_corpus, *SMALL, "--steps", 4, "--seed", 5, "--out", tmp_path / name) == 0
        logs.append([json.loads(l)["loss"] for l in (tmp_path / name / "train_log.jsonl").read_text().splitlines()])
    assert logs[0] == logs[1]


def test_infer_and_pad_study(dst_run, fixture_corpus, tmp_path, capsys):
    history = "[sys] hello , how can i help you ? [usr] i need a cheap restaurant"
    rc = run("infer", "--corpus", fixture_corpus, "--checkpoint", dst_run / "dst.ckpt", "--dst-checkpoint", dst_run / "dst.ckpt", "--history", history, "--out", tmp_path / "i")
    assert rc == 0
    row = json.loads(capsys.readouterr().out.splitlines()[0])
    assert set(row) == {"history", "belief", "malformed", "db", "response"}
    rc = run("pad-study", "--corpus", fixture_corpus, "--checkpoint", dst_run / "dst.ckpt", "--split", "train", "--batch-sizes", "1,4", "--out", tmp_path / "p")
    assert rc == 0
    lines = (tmp_path / "p" / "padding.csv").read_text().splitlines()
    assert len(lines) == 3 and lines[1].startswith("1,jga,")
    assert all(float(l.split(",")[3]) <= 1e-12 for l in lines[1:])


def test_ablate_small_grid(fixture_corpus, tmp_path):
    rc = run("ablate", "--corpus", fixture_corpus, *SMALL, "--experts", "2,4", "--slots-total", 4, "--steps", 2, "--out", tmp_path)
    assert rc == 0
    rows = list(csv.DictReader((tmp_path / "ablation.csv").open()))
    assert len(rows) == 2 and all(r["status"] == "ok" for r in rows)
    assert int(rows[0]["parameter_count"]) < int(rows[1]["parameter_count"])
