import csv
import io
import json
import re
import subprocess
import sys

import pytest

from moecache.cli import main
from moecache.trace import read_trace


def cli(*argv):
    try:
        return main([str(a) for a in argv])
    except SystemExit as exc:
        return exc.code


@pytest.fixture(scope="module")
def qwen(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "qwen.moet"
    assert cli("gen", "--model", "qwen1.5-moe", "--layers", 2, "--tokens", 60, "--seed", 1,
               "--out", path) == 0
    return path


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "small.moet"
    assert cli("gen", "--model", "custom", "--layers", 2, "--experts", 8, "--top-k", 2,
               "--tokens", 40, "--prompt-len", 10, "--out", path) == 0
    return path


def read_csv(path):
    return list(csv.DictReader(open(path)))


def test_gen_preset_header(qwen):
    h = read_trace(qwen).header
    assert (h.num_layers, h.experts_per_layer, h.top_k, h.shared_experts, h.num_tokens) == (2, 60, 4, 4, 60)


def test_gen_jsonl(tmp_path, capsys):
    out = tmp_path / "t.jsonl"
    assert cli("gen", "--model", "mixtral-8x7b", "--layers", 1, "--tokens", 5, "--out", out) == 0
    assert json.loads(out.read_text().splitlines()[1])["t"] == 0
    assert "repro: config=" in capsys.readouterr().out
    assert cli("stats", "--trace", out) == 0


def test_usage_errors_exit_1(tmp_path, small, capsys):
    assert cli("gen", "--model", "qwen1.5-moe") == 1
    assert cli("gen", "--model", "qwen1.5-moe", "--tokens", 0, "--out", tmp_path / "x.moet") == 1
    assert cli("gen", "--model", "nope", "--out", tmp_path / "x.moet") == 1
    assert cli("gen", "--model", "custom", "--out", tmp_path / "x.moet") == 1
    assert cli("run", "--trace", small, "--strategy", "prior", "--param", 1.5) == 1
    assert cli("run", "--trace", small, "--strategy", "prior") == 1
    assert cli("run", "--trace", small, "--strategy", "prune", "--param", 1.5) == 1
    assert cli("frobnicate") == 1
    assert "error" in capsys.readouterr().err


def test_data_errors_exit_2(tmp_path, small, capsys):
    assert cli("run", "--trace", small, "--strategy", "prior", "--param", 0.5, "--policy", "belady") == 2
    assert cli("run", "--trace", tmp_path / "absent.moet") == 2
    bad = tmp_path / "bad.moet"
    bad.write_bytes(b"MOETxx")
    assert cli("stats", "--trace", bad) == 2
    assert "bad.moet" in capsys.readouterr().err


def test_prior_zero_matches_original(tmp_path, small):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert cli("run", "--trace", small, "--out", a) == 0
    assert cli("run", "--trace", small, "--strategy", "prior", "--param", 0, "--out", b) == 0
    ra, rb = read_csv(a)[0], read_csv(b)[0]
    for col in ("miss_rate_pct", "total_misses", "lifetime_mean", "retained_mass"):
        assert ra[col] == rb[col]


def test_sweep_writes_fifty_rows_and_svg(tmp_path, small):
    out, svg = tmp_path / "s.csv", tmp_path / "s.svg"
    assert cli("sweep", "--trace", small, "--strategy", "prior,prune", "--out", out, "--svg", svg) == 0
    rows = read_csv(out)
    assert sum(r["strategy"] == "prior" for r in rows) == 50
    assert sum(r["strategy"] == "prune" for r in rows) == 3
    assert svg.read_text().startswith("<?xml")


def test_sweep_to_stdout(small, capsys):
    assert cli("sweep", "--trace", small, "--strategy", "maxrank") == 0
    cap = capsys.readouterr()
    rows = list(csv.DictReader(io.StringIO(cap.out)))
    assert [r["param"] for r in rows] == ["0", "1", "2"]
    assert "repro: config=" in cap.err


def test_compare_and_ablate(tmp_path, small, capsys):
    out = tmp_path / "c.csv"
    assert cli("compare", "--trace", small, "--strategies", "original,prior@0.5", "--out", out) == 0
    rows = read_csv(out)
    assert [r["routing"] for r in rows] == ["Original", "Cache-Prior (0.5)"]
    assert rows[0]["cache_size"] == "4 / 8"
    ab = tmp_path / "a.csv"
    assert cli("ablate-cache-size", "--trace", small, "--sizes", "1,4", "--out", ab) == 0
    assert [r["cache_size"] for r in read_csv(ab)] == ["1", "4"]


def test_stats_json(small, capsys):
    assert cli("stats", "--trace", small, "--json") == 0
    out = capsys.readouterr().out
    body = json.loads(out[:out.rindex("}") + 1])
    assert body["header"]["experts_per_layer"] == 8 and len(body["topk_jaccard"]) == 2


def test_runs_are_reproducible(tmp_path, small, capsys):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    args = ["run", "--trace", small, "--strategy", "swap-random", "--param", 1, "--seed", 4]
    assert cli(*args, "--out", a) == 0
    first = capsys.readouterr().out
    assert cli(*args, "--out", b) == 0
    second = capsys.readouterr().out
    assert a.read_bytes() == b.read_bytes()
    repro = re.findall(r"repro: config=([0-9a-f]{12}) seed=4", first)
    assert repro and repro == re.findall(r"repro: config=([0-9a-f]{12}) seed=4", second)


def test_module_entry_point(small):
    proc = subprocess.run([sys.executable, "-m", "moecache", "stats", "--trace", str(small)],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "repro:" in proc.stdout
