import csv
import math
import subprocess
import sys
from pathlib import Path

import pytest

from yasgd.cli import _size, main
from yasgd.mlperf import LINE_RE, parse_log
from yasgd.scheduler import load_trace

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

TINY = """
layer_dims = [8, 16, 4]
n_train = 256
n_eval = 64
batch_per_rank = 32
epochs = 2
eval_period = 2
base_lr = 0.5
"""

SIM = """
num_layers = 4
total_bytes = 4000000
total_backward_us = 400
forward_us = 200
batch_per_rank = 32
bandwidth_gbps = 10
latency_us = 5
world_sizes = [1, 2, 4]
thresholds = [1000, 1000000, 10000000]
"""


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_size_parser():
    assert _size("4M") == 4 * 2**20 and _size("64k") == 65536 and _size("inf") == math.inf
    with pytest.raises(Exception):
        _size("0")


def test_train_writes_log_csv_and_trace(tmp_path, capsys):
    cfg = write(tmp_path, "run.toml", TINY)
    log, table, trace = tmp_path / "log.txt", tmp_path / "m.csv", tmp_path / "t.jsonl"
    code = main(["train", "--config", cfg, "--world-size", "2", "--bucket-bytes", "1K", "--seed", "3",
                 "--log", str(log), "--csv", str(table), "--trace", str(trace)])
    assert code == 0
    lines = log.read_text().splitlines()
    assert all(LINE_RE.match(l) for l in lines)
    assert parse_log(lines).final_accuracy is not None
    rows = list(csv.DictReader(table.open()))
    assert len(rows) == 2 * 4 + 1  # 4 iterations per epoch; epoch 1 is both the offset and the final eval
    assert load_trace(trace.read_text().splitlines())
    assert "status=ok" in capsys.readouterr().err


def test_train_log_defaults_to_stdout(tmp_path, capsys):
    assert main(["train", "--config", write(tmp_path, "r.toml", TINY), "--epochs", "0"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out and all(LINE_RE.match(l) for l in out)


def test_train_divergence_exit_code(tmp_path):
    cfg = write(tmp_path, "d.toml", TINY.replace("base_lr = 0.5", "base_lr = 1e30\nlars = false"))
    assert main(["train", "--config", cfg, "--log", str(tmp_path / "l")]) == 1


def test_bad_config_is_an_error(tmp_path, capsys):
    assert main(["train", "--config", write(tmp_path, "b.toml", "bogus = 1\n")]) == 2
    assert "unknown" in capsys.readouterr().err
    assert main(["train", "--config", str(tmp_path / "missing.toml")]) == 2


def test_simulate_csv(tmp_path):
    out = tmp_path / "s.csv"
    assert main(["simulate", "--config", write(tmp_path, "s.toml", SIM), "--csv", str(out),
                 "--trace", str(tmp_path / "t")]) == 0
    rows = list(csv.DictReader(out.open()))
    assert [int(r["P"]) for r in rows] == [1, 2, 4]
    assert float(rows[0]["efficiency"]) == 1.0


def test_sweep_reports_best(tmp_path, capsys):
    assert main(["sweep-threshold", "--config", write(tmp_path, "s.toml", SIM), "--thresholds", "1K,1M,inf"]) == 0
    cap = capsys.readouterr()
    assert cap.out.splitlines()[0] == "threshold_bytes,groups,iteration_time_us"
    assert "best threshold" in cap.err


def test_calibration_config_via_module():
    out = subprocess.run([sys.executable, "-m", "yasgd", "simulate", "--config", str(CONFIGS / "calibration_2048.toml")],
                         capture_output=True, text=True, check=True).stdout
    last = out.strip().splitlines()[-1].split(",")
    assert last[0] == "2048" and abs(float(last[2]) - 0.77) <= 0.01
