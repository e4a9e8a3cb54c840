import csv
import subprocess
import sys

import pytest

from fedara.cli import main

SMALL = """\
method = {method}
T = 12
t_w = 2
t_f = 4
r_init = 4
num_clients = 12
clients_per_round = 4
n_samples = 600
pretrain_samples = 200
pretrain_epochs = 1
seed = 1
"""


def write(tmp_path, text, name="exp.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_run_outputs(tmp_path, capsys):
    cfg = write(tmp_path, SMALL.format(method="fedara"))
    assert main(["run", cfg, "-o", str(tmp_path / "out")]) == 0
    out = tmp_path / "out"
    r = rows(out / "rounds.csv")
    assert r[0] == ["round", "method", "bytes_up", "bytes_down", "train_loss", "val_acc",
                    "avg_rank", "frozen_sites", "mag", "dir"]
    assert len(r) == 13
    ranks = rows(out / "ranks.csv")
    assert ranks[0] == ["site", "rank"] and len(ranks) == 5
    summary = (out / "summary.txt").read_text()
    assert summary.startswith("method=fedara test_acc=") and "total_gb=" in summary
    assert summary.strip() in capsys.readouterr().out
    total = sum(int(x[2]) + int(x[3]) for x in r[1:])
    assert f"bytes_up={sum(int(x[2]) for x in r[1:])}" in summary
    assert f"total_gb={total / 1e9:.6f}" in summary


def test_fedlora_summary_is_constant_times_rounds(tmp_path):
    cfg = write(tmp_path, SMALL.format(method="fedlora"))
    assert main(["run", cfg, "-o", str(tmp_path)]) == 0
    per_round = {int(x[2]) + int(x[3]) for x in rows(tmp_path / "rounds.csv")[1:]}
    assert len(per_round) == 1
    assert f"total_gb={12 * per_round.pop() / 1e9:.6f}" in (tmp_path / "summary.txt").read_text()


def test_default_fedara_reaches_target_rank(tmp_path):
    cfg = write(tmp_path, "method = fedara\n")
    assert main(["run", cfg, "-o", str(tmp_path)]) == 0
    ranks = [int(x[1]) for x in rows(tmp_path / "ranks.csv")[1:]]
    assert sum(ranks) / len(ranks) <= 8 / 4 + 1


def test_schedule(tmp_path):
    cfg = write(tmp_path, "r_init = 8\nT = 100\nt_w = 5\nt_f = 50\n")
    assert main(["schedule", cfg, "-o", str(tmp_path)]) == 0
    r = rows(tmp_path / "schedule.csv")
    assert r[0] == ["t", "budget"] and len(r) == 102
    b = [int(x[1]) for x in r[1:]]
    assert b[0] == 32 and b[-1] == 8 and b[28] == 10
    assert all(x >= y for x, y in zip(b, b[1:]))


def test_drift(tmp_path, capsys):
    cfg = write(tmp_path, "d = 16\nr_values = 2,4,8\ntrials = 200\n")
    assert main(["drift", cfg, "-o", str(tmp_path)]) == 0
    assert len(rows(tmp_path / "drift.csv")) == 2 * 3 + 1
    lines = [ln for ln in capsys.readouterr().out.splitlines() if ln.startswith("slope")]
    assert len(lines) == 2


def test_partition_stats(tmp_path):
    cfg = write(tmp_path, "partition = pathological\nlabels_per_client = 1\nnum_clients = 20\nn_samples = 400\n")
    assert main(["partition-stats", cfg, "-o", str(tmp_path)]) == 0
    r = rows(tmp_path / "partition.csv")
    assert r[0][:4] == ["client", "size", "distinct_labels", "entropy"] and len(r) == 21
    assert all(x[2] == "1" for x in r[1:])
    assert sum(int(x[1]) for x in r[1:]) == 320


@pytest.mark.parametrize("text", ["T_r = 20\nr_init = 8\n", "nonsense\n", "colour = blue\n"])
def test_config_error_exit(tmp_path, text, capsys):
    assert main(["run", write(tmp_path, text), "-o", str(tmp_path)]) == 1
    assert "error" in capsys.readouterr().err
    assert not list(tmp_path.glob("*.csv"))


def test_missing_config_exit(tmp_path):
    assert main(["schedule", str(tmp_path / "nope.cfg")]) == 1


def test_drift_bad_trials_exit(tmp_path):
    assert main(["drift", write(tmp_path, "trials = 10\n"), "-o", str(tmp_path)]) == 1


def test_runtime_error_exit(tmp_path, capsys):
    cfg = write(tmp_path, f'data_path = "{tmp_path / "missing.csv"}"\n')
    assert main(["partition-stats", cfg, "-o", str(tmp_path)]) == 2
    assert "missing.csv" in capsys.readouterr().err


def test_bad_data_file_exit(tmp_path, capsys):
    (tmp_path / "bad.csv").write_text("0,1.0\nzero,2.0\n")
    cfg = write(tmp_path, f'data_path = "{tmp_path / "bad.csv"}"\n')
    assert main(["run", cfg, "-o", str(tmp_path)]) == 2
    assert ":2:" in capsys.readouterr().err


def test_csv_dataset_input(tmp_path):
    lines = [f"{i % 4}," + ",".join(str((i * 7 + j) % 5 + (i % 4)) for j in range(16)) for i in range(200)]
    (tmp_path / "d.csv").write_text("\n".join(lines) + "\n")
    cfg = write(tmp_path, SMALL.format(method="fedsvd") + f'data_path = "{tmp_path / "d.csv"}"\n')
    assert main(["run", cfg, "-o", str(tmp_path / "o")]) == 0


def test_no_temp_files_left(tmp_path):
    cfg = write(tmp_path, "T = 20\n")
    main(["schedule", cfg, "-o", str(tmp_path / "o")])
    main(["schedule", cfg, "-o", str(tmp_path / "o")])
    assert sorted(p.name for p in (tmp_path / "o").iterdir()) == ["schedule.csv"]


def test_console_entry_point(tmp_path):
    cfg = write(tmp_path, "T = 20\n")
    done = subprocess.run([sys.executable, "-m", "fedara.cli", "schedule", cfg, "-o", str(tmp_path)],
                          capture_output=True, text=True)
    assert done.returncode == 0 and (tmp_path / "schedule.csv").exists()
