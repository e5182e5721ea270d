import json
import re
import statistics

import pytest

from conftest import cpu_count
from pararev.cli import EXIT_FAIL, EXIT_OK, EXIT_USAGE, main
from pararev.scheduler import TaskGraph, build_graph, critical_path

SMALL = ["--widths", "4,4,8,8", "--timesteps", "2", "--samples", "64", "--image-size", "16"]


def train(tmp_path, *extra, name="run"):
    out = tmp_path / name
    rc = main(["train", "--arch", "1,1,1,1", "--flavor", "pararev", "--data", "synth", *SMALL,
               "--out", str(out), *extra])
    return rc, out


# -- train / eval --------------------------------------------------------------------


def test_train_smoke_writes_artifacts(tmp_path, capsys):
    rc, out = train(tmp_path)
    assert rc == EXIT_OK
    for f in ("metrics.csv", "summary.json", "checkpoint.bin", "checkpoint.json", "arch.cfg"):
        assert (out / f).is_file()
    text = capsys.readouterr().out
    assert "# train resolved config" in text and "flavor = pararev" in text
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,train_acc,test_acc,lr" and len(lines) == 2
    summary = json.loads((out / "summary.json").read_text())
    assert summary["Layers"] == 21
    for col in ("Top1 acc(%)", "Train time(h)", "Inference time(us/img)", "Mem (MB/img)", "Para (M)"):
        assert col in summary


def test_zero_epochs_gives_checkpoint_and_chance_eval(tmp_path):
    rc, out = train(tmp_path, "--epochs", "0", "--samples", "400")
    assert rc == EXIT_OK
    assert (out / "checkpoint.bin").stat().st_size > 0
    assert len((out / "metrics.csv").read_text().splitlines()) == 1
    acc = json.loads((out / "summary.json").read_text())["Top1 acc(%)"]
    assert abs(acc - 50) <= 15


def test_same_seed_byte_identical_metrics(tmp_path):
    a = train(tmp_path, "--epochs", "2", "--seed", "4", name="a")[1]
    b = train(tmp_path, "--epochs", "2", "--seed", "4", name="b")[1]
    c = train(tmp_path, "--epochs", "2", "--seed", "4", "--workers", "3", name="c")[1]
    ref = (a / "metrics.csv").read_bytes()
    assert ref == (b / "metrics.csv").read_bytes() == (c / "metrics.csv").read_bytes()
    assert (a / "checkpoint.bin").read_bytes() == (c / "checkpoint.bin").read_bytes()


def test_eval_checkpoint(tmp_path, capsys):
    _, out = train(tmp_path)
    capsys.readouterr()
    rc = main(["eval", "--checkpoint", str(out / "checkpoint.bin"), "--samples", "64", "--image-size", "16"])
    assert rc == EXIT_OK
    text = capsys.readouterr().out
    report = json.loads(text[text.index("{"):])
    assert 0 <= report["Top1 acc(%)"] <= 100 and report["samples"] == 16


def test_config_file_and_flag_precedence(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("epochs = 0\nseed = 9\noptimizer = adamw\n")
    rc, _ = train(tmp_path, "--config", str(cfg), "--seed", "3")
    assert rc == EXIT_OK
    text = capsys.readouterr().out
    assert "epochs = 0" in text and "optimizer = adamw" in text
    assert "seed = 3" in text and "seed = 9" not in text


def test_usage_errors(tmp_path, capsys):
    assert train(tmp_path, "--config", str(tmp_path / "missing.cfg"))[0] == EXIT_USAGE
    bad = tmp_path / "bad.cfg"
    bad.write_text("colour = red\n")
    assert train(tmp_path, "--config", str(bad))[0] == EXIT_USAGE
    assert main(["train", "--arch", "1,x", "--out", str(tmp_path / "x")]) == EXIT_USAGE
    assert main(["train", "--data", str(tmp_path / "nope.bin"), "--out", str(tmp_path / "x")]) == EXIT_USAGE
    assert main(["eval", "--checkpoint", str(tmp_path / "none")]) == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        main(["train", "--flavor", "plain"])
    assert exc.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        main(["verify", "--colour"])
    assert exc.value.code == EXIT_USAGE
    assert "error" in capsys.readouterr().err


# -- verify ------------------------------------------------------------------------------


def test_verify_critical_path_prints_table(capsys):
    assert main(["verify", "--suite", "critical-path"]) == EXIT_OK
    text = capsys.readouterr().out
    assert "baseline/forward" in text and "pararev/forward" in text
    for B in (1, 2, 4, 8, 16):
        row = next(line for line in text.splitlines() if line.split() and line.split()[0] == str(B))
        vals = list(map(int, row.split()[1:]))
        assert vals[:2] == [2 * B, 2 * B] and vals[2:] == [B + 1] * 4
    assert "[FAIL]" not in text


def test_verify_inversion_and_memory(capsys):
    assert main(["verify", "--suite", "inversion"]) == EXIT_OK
    assert main(["verify", "--suite", "memory-scaling"]) == EXIT_OK
    text = capsys.readouterr().out
    assert "round-trip max-abs error" in text and "<= 0.0001" in text
    for policy in ("store-all", "recompute"):
        for D in (4, 8, 16):
            assert re.search(rf"^{policy}\s+{D}\s+\d+$", text, re.M)


def test_verify_failure_exit_code(monkeypatch, capsys):
    from pararev import verify

    def failing():
        return [verify.Check("always fails", 1.0, 0.0, "<=", False)]

    monkeypatch.setitem(verify.SUITES, "critical-path", failing)
    monkeypatch.setattr(verify, "suite_critical_path", failing)
    assert main(["verify", "--suite", "critical-path"]) == EXIT_FAIL
    assert "[FAIL] always fails" in capsys.readouterr().out


# -- bench -------------------------------------------------------------------------------


def bench_rows(text):
    lines = [line for line in text.splitlines() if line and not line.startswith("#")]
    head = lines[0].split(",")
    return head, [dict(zip(head, line.split(","))) for line in lines[1:]]


def test_bench_csv_schema(tmp_path, capsys):
    out = tmp_path / "bench.csv"
    assert main(["bench", "--arch", "2", "--widths", "4", "--workers", "1,2", "--repeat", "2",
                 "--image-size", "8", "--out", str(out)]) == EXIT_OK
    head, rows = bench_rows(out.read_text())
    assert head == ["flavor", "workers", "fwd_ms", "bwd_ms", "step_ms", "peak_activation_bytes",
                    "speedup_vs_baseline"]
    assert len(rows) == 6
    for r in rows:
        if r["flavor"] == "baseline":
            assert float(r["speedup_vs_baseline"]) == 1.0
        assert float(r["step_ms"]) > 0 and int(r["peak_activation_bytes"]) > 0
    assert out.read_text() in capsys.readouterr().out


def test_bench_single_worker_pararev_near_baseline(capsys):
    assert main(["bench", "--arch", "8", "--flavors", "baseline,pararev", "--workers", "1",
                 "--repeat", "7"]) == EXIT_OK
    _, rows = bench_rows(capsys.readouterr().out)
    speedup = float(next(r for r in rows if r["flavor"] == "pararev")["speedup_vs_baseline"])
    assert 0.9 <= speedup <= 1.1


@pytest.mark.skipif(cpu_count() < 4, reason="wall-time parallelism needs >= 4 cores")
def test_bench_four_workers_pararev_faster(capsys):
    speedups = []
    for _ in range(3):
        assert main(["bench", "--arch", "16", "--flavors", "baseline,pararev", "--workers", "4",
                     "--repeat", "7"]) == EXIT_OK
        _, rows = bench_rows(capsys.readouterr().out)
        speedups.append(float(next(r for r in rows if r["flavor"] == "pararev")["speedup_vs_baseline"]))
    assert statistics.median(speedups) > 1.0


# -- graph -------------------------------------------------------------------------------


def graph(tmp_path, flavor, B=2):
    out = tmp_path / f"{flavor}.edges"
    assert main(["graph", "--arch", str(B), "--flavor", flavor, "--out", str(out)]) == EXIT_OK
    return out.read_text()


def report(capsys):
    text = capsys.readouterr().out
    return json.loads(text[text.index("\n{") + 1:])


def test_graph_edges_b2(tmp_path, capsys):
    capsys.readouterr()
    para = graph(tmp_path, "pararev")
    assert report(capsys)["length"] == 3
    base = graph(tmp_path, "baseline")
    rep = report(capsys)
    assert rep["length"] == rep["reimported_length"] == 4
    assert "G0 -> F1" in base
    assert "G0 -> F1" not in para


@pytest.mark.parametrize("flavor", ["baseline", "pararev", "pararev-fused"])
def test_graph_reimport_same_critical_path(tmp_path, flavor):
    text = graph(tmp_path, flavor, B=6)
    assert critical_path(TaskGraph.from_edge_list(text)).length == critical_path(build_graph(6, flavor)).length


def test_graph_prints_to_stdout(capsys):
    assert main(["graph", "--arch", "2,1", "--flavor", "baseline", "--direction", "backward"]) == EXIT_OK
    text = capsys.readouterr().out
    assert "->" in text and "# graph resolved config" in text
