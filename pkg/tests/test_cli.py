import csv
import time

import numpy as np
import pytest

from mmsada import cli
from mmsada import config as cf
from mmsada import nets

DOMAINS = """
[domain D1]
seed = 101
train_segments = 24
test_segments = 12

[domain D2]
seed = 102
train_segments = 24
test_segments = 12

[domain D3]
seed = 103
train_segments = 24
test_segments = 12
"""

TINY = """\
stage1_steps = 4
stage2_steps = 4
epoch_steps = 2
batch_size = 16
hidden = 16
feat_dim = 8
"""


@pytest.fixture
def run_cfg(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("method = mm-sada\nsource_domain = D1\ntarget_domain = D2\n" + TINY + DOMAINS)
    return p


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_run_writes_artifacts(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("method = mm-sada\nsource_domain = D1\ntarget_domain = D2\n")
    out = tmp_path / "out"
    t0 = time.perf_counter()
    assert cli.main(["run", str(cfg), "--out", str(out), "--steps-scale", "0.05"]) == 0
    assert time.perf_counter() - t0 < 60
    for name in ("metrics.csv", "model.ckpt", "embeddings.tsv", "config.txt"):
        assert (out / name).stat().st_size > 0
    rows = read_csv(out / "metrics.csv")
    assert len(rows) == 2    # 30 + 60 steps at 50 steps per epoch
    bundle = nets.load_checkpoint(out / "model.ckpt")
    assert bundle.cfg.n_classes == 8
    assert cf.load_run_config(out / "config.txt").experiment.stage1_steps == 30


def test_missing_key_exit_code(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("method = mm-sada\nsource_domain = D1\n")
    assert cli.main(["run", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "target_domain" in capsys.readouterr().err


def test_missing_file_exit_code(tmp_path):
    assert cli.main(["run", str(tmp_path / "nope.cfg"), "--out", str(tmp_path / "o")]) == 1


def test_bad_steps_scale(run_cfg, tmp_path):
    assert cli.main(["run", str(run_cfg), "--out", str(tmp_path / "o"), "--steps-scale", "0"]) == 1


def test_divergence_exit_code(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("method = source-only\nsource_domain = D1\ntarget_domain = D2\n"
                   "stage1_lr = 1e6\nstage1_steps = 60\nstage2_steps = 0\n"
                   "divergence_patience = 3\ndivergence_factor = 2\nbatch_size = 16\n" + DOMAINS)
    assert cli.main(["run", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_runs_are_reproducible(run_cfg, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    before = run_cfg.read_bytes()
    assert cli.main(["run", str(run_cfg), "--out", str(a), "--seed", "3"]) == 0
    assert cli.main(["run", str(run_cfg), "--out", str(b), "--seed", "3"]) == 0
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "embeddings.tsv").read_bytes() == (b / "embeddings.tsv").read_bytes()
    assert run_cfg.read_bytes() == before


def test_run_does_not_mutate_config(run_cfg, tmp_path):
    rc = cf.load_run_config(run_cfg)
    snapshot = cf.format_run_config(rc)
    cli.run_experiment(rc, tmp_path / "o")
    assert cf.format_run_config(rc) == snapshot
    assert all(d.class_prior is None for d in rc.domains)


def test_data_command(run_cfg, tmp_path):
    out = tmp_path / "data"
    assert cli.main(["data", str(run_cfg), "--out", str(out)]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["D1.txt", "D2.txt", "D3.txt"]


# ---------------------------------------------------------------- suites

def write_suite(tmp_path, head):
    p = tmp_path / "suite.cfg"
    p.write_text(head + TINY + DOMAINS)
    return p


def test_suite_tables(tmp_path):
    spec = write_suite(tmp_path, "methods = source-only, mm-sada\n")
    out = tmp_path / "s"
    assert cli.main(["suite", str(spec), "--out", str(out)]) == 0
    long_rows = read_csv(out / "suite_long.csv")
    assert len(long_rows) == 2 * 6 * 3 + 2
    means = [r for r in long_rows if r["pair"] == "mean"]
    assert sorted(r["method"] for r in means) == ["mm-sada", "source-only"]
    for m in means:
        runs = [r for r in long_rows if r["method"] == m["method"] and r["pair"] != "mean"]
        per_pair = {}
        for r in runs:
            per_pair.setdefault(r["pair"], []).append(float(r["target_top1"]))
        assert len(per_pair) == 6 and all(len(v) == 3 for v in per_pair.values())
        want = np.mean([np.mean(v) for v in per_pair.values()])
        assert float(m["target_top1"]) == pytest.approx(want, abs=1e-12)
    table = read_csv(out / "suite_table.csv")
    assert len(table) == 2 and len(table[0]) == 3 + 6 + 1

    first = (out / "suite_long.csv").read_bytes()
    assert cli.main(["aggregate", str(out)]) == 0
    assert (out / "suite_long.csv").read_bytes() == first


def test_lambda_sweep(tmp_path):
    spec = write_suite(tmp_path, "methods = mm-sada\npairs = D1>D2\nseeds = 0\n"
                                 "sweep = lambda_d\nsweep_values = 0.1, 0.5, 1, 2\n")
    out = tmp_path / "s"
    assert cli.main(["suite", str(spec), "--out", str(out)]) == 0
    means = [r for r in read_csv(out / "suite_long.csv") if r["pair"] == "mean"]
    assert sorted(float(r["lambda_d"]) for r in means) == [0.1, 0.5, 1.0, 2.0]


def test_partial_failure(tmp_path, monkeypatch, capsys):
    spec = write_suite(tmp_path, "methods = source-only, adabn\npairs = D1>D2\nseeds = 0\n")
    real = cli.run_experiment

    def flaky(rc, out_dir, datasets=None):
        if rc.experiment.method == "adabn":
            raise FloatingPointError("boom")
        return real(rc, out_dir, datasets)

    monkeypatch.setattr(cli, "run_experiment", flaky)
    out = tmp_path / "s"
    assert cli.main(["suite", str(spec), "--out", str(out)]) == 3
    assert "boom" in capsys.readouterr().err
    assert "1 of 2" in (out / "summary.txt").read_text()
    assert len(read_csv(out / "suite_long.csv")) == 2


def test_aggregate_empty_dir(tmp_path):
    assert cli.main(["aggregate", str(tmp_path)]) == 1


def test_jobs_must_be_positive(tmp_path):
    spec = write_suite(tmp_path, "methods = source-only\n")
    assert cli.main(["suite", str(spec), "--out", str(tmp_path / "s"), "--jobs", "0"]) == 1
