import csv
import json
import math
import os

import pytest

from mmdistill import cli

SMALL_DATA = ["--size", "16", "--train-per-class", "10", "--test-per-class", "5"]


def run(capsys, *argv):
    rc = cli.main([str(a) for a in argv])
    cap = capsys.readouterr()
    return rc, cap.out, cap.err


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "toy"
    assert cli.main(["gen-data", *SMALL_DATA, "--seed", "1", "--out", str(out)]) == 0
    return out


def test_gen_data_twice_is_byte_identical(tmp_path, capsys):
    for name in ("a", "b"):
        rc, _, _ = run(capsys, "gen-data", *SMALL_DATA, "--seed", "4", "--out", tmp_path / name)
        assert rc == 0
    files = sorted(os.listdir(tmp_path / "a"))
    assert files == sorted(os.listdir(tmp_path / "b"))
    assert {"manifest.json", "config.json"} <= set(files)
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_unknown_method_is_usage_error(tmp_path, data_dir, capsys):
    rc, _, err = run(capsys, "distill", "--data", data_dir, "--method", "mtt", "--out", tmp_path)
    assert rc == 2
    assert err.count("\n") == 1 and err.startswith("error: usage:")
    assert "masked_dc" in err


def test_missing_dataset_path(tmp_path, capsys):
    rc, _, err = run(capsys, "distill", "--data", tmp_path / "nope", "--out", tmp_path / "o")
    assert rc == 1
    assert err.startswith("error: missing-path:") and "nope" in err


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"distill": {"metod": "dc"}}))
    rc, _, err = run(capsys, "distill", "--config", cfg, "--out", tmp_path / "o")
    assert rc == 1 and "metod" in err and err.startswith("error: bad-config:")
    cfg.write_text(json.dumps({"trainer": {}}))
    rc, _, err = run(capsys, "distill", "--config", cfg, "--out", tmp_path / "o")
    assert rc == 1 and "trainer" in err


def test_corrupt_dataset_is_bad_data(tmp_path, data_dir, capsys):
    import shutil
    bad = tmp_path / "bad"
    shutil.copytree(data_dir, bad)
    blob = bad / "train.bin"
    blob.write_bytes(blob.read_bytes()[:-8])
    rc, _, err = run(capsys, "distill", "--data", bad, "--out", tmp_path / "o")
    assert rc == 1 and err.startswith("error: bad-data:") and "train.bin" in err


DISTILL = ["--iters", "3", "--batch-real", "4", "--net-width", "8", "--ipc", "1"]


def test_distill_eval_report_and_reproduce_from_config(tmp_path, data_dir, capsys):
    cfg_file = tmp_path / "run.json"
    cfg_file.write_text(json.dumps({"distill": {"net_depth": 2}}))
    d1 = tmp_path / "d1"
    rc, _, _ = run(capsys, "distill", "--config", cfg_file, "--data", data_dir, "--method", "dm",
                   *DISTILL, "--seed", "3", "--out", d1)
    assert rc == 0
    assert (d1 / "manifest.json").exists() and (d1 / "trace.csv").exists()
    echoed = json.loads((d1 / "config.json").read_text())
    assert echoed["distill"]["method"] == "dm" and echoed["distill"]["net_depth"] == 2

    # the echoed config alone reproduces the run
    d2 = tmp_path / "d2"
    rc, _, _ = run(capsys, "distill", "--config", d1 / "config.json", "--out", d2)
    assert rc == 0
    for f in os.listdir(d1):
        assert (d1 / f).read_bytes() == (d2 / f).read_bytes(), f

    ev = tmp_path / "ev"
    rc, out, _ = run(capsys, "eval", "--data", data_dir, "--distilled", d1, "--epochs", "2", "--width", "8",
                     "--seeds", "2", "--baselines", "noise_init", "--out", ev)
    assert rc == 0 and "dm" in out and "noise_init" in out
    before = (ev / "aggregate.csv").read_bytes()
    (ev / "aggregate.csv").unlink()
    rc, _, _ = run(capsys, "report", ev)
    assert rc == 0 and (ev / "aggregate.csv").read_bytes() == before


def _sweep_config(tmp_path):
    spec = {
        "methods": ["dc", "dm"],
        "seeds": [0, 1],
        "datasets": {"toy": {"size": 16, "train_per_class": 10, "test_per_class": 5}},
        "distill": {"iterations": 2, "batch_real": 4, "net_width": 8, "net_depth": 2},
        "eval": {"epochs": 2, "width": 8},
        "workers": 1,
    }
    path = tmp_path / "sweep.json"
    path.write_text(json.dumps(spec))
    return path


def test_sweep_resume_and_aggregate(tmp_path, capsys):
    cfg = _sweep_config(tmp_path)
    out = tmp_path / "sw"
    rc, table, err = run(capsys, "sweep", "--config", cfg, "--out", out)
    assert rc == 0, err
    cells = sorted(os.listdir(out / "cells"))
    assert len(cells) == 4
    assert "dc" in table and "dm" in table
    stamps = {c: os.stat(out / "cells" / c / "result.csv").st_mtime_ns for c in cells}

    rc, table2, _ = run(capsys, "sweep", "--config", cfg, "--out", out, "--resume")
    assert rc == 0 and table2 == table
    assert stamps == {c: os.stat(out / "cells" / c / "result.csv").st_mtime_ns for c in cells}

    # aggregate.csv is a pure function of the per-cell results
    rows = []
    for c in cells:
        with open(out / "cells" / c / "result.csv", newline="") as fh:
            rows += list(csv.DictReader(fh))
    with open(out / "aggregate.csv", newline="") as fh:
        agg = list(csv.DictReader(fh))
    assert len(agg) == 2
    for r in agg:
        accs = [float(x["accuracy"]) for x in rows if x["label"] == r["label"]]
        m = math.fsum(accs) / len(accs)
        assert float(r["mean"]) == m
        assert float(r["std"]) == math.sqrt(math.fsum((a - m) ** 2 for a in accs) / len(accs))
    assert (out / "table.md").read_text() == table

    before = (out / "aggregate.csv").read_bytes()
    rc, _, _ = run(capsys, "report", out)
    assert rc == 0 and (out / "aggregate.csv").read_bytes() == before


def test_sweep_bad_spec(tmp_path, capsys):
    path = tmp_path / "s.json"
    path.write_text(json.dumps({"methods": ["dc"], "seeds": [0], "grid": []}))
    rc, _, err = run(capsys, "sweep", "--config", path, "--out", tmp_path / "o")
    assert rc == 1 and "grid" in err


def test_no_subcommand_is_usage(capsys):
    rc, _, err = run(capsys)
    assert rc == 2 and err.startswith("error: usage:")
