import csv
import json

import numpy as np
import pytest

from backstep.cli import main


def read_manifest(d):
    return json.loads((d / "manifest.json").read_text())


def scalars(d):
    with open(d / "scalars.csv") as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]}


def test_simulate_writes_outputs_and_manifest(tmp_path):
    out = tmp_path / "run"
    assert main(["simulate", "--controller", "exact-lyapunov", "--T", "0.5", "-o", str(out)]) == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["beta_hat.csv", "kernel.csv", "manifest.json", "scalars.csv", "u.csv"]
    m = read_manifest(out)
    assert m["command"] == "simulate"
    assert m["config"]["controller"] == "exact-lyapunov" and m["config"]["T"] == 0.5
    assert set(m["outputs"]) == {"u.csv", "beta_hat.csv", "kernel.csv", "scalars.csv"}
    assert len(m["input_hash"]) == 64
    assert m["result"]["status"] == "completed"
    assert scalars(out)["t"][-1] == pytest.approx(0.5)


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "exp.ini"
    cfg.write_text("[plant]\nsigma = 3.1\n\n[controller]\nkind = exact-passive\ngamma = 2.0\n\n[run]\nT = 0.2\n")
    out = tmp_path / "run"
    assert main(["simulate", "--config", str(cfg), "--gamma", "0.5", "-o", str(out)]) == 0
    conf = read_manifest(out)["config"]
    assert conf["sigma"] == 3.1 and conf["controller"] == "exact-passive"
    assert conf["gamma"] == 0.5 and conf["T"] == 0.2
    out2 = tmp_path / "run2"
    assert main(["simulate", "--config", str(cfg), "--set", "run.T=0.1", "-o", str(out2)]) == 0
    assert read_manifest(out2)["config"]["T"] == 0.1


def test_manifest_is_deterministic(tmp_path):
    args = ["simulate", "--T", "0.3", "--controller", "exact-lyapunov"]
    assert main(args + ["-o", str(tmp_path / "a")]) == 0
    assert main(args + ["-o", str(tmp_path / "b")]) == 0
    assert read_manifest(tmp_path / "a") == read_manifest(tmp_path / "b")


def test_open_loop_blow_up_exit_code(tmp_path):
    out = tmp_path / "ol"
    code = main(["simulate", "--controller", "open-loop", "--sigma", "2.9", "--T", "200",
                 "--sample-every", "0.5", "-o", str(out)])
    assert code == 2
    s = scalars(out)
    assert s["u_l2"][-1] > 1e9 * s["u_l2"][0]
    assert read_manifest(out)["result"]["status"].startswith("blow-up")


def test_cfl_violation_is_config_error(tmp_path, capsys):
    assert main(["simulate", "--dt", "0.02", "-o", str(tmp_path / "x")]) == 1
    err = capsys.readouterr().err
    assert "'dt'" in err and "CFL" in err
    assert not (tmp_path / "x").exists()


@pytest.mark.parametrize("args,field", [
    (["--controller", "no-lyapunov", "--model", "missing.don"], "model"),
    (["--gamma", "-1"], "gamma"),
    (["--set", "plant.bogus=1"], "bogus"),
    (["--T", "abc"], "T"),
])
def test_config_errors_name_the_field(tmp_path, capsys, args, field):
    assert main(["simulate", "-o", str(tmp_path / "x")] + args) == 1
    assert field in capsys.readouterr().err


def test_unknown_ini_key(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[plant]\nwidth = 3\n")
    assert main(["simulate", "--config", str(cfg), "-o", str(tmp_path / "x")]) == 1
    assert "width" in capsys.readouterr().err


def test_refuses_to_overwrite(tmp_path):
    out = tmp_path / "run"
    args = ["simulate", "--T", "0.1", "-o", str(out)]
    assert main(args) == 0
    assert main(args) == 3
    assert main(args + ["--force"]) == 0
    assert len(list(out.glob("manifest*.json"))) == 1


def test_corrupt_model_is_io_error(tmp_path):
    bad = tmp_path / "bad.don"
    bad.write_bytes(b"garbage")
    code = main(["simulate", "--controller", "no-lyapunov", "--model", str(bad),
                 "--T", "0.1", "-o", str(tmp_path / "x")])
    assert code == 3


def test_no_lyapunov_with_shipped_model_completes(tmp_path):
    out = tmp_path / "no"
    assert main(["simulate", "--controller", "no-lyapunov", "--model", "default",
                 "--T", "13", "-o", str(out)]) == 0
    m = read_manifest(out)
    assert len(m["inputs"]["model"]) == 64
    assert np.max(np.abs(np.loadtxt(out / "beta_hat.csv", delimiter=",", skiprows=1)[:, 1:])) <= 5


def test_no_passive_runs(tmp_path):
    out = tmp_path / "np"
    assert main(["simulate", "--controller", "no-passive", "--model", "default",
                 "--gamma", "1", "--T", "1", "-o", str(out)]) == 0


def test_dataset_train_inspect_bench(tmp_path, capsys):
    ds_dir, model_dir, bench_dir = tmp_path / "ds", tmp_path / "model", tmp_path / "bench"
    assert main(["dataset", "--n-runs", "3", "--dataset-T", "1", "--seed", "3", "-o", str(ds_dir)]) == 0
    m = read_manifest(ds_dir)
    assert m["result"]["samples"] == 300 and "dataset.kds" in m["outputs"]

    csv_path = tmp_path / "ds.csv"
    assert main(["dataset", "export-csv", str(ds_dir / "dataset.kds"), str(csv_path)]) == 0
    assert len(csv_path.read_text().splitlines()) == 301

    assert main(["train", "--dataset", str(ds_dir / "dataset.kds"), "--epochs", "3",
                 "-o", str(model_dir)]) == 0
    m = read_manifest(model_dir)
    assert m["inputs"]["dataset"] == read_manifest(ds_dir)["outputs"]["dataset.kds"]
    assert m["result"]["n_params"] == 14945
    assert (model_dir / "train_report.json").exists()

    capsys.readouterr()
    assert main(["model", "inspect", str(model_dir / "model.don")]) == 0
    assert "n_params: 14945" in capsys.readouterr().out

    assert main(["bench", "--model", "default", "--dx-list", "0.01,0.005", "--n-repeats", "3",
                 "-o", str(bench_dir)]) == 0
    assert (bench_dir / "bench.csv").exists() and (bench_dir / "bench.txt").exists()


def test_export_csv_needs_two_paths(tmp_path):
    assert main(["dataset", "export-csv", str(tmp_path / "only.kds")]) == 1
    assert main(["dataset", "export-csv", str(tmp_path / "missing.kds"), str(tmp_path / "o.csv")]) == 3
