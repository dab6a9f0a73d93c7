import subprocess
import sys

import pytest

from eatlab import cli
from eatlab.data_io import parse_config

SMALL = ["--data.n_per_class", "60", "--data.d", "4", "--train.hidden", "8", "--train.epochs", "2",
         "--attack.n_steps", "3", "--eval.n_steps", "3", "--eval.n_restarts", "1", "--threads", "1"]


def main(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_geometry_example(capsys):
    code, out, _ = main(["geometry", "--eps1", "12", "--epsinf", "0.031372549", "--d", "3072", "--p", "2"], capsys)
    assert code == 0
    values = dict(line.split() for line in out.splitlines())
    assert values["union"] == "0.2182"
    assert values["bound"] == "0.2188"
    assert values["hull"] == "0.6138"


def test_geometry_oracle_and_file(tmp_path, capsys):
    code, out, _ = main(["geometry", "--eps1", "1", "--epsinf", "0.4", "--d", "3", "--oracle",
                         "--output-dir", tmp_path / "g"], capsys)
    assert code == 0
    assert (tmp_path / "g" / "geometry.txt").read_text() == out
    vals = dict(line.split() for line in out.splitlines())
    assert float(vals["oracle_hull"]) == pytest.approx(float(vals["hull"]), abs=2e-3)
    assert float(vals["oracle_union"]) == pytest.approx(float(vals["union"]), abs=2e-3)


def test_geometry_domain_error(capsys):
    code, _, err = main(["geometry", "--eps1", "0.1", "--epsinf", "0.5", "--d", "3"], capsys)
    assert code == 1 and "eps1" in err


def test_missing_config_names_path(tmp_path, capsys):
    out = tmp_path / "out"
    code, _, err = main(["train", "--config", tmp_path / "missing.cfg", "--output-dir", out], capsys)
    assert code == 1
    assert "missing.cfg" in err
    assert not out.exists()


def test_finetune_needs_checkpoint(tmp_path, capsys):
    out = tmp_path / "out"
    code, _, err = main(["finetune", "--output-dir", out], capsys)
    assert code == 1 and "checkpoint" in err
    assert not out.exists()


@pytest.mark.parametrize("argv,key", [
    (["--train.depth", "3"], "train.depth"),
    (["--train.epochs", "zero"], "train.epochs"),
    (["--train.epochs=0"], "train.epochs"),
    (["--attack.eps_l1", "-1"], "eps"),
])
def test_bad_keys(tmp_path, capsys, argv, key):
    out = tmp_path / "out"
    code, _, err = main(["train", "--output-dir", out, *argv], capsys)
    assert code == 1 and key in err
    assert not out.exists()


def test_config_file_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "a.cfg"
    cfg.write_text("train.epochs = 2\nmodel.width = 3\n")
    code, _, err = main(["train", "--config", cfg, "--output-dir", tmp_path / "o"], capsys)
    assert code == 1 and "model.width" in err


def test_missing_checkpoint_file_is_runtime_error(tmp_path, capsys):
    code, _, _ = main(["eval", "--checkpoint", tmp_path / "nope.bin", "--output-dir", tmp_path / "o", *SMALL],
                      capsys)
    assert code == 2


def test_train_snapshot_rerun_identical(tmp_path, capsys):
    a = tmp_path / "a"
    code, out, _ = main(["train", "--output-dir", a, "--train.scheme", "max", *SMALL], capsys)
    assert code == 0
    assert out.splitlines()[-1].startswith("union")
    for name in ("run.cfg", "checkpoint.bin", "report.csv", "telemetry.csv"):
        assert (a / name).exists()
    snap = parse_config((a / "run.cfg").read_text())
    assert snap["train.epochs"] == "2" and snap["train.scheme"] == "max"
    b = tmp_path / "b"
    code, _, _ = main(["train", "--config", a / "run.cfg", "--output-dir", b, "--threads", "1"], capsys)
    assert code == 0
    for name in ("run.cfg", "checkpoint.bin", "report.csv", "telemetry.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()

    # downstream subcommands on the produced checkpoint
    ck = a / "checkpoint.bin"
    code, out, _ = main(["curve", "--checkpoint", ck, "--output-dir", tmp_path / "c", *SMALL,
                         "--eval.eps_max", "0.3", "--eval.n_points", "4"], capsys)
    assert code == 0
    rows = (tmp_path / "c" / "curve.csv").read_text().splitlines()
    assert rows[0] == "p,eps,robust_acc" and len(rows) == 5
    accs = [float(r.split(",")[2]) for r in rows[1:]]
    assert all(b <= a for a, b in zip(accs, accs[1:]))

    code, _, _ = main(["eval", "--checkpoint", ck, "--output-dir", tmp_path / "e", *SMALL], capsys)
    assert code == 0
    assert (tmp_path / "e" / "report.csv").read_text().startswith("model,clean,acc_linf")

    code, _, err = main(["eval", "--checkpoint", ck, "--output-dir", tmp_path / "f", "--check",
                         "--eval.min_clean", "1.01", *SMALL], capsys)
    assert code == 3 and "min_clean" in err

    code, _, _ = main(["finetune", "--checkpoint", ck, "--output-dir", tmp_path / "t", *SMALL,
                       "--train.epochs", "1"], capsys)
    assert code == 0
    code, _, _ = main(["sweep", "--checkpoint", ck, "--output-dir", tmp_path / "s", *SMALL,
                       "--train.epochs", "1", "--eval.pairs", "0.05:0.1;0.1:0.2", "--eval.n_points", "3"],
                      capsys)
    assert code == 0
    rows = (tmp_path / "s" / "sweep.csv").read_text().splitlines()
    assert rows[0] == "epsinf,eps1,predicted_l2,eps,robust_acc" and len(rows) == 7


def test_sweep_rejects_trivial_pair(tmp_path, capsys):
    a = tmp_path / "a"
    assert main(["train", "--output-dir", a, *SMALL, "--train.epochs", "1"], capsys)[0] == 0
    code, _, err = main(["sweep", "--checkpoint", a / "checkpoint.bin", "--output-dir", tmp_path / "s",
                         *SMALL, "--eval.pairs", "0.2:0.1"], capsys)
    assert code == 1 and "eval.pairs" in err


def test_seed_env_fallback(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("EAT_LAB_SEED", "7")
    assert main(["train", "--output-dir", tmp_path / "a", *SMALL, "--train.epochs", "1"], capsys)[0] == 0
    snap = parse_config((tmp_path / "a" / "run.cfg").read_text())
    assert snap["train.seed"] == snap["data.seed"] == snap["attack.seed"] == "7"
    assert main(["train", "--output-dir", tmp_path / "b", *SMALL, "--train.epochs", "1",
                 "--train.seed", "3"], capsys)[0] == 0
    snap = parse_config((tmp_path / "b" / "run.cfg").read_text())
    assert snap["train.seed"] == "3" and snap["data.seed"] == "7"
    monkeypatch.setenv("EAT_LAB_SEED", "x")
    assert main(["train", "--output-dir", tmp_path / "c"], capsys)[0] == 1


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "eatlab", "geometry", "--eps1", "0.3", "--epsinf", "0.1",
                          "--d", "10"], capture_output=True, text=True)
    assert res.returncode == 0 and "hull" in res.stdout
    res = subprocess.run([sys.executable, "-m", "eatlab"], capture_output=True, text=True)
    assert res.returncode == 1
