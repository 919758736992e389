import csv
import json

import pytest

from condebias import cli
from condebias import synth_data as sd
from condebias.autodiff import load_checkpoint


def _run(*argv):
    return cli.main([str(a) for a in argv])


def _result(root, setup, method, seed):
    with open(root / setup / method / str(seed) / "result.csv") as fh:
        return next(csv.DictReader(fh))


def test_gen_default_and_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a.cdds", tmp_path / "b.cdds"
    assert _run("gen", "--out", a, "--seed", 3) == 0
    assert _run("gen", "--out", b, "--seed", 3) == 0
    assert a.read_bytes() == b.read_bytes()
    assert len(sd.load_dataset(a).train) == 600
    assert "train: n=600" in capsys.readouterr().out


def test_gen_invalid_setup_exits_2(tmp_path):
    assert _run("gen", "--setup", "3", "--out", tmp_path / "x") == 2


def test_gen_csv_export(tmp_path):
    assert _run("gen", "--setup", "2", "--out", tmp_path / "d", "--n-train", 8, "--n-val", 4, "--n-test", 4,
                "--csv", tmp_path / "d.csv") == 0
    assert len((tmp_path / "d.csv").read_text().splitlines()) == 17


def test_gen_unwritable_exits_1(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert _run("gen", "--out", blocker / "sub" / "d.cdds") == 1


def test_train_missing_dataset_exits_2(tmp_path):
    assert _run("train", "--data", tmp_path / "missing.cdds", "--out", tmp_path) == 2


def test_train_outputs_and_beta_zero(tmp_path):
    data = tmp_path / "d.cdds"
    assert _run("gen", "--out", data, "--seed", 5, "--n-train", 128, "--n-val", 32, "--n-test", 64) == 0
    common = ["--data", data, "--seed", 5, "--epochs", 2, "--lr-c", 1e-3, "--out", tmp_path / "runs", "--n-perm", 20]
    assert _run("train", "--method", "baseline", *common) == 0
    # the cond_hsic preset samples balanced batches; match the baseline's sampler
    assert _run("train", "--method", "cond_hsic", "--beta", 0, "--balanced", "false", *common) == 0
    base = _result(tmp_path / "runs", "I", "baseline", 5)
    off = _result(tmp_path / "runs", "I", "cond_hsic", 5)
    for k in ("val_acc", "test_acc", "dp_p", "eo_p", "eo_pc_p"):
        assert base[k] == off[k]
    d = tmp_path / "runs" / "I" / "baseline" / "5"
    assert {p.name for p in d.iterdir()} == {"config.txt", "model.cdlb", "result.csv", "fairness.json"}
    assert "epochs = 2" in (d / "config.txt").read_text()
    a, b = load_checkpoint(d / "model.cdlb"), load_checkpoint(d.parent.parent / "cond_hsic" / "5" / "model.cdlb")
    assert a.keys() == b.keys() and all((a[k] == b[k]).all() for k in a)
    assert json.loads((d / "fairness.json").read_text())["tap"] == "softmax"


@pytest.mark.slow
def test_train_baseline_preset_single_seed(tmp_path):
    assert _run("train", "--seed", 0, "--out", tmp_path, "--no-fairness") == 0
    assert 0.70 <= float(_result(tmp_path, "I", "baseline", 0)["test_acc"]) <= 0.90


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("# comment\nseed = 2\nn_train = 8\nn_val = 4\nn_test = 4\nsetup = 2\n")
    out = tmp_path / "d.cdds"
    assert _run("gen", "--config", cfg, "--seed", 9, "--out", out) == 0
    ds = sd.load_dataset(out)
    assert ds.setup == "II" and len(ds.train) == 8
    ref = tmp_path / "ref.cdds"
    assert _run("gen", "--setup", 2, "--seed", 9, "--n-train", 8, "--n-val", 4, "--n-test", 4, "--out", ref) == 0
    assert out.read_bytes() == ref.read_bytes()


def test_config_unknown_key_exits_2(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("flavour = vanilla\n")
    assert _run("gen", "--config", cfg, "--out", tmp_path / "d") == 2
    assert _run("gen", "--config", tmp_path / "nope.txt") == 2


def test_bad_flag_exits_2():
    assert _run("train", "--method", "nope") == 2
    assert _run("frobnicate") == 2


def test_theorem_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert _run("theorem", "--n", 2000, "--trials", 4, "--seed", 1, "--out", a) == 0
    assert _run("theorem", "--n", 2000, "--trials", 4, "--seed", 1, "--out", b) == 0
    assert a.read_bytes() == b.read_bytes()
    assert "max |pc(F, B | L)|" in capsys.readouterr().out


def test_theorem_unbiased(tmp_path):
    out = tmp_path / "t.csv"
    assert _run("theorem", "--n", 20000, "--trials", 5, "--alpha1", 0, "--out", out) == 0
    for row in csv.DictReader(out.open()):
        assert abs(float(row["cov_fb"])) <= 5 * float(row["cov_stderr"])


def test_theorem_small_n_exits_2():
    assert _run("theorem", "--n", 10) == 2


def test_report(tmp_path, capsys):
    p = tmp_path / "r.csv"
    p.write_text("setup,method,seed,lr_c,lr_b,epochs,beta,balanced,tap,val_acc,test_acc,dp_pass,eo_pass\n"
                 "I,baseline,0,3e-05,3e-05,30,0,0,softmax,0.8,0.8,1,0\n"
                 "I,baseline,1,3e-05,3e-05,30,0,0,softmax,0.8,0.9,1,0\n")
    assert _run("report", p, "--out", tmp_path / "r.md") == 0
    assert "**0.850 ± 0.050**" in (tmp_path / "r.md").read_text()


def test_report_errors(tmp_path, capsys):
    empty = tmp_path / "e.csv"
    empty.write_text("")
    assert _run("report", empty) == 2
    bad = tmp_path / "b.csv"
    bad.write_text("setup,method\nI,baseline\n")
    assert _run("report", bad) == 2
    assert "missing columns" in capsys.readouterr().err
    assert _run("report", tmp_path / "none.csv") == 2


def test_ablation_one_seed(tmp_path):
    out = tmp_path / "abl"
    assert _run("ablation", "--seeds", 1, "--methods", "uncond_hsic,cond_hsic", "--epochs", 1, "--lr-c", 1e-3,
                "--no-fairness", "--out", out) == 0
    md = (out / "report.md").read_text()
    assert "Ours (HSIC) − HSIC (unconditional)" in md
    assert (out / "results.csv").exists() and "methods = uncond_hsic,cond_hsic" in (out / "config.txt").read_text()


def test_grid(tmp_path, capsys):
    assert _run("grid", "--method", "cond_hsic", "--grid", "beta=0", "--runs", 1, "--epochs", 1, "--lr-c", 1e-3,
                "--out", tmp_path / "g.csv") == 0
    assert "selected: beta=0.0" in capsys.readouterr().out
    assert _run("grid", "--grid", "colour=1") == 2


def test_parse_grid():
    assert cli.parse_grid("beta=0,0.0625; lr-c=1e-5") == {"beta": [0.0, 0.0625], "lr_c": [1e-5]}


def test_hyperparams_from_config_and_flags(tmp_path):
    cfg_file = tmp_path / "c.txt"
    cfg_file.write_text("squared_bw = yes\nbeta = 0.5\n")
    args = cli.build_parser().parse_args(["train", "--method", "cond_hsic", "--config", str(cfg_file), "--beta", "0.25"])
    hp = cli.hyperparams_for(cli.resolve(args), "cond_hsic")
    assert hp.squared_bw and hp.beta == 0.25 and hp.balanced and hp.epochs == 30
