import math

import pytest

from condebias import reporting as rp
from condebias.trainer import Hyperparams, RunResult

HEADER = "setup,method,seed,lr_c,lr_b,epochs,beta,balanced,tap,val_acc,test_acc,dp_pass,eo_pass\n"


def _row(method, seed, test, val=0.5, setup="I", dp=1, eo=0):
    return f"{setup},{method},{seed},3e-05,3e-05,30,0,0,softmax,{val},{test},{dp},{eo}\n"


FABRICATED = HEADER + _row("baseline", 0, 0.80) + _row("baseline", 1, 0.84) + _row("cond_hsic", 0, 0.90, eo=1) + _row("cond_hsic", 1, 0.86, eo=1)


def test_hand_checked_means():
    rows = rp.read_results(FABRICATED)
    g = rp.group(rows)
    assert g[("I", "baseline")] == [0.80, 0.84]
    table = rp.accuracy_table(rows)
    # means 0.82 and 0.88; stderr = |a - b| / 2 = 0.02 for both
    assert "| Baseline | 0.820 ± 0.020 |" in table
    assert "| Ours (HSIC) | **0.880 ± 0.020** |" in table


def test_tie_bolds_both():
    text = HEADER + _row("baseline", 0, 0.8) + _row("cond_mi", 0, 0.8)
    table = rp.accuracy_table(rp.read_results(text))
    assert table.count("**0.800**") == 2


def test_single_seed_has_empty_stderr():
    table = rp.accuracy_table(rp.read_results(HEADER + _row("cond_mi", 0, 0.7)))
    assert "**0.700** |" in table and "±" not in table


def test_schema_error_lists_missing():
    with pytest.raises(rp.SchemaError) as info:
        rp.read_results("setup,method,seed\nI,baseline,0\n")
    assert "test_acc" in info.value.missing and "val_acc" in str(info.value)


def test_empty_inputs(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text("")
    with pytest.raises(rp.EmptyResultsError):
        rp.read_results(p)
    with pytest.raises(rp.EmptyResultsError):
        rp.read_results(HEADER)


def test_paired_differences_and_ablation():
    text = HEADER + _row("uncond_hsic", 0, 0.70) + _row("uncond_hsic", 1, 0.74) + _row("cond_hsic", 0, 0.80) + _row("cond_hsic", 1, 0.86)
    rows = rp.read_results(text)
    mean, se, n = rp.paired_differences(rows, "uncond_hsic", "cond_hsic", "I")
    assert (mean, n) == (pytest.approx(0.11), 2)
    assert se == pytest.approx(0.01)
    assert "| Ours (HSIC) − HSIC (unconditional) | Setup I | 0.110 ± 0.010 | 2 |" in rp.ablation_table(rows)


def test_fairness_counts():
    table = rp.fairness_table(rp.read_results(FABRICATED))
    assert "| Baseline | 2/2 | 0/2 |" in table
    assert "| Ours (HSIC) | 2/2 | 2/2 |" in table


def test_failed_runs_excluded():
    text = HEADER.strip() + ",status\n" + _row("baseline", 0, 0.8).strip() + ",ok\n" + _row("baseline", 1, "nan").strip() + ",failed: boom\n"
    rows = rp.read_results(text)
    assert len(rp.failed_runs(rows)) == 1
    assert rp.values(rows, "I", "baseline").tolist() == [0.8]
    assert "1 run(s) failed" in rp.full_report(rows)


def test_write_read_round_trip(tmp_path):
    hp = Hyperparams()
    rs = [RunResult(s, "baseline", "II", hp, "softmax", 0.6, 0.7 + s / 100) for s in range(3)]
    text = rp.write_results(rs, tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text() == text
    rows = rp.read_results(tmp_path / "r.csv")
    assert [float(r["test_acc"]) for r in rows] == [0.7, 0.71, 0.72]
    assert "Setup II" in rp.full_report(rows)


def test_unknown_method_sorted_last():
    text = HEADER + _row("zzz", 0, 0.1) + _row("baseline", 0, 0.2)
    lines = rp.accuracy_table(rp.read_results(text)).splitlines()
    assert lines[2].startswith("| Baseline") and lines[3].startswith("| zzz")
    assert math.isnan(rp.paired_differences(rp.read_results(text), "a", "b", "I")[0])
