"""Results CSV I/O and markdown tables (accuracy, ablation pairs, fairness pass counts)."""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path

import numpy as np

from .trainer import RunResult, mean_stderr

REQUIRED_COLUMNS = (
    "setup", "method", "seed", "lr_c", "lr_b", "epochs", "beta", "balanced", "tap",
    "val_acc", "test_acc", "dp_pass", "eo_pass",
)

SETUP_NAMES = {"I": "Setup I", "II": "Setup II"}

# Display names in table order.
METHOD_NAMES = {
    "baseline": "Baseline",
    "predictability": "Predictability",
    "uncond_mi": "MI (unconditional)",
    "cond_mi": "Ours (MI)",
    "uncond_hsic": "HSIC (unconditional)",
    "cond_hsic": "Ours (HSIC)",
    "mcc_only": "only MCC",
    "pc_only": "only PC",
    "cond_mcc": "Ours (MCC)",
}

# (unconditional, conditional) pairs compared in the ablation table.
ABLATION_PAIRS = (("uncond_mi", "cond_mi"), ("uncond_hsic", "cond_hsic"), ("mcc_only", "cond_mcc"), ("pc_only", "cond_mcc"))


class SchemaError(ValueError):
    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__("results CSV is missing columns: " + ", ".join(self.missing))


class EmptyResultsError(ValueError):
    pass


def write_results(results: list[RunResult], path: str | Path | None = None) -> str:
    """Serialize run rows; returns the CSV text and writes it when ``path`` is given."""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=RunResult.CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in results:
        w.writerow(r.csv_row())
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def read_results(source) -> list[dict]:
    """Parse a results CSV (path or text); validates the schema and non-emptiness."""
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source):
        text = Path(source).read_text()
    else:
        text = source
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None:
        raise EmptyResultsError("results CSV is empty")
    missing = [c for c in REQUIRED_COLUMNS if c not in reader.fieldnames]
    if missing:
        raise SchemaError(missing)
    rows = list(reader)
    if not rows:
        raise EmptyResultsError("results CSV has a header but no rows")
    return rows


def _ok(row: dict) -> bool:
    return row.get("status", "ok") in ("", "ok")


def _float(v) -> float:
    try:
        return float(v)
    except (TypeError, ValueError):
        return math.nan


def _order(methods) -> list[str]:
    known = [m for m in METHOD_NAMES if m in methods]
    return known + sorted(m for m in methods if m not in METHOD_NAMES)


def group(rows: list[dict], key: str = "test_acc") -> dict[tuple[str, str], list[float]]:
    out: dict[tuple[str, str], list[float]] = {}
    for r in rows:
        if not _ok(r):
            continue
        v = _float(r[key])
        if not math.isnan(v):
            out.setdefault((r["setup"], r["method"]), []).append(v)
    return out


def _cell(mean: float, se: float) -> str:
    if math.isnan(mean):
        return "n/a"
    return f"{mean:.3f}" if math.isnan(se) else f"{mean:.3f} ± {se:.3f}"


def accuracy_table(rows: list[dict], key: str = "test_acc", decimals: int = 3) -> str:
    """Methods by setups, mean ± standard error; the best mean per setup is bold.

    Means are compared after rounding to ``decimals``, so displayed ties are all bold.
    """
    groups = group(rows, key)
    setups = sorted({s for s, _ in groups})
    methods = _order({m for _, m in groups})
    stats = {k: mean_stderr(v) for k, v in groups.items()}
    best = {}
    for s in setups:
        means = [round(stats[(s, m)][0], decimals) for m in methods if (s, m) in stats]
        best[s] = max(means) if means else math.nan
    lines = ["| Method | " + " | ".join(SETUP_NAMES.get(s, s) for s in setups) + " |",
             "|---" * (len(setups) + 1) + "|"]
    for m in methods:
        cells = []
        for s in setups:
            if (s, m) not in stats:
                cells.append("")
                continue
            mean, se = stats[(s, m)]
            c = _cell(mean, se)
            cells.append(f"**{c}**" if round(mean, decimals) == best[s] else c)
        lines.append(f"| {METHOD_NAMES.get(m, m)} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def paired_differences(rows: list[dict], a: str, b: str, setup: str, key: str = "test_acc") -> tuple[float, float, int]:
    """Mean and stderr of ``b - a`` over seeds present (and ok) for both methods."""
    va = {r["seed"]: _float(r[key]) for r in rows if _ok(r) and r["setup"] == setup and r["method"] == a}
    vb = {r["seed"]: _float(r[key]) for r in rows if _ok(r) and r["setup"] == setup and r["method"] == b}
    seeds = sorted(set(va) & set(vb), key=str)
    d = [vb[s] - va[s] for s in seeds]
    mean, se = mean_stderr(d)
    return mean, se, len(d)


def ablation_table(rows: list[dict], key: str = "test_acc") -> str:
    """Accuracy table followed by paired conditional-minus-unconditional gaps."""
    out = [accuracy_table(rows, key)]
    setups = sorted({r["setup"] for r in rows})
    present = {(r["setup"], r["method"]) for r in rows}
    lines = ["| Comparison | Setup | Gap | Seeds |", "|---|---|---|---|"]
    for a, b in ABLATION_PAIRS:
        for s in setups:
            if (s, a) in present and (s, b) in present:
                mean, se, n = paired_differences(rows, a, b, s, key)
                lines.append(f"| {METHOD_NAMES[b]} − {METHOD_NAMES[a]} | {SETUP_NAMES.get(s, s)} | {_cell(mean, se)} | {n} |")
    if len(lines) > 2:
        out.append("\n".join(lines) + "\n")
    return "\n".join(out)


def fairness_table(rows: list[dict]) -> str:
    """Pass counts ``k/n`` of DP, EO (HSIC) and EO (PC) per method and setup."""
    cols = [("dp_pass", "DP"), ("eo_pass", "EO HSIC"), ("eo_pc_pass", "EO PC")]
    cols = [c for c in cols if any(c[0] in r for r in rows)]
    setups = sorted({r["setup"] for r in rows})
    methods = _order({r["method"] for r in rows})
    header = ["Method"] + [f"{SETUP_NAMES.get(s, s)} {name}" for s in setups for _, name in cols]
    lines = ["| " + " | ".join(header) + " |", "|---" * len(header) + "|"]
    for m in methods:
        cells = [METHOD_NAMES.get(m, m)]
        for s in setups:
            sel = [r for r in rows if _ok(r) and r["setup"] == s and r["method"] == m]
            for col, _ in cols:
                vals = [r.get(col, "") for r in sel if r.get(col, "") != ""]
                cells.append(f"{sum(int(float(v)) for v in vals)}/{len(vals)}" if vals else "")
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def failed_runs(rows: list[dict]) -> list[dict]:
    return [r for r in rows if not _ok(r)]


def full_report(rows: list[dict]) -> str:
    parts = ["## Test accuracy\n", ablation_table(rows), "\n## Validation accuracy\n", accuracy_table(rows, "val_acc"),
             "\n## Fairness tests (runs passing at the configured level)\n", fairness_table(rows)]
    failed = failed_runs(rows)
    if failed:
        parts.append(f"\n{len(failed)} run(s) failed and are excluded above.\n")
    return "".join(parts)


def values(rows: list[dict], setup: str, method: str, key: str = "test_acc") -> np.ndarray:
    return np.asarray(group(rows, key).get((setup, method), []), dtype=float)
