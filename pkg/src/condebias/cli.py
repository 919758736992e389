"""Command-line entry point: ``condebias {gen,train,ablation,experiment,grid,theorem,report}``.

Settings come from defaults, then an optional ``key=value`` config file, then
flags (highest precedence). Exit codes: 0 success, 1 runtime failure, 2 usage
or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import bias_model as bm
from . import reporting
from . import synth_data as sd
from .autodiff import save_checkpoint
from .network import TAPS, ModelConfig
from .trainer import (
    BASELINE, METHODS, Hyperparams, RunAborted, grid_search, preset, run_experiment, train,
)

log = logging.getLogger("condebias")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

ABLATION_METHODS = ("uncond_mi", "cond_mi", "uncond_hsic", "cond_hsic", "predictability", "mcc_only", "pc_only", "cond_mcc")
TABLE_METHODS = (BASELINE, "predictability", "cond_mi", "cond_hsic", "cond_mcc")
HP_KEYS = ("lr_c", "lr_b", "epochs", "beta", "balanced", "batch_size", "tap", "squared_bw")


class UsageError(Exception):
    pass


def _setup_arg(v: str) -> str:
    try:
        return sd.normalize_setup(v)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _bool_arg(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {v!r}")


def _hp_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--beta", type=float)
    p.add_argument("--lr-c", dest="lr_c", type=float)
    p.add_argument("--lr-b", dest="lr_b", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", dest="batch_size", type=int)
    p.add_argument("--balanced", type=_bool_arg, nargs="?", const=True)
    p.add_argument("--tap", choices=TAPS)
    p.add_argument("--squared-bw", dest="squared_bw", type=_bool_arg, nargs="?", const=True,
                   help="kernel bandwidth from the mean squared pairwise distance")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="condebias", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, setup=True):
        p.add_argument("--config", type=Path, help="key=value file; flags override it")
        if setup:
            p.add_argument("--setup", type=_setup_arg)

    p = sub.add_parser("gen", help="generate a CDDS1 dataset file")
    common(p)
    p.add_argument("--out", type=Path)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-train", dest="n_train", type=int)
    p.add_argument("--n-val", dest="n_val", type=int)
    p.add_argument("--n-test", dest="n_test", type=int)
    p.add_argument("--csv", type=Path, help="also export a per-example CSV")

    p = sub.add_parser("train", help="train one seeded run")
    common(p)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--seed", type=int)
    p.add_argument("--data", type=Path, help="CDDS1 file; generated from --seed when omitted")
    p.add_argument("--out", type=Path, help="root of runs/<setup>/<method>/<seed>/")
    p.add_argument("--n-perm", dest="n_perm", type=int)
    p.add_argument("--no-fairness", dest="fairness", action="store_false", default=None)
    _hp_flags(p)

    for name, helptext in (("ablation", "unconditional vs conditional criteria"), ("experiment", "baseline and main methods")):
        p = sub.add_parser(name, help=helptext)
        common(p)
        p.add_argument("--seeds", type=int)
        p.add_argument("--seed", type=int, help="first seed")
        p.add_argument("--methods", help="comma-separated override of the method list")
        p.add_argument("--out", type=Path)
        p.add_argument("--jobs", type=int)
        p.add_argument("--n-perm", dest="n_perm", type=int)
        p.add_argument("--no-fairness", dest="fairness", action="store_false", default=None)
        _hp_flags(p)

    p = sub.add_parser("grid", help="grid search one method on validation accuracy")
    common(p)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--grid", help="e.g. 'beta=0,0.0625;lr_c=1e-5,3e-5'")
    p.add_argument("--runs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path)
    p.add_argument("--jobs", type=int)
    _hp_flags(p)

    p = sub.add_parser("theorem", help="Monte-Carlo check on random linear bias models")
    common(p, setup=False)
    p.add_argument("--n", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--alpha1", type=float, help="fix alpha1 for every model")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("report", help="markdown tables from a results CSV")
    common(p, setup=False)
    p.add_argument("results", type=Path)
    p.add_argument("--out", type=Path)
    return parser


DEFAULTS = {
    "gen": {"setup": "I", "out": Path("dataset.cdds"), "seed": 0, "n_train": 600, "n_val": 400, "n_test": 400, "csv": None},
    "train": {"setup": "I", "method": BASELINE, "seed": 0, "data": None, "out": Path("runs"), "n_perm": 500, "fairness": True},
    "ablation": {"setup": "I", "seeds": 20, "seed": 0, "methods": None, "out": Path("ablation"), "jobs": 1,
                 "n_perm": 500, "fairness": True},
    "experiment": {"setup": "I", "seeds": 20, "seed": 0, "methods": None, "out": Path("experiment"), "jobs": 1,
                   "n_perm": 500, "fairness": True},
    "grid": {"setup": "I", "method": "cond_hsic", "grid": "beta=0,0.0625", "runs": 10, "seed": 0, "out": None, "jobs": 1},
    "theorem": {"n": 100_000, "trials": 50, "seed": 0, "alpha1": None, "out": Path("theorem.csv")},
    "report": {"results": None, "out": None},
}
for _cmd in ("train", "ablation", "experiment", "grid"):
    DEFAULTS[_cmd].update({k: None for k in HP_KEYS})

CONVERTERS = {
    "setup": _setup_arg, "seed": int, "seeds": int, "n_train": int, "n_val": int, "n_test": int, "n_perm": int,
    "jobs": int, "runs": int, "n": int, "trials": int, "epochs": int, "batch_size": int, "batch": int,
    "beta": float, "lr_c": float, "lr_b": float, "alpha1": float, "balanced": _bool_arg, "fairness": _bool_arg, "squared_bw": _bool_arg,
    "out": Path, "data": Path, "csv": Path,
}


def read_config(path: Path, allowed) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    out = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key == "batch":
            key = "batch_size"
        if key not in allowed:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r} for this command")
        conv = CONVERTERS.get(key, str)
        try:
            out[key] = conv(value) if value != "" else None
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise UsageError(f"{path}:{lineno}: bad value for {key}: {exc}") from None
    return out


def resolve(args: argparse.Namespace) -> dict:
    """Layer defaults < config file < explicit flags."""
    cfg = dict(DEFAULTS[args.command])
    if getattr(args, "config", None) is not None:
        cfg.update(read_config(args.config, set(cfg)))
    for k, v in vars(args).items():
        if k in ("command", "config", "verbose") or v is None:
            continue
        cfg[k] = v
    return cfg


def hyperparams_for(cfg: dict, method: str) -> Hyperparams:
    hp = preset(cfg["setup"], method)
    overrides = {k: cfg[k] for k in HP_KEYS if cfg.get(k) is not None}
    if "lr_c" in overrides and "lr_b" not in overrides:
        overrides["lr_b"] = overrides["lr_c"] if hp.lr_b == hp.lr_c else hp.lr_b
    try:
        return replace(hp, **overrides)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def echo_config(cfg: dict) -> str:
    return "".join(f"{k} = {'' if v is None else v}\n" for k, v in sorted(cfg.items()))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen(cfg: dict) -> int:
    try:
        ds = sd.generate_dataset(cfg["setup"], cfg["n_train"], cfg["n_val"], cfg["n_test"], seed=cfg["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(cfg["out"])
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        sd.save_dataset(ds, out)
        if cfg.get("csv"):
            sd.export_csv(ds, cfg["csv"])
    except OSError as exc:
        print(f"error: cannot write {exc.filename or out}: {exc.strerror}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"wrote {out} (setup {ds.setup}, seed {ds.seed})")
    for name, split in (("train", ds.train), ("val", ds.val), ("test", ds.peek_test())):
        t = split.contingency()
        print(f"{name}: n={len(split)}  cross/green={t[0, 0]} cross/violet={t[0, 1]} "
              f"square/green={t[1, 0]} square/violet={t[1, 1]}")
    return EXIT_OK


def run_dir(root: Path, setup: str, method: str, seed: int) -> Path:
    return Path(root) / setup / method / str(seed)


def cmd_train(cfg: dict) -> int:
    setup, method, seed = cfg["setup"], cfg["method"], cfg["seed"]
    hp = hyperparams_for(cfg, method)
    if cfg.get("data") is not None:
        path = Path(cfg["data"])
        if not path.is_file():
            raise UsageError(f"dataset not found: {path}")
        try:
            ds = sd.load_dataset(path)
        except ValueError as exc:
            raise UsageError(f"{path}: {exc}") from None
        if ds.setup != setup:
            log.warning("dataset setup %s overrides --setup %s", ds.setup, setup)
            setup = ds.setup
    else:
        ds = sd.generate_dataset(setup, seed=seed)
    try:
        model, res = train(ModelConfig(), hp, method, ds, seed, fairness=cfg["fairness"], n_perm=cfg["n_perm"])
    except RunAborted as exc:
        print(f"error: run aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    d = run_dir(cfg["out"], setup, method, seed)
    d.mkdir(parents=True, exist_ok=True)
    resolved = {**cfg, **asdict(hp), "setup": setup, "tap": res.tap}
    (d / "config.txt").write_text(echo_config(resolved))
    save_checkpoint(d / "model.cdlb", model.state_dict())
    reporting.write_results([res], d / "result.csv")
    if res.fairness is not None:
        (d / "fairness.json").write_text(json.dumps(res.fairness.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"{setup} {method} seed {seed}: val {res.val_accuracy:.3f} test {res.test_accuracy:.3f}")
    if res.fairness is not None:
        row = res.fairness.as_row()
        print(f"fairness ({res.tap}): dp p={row['dp_p']:.3f} eo p={row['eo_p']:.3f} eo_pc p={row['eo_pc_p']:.3f}")
    print(f"outputs in {d}")
    return EXIT_OK


def _methods(cfg: dict, default) -> list[str]:
    if not cfg.get("methods"):
        return list(default)
    methods = [m.strip() for m in str(cfg["methods"]).split(",") if m.strip()]
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise UsageError(f"unknown method(s): {', '.join(bad)}")
    return methods


def _multi(cfg: dict, default_methods) -> int:
    methods = _methods(cfg, default_methods)
    if cfg["seeds"] < 1:
        raise UsageError("--seeds must be >= 1")
    seeds = list(range(cfg["seed"], cfg["seed"] + cfg["seeds"]))
    presets = {m: hyperparams_for(cfg, m) for m in methods}
    results = run_experiment(cfg["setup"], methods, seeds, presets, fairness=cfg["fairness"],
                             n_jobs=cfg["jobs"], n_perm=cfg["n_perm"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(echo_config(dict(cfg, methods=",".join(methods))))
    text = reporting.write_results(results, out / "results.csv")
    rows = reporting.read_results(text)
    md = reporting.full_report(rows)
    (out / "report.md").write_text(md)
    print(md)
    failed = reporting.failed_runs(rows)
    for r in failed:
        print(f"failed: {r['method']} seed {r['seed']}: {r['status']}", file=sys.stderr)
    return EXIT_RUNTIME if len(failed) == len(rows) else EXIT_OK


def cmd_ablation(cfg: dict) -> int:
    return _multi(cfg, ABLATION_METHODS)


def cmd_experiment(cfg: dict) -> int:
    return _multi(cfg, TABLE_METHODS)


def parse_grid(spec: str) -> dict[str, list]:
    grid = {}
    for part in spec.split(";"):
        if not part.strip():
            continue
        if "=" not in part:
            raise UsageError(f"bad grid entry {part!r}; expected key=v1,v2")
        key, vals = (s.strip() for s in part.split("=", 1))
        key = "batch_size" if key == "batch" else key.replace("-", "_")
        if key not in HP_KEYS:
            raise UsageError(f"grid key {key!r} is not a hyperparameter ({', '.join(HP_KEYS)})")
        conv = CONVERTERS.get(key, str)
        try:
            grid[key] = [conv(v.strip()) for v in vals.split(",") if v.strip()]
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise UsageError(f"bad grid value for {key}: {exc}") from None
    if not grid:
        raise UsageError("empty grid")
    return grid


def cmd_grid(cfg: dict) -> int:
    grid = parse_grid(cfg["grid"])
    base = hyperparams_for(cfg, cfg["method"])
    try:
        cells = grid_search(grid, cfg["setup"], cfg["method"], cfg["runs"], cfg["seed"], base, cfg["jobs"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    buf = io.StringIO()
    keys = sorted(grid)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rank", *keys, "val_mean", "val_stderr", "test_mean", "runs"])
    for i, c in enumerate(cells, 1):
        w.writerow([i, *(getattr(c.hyperparams, k) for k in keys), c.val_mean, c.val_stderr, c.test_mean, c.runs])
    if cfg.get("out"):
        Path(cfg["out"]).write_text(buf.getvalue())
    print(buf.getvalue(), end="")
    best = cells[0].hyperparams
    print("selected: " + ", ".join(f"{k}={getattr(best, k)}" for k in keys))
    return EXIT_OK


def run_theorem(n: int, trials: int, seed: int, alpha1: float | None = None) -> list[bm.TheoremReport]:
    if n < 1000:
        raise UsageError(f"--n must be >= 1000, got {n}")
    ss = np.random.SeedSequence(seed)
    reports = []
    for child in ss.spawn(trials):
        model_rng, data_seed = (np.random.default_rng(s) for s in child.spawn(2))
        model = bm.LinearBiasModel.random(model_rng)
        if alpha1 is not None:
            model = replace(model, alpha1=alpha1)
        reports.append(bm.verify_theorem(model, n, data_seed))
    return reports


def cmd_theorem(cfg: dict) -> int:
    reports = run_theorem(cfg["n"], cfg["trials"], cfg["seed"], cfg.get("alpha1"))
    text = bm.reports_to_csv(reports)
    if cfg.get("out"):
        Path(cfg["out"]).write_text(text)
    max_pc = max(abs(r.pc_fb_given_l) for r in reports)
    max_z = max(r.cov_z for r in reports)
    max_err = max(abs(r.cov_fb - r.expected_cov) for r in reports)
    print(f"models: {len(reports)}  n: {cfg['n']}")
    print(f"max |cov error|: {max_err:.3e}  (max {max_z:.2f} stderr)")
    print(f"max |pc(F, B | L)|: {max_pc:.3e}  degenerate in {sum(r.pc_degenerate for r in reports)} models")
    print(f"max |partial cov|: {max(abs(r.partial_cov) for r in reports):.3e}")
    return EXIT_OK


def cmd_report(cfg: dict) -> int:
    path = Path(cfg["results"])
    if not path.is_file():
        raise UsageError(f"results file not found: {path}")
    try:
        rows = reporting.read_results(path)
    except (reporting.SchemaError, reporting.EmptyResultsError) as exc:
        raise UsageError(str(exc)) from None
    md = reporting.full_report(rows)
    if cfg.get("out"):
        Path(cfg["out"]).write_text(md)
    print(md, end="")
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen, "train": cmd_train, "ablation": cmd_ablation, "experiment": cmd_experiment,
    "grid": cmd_grid, "theorem": cmd_theorem, "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
