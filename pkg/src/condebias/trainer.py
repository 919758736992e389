"""Training loop, evaluation, multi-seed experiments and grid search."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import fairness_tests as ft
from .autodiff import AdamState, adam_step, softmax_cross_entropy
from .debias_losses import DebiasCriterion, Kind, adversary_step, debias_loss
from .network import TAPS, ConvNet, ModelConfig
from .synth_data import Split, SplitDataset, generate_dataset, make_batches, normalize_setup

log = logging.getLogger(__name__)

BASELINE = "baseline"
METHODS = (BASELINE,) + tuple(k.value for k in Kind)


@dataclass(frozen=True)
class Hyperparams:
    lr_c: float = 3e-5
    lr_b: float = 3e-5
    epochs: int = 30
    beta: float = 0.0
    balanced: bool = False
    batch_size: int = 64
    tap: str | None = None  # None: the criterion's default
    squared_bw: bool = False  # kernel bandwidth from mean squared instead of mean distance

    def __post_init__(self):
        for name in ("lr_c", "lr_b", "epochs", "batch_size"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.beta < 0:
            raise ValueError(f"beta must be non-negative, got {self.beta}")
        if self.tap is not None and self.tap not in TAPS:
            raise ValueError(f"unknown tap {self.tap!r}")

    def resolved_tap(self, method: str) -> str:
        if self.tap is not None:
            return self.tap
        return "softmax" if method == BASELINE else Kind(method).default_tap


def _hp(lr_c, epochs, beta=0.0, lr_b=None, balanced=False) -> Hyperparams:
    return Hyperparams(lr_c=lr_c, lr_b=lr_b if lr_b is not None else lr_c, epochs=epochs, beta=beta, balanced=balanced)


# Grid-searched settings per setup and method.
PRESETS: dict[str, dict[str, Hyperparams]] = {
    "I": {
        BASELINE: _hp(3e-5, 30),
        "cond_mi": _hp(1e-5, 100, 0.0625),
        "cond_hsic": _hp(3e-5, 30, 0.0625, balanced=True),
        "cond_mcc": _hp(3e-5, 30, 0.0625),
        "predictability": _hp(3e-4, 1000, 1.0),
        "uncond_hsic": _hp(3e-5, 30, 0.003, balanced=True),
        "uncond_mi": _hp(1e-5, 100, 0.0625),
        "mcc_only": _hp(3e-4, 1000, 1.0),
        "pc_only": _hp(3e-5, 30, 0.0625),
    },
    "II": {
        BASELINE: _hp(3e-5, 100),
        "cond_mi": _hp(1e-5, 100, 0.05),
        "cond_hsic": _hp(3e-5, 30, 0.0625, balanced=True),
        "cond_mcc": _hp(3e-5, 30, 0.0625),
        "predictability": _hp(3e-5, 100, 1.0),
        "uncond_hsic": _hp(3e-5, 30, 0.0625, balanced=True),
        "uncond_mi": _hp(1e-5, 100, 0.05),
        "mcc_only": _hp(3e-5, 30, 0.0625),
        "pc_only": _hp(3e-5, 30, 0.0625),
    },
}


def preset(setup, method: str) -> Hyperparams:
    setup = normalize_setup(setup)
    try:
        return PRESETS[setup][method]
    except KeyError:
        raise ValueError(f"no preset for method {method!r}; known: {sorted(PRESETS[setup])}") from None


class RunAborted(RuntimeError):
    def __init__(self, msg: str, **diagnostics):
        super().__init__(msg + " " + ", ".join(f"{k}={v}" for k, v in diagnostics.items()))
        self.diagnostics = diagnostics


@dataclass
class EvalResult:
    accuracy: float
    representations: np.ndarray
    predictions: np.ndarray


@dataclass
class RunResult:
    seed: int
    method: str
    setup: str
    hyperparams: Hyperparams
    tap: str
    val_accuracy: float = math.nan
    test_accuracy: float = math.nan
    train_accuracy: float = math.nan
    loss_history: list[tuple[float, float]] = field(default_factory=list)  # per epoch (cl, db)
    fairness: ft.FairnessReport | None = None
    status: str = "ok"

    CSV_FIELDS = (
        "setup", "method", "seed", "lr_c", "lr_b", "epochs", "beta", "balanced", "tap",
        "val_acc", "test_acc", "dp_pass", "eo_pass", "eo_pc_pass", "dp_p", "eo_p", "eo_pc_p", "status",
    )

    def csv_row(self) -> dict:
        hp = self.hyperparams
        row = {
            "setup": self.setup, "method": self.method, "seed": self.seed,
            "lr_c": hp.lr_c, "lr_b": hp.lr_b, "epochs": hp.epochs, "beta": hp.beta,
            "balanced": int(hp.balanced), "tap": self.tap,
            "val_acc": self.val_accuracy, "test_acc": self.test_accuracy,
            "dp_pass": "", "eo_pass": "", "eo_pc_pass": "", "dp_p": "", "eo_p": "", "eo_pc_p": "",
            "status": self.status,
        }
        if self.fairness is not None:
            row.update(self.fairness.as_row())
        return row


def evaluate(model: ConvNet, split: Split, tap: str = "softmax", chunk: int = 512) -> EvalResult:
    """Accuracy of argmax(softmax) plus the tapped representation for every example."""
    if len(split) == 0:
        raise ValueError("evaluate: empty split")
    reps, preds = [], []
    x = split.inputs
    for start in range(0, len(split), chunk):
        out = model.forward(x[start : start + chunk])
        reps.append(np.array(out[tap].data))
        preds.append(out["softmax"].data.argmax(axis=1))
    preds = np.concatenate(preds)
    return EvalResult(float(np.mean(preds == split.labels)), np.concatenate(reps), preds)


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("init", "batches", "adversary", "fairness")
    seqs = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, seqs)}


def train(
    model_cfg: ModelConfig,
    hp: Hyperparams,
    method: str,
    splits: SplitDataset,
    seed: int,
    fairness: bool = True,
    n_perm: int = ft.DEFAULT_N_PERM,
    alpha: float = ft.DEFAULT_ALPHA,
) -> tuple[ConvNet, RunResult]:
    """Train one network with ``L_cl + beta * L_db`` and evaluate it.

    Per mini-batch, adversarial criteria take one adversary ascent step first,
    then the classifier takes one Adam step. The test split is read exactly
    once, after training.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    rngs = _streams(seed)
    model = ConvNet(model_cfg, rngs["init"])
    opt = AdamState.for_params(model.tensors)
    tap = hp.resolved_tap(method)
    criterion = None
    if method != BASELINE and hp.beta > 0:
        r_dim = model_cfg.feature_dim if tap == "conv_features" else model_cfg.classes
        criterion = DebiasCriterion.build(method, hp.beta, r_dim, 1, tap, rngs["adversary"], hp.squared_bw)
    result = RunResult(seed, method, splits.setup, hp, tap)
    train_split = splits.train
    x_all, y_all, b_all = train_split.inputs, train_split.labels, train_split.bias
    if splits.test_reads:
        raise RuntimeError("test split was read before training finished")

    for epoch in range(hp.epochs):
        cl_sum = db_sum = 0.0
        batches = make_batches(y_all, hp.batch_size, hp.balanced, rngs["batches"])
        for bi, idx in enumerate(batches):
            x, y, b = x_all[idx], y_all[idx], b_all[idx]
            out = model.forward(x)
            loss_cl = softmax_cross_entropy(out["logits"], y)
            loss = loss_cl
            db_val = 0.0
            if criterion is not None:
                R = out[criterion.tap]
                if criterion.adversarial:
                    adversary_step(criterion, R.detach(), b, y, hp.lr_b)
                loss_db = debias_loss(criterion, R, b, y)
                db_val = float(loss_db.data)
                loss = loss_cl + hp.beta * loss_db
            if not np.isfinite(loss.data):
                raise RunAborted(
                    "non-finite loss", epoch=epoch, batch=bi, loss_cl=float(loss_cl.data), loss_db=db_val
                )
            loss.backward()
            model.replace(adam_step(model.tensors, model.grads(), opt, hp.lr_c, names=model.names))
            cl_sum += float(loss_cl.data)
            db_sum += db_val
        n = max(len(batches), 1)
        result.loss_history.append((cl_sum / n, db_sum / n))

    result.train_accuracy = evaluate(model, train_split, tap).accuracy
    result.val_accuracy = evaluate(model, splits.val, tap).accuracy
    test = splits.test
    ev = evaluate(model, test, tap)
    result.test_accuracy = ev.accuracy
    if fairness:
        result.fairness = ft.fairness_report(
            ev.representations, test.bias, test.labels, tap, alpha, n_perm, rngs["fairness"]
        )
    return model, result


def fairness_report_for_model(model: ConvNet, split: Split, tap: str = "softmax", alpha=ft.DEFAULT_ALPHA,
                              n_perm=ft.DEFAULT_N_PERM, rng=None) -> ft.FairnessReport:
    ev = evaluate(model, split, tap)
    return ft.fairness_report(ev.representations, split.bias, split.labels, tap, alpha, n_perm, rng)


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


def run_one(setup, method: str, seed: int, hp: Hyperparams, fairness: bool = True,
            dataset_kw: dict | None = None, n_perm: int = ft.DEFAULT_N_PERM) -> RunResult:
    """Generate the seed's dataset and train; failures become a row with status != ok."""
    setup = normalize_setup(setup)
    try:
        ds = generate_dataset(setup, seed=seed, **(dataset_kw or {}))
        _, res = train(ModelConfig(), hp, method, ds, seed, fairness=fairness, n_perm=n_perm)
        return res
    except Exception as exc:  # recorded, never dropped
        log.error("run failed: setup=%s method=%s seed=%s: %s", setup, method, seed, exc)
        return RunResult(seed, method, setup, hp, hp.resolved_tap(method), status=f"failed: {exc}")


def _parallel(jobs, n_jobs: int):
    if n_jobs == 1:
        return [fn(*args) for fn, args in jobs]
    from joblib import Parallel, delayed

    return Parallel(n_jobs=n_jobs)(delayed(fn)(*args) for fn, args in jobs)


def run_experiment(setup, methods, seeds, presets: dict[str, Hyperparams] | None = None,
                   fairness: bool = True, n_jobs: int = 1, dataset_kw=None, n_perm=ft.DEFAULT_N_PERM) -> list[RunResult]:
    """Independent seeded runs of every method; ``seeds`` is a count or an explicit list."""
    setup = normalize_setup(setup)
    seeds = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    jobs = []
    for method in methods:
        hp = (presets or {}).get(method) or preset(setup, method)
        for s in seeds:
            jobs.append((run_one, (setup, method, s, hp, fairness, dataset_kw, n_perm)))
    return _parallel(jobs, n_jobs)


@dataclass(frozen=True)
class Summary:
    method: str
    setup: str
    n: int
    mean: float
    stderr: float
    failed: int


def mean_stderr(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    if len(v) == 0:
        return math.nan, math.nan
    if len(v) == 1:
        return float(v[0]), math.nan
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(len(v)))


def summarize(results: list[RunResult], key: str = "test_accuracy") -> list[Summary]:
    groups: dict[tuple[str, str], list[RunResult]] = {}
    for r in results:
        groups.setdefault((r.setup, r.method), []).append(r)
    out = []
    for (setup, method), rs in groups.items():
        ok = [getattr(r, key) for r in rs if r.status == "ok"]
        mean, se = mean_stderr(ok)
        out.append(Summary(method, setup, len(ok), mean, se, len(rs) - len(ok)))
    return out


@dataclass(frozen=True)
class GridCell:
    hyperparams: Hyperparams
    val_mean: float
    val_stderr: float
    test_mean: float
    runs: int


def grid_search(grid: dict[str, list], setup, method: str, k_runs: int = 10, master_seed: int = 0,
                base: Hyperparams | None = None, n_jobs: int = 1, dataset_kw=None) -> list[GridCell]:
    """Train every grid cell ``k_runs`` times; rank by mean validation accuracy.

    Ties are broken by lower beta, then lower lr_c. Returns the ranked cells;
    the first one holds the selected hyperparameters.
    """
    if not grid:
        raise ValueError("grid must not be empty")
    setup = normalize_setup(setup)
    base = base or preset(setup, method)
    keys = sorted(grid)
    cells = [replace(base, **dict(zip(keys, combo))) for combo in itertools.product(*(grid[k] for k in keys))]
    seeds = [int(s) for s in np.random.SeedSequence(master_seed).generate_state(k_runs)]
    jobs = [(run_one, (setup, method, s, hp, False, dataset_kw)) for hp in cells for s in seeds]
    results = _parallel(jobs, n_jobs)
    ranked = []
    for ci, hp in enumerate(cells):
        rs = [r for r in results[ci * k_runs : (ci + 1) * k_runs] if r.status == "ok"]
        vm, vs = mean_stderr([r.val_accuracy for r in rs])
        tm, _ = mean_stderr([r.test_accuracy for r in rs])
        ranked.append(GridCell(hp, vm, vs, tm, len(rs)))
    ranked.sort(key=lambda c: (-(c.val_mean if not math.isnan(c.val_mean) else -1), c.hyperparams.beta, c.hyperparams.lr_c))
    return ranked


def hyperparams_dict(hp: Hyperparams) -> dict:
    return asdict(hp)
