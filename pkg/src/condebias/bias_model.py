"""Linear data-generating process and a Monte-Carlo check of the optimal-classifier claim.

    B = alpha1 * S + alpha2 * B_star
    L = zeta1 * S
    I = Psi @ (S, B)

The optimal classifier recovers S with the left pseudo-inverse of Psi and
scales it by zeta1. Its output has covariance zeta1 * alpha1 * Var(S) with B,
but zero partial covariance with B once L is regressed out.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import kernel_stats as ks


@dataclass(frozen=True)
class LinearBiasModel:
    alpha1: float
    alpha2: float
    zeta1: float
    psi: np.ndarray  # (d, 2): columns act on S and B
    signal_var: float = 1.0

    def validate(self) -> None:
        psi = np.asarray(self.psi, dtype=float)
        if psi.ndim != 2 or psi.shape[1] != 2:
            raise ValueError(f"psi must be d x 2, got {psi.shape}")
        if np.linalg.matrix_rank(psi) < 2:
            raise ValueError("psi must have full column rank so the signal is recoverable")
        if self.zeta1 == 0:
            raise ValueError("zeta1 must be non-zero")
        if self.alpha2 == 0:
            raise ValueError("alpha2 must be non-zero when sampling B*")
        if not self.signal_var > 0:
            raise ValueError("signal_var must be positive")

    @classmethod
    def random(cls, rng, d: int = 8, low: float = -2.0, high: float = 2.0) -> "LinearBiasModel":
        """Coefficients uniform on [low, high] excluding a small band around zero."""
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)

        def coef():
            while True:
                c = rng.uniform(low, high)
                if abs(c) > 0.05:
                    return c

        psi = rng.normal(size=(d, 2))
        return cls(coef(), coef(), coef(), psi, 1.0)


@dataclass
class WorldSample:
    s: np.ndarray
    b_star: np.ndarray
    b: np.ndarray
    l: np.ndarray
    i: np.ndarray  # (n, d)


def sample_linear_world(model: LinearBiasModel, n: int, seed=None) -> WorldSample:
    """S ~ N(0, signal_var) and B* ~ N(0, 1), independent; the rest by the model equations."""
    if n < 2:
        raise ValueError(f"n must be >= 2, got {n}")
    model.validate()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    s = rng.normal(0.0, np.sqrt(model.signal_var), n)
    b_star = rng.normal(0.0, 1.0, n)
    b = model.alpha1 * s + model.alpha2 * b_star
    l = model.zeta1 * s
    i = np.column_stack([s, b]) @ np.asarray(model.psi, dtype=float).T
    return WorldSample(s, b_star, b, l, i)


def optimal_classifier(model: LinearBiasModel) -> np.ndarray:
    """Weight vector w with F*(i) = i @ w = zeta1 * S.

    Row 0 of pinv(Psi) reads the S coordinate back out of the input.
    """
    model.validate()
    return model.zeta1 * np.linalg.pinv(np.asarray(model.psi, dtype=float))[0]


def _cov(x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean((x - x.mean()) * (y - y.mean())))


@dataclass(frozen=True)
class TheoremReport:
    alpha1: float
    alpha2: float
    zeta1: float
    signal_var: float
    n: int
    cov_fb: float
    expected_cov: float
    cov_stderr: float
    pc_fb_given_l: float
    pc_degenerate: bool
    partial_cov: float  # <F - F_hat(L), B - B_hat(L)>
    s1: float
    s2: float
    s3: float
    s4: float

    @property
    def cov_z(self) -> float:
        return abs(self.cov_fb - self.expected_cov) / self.cov_stderr

    CSV_FIELDS = (
        "alpha1", "alpha2", "zeta1", "signal_var", "n", "cov_fb", "expected_cov",
        "cov_stderr", "pc_fb_given_l", "pc_degenerate", "partial_cov",
    )

    def csv_row(self) -> dict:
        return {k: getattr(self, k) for k in self.CSV_FIELDS}


def verify_theorem(model: LinearBiasModel, n: int, seed=None) -> TheoremReport:
    if n < 1000:
        raise ValueError(f"verify_theorem needs n >= 1000, got {n}")
    w = sample_linear_world(model, n, seed)
    f = w.i @ optimal_classifier(model)
    fc, bc, lc = f - f.mean(), w.b - w.b.mean(), w.l - w.l.mean()
    cov_fb = _cov(f, w.b)
    stderr = float(np.std(fc * bc, ddof=1) / np.sqrt(n))
    pc, degenerate = ks.partial_correlation(f, w.b, w.l, with_flag=True)
    # expansion of <F - <F,L>/<L,L> L, B - <B,L>/<L,L> L> into four inner products
    ll = _cov(w.l, w.l)
    fl, bl = _cov(f, w.l), _cov(w.b, w.l)
    s1 = cov_fb
    s2 = _cov(f, bl / ll * w.l)
    s3 = _cov(fl / ll * w.l, w.b)
    s4 = _cov(fl / ll * w.l, bl / ll * w.l)
    partial_cov = float(np.mean((fc - fl / ll * lc) * (bc - bl / ll * lc)))
    return TheoremReport(
        model.alpha1, model.alpha2, model.zeta1, model.signal_var, n,
        cov_fb, model.zeta1 * model.alpha1 * model.signal_var, stderr,
        float(pc), bool(degenerate), partial_cov, s1, s2, s3, s4,
    )


def reports_to_csv(reports: list[TheoremReport]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=TheoremReport.CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.csv_row().items()})
    return buf.getvalue()
