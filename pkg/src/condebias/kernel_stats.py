"""Kernel Gram matrices and (conditional) dependence estimators.

Every estimator accepts plain arrays and returns a float, or accepts a
:class:`~condebias.autodiff.Tensor` for the first argument and returns a
scalar Tensor that can be back-propagated (loss mode). Bandwidths are always
computed from the detached data of the current batch.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial.distance import pdist

from .autodiff import Tensor, matrix_solve

DENSITY_FLOOR = 1e-12
DEGENERATE_VAR = 1e-12


class DegenerateBatchError(ValueError):
    """All samples of a variable are identical, so no bandwidth exists."""


class StratumTooSmallError(ValueError):
    def __init__(self, label, size: int, minimum: int):
        super().__init__(f"label stratum {label!r} has {size} samples, need at least {minimum}")
        self.label = label
        self.size = size


def _as_2d(x) -> np.ndarray:
    a = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    return a.reshape(len(a), -1)


def _as_2d_tensor(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(x)
    return t.reshape(t.shape[0], -1)


def _out(value: Tensor, loss_mode: bool):
    return value if loss_mode else float(value.data)


# ---------------------------------------------------------------------------
# Gram matrices
# ---------------------------------------------------------------------------


def bandwidth_heuristic(X, squared: bool = False) -> float:
    """sigma^2 = mean pairwise Euclidean distance / 4 over unordered distinct pairs.

    With ``squared=True`` the mean *squared* distance is used instead.
    """
    X = _as_2d(X)
    if len(X) < 2:
        raise ValueError("bandwidth_heuristic needs at least two samples")
    d = pdist(X, "sqeuclidean" if squared else "euclidean")
    mean = float(d.mean())
    if mean <= 0.0:
        raise DegenerateBatchError("degenerate batch: all points identical")
    return mean / 4.0


def _sqdist(X: Tensor) -> Tensor:
    m, d = X.shape
    diff = X.reshape(m, 1, d) - X.reshape(1, m, d)
    return (diff * diff).sum(axis=2)


def rbf_gram(X, sigma2: float):
    """K[i, j] = exp(-|x_i - x_j|^2 / (2 sigma2))."""
    if not sigma2 > 0:
        raise ValueError(f"bandwidth must be positive, got {sigma2}")
    loss_mode = isinstance(X, Tensor)
    K = (_sqdist(_as_2d_tensor(X)) * (-0.5 / sigma2)).exp()
    return K if loss_mode else np.array(K.data)


def _gram(X, allow_degenerate: bool, squared_bw: bool = False):
    """RBF Gram with heuristic bandwidth; a constant variable gives all-ones."""
    try:
        s2 = bandwidth_heuristic(X, squared=squared_bw)
    except DegenerateBatchError:
        if not allow_degenerate:
            raise
        m = len(_as_2d(X))
        return Tensor(np.ones((m, m))) if isinstance(X, Tensor) else np.ones((m, m))
    return rbf_gram(X, s2)


def centering_matrix(m: int) -> np.ndarray:
    return np.eye(m) - np.full((m, m), 1.0 / m)


def center_gram(K):
    """H K H with H = I - 11^T / m."""
    m = K.shape[0]
    if K.ndim != 2 or K.shape[1] != m:
        raise ValueError(f"center_gram needs a square matrix, got {K.shape}")
    H = centering_matrix(m)
    if isinstance(K, Tensor):
        return Tensor(H) @ K @ Tensor(H)
    return H @ K @ H


# ---------------------------------------------------------------------------
# HSIC
# ---------------------------------------------------------------------------


def hsic(X, Y, allow_degenerate: bool = False, squared_bw: bool = False):
    """Biased HSIC, ``tr(K_X H K_Y H) / (m - 1)^2``."""
    loss_mode = isinstance(X, Tensor) or isinstance(Y, Tensor)
    m = len(_as_2d(X))
    if m < 4:
        raise ValueError(f"hsic needs m >= 4, got {m}")
    Kx = _gram(X if isinstance(X, Tensor) else _as_2d(X), allow_degenerate, squared_bw)
    Ky = _gram(Y if isinstance(Y, Tensor) else _as_2d(Y), allow_degenerate, squared_bw)
    Kx = Kx if isinstance(Kx, Tensor) else Tensor(Kx)
    Ky = Ky if isinstance(Ky, Tensor) else Tensor(Ky)
    # tr(Kx H Ky H) = sum(Kx * (H Ky H)) since both are symmetric
    stat = (Kx * center_gram(Ky)).sum() * (1.0 / (m - 1) ** 2)
    return _out(stat, loss_mode)


def label_regularizer(L, squared_bw: bool = False) -> np.ndarray:
    """S_L = (I + G_L / m)^{-1}, via the Cholesky solve."""
    L = _as_2d(L)
    m = len(L)
    G = center_gram(_gram(L, True, squared_bw))
    A = np.eye(m) + G / m
    return matrix_solve(Tensor((A + A.T) / 2), Tensor(np.eye(m))).data


def cond_hsic(R, B, L, allow_degenerate: bool = True, squared_bw: bool = False):
    """Conditional dependence ``tr(G_R S_L G_B S_L)``.

    A constant L gives ``S_L = I`` and the statistic reduces to ``tr(G_R G_B)``.
    """
    loss_mode = isinstance(R, Tensor) or isinstance(B, Tensor)
    m = len(_as_2d(R))
    if m < 8:
        raise ValueError(f"cond_hsic needs m >= 8, got {m}")
    S = label_regularizer(L, squared_bw)
    Kr = _gram(R if isinstance(R, Tensor) else _as_2d(R), allow_degenerate, squared_bw)
    Kb = _gram(B if isinstance(B, Tensor) else _as_2d(B), allow_degenerate, squared_bw)
    Gr = center_gram(Kr if isinstance(Kr, Tensor) else Tensor(Kr))
    Gb = center_gram(Kb if isinstance(Kb, Tensor) else Tensor(Kb))
    St = Tensor(S)
    stat = (Gr @ St @ Gb @ St).trace()
    return _out(stat, loss_mode)


# ---------------------------------------------------------------------------
# KDE and mutual information
# ---------------------------------------------------------------------------


def kde_density(train_pts, queries, sigma2: float) -> np.ndarray:
    """Gaussian KDE, normalized by m and (2 pi sigma2)^(d/2)."""
    if not sigma2 > 0:
        raise ValueError(f"bandwidth must be positive, got {sigma2}")
    X = _as_2d(train_pts)
    Q = np.asarray(queries, dtype=np.float64).reshape(-1, X.shape[1])
    d2 = ((Q[:, None, :] - X[None, :, :]) ** 2).sum(-1)
    norm = (2 * np.pi * sigma2) ** (X.shape[1] / 2)
    return np.exp(-d2 / (2 * sigma2)).mean(axis=1) / norm


def _log_mean_kernel(K: Tensor) -> Tensor:
    return K.mean(axis=1).clip_min(DENSITY_FLOOR).log()


def _mi_tensor(R: Tensor, B: Tensor, squared_bw: bool = False) -> Tensor:
    """Plug-in MI: mean_i log p(r_i, b_i) / (p(r_i) p(b_i)).

    Product-kernel KDE with per-variable bandwidths. The Gaussian
    normalizing constants cancel between numerator and denominator, so the
    densities are handled as log kernel averages.
    """
    Kr = _gram(R, allow_degenerate=True, squared_bw=squared_bw)
    Kb = _gram(B, allow_degenerate=True, squared_bw=squared_bw)
    joint = _log_mean_kernel(Kr * Kb)
    return (joint - _log_mean_kernel(Kr) - _log_mean_kernel(Kb)).mean()


def mutual_information(R, B, min_samples: int = 8, squared_bw: bool = False):
    loss_mode = isinstance(R, Tensor) or isinstance(B, Tensor)
    m = len(_as_2d(R))
    if m < min_samples:
        raise ValueError(f"mutual_information needs m >= {min_samples}, got {m}")
    for name, v in (("R", R), ("B", B)):
        if np.ptp(_as_2d(v), axis=0).max() == 0:
            raise DegenerateBatchError(f"degenerate batch: {name} is constant")
    mi = _mi_tensor(_as_2d_tensor(R), _as_2d_tensor(B), squared_bw)
    return _out(mi, loss_mode)


def label_strata(L) -> list[tuple[object, np.ndarray]]:
    """Group sample indices by label value (rows of one-hot L count as values)."""
    L = _as_2d(L)
    keys, inverse = np.unique(L, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    out = []
    for k, key in enumerate(keys):
        label = key.item() if key.size == 1 else tuple(key.tolist())
        out.append((label, np.flatnonzero(inverse == k)))
    return out


def conditional_mutual_information(R, B, L, min_stratum: int = 4, squared_bw: bool = False):
    """sum_l p(l) MI(R; B | L = l) with stratum-local KDE bandwidths."""
    loss_mode = isinstance(R, Tensor) or isinstance(B, Tensor)
    Rt, Bt = _as_2d_tensor(R), _as_2d_tensor(B)
    m = Rt.shape[0]
    strata = label_strata(L)
    for label, idx in strata:
        if len(idx) < min_stratum:
            raise StratumTooSmallError(label, len(idx), min_stratum)
    total = None
    for _, idx in strata:
        term = _mi_tensor(Rt[idx], Bt[idx], squared_bw) * (len(idx) / m)
        total = term if total is None else total + term
    return _out(total, loss_mode)


# ---------------------------------------------------------------------------
# (partial) correlation
# ---------------------------------------------------------------------------


def _corr_tensor(x: Tensor, y: Tensor) -> Tensor:
    xc = x - x.mean()
    yc = y - y.mean()
    return (xc * yc).sum() / ((xc * xc).sum() * (yc * yc).sum()).sqrt()


def _vec(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(x)
    return t.reshape(-1)


def correlation(x, y):
    """Pearson correlation."""
    loss_mode = isinstance(x, Tensor) or isinstance(y, Tensor)
    xt, yt = _vec(x), _vec(y)
    if xt.shape != yt.shape:
        raise ValueError(f"correlation: length mismatch {xt.shape} vs {yt.shape}")
    for name, t in (("x", xt), ("y", yt)):
        if np.var(t.data) < DEGENERATE_VAR:
            raise ValueError(f"correlation: {name} has zero variance")
    return _out(_corr_tensor(xt, yt), loss_mode)


def residual_projector(z) -> np.ndarray:
    """I - P where P projects onto span([1, z]) (least-squares residual maker)."""
    Z = _as_2d(z)
    D = np.column_stack([np.ones(len(Z)), Z])
    return np.eye(len(Z)) - D @ np.linalg.pinv(D)


def partial_correlation(x, y, z, with_flag: bool = False):
    """Correlation of the residuals of x and y after regressing each on [1, z].

    If either residual variance is below 1e-12 the conditioning is degenerate
    (e.g. x is a function of z); the value is then 0 and the flag is set.
    """
    loss_mode = isinstance(x, Tensor) or isinstance(y, Tensor)
    xt, yt = _vec(x), _vec(y)
    Z = _as_2d(z)
    D = np.column_stack([np.ones(len(Z)), Z])
    # (I - D D^+) v without forming the m x m projector
    Dt, Dp = Tensor(D), Tensor(np.linalg.pinv(D))

    def resid(v):
        col = v.reshape(-1, 1)
        return (col - Dt @ (Dp @ col)).reshape(-1)

    rx, ry = resid(xt), resid(yt)
    degenerate = np.var(rx.data) < DEGENERATE_VAR or np.var(ry.data) < DEGENERATE_VAR
    if degenerate:
        value = Tensor(0.0)
    else:
        value = _corr_tensor(rx, ry)
    value = _out(value, loss_mode)
    return (value, degenerate) if with_flag else value


def partial_correlation_closed_form(rho_xy: float, rho_xz: float, rho_yz: float) -> float:
    return (rho_xy - rho_xz * rho_yz) / np.sqrt((1 - rho_xz**2) * (1 - rho_yz**2))
