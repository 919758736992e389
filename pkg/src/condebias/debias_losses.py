"""Debiasing criteria usable as differentiable losses.

Four criteria are closed-form estimators (unconditional/conditional KDE mutual
information and HSIC). The other four are adversarial: scalar networks ``f``
on the representation (and ``g`` on the bias variable) are trained to expose a
(partial) correlation, and the classifier minimizes its square.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernel_stats as ks
from .autodiff import AdamState, Tensor, adam_step
from .network import TAPS, AdversaryMLP

log = logging.getLogger(__name__)


class Kind(str, enum.Enum):
    UNCOND_MI = "uncond_mi"
    COND_MI = "cond_mi"
    UNCOND_HSIC = "uncond_hsic"
    COND_HSIC = "cond_hsic"
    PREDICTABILITY = "predictability"
    MCC_ONLY = "mcc_only"
    PC_ONLY = "pc_only"
    COND_MCC = "cond_mcc"

    @property
    def needs_f(self) -> bool:
        return self in (Kind.PREDICTABILITY, Kind.MCC_ONLY, Kind.PC_ONLY, Kind.COND_MCC)

    @property
    def needs_g(self) -> bool:
        return self in (Kind.MCC_ONLY, Kind.COND_MCC)

    @property
    def conditional(self) -> bool:
        return self in (Kind.COND_MI, Kind.COND_HSIC, Kind.PC_ONLY, Kind.COND_MCC)

    @property
    def default_tap(self) -> str:
        return "conv_features" if self is Kind.PREDICTABILITY else "softmax"


class CriterionConfigError(ValueError):
    pass


@dataclass
class DebiasCriterion:
    kind: Kind
    beta: float = 0.0625
    tap: str | None = None
    adversary_f: AdversaryMLP | None = None
    adversary_g: AdversaryMLP | None = None
    squared_bw: bool = False  # kernel bandwidth from mean squared distance
    _opt_f: AdamState | None = field(default=None, repr=False)
    _opt_g: AdamState | None = field(default=None, repr=False)

    def __post_init__(self):
        self.kind = Kind(self.kind)
        if self.tap is None:
            self.tap = self.kind.default_tap
        if self.tap not in TAPS:
            raise CriterionConfigError(f"unknown tap {self.tap!r}; expected one of {TAPS}")
        if self.beta < 0:
            raise CriterionConfigError(f"beta must be non-negative, got {self.beta}")

    @classmethod
    def build(cls, kind, beta: float, r_dim: int, b_dim: int = 1, tap: str | None = None, rng=None,
              squared_bw: bool = False):
        """Create a criterion with freshly initialized adversaries where the kind needs them."""
        kind = Kind(kind)
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        f = AdversaryMLP(r_dim, rng) if kind.needs_f else None
        g = AdversaryMLP(b_dim, rng) if kind.needs_g else None
        return cls(kind, beta, tap, f, g, squared_bw)

    def check(self) -> None:
        if self.kind.needs_f and self.adversary_f is None:
            raise CriterionConfigError(f"{self.kind.value} needs adversary f")
        if self.kind.needs_g and self.adversary_g is None:
            raise CriterionConfigError(f"{self.kind.value} needs adversary g")

    @property
    def adversarial(self) -> bool:
        return self.kind.needs_f


def tap_representation(model, images, tap: str) -> Tensor:
    if tap not in TAPS:
        raise ValueError(f"unknown tap {tap!r}")
    return model.forward(images)[tap]


def _corr_or_zero(x: Tensor, y: Tensor) -> Tensor:
    if np.var(x.data) < ks.DEGENERATE_VAR or np.var(y.data) < ks.DEGENERATE_VAR:
        return Tensor(0.0)
    return ks.correlation(x, y)


def dependence(criterion: DebiasCriterion, R, B, L) -> Tensor:
    """The adversarial objective: (partial) correlation of f(R) with B or g(B)."""
    kind = criterion.kind
    criterion.check()
    fr = criterion.adversary_f.forward(R)
    gb = criterion.adversary_g.forward(_col(B)) if kind.needs_g else Tensor(np.asarray(B, dtype=float).reshape(-1))
    if kind.conditional:
        return ks.partial_correlation(fr, gb, _onehot_or_vec(L))
    return _corr_or_zero(fr, gb)


def _col(B) -> np.ndarray:
    b = np.asarray(B.data if isinstance(B, Tensor) else B, dtype=float)
    return b.reshape(len(b), -1)


def _onehot_or_vec(L) -> np.ndarray:
    return np.asarray(L, dtype=float).reshape(len(L), -1)


def debias_loss(criterion: DebiasCriterion, R: Tensor, B, L) -> Tensor:
    """Dependence between representation R and bias B (given L for conditional kinds).

    The caller adds ``beta *`` this to the classification loss.
    """
    kind = criterion.kind
    m = R.shape[0]
    if m < 8:
        raise ValueError(f"debias_loss needs a batch of at least 8, got {m}")
    B = _col(B)
    sq = criterion.squared_bw
    if kind is Kind.UNCOND_MI:
        return ks.mutual_information(R, B, squared_bw=sq)
    if kind is Kind.COND_MI:
        return ks.conditional_mutual_information(R, B, L, squared_bw=sq)
    if kind is Kind.UNCOND_HSIC:
        return ks.hsic(R, B, allow_degenerate=True, squared_bw=sq)
    if kind is Kind.COND_HSIC:
        for label, idx in ks.label_strata(L):
            if len(idx) < 4:
                raise ks.StratumTooSmallError(label, len(idx), 4)
        return ks.cond_hsic(R, B, L, squared_bw=sq)
    if kind.conditional:
        for label, idx in ks.label_strata(L):
            if len(idx) < 4:
                raise ks.StratumTooSmallError(label, len(idx), 4)
    dep = dependence(criterion, R, B, L)
    return dep * dep


def adversary_step(criterion: DebiasCriterion, R, B, L, lr_b: float) -> float | None:
    """One Adam ascent step of f (and g) on the squared dependence; R is detached.

    Returns the objective value before the step, or None for non-adversarial kinds.
    """
    if not criterion.adversarial:
        log.warning("adversary_step called for non-adversarial criterion %s; ignored", criterion.kind.value)
        return None
    criterion.check()
    R = Tensor(R.data if isinstance(R, Tensor) else R)
    dep = dependence(criterion, R, B, L)
    obj = dep * dep
    if not obj.requires_grad:
        return float(obj.data)
    obj.backward()
    f = criterion.adversary_f
    if criterion._opt_f is None:
        criterion._opt_f = AdamState.for_params(f.tensors)
    f.replace(adam_step(f.tensors, f.grads(), criterion._opt_f, lr_b, names=f.names, maximize=True))
    if criterion.kind.needs_g:
        g = criterion.adversary_g
        if criterion._opt_g is None:
            criterion._opt_g = AdamState.for_params(g.tensors)
        g.replace(adam_step(g.tensors, g.grads(), criterion._opt_g, lr_b, names=g.names, maximize=True))
    return float(obj.data)
