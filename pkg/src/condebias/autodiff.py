"""Minimal define-by-run reverse-mode autodiff on float64 numpy arrays.

Only the operations needed by the small CNN, the adversary MLPs and the
kernel-matrix losses are provided. A graph is rebuilt on every forward pass;
calling :meth:`Tensor.backward` on a scalar walks it in reverse topological
order.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "AdamState",
    "adam_step",
    "forward_dense",
    "forward_conv2d",
    "softmax",
    "log_softmax",
    "softmax_cross_entropy",
    "matrix_solve",
    "save_checkpoint",
    "load_checkpoint",
]


class Tensor:
    """An immutable array node in the gradient graph."""

    __array_priority__ = 100

    def __init__(
        self,
        data,
        parents: Sequence["Tensor"] = (),
        backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        requires_grad: bool = False,
        name: str | None = None,
    ):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.parents = tuple(parents)
        self._backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.grad: np.ndarray | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- graph traversal --------------------------------------------------
    def _topo(self) -> list["Tensor"]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return order

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad.

        Gradients are recomputed from scratch on every call; intermediate
        nodes are reset so repeated calls give identical results.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = self._topo()
        for node in order:
            if node._backward_fn is None:
                node.grad = None
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward_fn is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node.parents, node._backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = _as_tensor(other)
        return Tensor(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape)),
        )

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other) -> "Tensor":
        return self + (-_as_tensor(other))

    def __rsub__(self, other) -> "Tensor":
        return _as_tensor(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = _as_tensor(other)
        a, b = self.data, other.data
        return Tensor(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = _as_tensor(other)
        a, b = self.data, other.data
        return Tensor(
            a / b,
            (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)),
        )

    def __rtruediv__(self, other) -> "Tensor":
        return _as_tensor(other) / self

    def __pow__(self, p: float) -> "Tensor":
        a = self.data
        return Tensor(a**p, (self,), lambda g: (g * p * a ** (p - 1),))

    def __matmul__(self, other) -> "Tensor":
        other = _as_tensor(other)
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
        return Tensor(a @ b, (self, other), lambda g: (g @ b.T, a.T @ g))

    def __rmatmul__(self, other) -> "Tensor":
        return _as_tensor(other) @ self

    def __getitem__(self, idx) -> "Tensor":
        a = self.data

        def back(g):
            out = np.zeros_like(a)
            np.add.at(out, idx, g)
            return (out,)

        return Tensor(a[idx], (self,), back)

    # -- unary / reductions -----------------------------------------------
    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor(out, (self,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        a = self.data
        return Tensor(np.log(a), (self,), lambda g: (g / a,))

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return Tensor(out, (self,), lambda g: (g / (2.0 * out),))

    def clip_min(self, floor: float) -> "Tensor":
        mask = self.data > floor
        return Tensor(np.where(mask, self.data, floor), (self,), lambda g: (g * mask,))

    def relu(self) -> "Tensor":
        mask = self.data > 0
        return Tensor(self.data * mask, (self,), lambda g: (g * mask,))

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self.data

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return Tensor(a.sum(axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else np.prod([self.shape[i] for i in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes) -> "Tensor":
        axes = axes or tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        return Tensor(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    def trace(self) -> "Tensor":
        a = self.data
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"trace needs a square matrix, got {a.shape}")
        eye = np.eye(a.shape[0])
        return Tensor(np.trace(a), (self,), lambda g: (g * eye,))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# layers and losses
# ---------------------------------------------------------------------------


def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction."""
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return Tensor(s, (logits,), back)


def log_softmax(logits: Tensor) -> Tensor:
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def back(g):
        return (g - s * g.sum(axis=1, keepdims=True),)

    return Tensor(out, (logits,), back)


_ACTIVATIONS = {
    "identity": lambda t: t,
    "relu": Tensor.relu,
    "softmax": softmax,
}


def forward_dense(weights: Tensor, bias: Tensor, x: Tensor, activation: str = "identity") -> Tensor:
    """``activation(x @ W.T + b)`` with ``W`` of shape (out, in)."""
    if weights.ndim != 2 or x.ndim != 2 or weights.shape[1] != x.shape[1]:
        raise ValueError(f"dense shape mismatch: weights {weights.shape} vs input {x.shape}")
    if bias.shape != (weights.shape[0],):
        raise ValueError(f"dense shape mismatch: bias {bias.shape} vs weights {weights.shape}")
    try:
        act = _ACTIVATIONS[activation]
    except KeyError:
        raise ValueError(f"unknown activation {activation!r}") from None
    return act(x @ weights.T + bias)


def forward_conv2d(kernels: Tensor, bias: Tensor, x: Tensor) -> Tensor:
    """Valid 2-D cross-correlation, stride 1.

    kernels: (out_c, in_c, kh, kw); x: (batch, in_c, H, W).
    """
    K, xd = kernels.data, x.data
    if K.ndim != 4 or xd.ndim != 4 or K.shape[1] != xd.shape[1]:
        raise ValueError(f"conv2d shape mismatch: kernels {K.shape} vs input {xd.shape}")
    kh, kw = K.shape[2:]
    H, W = xd.shape[2:]
    if H < kh or W < kw:
        raise ValueError(f"conv2d input {xd.shape} smaller than kernel {K.shape}")
    if bias.shape != (K.shape[0],):
        raise ValueError(f"conv2d shape mismatch: bias {bias.shape} vs kernels {K.shape}")
    oh, ow = H - kh + 1, W - kw + 1
    # (batch, in_c, oh, ow, kh, kw)
    patches = np.lib.stride_tricks.sliding_window_view(xd, (kh, kw), axis=(2, 3))
    out = np.einsum("bchwij,ocij->bohw", patches, K, optimize=True) + bias.data[None, :, None, None]

    def back(g):
        gk = np.einsum("bohw,bchwij->ocij", g, patches, optimize=True)
        gb = g.sum(axis=(0, 2, 3))
        gx = np.zeros_like(xd)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i : i + oh, j : j + ow] += np.einsum("bohw,oc->bchw", g, K[:, :, i, j], optimize=True)
        return gk, gb, gx

    return Tensor(out, (kernels, bias, x), back)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    logp = log_softmax(logits)
    return -logp[np.arange(n), labels.astype(int)].mean()


def matrix_solve(A: Tensor, B: Tensor) -> Tensor:
    """Solve ``A X = B`` for symmetric positive definite ``A`` via Cholesky.

    Backward: with ``G = dL/dX`` and ``Z = A^{-T} G``, ``dL/dB = Z`` and
    ``dL/dA = -Z X^T``.
    """
    import scipy.linalg

    a, b = A.data, B.data
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise FloatingPointError("matrix_solve: non-finite input")
    vec = b.ndim == 1
    b2 = b[:, None] if vec else b
    try:
        cf = scipy.linalg.cho_factor(a)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"matrix_solve: factorization failed ({exc})") from exc
    x = scipy.linalg.cho_solve(cf, b2)

    def back(g):
        g2 = g[:, None] if vec else g
        z = scipy.linalg.cho_solve(cf, g2)  # A symmetric
        ga = -z @ x.T
        gb = z[:, 0] if vec else z
        return ga, gb

    return Tensor(x[:, 0] if vec else x, (A, B), back)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class AdamState:
    """First/second moment accumulators for a fixed list of parameters."""

    def __init__(self, shapes: Iterable[tuple[int, ...]], beta1=0.9, beta2=0.999, eps=1e-8):
        shapes = list(shapes)
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.step = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kw) -> "AdamState":
        return cls((p.shape for p in params), **kw)


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray | None],
    state: AdamState,
    lr: float,
    names: Sequence[str] | None = None,
    maximize: bool = False,
) -> list[Tensor]:
    """One bias-corrected Adam update. Returns fresh leaf tensors.

    ``None`` gradients are treated as zero (parameter not reached by the loss).
    """
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ValueError("adam_step: params, grads and state disagree in length")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    out = []
    for k, (p, g) in enumerate(zip(params, grads)):
        g = np.zeros(p.shape) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"adam_step: grad shape {g.shape} != param shape {p.shape}")
        if not np.all(np.isfinite(g)):
            label = names[k] if names else p.name or f"#{k}"
            raise FloatingPointError(f"adam_step: non-finite gradient for parameter {label}")
        if maximize:
            g = -g
        state.m[k] = b1 * state.m[k] + (1 - b1) * g
        state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        mhat = state.m[k] / (1 - b1**t)
        vhat = state.v[k] / (1 - b2**t)
        new = p.data - lr * mhat / (np.sqrt(vhat) + state.eps)
        out.append(Tensor(new, requires_grad=True, name=p.name))
    return out


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"CDLB1"


def save_checkpoint(path: str | Path, params: dict[str, np.ndarray]) -> None:
    """Write named float64 arrays: magic, then (name_len, name, rank, dims, data) records."""
    buf = bytearray(CHECKPOINT_MAGIC)
    for name, arr in params.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes(order="C")
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a CDLB1 checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    out: dict[str, np.ndarray] = {}
    while pos < len(blob):
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(dims).copy()
        pos += 8 * count
    return out
