"""The small CNN backbone and the one-hidden-layer adversary MLP."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, forward_conv2d, forward_dense, softmax

TAPS = ("conv_features", "logits", "softmax")


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    image_size: int = 8
    conv_channels: tuple[int, ...] = (16, 16)
    kernel: int = 3
    hidden: int = 128
    classes: int = 2

    @property
    def feature_dim(self) -> int:
        side = self.image_size - len(self.conv_channels) * (self.kernel - 1)
        return self.conv_channels[-1] * side * side


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    lim = np.sqrt(6.0 / fan_in)
    return rng.uniform(-lim, lim, size=shape)


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


class ParamSet:
    """Ordered named parameters; replaced wholesale after each optimizer step."""

    def __init__(self, params: dict[str, np.ndarray]):
        self.names = list(params)
        self.tensors = [Tensor(params[n], requires_grad=True, name=n) for n in self.names]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[self.names.index(name)]

    def grads(self) -> list[np.ndarray | None]:
        return [t.grad for t in self.tensors]

    def replace(self, tensors: list[Tensor]) -> None:
        self.tensors = list(tensors)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: np.array(t.data) for n, t in zip(self.names, self.tensors)}


class ConvNet(ParamSet):
    """conv3x3(16)-relu, conv3x3(16)-relu, dense(128)-relu, dense(2)-softmax."""

    def __init__(self, cfg: ModelConfig = ModelConfig(), rng=None, params=None):
        self.cfg = cfg
        if params is None:
            rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
            params = {}
            c_in, k = cfg.in_channels, cfg.kernel
            for i, c_out in enumerate(cfg.conv_channels):
                params[f"conv{i}.w"] = he_uniform(rng, (c_out, c_in, k, k), c_in * k * k)
                params[f"conv{i}.b"] = np.zeros(c_out)
                c_in = c_out
            f = cfg.feature_dim
            params["fc0.w"] = he_uniform(rng, (cfg.hidden, f), f)
            params["fc0.b"] = np.zeros(cfg.hidden)
            params["fc1.w"] = glorot_uniform(rng, (cfg.classes, cfg.hidden), cfg.hidden, cfg.classes)
            params["fc1.b"] = np.zeros(cfg.classes)
        super().__init__(params)

    def forward(self, x) -> dict[str, Tensor]:
        """Return every tap: flattened conv features, logits and softmax."""
        h = x if isinstance(x, Tensor) else Tensor(x)
        for i in range(len(self.cfg.conv_channels)):
            h = forward_conv2d(self[f"conv{i}.w"], self[f"conv{i}.b"], h).relu()
        feats = h.reshape(h.shape[0], -1)
        hidden = forward_dense(self["fc0.w"], self["fc0.b"], feats, "relu")
        logits = forward_dense(self["fc1.w"], self["fc1.b"], hidden, "identity")
        return {"conv_features": feats, "logits": logits, "softmax": softmax(logits)}


class AdversaryMLP(ParamSet):
    """Scalar-output network with one 1024-unit ReLU hidden layer."""

    def __init__(self, in_dim: int, rng=None, hidden: int = 1024, params=None):
        if params is None:
            rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
            params = {
                "w0": he_uniform(rng, (hidden, in_dim), in_dim),
                "b0": np.zeros(hidden),
                "w1": glorot_uniform(rng, (1, hidden), hidden, 1),
                "b1": np.zeros(1),
            }
        super().__init__(params)

    def forward(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        x = x.reshape(x.shape[0], -1)
        h = forward_dense(self["w0"], self["b0"], x, "relu")
        return forward_dense(self["w1"], self["b1"], h, "identity").reshape(-1)
