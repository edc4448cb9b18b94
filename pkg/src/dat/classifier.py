"""Small residual CNN with batch normalization."""
from __future__ import annotations

import numpy as np

from . import rng as rngmod
from . import tensor as T
from .nn import BatchNorm2d, Conv2d, Linear, Module
from .tensor import Tensor

MODES = ("train", "eval", "stats")


class ResidualBlock(Module):
    def __init__(self, cin: int, cout: int, stride: int, rng: np.random.Generator):
        self.conv1 = Conv2d(cin, cout, 3, rng, stride=stride, bias=False)
        self.bn1 = BatchNorm2d(cout)
        self.conv2 = Conv2d(cout, cout, 3, rng, bias=False)
        self.bn2 = BatchNorm2d(cout)
        self.proj = Conv2d(cin, cout, 1, rng, stride=stride, padding=0, bias=False) if (
            stride != 1 or cin != cout) else None
        self.proj_bn = BatchNorm2d(cout) if self.proj is not None else None

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        h = T.relu(self.bn1(self.conv1(x), mode))
        h = self.bn2(self.conv2(h), mode)
        skip = x if self.proj is None else self.proj_bn(self.proj(x), mode)
        return T.relu(T.add(h, skip))


class Classifier(Module):
    """Stem conv, three residual stages (widths w, 2w, 4w), global average pool, linear head.

    ``mode`` is ``train`` (batch statistics, running stats updated), ``eval``
    (running stats) or ``stats`` (batch statistics, nothing updated).
    """

    def __init__(self, num_classes: int = 10, width: int = 8, channels: int = 3, seed: int = 0):
        init = rngmod.stream(seed, "init/classifier")
        self.num_classes, self.channels = num_classes, channels
        self.stem = Conv2d(channels, width, 3, init, bias=False)
        self.stem_bn = BatchNorm2d(width)
        self.stages = [ResidualBlock(width, width, 1, init),
                       ResidualBlock(width, 2 * width, 2, init),
                       ResidualBlock(2 * width, 4 * width, 2, init)]
        self.head = Linear(4 * width, num_classes, init)

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray]) -> "Classifier":
        width, channels = state["stem.weight"].shape[:2]
        model = cls(state["head.weight"].shape[0], width, channels)
        model.load_state_dict(state)
        return model

    @property
    def last_bn(self) -> BatchNorm2d:
        return self.stages[-1].bn2

    def forward(self, x, mode: str = "eval") -> Tensor:
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
        x = T._as_tensor(x)
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ValueError(f"expected images [N, {self.channels}, H, W], got {x.shape}")
        h = T.relu(self.stem_bn(self.stem(x), mode))
        for block in self.stages:
            h = block(h, mode)
        return self.head(T.mean(h, axis=(2, 3)))

    __call__ = forward

    def predict(self, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
        out = []
        with T.no_grad():
            for i in range(0, len(images), batch_size):
                out.append(self.forward(images[i:i + batch_size], "eval").data.argmax(axis=1))
        return np.concatenate(out) if out else np.zeros(0, np.int64)

    def last_bn_statistics(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel batch mean and variance of the input to the last BN layer.

        Computed with batch statistics; running statistics and parameters are
        left untouched.
        """
        return self.bn_statistics(x, "last")

    def batch_norms(self) -> list[BatchNorm2d]:
        out = [self.stem_bn]
        for block in self.stages:
            out += [block.bn1, block.bn2] + ([block.proj_bn] if block.proj_bn is not None else [])
        return out

    def bn_statistics(self, x, layers: str = "last") -> tuple[np.ndarray, np.ndarray]:
        """Batch mean and variance at the last BN layer, or concatenated over all of them."""
        if layers not in ("last", "all"):
            raise ValueError(f"layers must be 'last' or 'all', got {layers!r}")
        with T.no_grad():
            self.forward(x, "stats")
        bns = [self.last_bn] if layers == "last" else self.batch_norms()
        return (np.concatenate([bn.last_mean for bn in bns]).copy(),
                np.concatenate([bn.last_var for bn in bns]).copy())
