"""Image discretizer: convolutional encoder, codebook quantizer, convolutional decoder."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import rng as rngmod
from . import tensor as T
from .codebook import Codebook, quantize, usage_histogram, vq_losses
from .nn import Adam, Conv2d, Module
from .tensor import Tensor

log = logging.getLogger(__name__)


class NonFiniteLoss(RuntimeError):
    """Raised when training produces a non-finite loss; the model holds the last good state."""


@dataclass
class DiscretizerConfig:
    channels: int = 3
    downsample: int = 4
    latent_dim: int = 16
    num_entries: int = 128
    hidden: int = 32
    epochs: int = 6
    batch_size: int = 64
    lr: float = 2e-3
    commitment_weight: float = 0.25
    seed: int = 0


class Discretizer(Module):
    def __init__(self, channels: int = 3, downsample: int = 4, latent_dim: int = 16, num_entries: int = 128,
                 hidden: int = 32, seed: int = 0):
        levels = int(round(math.log2(downsample)))
        if downsample < 2 or 2 ** levels != downsample:
            raise ValueError(f"downsampling factor must be a power of two >= 2, got {downsample}")
        self.downsample = downsample
        self.channels = channels
        init = rngmod.stream(seed, "init/discretizer")
        self.enc = [Conv2d(channels if i == 0 else hidden, hidden, 4, init, stride=2, padding=1)
                    for i in range(levels)]
        self.enc_out = Conv2d(hidden, latent_dim, 3, init)
        self.codebook = Codebook(num_entries, latent_dim, rngmod.stream(seed, "init/codebook"))
        self.dec_in = Conv2d(latent_dim, hidden, 3, init)
        self.dec = [Conv2d(hidden, hidden, 3, init) for _ in range(levels)]
        self.dec_out = Conv2d(hidden, channels, 3, init)

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray]) -> "Discretizer":
        levels = sum(1 for k in state if k.startswith("enc.") and k.endswith(".weight"))
        num_entries, latent_dim = state["codebook.entries"].shape
        hidden, channels = state["enc.0.weight"].shape[:2]
        model = cls(channels, 2 ** levels, latent_dim, num_entries, hidden)
        model.load_state_dict(state)
        return model

    # -- pipeline ------------------------------------------------------------
    def _check_input(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ValueError(f"expected images [N, {self.channels}, H, W], got {x.shape}")
        h, w = x.shape[2:]
        if h % self.downsample or w % self.downsample:
            ph = -h % self.downsample
            pw = -w % self.downsample
            raise ValueError(f"spatial size {(h, w)} not divisible by {self.downsample}; "
                             f"pad by ({ph}, {pw}) pixels to reach {(h + ph, w + pw)}")

    def encode(self, x) -> Tensor:
        """Latents [N, h, w, d] for images [N, C, H, W]."""
        x = T._as_tensor(x)
        self._check_input(x)
        hidden = x
        for conv in self.enc:
            hidden = T.relu(conv(hidden))
        return T.transpose(self.enc_out(hidden), (0, 2, 3, 1))

    def decode(self, v) -> Tensor:
        """Images [N, C, H, W] in [0, 1] for (quantized) latents [N, h, w, d]."""
        v = T._as_tensor(v)
        if v.ndim != 4 or v.shape[3] != self.codebook.dim:
            raise ValueError(f"expected latents [N, h, w, {self.codebook.dim}], got {v.shape}")
        hidden = T.relu(self.dec_in(T.transpose(v, (0, 3, 1, 2))))
        for conv in self.dec:
            hidden = T.relu(conv(T.upsample_nearest(hidden, 2)))
        return T.clamp(self.dec_out(hidden), 0.0, 1.0)

    def discretize(self, x) -> tuple[np.ndarray, np.ndarray]:
        """x -> (x_hat, indices); no graph is recorded."""
        with T.no_grad():
            v = self.encode(x)
            vq, idx = quantize(v, self.codebook)
            return self.decode(vq).data, idx

    __call__ = discretize

    def decode_indices(self, indices: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return self.decode(self.codebook.entries.data[indices]).data

    def forward_straight_through(self, x) -> tuple[Tensor, Tensor, np.ndarray]:
        """Differentiable reconstruction with the quantizer bridged straight through.

        Returns ``(x_hat, latents, indices)``.
        """
        v = self.encode(x)
        vq, idx = quantize(v, self.codebook)
        return self.decode(T.straight_through(v, vq)), v, idx


def reconstruction_mse(model: Discretizer, images: np.ndarray, batch_size: int = 256) -> float:
    total = 0.0
    for i in range(0, len(images), batch_size):
        xb = images[i:i + batch_size]
        xh, _ = model.discretize(xb)
        total += float(np.sum((xh.astype(np.float64) - xb) ** 2))
    return total / images.size


def codebook_usage(model: Discretizer, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    counts = np.zeros(model.codebook.num_entries, np.int64)
    for i in range(0, len(images), batch_size):
        _, idx = model.discretize(images[i:i + batch_size])
        counts += usage_histogram(idx, model.codebook.num_entries)
    return counts


def train_discretizer(train_images: np.ndarray, config: DiscretizerConfig, test_images: np.ndarray | None = None,
                      log_metrics: Callable[[int, dict], None] | None = None) -> Discretizer:
    """Fit encoder, codebook and decoder with L2 reconstruction plus the two VQ terms.

    Entries that no latent selected during an epoch are re-seeded at the end
    of that epoch with encoder outputs drawn from the epoch's last batch.
    Metrics for epoch 0 describe the untrained model.
    """
    model = Discretizer(config.channels, config.downsample, config.latent_dim, config.num_entries,
                        config.hidden, config.seed)
    params = model.parameters()
    opt = Adam(params, config.lr)
    held_out = test_images if test_images is not None else train_images[: min(len(train_images), 1000)]

    def emit(epoch: int, extra: dict) -> None:
        usage = codebook_usage(model, held_out)
        metrics = {"heldout_mse": reconstruction_mse(model, held_out),
                   "heldout_usage": float(np.mean(usage > 0)), **extra}
        log.info("discretizer epoch %d %s", epoch, metrics)
        if log_metrics is not None:
            log_metrics(epoch, metrics)

    emit(0, {})
    n = len(train_images)
    for epoch in range(1, config.epochs + 1):
        order = rngmod.stream(config.seed, "shuffle/discretizer", epoch).permutation(n)
        used = np.zeros(model.codebook.num_entries, bool)
        good = {k: v.copy() for k, v in model.state_dict().items()}
        sums = np.zeros(3)
        steps = 0
        last_latents = None
        for start in range(0, n, config.batch_size):
            xb = train_images[order[start:start + config.batch_size]]
            x_hat, v, idx = model.forward_straight_through(xb)
            rec = T.mse(x_hat, xb)
            cb, commit = vq_losses(v, model.codebook, idx)
            loss = T.add(T.add(rec, cb), T.scale(commit, config.commitment_weight))
            if not np.isfinite(loss.item()):
                model.load_state_dict(good)
                raise NonFiniteLoss(f"non-finite discretizer loss at epoch {epoch}, step {steps}")
            model.zero_grad()
            loss.backward()
            opt.step()
            used[idx.reshape(-1)] = True
            sums += (rec.item(), cb.item(), commit.item())
            steps += 1
            last_latents = v.data.reshape(-1, model.codebook.dim)
        dead = np.flatnonzero(~used)
        if dead.size and last_latents is not None:
            pick = rngmod.stream(config.seed, "reseed/codebook", epoch).choice(len(last_latents), dead.size,
                                                                               replace=dead.size > len(last_latents))
            model.codebook.entries.data[dead] = last_latents[pick]
        avg = sums / max(steps, 1)
        emit(epoch, {"train_mse": avg[0], "codebook_loss": avg[1], "commitment_loss": avg[2],
                     "train_usage": float(used.mean()), "reseeded": int(dead.size)})
    return model
