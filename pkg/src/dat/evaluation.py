"""Clean, FGSM and corruption evaluation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from . import tensor as T
from .data import Dataset
from .metrics import MetricsRecord
from .trainer import input_gradient, state_checksum

CORRUPTIONS_VERSION = 1
# severity 1..5; values pinned for 32x32 inputs in [0, 1]
SEVERITY_TABLES = {
    "gaussian_noise": (0.04, 0.06, 0.08, 0.09, 0.10),   # noise std
    "shot_noise": (500.0, 250.0, 100.0, 75.0, 50.0),     # photons per unit intensity
    "impulse_noise": (0.01, 0.02, 0.03, 0.05, 0.07),    # salt-and-pepper fraction
    "gaussian_blur": (0.4, 0.6, 0.7, 0.8, 1.0),         # kernel sigma, pixels
    "contrast": (0.75, 0.5, 0.4, 0.3, 0.15),            # scale about the image mean
    "brightness": (0.05, 0.1, 0.15, 0.2, 0.3),          # additive offset
    "pixelate": (0.95, 0.9, 0.85, 0.75, 0.65),          # relative resolution
}
CORRUPTION_KINDS = tuple(SEVERITY_TABLES)
FGSM_EPSILONS = (1 / 255, 2 / 255, 4 / 255)


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SEVERITY_TABLES:
            raise ValueError(f"unknown corruption kind {self.kind!r}; expected one of {CORRUPTION_KINDS}")
        if self.severity not in (1, 2, 3, 4, 5):
            raise ValueError(f"severity must be 1..5, got {self.severity}")

    @property
    def parameter(self) -> float:
        return SEVERITY_TABLES[self.kind][self.severity - 1]

    @property
    def name(self) -> str:
        return f"{self.kind}/{self.severity}"


def full_suite(seed: int = 0) -> list[CorruptionSpec]:
    return [CorruptionSpec(k, s, seed) for k in CORRUPTION_KINDS for s in range(1, 6)]


# ---------------------------------------------------------------------------
# corruption kernels; x is [N, C, H, W] or [C, H, W]
# ---------------------------------------------------------------------------

def gaussian_noise(x, std, rng):
    return x + rng.normal(0.0, std, x.shape)


def shot_noise(x, photons, rng):
    return rng.poisson(np.clip(x, 0, 1) * photons) / photons


def impulse_noise(x, amount, rng):
    out = np.array(x, dtype=np.float64)
    u = rng.random(x.shape)
    out[u < amount / 2] = 0.0
    out[(u >= amount / 2) & (u < amount)] = 1.0
    return out


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(math.ceil(3 * sigma)))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(x, sigma, rng=None):
    k = _gaussian_kernel(sigma)
    r = len(k) // 2
    out = np.asarray(x, dtype=np.float64)
    for axis in (-2, -1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (r, r)
        padded = np.pad(out, pad, mode="edge")
        n = out.shape[axis]
        acc = np.zeros_like(out)
        for i, w in enumerate(k):
            acc += w * np.take(padded, np.arange(i, i + n), axis=axis)
        out = acc
    return out


def contrast(x, factor, rng=None):
    mean = np.mean(x, axis=(-3, -2, -1), keepdims=True)
    return (x - mean) * factor + mean


def brightness(x, offset, rng=None):
    return x + offset


def pixelate(x, scale, rng=None):
    h, w = x.shape[-2:]
    out = np.asarray(x, dtype=np.float64)
    for axis, size in ((-2, h), (-1, w)):
        cells = max(1, int(size * scale))
        group = (np.arange(size) * cells) // size
        starts = np.flatnonzero(np.diff(group, prepend=-1))
        sums = np.add.reduceat(out, starts, axis=axis)
        counts = np.diff(np.append(starts, size))
        shape = [1] * out.ndim
        shape[axis] = len(counts)
        means = sums / counts.reshape(shape)
        out = np.take(means, group, axis=axis)
    return out


_KERNELS = {
    "gaussian_noise": gaussian_noise, "shot_noise": shot_noise, "impulse_noise": impulse_noise,
    "gaussian_blur": gaussian_blur, "contrast": contrast, "brightness": brightness, "pixelate": pixelate,
}


def corrupt(x: np.ndarray, spec: CorruptionSpec, index: int = 0) -> np.ndarray:
    """Apply one corruption; same spec, index and input give bitwise identical output in [0, 1].

    ``index`` selects an independent noise stream, e.g. one per evaluation batch.
    """
    rng = rngmod.stream(spec.seed, f"corruption/{spec.kind}/{spec.severity}", index)
    out = _KERNELS[spec.kind](np.asarray(x), spec.parameter, rng)
    return np.clip(out, 0.0, 1.0).astype(np.asarray(x).dtype)


# ---------------------------------------------------------------------------
# attacks and evaluation
# ---------------------------------------------------------------------------

def fgsm_attack(model, x: np.ndarray, y: np.ndarray, epsilon: float) -> np.ndarray:
    """``clip(x + epsilon * sign(grad_x L), 0, 1)``; the model is not modified."""
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    if epsilon == 0:
        return x.copy()
    g = input_gradient(model, x, y)
    return np.clip(x + epsilon * np.sign(g), 0.0, 1.0).astype(x.dtype)


class DiscretizedInput:
    """``F(Q(x))``; gradients w.r.t. ``x`` pass straight through ``Q``."""

    def __init__(self, model, discretizer):
        self.model, self.discretizer = model, discretizer

    def __call__(self, x, mode: str = "eval"):
        x = T._as_tensor(x)
        x_hat, _ = self.discretizer.discretize(x.data)
        return self.model(T.straight_through(x, x_hat), mode)

    def predict(self, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
        out = []
        for i in range(0, len(images), batch_size):
            x_hat, _ = self.discretizer.discretize(images[i:i + batch_size])
            out.append(self.model.predict(x_hat))
        return np.concatenate(out)


@dataclass
class EvalOptions:
    with_discretizer: bool = False
    discretizer: object = None
    attacks: tuple = FGSM_EPSILONS
    corruptions: list = field(default_factory=list)
    baseline: object = None   # a MetricsRecord or metrics dict from the baseline model
    baseline_name: str = ""
    report_rce: bool = False
    batch_size: int = 500


def _batched_accuracy(model, images, labels, batch_size, transform=None) -> float:
    correct = 0
    for b, i in enumerate(range(0, len(images), batch_size)):
        xb, yb = images[i:i + batch_size], labels[i:i + batch_size]
        if transform is not None:
            xb = transform(xb, yb, b)
        correct += int(np.sum(model.predict(xb) == yb))
    return correct / len(images)


def relative_corruption_error(metrics: dict, baseline: dict) -> float:
    """Mean over corruption kinds and severities of ``err_model / err_baseline``."""
    keys = sorted(k for k in metrics if k.startswith("corruption/"))
    if not keys:
        raise ValueError("no corruption results to compare")
    missing = [k for k in keys if k not in baseline]
    if missing:
        raise KeyError(f"baseline lacks corruption results for {missing[:3]}")
    ratios = []
    for k in keys:
        err, base = 1.0 - metrics[k], 1.0 - baseline[k]
        ratios.append(1.0 if err == base else (err / base if base > 0 else math.inf))
    return float(np.mean(ratios))


def evaluate(model, dataset: Dataset, options: EvalOptions | None = None, run_name: str = "evaluate",
             config_hash: str = "") -> MetricsRecord:
    """Clean, per-attack and per-corruption accuracy, plus rCE when a baseline is given."""
    options = options or EvalOptions()
    if options.report_rce and options.baseline is None:
        raise ValueError("rCE requested but no baseline results were given")
    if options.with_discretizer:
        if options.discretizer is None:
            raise ValueError("with_discretizer requested but no discretizer given")
        target = DiscretizedInput(model, options.discretizer)
    else:
        target = model
    before = state_checksum(model)
    images, labels, bs = dataset.images, dataset.labels, options.batch_size
    metrics = {"clean_acc": _batched_accuracy(target, images, labels, bs)}
    for eps in options.attacks:
        metrics[f"fgsm/{eps * 255:g}"] = _batched_accuracy(
            target, images, labels, bs, lambda xb, yb, b, e=eps: fgsm_attack(target, xb, yb, e))
    for spec in options.corruptions:
        # the whole split is corrupted in one draw so results do not depend on the batch size
        metrics[f"corruption/{spec.name}"] = _batched_accuracy(target, corrupt(images, spec), labels, bs)
    if options.corruptions:
        metrics["corruption_mean_acc"] = float(np.mean([metrics[f"corruption/{s.name}"]
                                                        for s in options.corruptions]))
        if options.baseline is not None:
            base = options.baseline.metrics if isinstance(options.baseline, MetricsRecord) else options.baseline
            metrics["rce"] = relative_corruption_error(metrics, base)
    if state_checksum(model) != before:
        raise AssertionError("evaluation modified the model")
    return MetricsRecord.create(run_name, config_hash, 0, metrics,
                                extra={"baseline": options.baseline_name} if options.baseline is not None else None)
