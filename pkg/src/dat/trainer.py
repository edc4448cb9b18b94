"""Discrete adversarial training and the baseline training regimes.

Per batch, DAT discretizes the clean images, takes one gradient step of size
``alpha`` on the classification loss measured at the reconstruction (the
gradient w.r.t. the reconstruction stands in for the gradient w.r.t. the
input), discretizes the shifted input again and trains on the result.
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import rng as rngmod
from . import tensor as T
from .classifier import Classifier
from .data import Dataset
from .discretizer import Discretizer, NonFiniteLoss
from .nn import SGD, step_decay
from .tensor import Tensor

log = logging.getLogger(__name__)

TRAIN_MODES = ("standard", "pixel_at", "dat", "random_word")
DEFAULT_ALPHA = 0.1


@dataclass(frozen=True)
class PerturbationSpec:
    alpha: float = DEFAULT_ALPHA
    mode: str = "raw"                      # raw | sign
    bound: tuple[float, float] | None = None  # (p, eps) with p in {2, inf}
    source: str = "straight_through"       # straight_through | full_backward

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.mode not in ("raw", "sign"):
            raise ValueError(f"unknown perturbation mode {self.mode!r}")
        if self.source not in ("straight_through", "full_backward"):
            raise ValueError(f"unknown gradient source {self.source!r}")
        if self.bound is not None:
            p, eps = self.bound
            if p not in (2, math.inf) or not eps > 0:
                raise ValueError(f"bound must be (2 or inf, eps > 0), got {self.bound}")


@dataclass
class TrainConfig:
    mode: str = "standard"
    epochs: int = 6
    batch_size: int = 128
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_milestones: tuple = (0.5, 0.75)  # fractions of the epoch budget
    seed: int = 0
    width: int = 8
    num_classes: int = 10
    # dat
    alpha: float = DEFAULT_ALPHA
    perturbation: str = "raw"
    bound_p: float = math.inf
    bound_eps: float | None = None
    # pixel_at
    epsilon: float = 4 / 255
    steps: int = 1
    step_size: float | None = None
    # random_word
    fraction: float = 0.038

    def __post_init__(self):
        if self.mode not in TRAIN_MODES:
            raise ValueError(f"unknown training mode {self.mode!r}; expected one of {TRAIN_MODES}")

    def perturbation_spec(self) -> PerturbationSpec:
        bound = None if self.bound_eps is None else (self.bound_p, self.bound_eps)
        return PerturbationSpec(self.alpha, self.perturbation, bound)


@dataclass
class StepResult:
    loss: float
    x_adv: np.ndarray
    modified_fraction: float = 0.0


# ---------------------------------------------------------------------------
# perturbations
# ---------------------------------------------------------------------------

def input_gradient(model, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of the summed per-example cross-entropy w.r.t. the input, eval-mode forward."""
    xt = Tensor(x, requires_grad=True)
    loss = T.softmax_cross_entropy(model(xt, "eval"), y, reduction="sum")
    (g,) = T.grad(loss, [xt])
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite input gradient")
    return g


def project(delta: np.ndarray, bound: tuple[float, float] | None) -> np.ndarray:
    if bound is None:
        return delta
    p, eps = bound
    if math.isinf(eps):
        return delta
    if p == math.inf:
        return np.clip(delta, -eps, eps)
    norms = np.sqrt((delta.reshape(len(delta), -1).astype(np.float64) ** 2).sum(axis=1))
    factor = np.minimum(1.0, eps / np.maximum(norms, 1e-12)).astype(delta.dtype)
    return delta * factor.reshape((-1,) + (1,) * (delta.ndim - 1))


def _scale_gradient(g: np.ndarray, spec: PerturbationSpec) -> np.ndarray:
    step = np.sign(g) if spec.mode == "sign" else g
    return project((spec.alpha * step).astype(g.dtype), spec.bound)


def compute_perturbation(model, x_hat: np.ndarray, y: np.ndarray, spec: PerturbationSpec) -> np.ndarray:
    """``alpha * grad_{x_hat} L(x_hat, y)`` (or its sign), optionally projected; detached."""
    return _scale_gradient(input_gradient(model, x_hat, y), spec)


def full_backward_perturbation(model, discretizer: Discretizer, x: np.ndarray, y: np.ndarray,
                               alpha: float, spec: PerturbationSpec | None = None) -> np.ndarray:
    """Same step, but the gradient is taken w.r.t. ``x`` through decoder and encoder.

    Only the quantizer is bridged straight through.
    """
    spec = spec or PerturbationSpec(alpha)
    xt = Tensor(x, requires_grad=True)
    x_hat, _, _ = discretizer.forward_straight_through(xt)
    loss = T.softmax_cross_entropy(model(x_hat, "eval"), y, reduction="sum")
    (g,) = T.grad(loss, [xt])
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite input gradient")
    return _scale_gradient(g, PerturbationSpec(alpha, spec.mode, spec.bound))


@dataclass
class DiscreteExample:
    x_hat: np.ndarray
    delta: np.ndarray
    x_adv: np.ndarray
    clean_indices: np.ndarray
    adv_indices: np.ndarray

    @property
    def modified_fraction(self) -> float:
        return float(np.mean(self.clean_indices != self.adv_indices))


def discrete_adversarial_example(model, discretizer: Discretizer, x: np.ndarray, y: np.ndarray,
                                 spec: PerturbationSpec) -> DiscreteExample:
    x_hat, idx0 = discretizer.discretize(x)
    if spec.alpha == 0:
        delta = np.zeros_like(x)
    elif spec.source == "full_backward":
        delta = full_backward_perturbation(model, discretizer, x, y, spec.alpha, spec)
    else:
        delta = compute_perturbation(model, x_hat, y, spec)
    x_in = np.clip(x + delta, 0.0, 1.0)
    x_adv, idx1 = discretizer.discretize(x_in)
    return DiscreteExample(x_hat, delta, x_adv, idx0, idx1)


def random_word_perturbation(discretizer: Discretizer, x: np.ndarray, fraction: float,
                             rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Replace ``round(fraction * h * w)`` token positions per image with a different random word.

    Returns ``(x_rand, clean_indices, new_indices)``.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    _, idx = discretizer.discretize(x)
    n, h, w = idx.shape
    count = math.floor(fraction * h * w + 0.5)
    k = discretizer.codebook.num_entries
    new = idx.copy().reshape(n, h * w)
    for i in range(n):
        pos = rng.choice(h * w, count, replace=False)
        draw = rng.integers(0, k - 1, count)
        old = new[i, pos]
        new[i, pos] = draw + (draw >= old)
    new = new.reshape(n, h, w)
    if count == 0:
        x_rand, _ = discretizer.discretize(x)
    else:
        x_rand = discretizer.decode_indices(new)
    return x_rand, idx, new


def pgd_attack(model, x: np.ndarray, y: np.ndarray, epsilon: float, steps: int,
               step_size: float | None = None) -> np.ndarray:
    """Projected sign-gradient ascent in the L-inf ball; FGSM when steps=1 and step_size=epsilon."""
    if not epsilon > 0 or steps < 1:
        raise ValueError(f"need epsilon > 0 and steps >= 1, got {epsilon}, {steps}")
    step_size = epsilon if step_size is None else step_size
    x_adv = x
    for _ in range(steps):
        g = input_gradient(model, x_adv, y)
        x_adv = np.clip(x_adv + step_size * np.sign(g), x - epsilon, x + epsilon)
        x_adv = np.clip(x_adv, 0.0, 1.0).astype(x.dtype)
    return x_adv


# ---------------------------------------------------------------------------
# training steps
# ---------------------------------------------------------------------------

def _optimize(model: Classifier, optimizer: SGD, x: np.ndarray, y: np.ndarray) -> float:
    model.zero_grad()
    loss = T.softmax_cross_entropy(model(x, "train"), y)
    value = loss.item()
    if not np.isfinite(value):
        raise NonFiniteLoss("non-finite classification loss")
    loss.backward()
    optimizer.step()
    return value


def _assert_clean_grads(model: Classifier) -> None:
    if any(p.grad is not None for p in model.parameters()):
        raise AssertionError("attack pass left gradient residue in parameter buffers")


def standard_step(model, optimizer, x, y) -> StepResult:
    return StepResult(_optimize(model, optimizer, x, y), x)


def dat_step(model: Classifier, discretizer: Discretizer, x: np.ndarray, y: np.ndarray, spec: PerturbationSpec,
             optimizer: SGD) -> StepResult:
    model.zero_grad()
    ex = discrete_adversarial_example(model, discretizer, x, y, spec)
    _assert_clean_grads(model)
    loss = _optimize(model, optimizer, ex.x_adv, y)
    return StepResult(loss, ex.x_adv, ex.modified_fraction)


def pixel_at_step(model: Classifier, x: np.ndarray, y: np.ndarray, epsilon: float, steps: int,
                  step_size: float | None, optimizer: SGD) -> StepResult:
    model.zero_grad()
    x_adv = pgd_attack(model, x, y, epsilon, steps, step_size)
    _assert_clean_grads(model)
    return StepResult(_optimize(model, optimizer, x_adv, y), x_adv)


def random_word_step(model, discretizer, x, y, fraction, rng, optimizer) -> StepResult:
    x_rand, idx0, idx1 = random_word_perturbation(discretizer, x, fraction, rng)
    return StepResult(_optimize(model, optimizer, x_rand, y), x_rand, float(np.mean(idx0 != idx1)))


# ---------------------------------------------------------------------------
# outer loop
# ---------------------------------------------------------------------------

def state_checksum(module) -> str:
    h = hashlib.sha256()
    for name, arr in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def accuracy(model: Classifier, images: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(model.predict(images) == labels))


@dataclass
class TrainResult:
    model: Classifier
    history: list[dict] = field(default_factory=list)


def train(config: TrainConfig, train_set: Dataset, test_set: Dataset | None = None,
          discretizer: Discretizer | None = None,
          log_metrics: Callable[[int, dict], None] | None = None) -> TrainResult:
    """Train a classifier under ``config.mode``; the discretizer, when used, stays frozen."""
    if config.mode in ("dat", "random_word") and discretizer is None:
        raise ValueError(f"mode {config.mode!r} needs a trained discretizer")
    model = Classifier(config.num_classes, config.width, train_set.images.shape[1], config.seed)
    optimizer = SGD(model.parameters(), config.lr, config.momentum, config.weight_decay)
    spec = config.perturbation_spec()
    milestones = tuple(int(round(m * config.epochs)) for m in config.lr_milestones)
    frozen = state_checksum(discretizer) if discretizer is not None else None
    history = []
    n = len(train_set)
    for epoch in range(config.epochs):
        optimizer.lr = step_decay(config.lr, epoch, milestones)
        order = rngmod.stream(config.seed, "shuffle/classifier", epoch).permutation(n)
        word_rng = rngmod.stream(config.seed, "attack/random_word", epoch)
        losses, fractions = [], []
        for start in range(0, n, config.batch_size):
            sel = order[start:start + config.batch_size]
            if len(sel) < 2:
                continue
            x, y = train_set.images[sel], train_set.labels[sel]
            if config.mode == "standard":
                res = standard_step(model, optimizer, x, y)
            elif config.mode == "dat":
                res = dat_step(model, discretizer, x, y, spec, optimizer)
            elif config.mode == "pixel_at":
                res = pixel_at_step(model, x, y, config.epsilon, config.steps, config.step_size, optimizer)
            else:
                res = random_word_step(model, discretizer, x, y, config.fraction, word_rng, optimizer)
            losses.append(res.loss)
            fractions.append(res.modified_fraction)
        if frozen is not None and state_checksum(discretizer) != frozen:
            raise AssertionError("discretizer parameters changed during classifier training")
        metrics = {"train_loss": float(np.mean(losses)), "lr": optimizer.lr}
        if config.mode in ("dat", "random_word"):
            metrics["modified_fraction"] = float(np.mean(fractions))
        if test_set is not None:
            metrics["clean_acc"] = accuracy(model, test_set.images, test_set.labels)
        log.info("%s epoch %d %s", config.mode, epoch + 1, metrics)
        history.append({"epoch": epoch + 1, **metrics})
        if log_metrics is not None:
            log_metrics(epoch + 1, metrics)
    return TrainResult(model, history)
