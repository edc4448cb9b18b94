"""Distribution and realism measures for adversarial batches.

* Pearson correlation between last-BN statistics of clean and adversarial batches.
* Color counts and radial frequency energy of examples and perturbations.
* Cosine alignment between the cheap and the full-backward perturbation.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .trainer import (PerturbationSpec, discrete_adversarial_example, full_backward_perturbation, pgd_attack,
                      state_checksum)


def pcc(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape or a.size < 2:
        raise ValueError(f"pcc needs two vectors of equal length >= 2, got {a.shape} and {b.shape}")
    da, db = a - a.mean(), b - b.mean()
    na, nb = np.sqrt(np.dot(da, da)), np.sqrt(np.dot(db, db))
    if na == 0 or nb == 0:
        raise ValueError("pcc is undefined for a constant vector")
    return float(np.clip(np.dot(da, db) / (na * nb), -1.0, 1.0))


@dataclass
class PccHistogram:
    edges: np.ndarray
    mean_counts: np.ndarray
    var_counts: np.ndarray
    n_batches: int
    mean_values: list = field(default_factory=list)
    var_values: list = field(default_factory=list)

    @property
    def mean_median(self) -> float:
        return float(np.median(self.mean_values))

    @property
    def var_median(self) -> float:
        return float(np.median(self.var_values))

    @property
    def mean_peak(self) -> float:
        i = int(np.argmax(self.mean_counts))
        return float(0.5 * (self.edges[i] + self.edges[i + 1]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "mean_count", "var_count"])
        for i in range(len(self.mean_counts)):
            w.writerow([f"{self.edges[i]:.4f}", f"{self.edges[i + 1]:.4f}",
                        int(self.mean_counts[i]), int(self.var_counts[i])])
        return buf.getvalue()


def _histogram(mean_values, var_values, bins: int) -> PccHistogram:
    edges = np.linspace(-1.0, 1.0, bins + 1)
    mc, _ = np.histogram(mean_values, edges)
    vc, _ = np.histogram(var_values, edges)
    return PccHistogram(edges, mc, vc, len(mean_values), list(mean_values), list(var_values))


def adversarial_batch(regime: str, model, discretizer, x, y, alpha: float, epsilon: float, steps: int):
    if regime == "dat":
        return discrete_adversarial_example(model, discretizer, x, y, PerturbationSpec(alpha)).x_adv
    if regime == "pixel_at":
        if epsilon == 0:
            return x
        return pgd_attack(model, x, y, epsilon, steps, 2.5 * epsilon / steps)
    raise ValueError(f"unknown regime {regime!r}")


def bn_pcc_histogram(model, discretizer, images: np.ndarray, labels: np.ndarray,
                     regimes=("pixel_at", "dat"), n_batches: int = 200, batch_size: int = 64, seed: int = 0,
                     alpha: float = 0.1, epsilon: float = 4 / 255, steps: int = 5,
                     bins: int = 40, layers: str = "last") -> dict[str, PccHistogram]:
    """PCC between last-BN batch statistics of clean and adversarial batches, per regime.

    Batches are drawn without replacement inside each batch, with a stream
    fixed by ``seed``; every regime sees the same batches. ``layers="all"``
    concatenates the statistics of every BN layer instead of the last one.
    """
    from . import rng as rngmod

    if n_batches < 2:
        raise ValueError("n_batches must be >= 2")
    before = state_checksum(model)
    picker = rngmod.stream(seed, "analysis/bn_pcc")
    batches = [picker.choice(len(images), batch_size, replace=False) for _ in range(n_batches)]
    out = {}
    for regime in regimes:
        means, variances = [], []
        for sel in batches:
            x, y = images[sel], labels[sel]
            m_clean, v_clean = model.bn_statistics(x, layers)
            x_adv = adversarial_batch(regime, model, discretizer, x, y, alpha, epsilon, steps)
            m_adv, v_adv = model.bn_statistics(x_adv, layers)
            means.append(pcc(m_clean, m_adv))
            variances.append(pcc(v_clean, v_adv))
        out[regime] = _histogram(means, variances, bins)
    if state_checksum(model) != before:
        raise AssertionError("analysis modified the model")
    return out


def color_count(image, levels: int = 256) -> int:
    """Distinct colors in a [C, H, W] (or [H, W]) image quantized to ``levels`` per channel."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    q = np.rint(np.clip(img, 0, 1) * (levels - 1)).astype(np.int64)
    flat = q.reshape(q.shape[0], -1).T
    return len(np.unique(flat, axis=0))


def radial_frequency_profile(image, n_bands: int) -> np.ndarray:
    """Spectral energy per radial frequency band, summed over channels.

    The energies use the normalization ``|F|^2 / (H*W)`` so that they add up
    to the sum of squared pixel values.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    h, w = img.shape[-2:]
    if h != w:
        raise ValueError(f"radial profile needs a square image, got {h}x{w}")
    power = (np.abs(np.fft.fft2(img)) ** 2).sum(axis=0) / (h * w)
    fy, fx = np.meshgrid(np.fft.fftfreq(h), np.fft.fftfreq(w), indexing="ij")
    radius = np.sqrt(fx ** 2 + fy ** 2)
    band = np.minimum((radius / radius.max() * n_bands).astype(int), n_bands - 1)
    return np.bincount(band.ravel(), weights=power.ravel(), minlength=n_bands)


def high_frequency_share(image, n_bands: int = 12) -> float:
    """Fraction of spectral energy in the top third of radial bands."""
    prof = radial_frequency_profile(image, n_bands)
    total = prof.sum()
    return float(prof[n_bands - n_bands // 3:].sum() / total) if total > 0 else 0.0


def gradient_alignment(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("alignment is undefined for an all-zero perturbation")
    return float(np.dot(a, b) / (na * nb))


def straight_through_alignment(model, discretizer, images, labels, n_batches: int, batch_size: int,
                               alpha: float = 0.1, seed: int = 0) -> list[float]:
    """Per-batch cosine between the reconstruction-gradient and the full-backward perturbations."""
    from . import rng as rngmod

    picker = rngmod.stream(seed, "analysis/alignment")
    out = []
    for _ in range(n_batches):
        sel = picker.choice(len(images), batch_size, replace=False)
        x, y = images[sel], labels[sel]
        ex = discrete_adversarial_example(model, discretizer, x, y, PerturbationSpec(alpha))
        full = full_backward_perturbation(model, discretizer, x, y, alpha)
        out.append(gradient_alignment(ex.delta, full))
    return out


@dataclass
class RealismReport:
    clean_colors: list
    dat_colors: list
    fgsm_colors: list
    dat_high_share: list
    fgsm_high_share: list

    @property
    def dat_color_delta(self) -> float:
        return float(np.mean(np.abs(np.array(self.dat_colors) - self.clean_colors)))

    @property
    def fgsm_color_delta(self) -> float:
        return float(np.mean(np.abs(np.array(self.fgsm_colors) - self.clean_colors)))


def realism_report(model, discretizer, images, labels, alpha: float = 0.1, epsilon: float = 4 / 255,
                   n_bands: int = 12) -> RealismReport:
    """Color-count change and high-frequency perturbation share for DAT vs FGSM examples."""
    from .evaluation import fgsm_attack

    ex = discrete_adversarial_example(model, discretizer, images, labels, PerturbationSpec(alpha))
    fg = fgsm_attack(model, images, labels, epsilon)
    rep = RealismReport([], [], [], [], [])
    for i in range(len(images)):
        rep.clean_colors.append(color_count(images[i]))
        rep.dat_colors.append(color_count(ex.x_adv[i]))
        rep.fgsm_colors.append(color_count(fg[i]))
        rep.dat_high_share.append(high_frequency_share(ex.x_adv[i] - images[i], n_bands))
        rep.fgsm_high_share.append(high_frequency_share(fg[i] - images[i], n_bands))
    return rep
