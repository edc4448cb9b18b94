"""Learnable visual-word vocabulary and exact nearest-neighbour quantization."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import Module
from .tensor import Tensor

MAX_ENTRIES = 2 ** 14


class Codebook(Module):
    """``K`` entries of dimension ``d``, initialised uniformly in [-1/K, 1/K]."""

    def __init__(self, num_entries: int, dim: int, rng: np.random.Generator | None = None,
                 entries: np.ndarray | None = None):
        if not 2 <= num_entries <= MAX_ENTRIES or dim < 1:
            raise ValueError(f"codebook needs 2 <= K <= {MAX_ENTRIES} and d >= 1, got K={num_entries}, d={dim}")
        if entries is None:
            if rng is None:
                raise ValueError("either rng or entries is required")
            entries = rng.uniform(-1.0 / num_entries, 1.0 / num_entries, (num_entries, dim))
        entries = np.asarray(entries, dtype=T.default_dtype())
        if entries.shape != (num_entries, dim) or not np.all(np.isfinite(entries)):
            raise ValueError(f"codebook entries must be finite with shape {(num_entries, dim)}")
        self.entries = Tensor(entries, requires_grad=True)

    @property
    def num_entries(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]


def _direct_sq_distances(flat: np.ndarray, entries: np.ndarray) -> np.ndarray:
    # direct differences keep exact ties exact
    d2 = np.zeros((flat.shape[0], entries.shape[0]), dtype=np.result_type(flat, entries))
    for j in range(entries.shape[1]):
        diff = flat[:, j:j + 1] - entries[None, :, j]
        d2 += diff * diff
    return d2


def nearest_indices(latents: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """Index of the closest entry (squared Euclidean) for each row; ties go to the lowest index.

    A float64 matmul expansion ranks the entries; rows where another entry
    comes within rounding distance of the best one are settled by the
    direct difference scan, so the result equals the exhaustive scan.
    """
    flat = latents.reshape(-1, entries.shape[1])
    f64, e64 = flat.astype(np.float64), entries.astype(np.float64)
    vn, en = np.einsum("ij,ij->i", f64, f64), np.einsum("ij,ij->i", e64, e64)
    approx = vn[:, None] - 2.0 * (f64 @ e64.T) + en[None, :]
    idx = np.argmin(approx, axis=1)
    best = approx[np.arange(len(idx)), idx]
    # float32 direct distances are within ~1e-6 relative of the exact ones
    margin = 1e-4 * (vn + en.max()) + 1e-300
    ambiguous = np.count_nonzero(approx <= (best + margin)[:, None], axis=1) > 1
    if ambiguous.any():
        idx[ambiguous] = np.argmin(_direct_sq_distances(flat[ambiguous], entries), axis=1)
    return idx.reshape(latents.shape[:-1])


def quantize(latents, codebook: Codebook):
    """Snap every latent vector onto its closest codebook entry.

    ``latents`` has shape [..., d]. Returns ``(quantized, indices)`` where
    ``quantized`` is a plain array whose vectors are copies of codebook
    entries and ``indices`` has the leading shape of ``latents``.
    """
    v = latents.data if isinstance(latents, Tensor) else np.asarray(latents)
    if v.shape[-1] != codebook.dim:
        raise ValueError(f"latent dimension {v.shape[-1]} does not match codebook dimension {codebook.dim}")
    if not np.all(np.isfinite(v)):
        raise ValueError("latents contain non-finite values")
    idx = nearest_indices(v, codebook.entries.data)
    return codebook.entries.data[idx], idx


def vq_losses(latents: Tensor, codebook: Codebook, indices: np.ndarray):
    """Codebook and commitment terms, each a mean squared error.

    The codebook term compares ``stop_gradient(latents)`` with the looked-up
    entries, so only the entries receive gradient; the commitment term
    compares ``latents`` with stopped entries, so only the encoder does.
    """
    quantized = T.take_rows(codebook.entries, indices)
    if quantized.shape != latents.shape:
        raise ValueError(f"vq_losses shape mismatch: latents {latents.shape} vs quantized {quantized.shape}")
    codebook_loss = T.mse(quantized, T.stop_gradient(latents))
    commitment_loss = T.mse(latents, T.stop_gradient(quantized))
    return codebook_loss, commitment_loss


def usage_histogram(indices, num_entries: int) -> np.ndarray:
    idx = np.asarray(indices).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= num_entries):
        raise ValueError(f"indices outside [0, {num_entries})")
    return np.bincount(idx, minlength=num_entries)
