"""Datasets: a seeded procedural shape generator and the IDX container format."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng as rngmod

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
IDX_COLOR_IMAGES_MAGIC = 0x00000804   # [N, C, H, W]; used for the synthetic color set
SHAPES = ("circle", "square", "triangle", "plus", "ring", "diamond", "cross", "half_disk", "frame", "two_dots")


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float32 in [0, 1]
    labels: np.ndarray  # [N] int64

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx])


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------

def _shape_mask(kind: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    r2 = u * u + v * v
    au, av = np.abs(u), np.abs(v)
    if kind == 0:
        return r2 <= 1.0
    if kind == 1:
        return np.maximum(au, av) <= 0.8
    if kind == 2:
        return (v >= -0.75) & (au <= (0.9 - v) * 0.62)
    if kind == 3:
        return ((au <= 0.3) & (av <= 0.95)) | ((av <= 0.3) & (au <= 0.95))
    if kind == 4:
        return (r2 <= 1.0) & (r2 >= 0.55 ** 2)
    if kind == 5:
        return au + av <= 1.05
    if kind == 6:
        p, q = np.abs(u + v) / np.sqrt(2), np.abs(u - v) / np.sqrt(2)
        return ((p <= 0.28) & (q <= 1.0)) | ((q <= 0.28) & (p <= 1.0))
    if kind == 7:
        return (r2 <= 1.0) & (v >= -0.1)
    if kind == 8:
        m = np.maximum(au, av)
        return (m <= 0.9) & (m >= 0.55)
    if kind == 9:
        return ((u - 0.5) ** 2 + v * v <= 0.42 ** 2) | ((u + 0.5) ** 2 + v * v <= 0.42 ** 2)
    raise ValueError(f"unknown shape kind {kind}")


def _render(kind: int, rng: np.random.Generator, size: int, supersample: int = 4) -> np.ndarray:
    s = size * supersample
    grid = (np.arange(s) + 0.5) / supersample
    yy, xx = np.meshgrid(grid, grid, indexing="ij")

    # background: linear blend between two muted colors along a random direction
    c0, c1 = rng.uniform(0.05, 0.6, 3), rng.uniform(0.05, 0.6, 3)
    ang = rng.uniform(0, 2 * np.pi)
    t = ((xx - size / 2) * np.cos(ang) + (yy - size / 2) * np.sin(ang)) / size + 0.5
    t = np.clip(t, 0, 1)[..., None]
    img = c0 * (1 - t) + c1 * t

    # foreground: saturated color, soft directional shading
    hue = rng.integers(0, 6)
    fg = np.full(3, rng.uniform(0.0, 0.25))
    fg[hue % 3] = rng.uniform(0.85, 1.0)
    if hue >= 3:
        fg[(hue + 1) % 3] = rng.uniform(0.7, 1.0)
    radius = size * rng.uniform(0.26, 0.36)
    cx, cy = size / 2 + rng.uniform(-4, 4, 2)
    rot = rng.uniform(-0.3, 0.3)
    dx, dy = (xx - cx) / radius, (yy - cy) / radius
    u = dx * np.cos(rot) + dy * np.sin(rot)
    v = -(dy * np.cos(rot) - dx * np.sin(rot))
    mask = _shape_mask(kind, u, v)[..., None]
    shade = 1.0 - 0.25 * np.clip((u + v + 1.5) / 3.0, 0, 1)[..., None]
    img = np.where(mask, fg * shade, img)

    img = img.reshape(size, supersample, size, supersample, 3).mean(axis=(1, 3))
    # stored like an 8-bit image
    return np.round(np.clip(img, 0, 1) * 255) / 255


def synthetic_shapes(n: int, seed: int, num_classes: int = 10, size: int = 32, split: str = "train") -> Dataset:
    """``n`` images of ``num_classes`` colored primitives; classes balanced within one."""
    if not 2 <= num_classes <= len(SHAPES):
        raise ValueError(f"num_classes must be in [2, {len(SHAPES)}]")
    order = rngmod.stream(seed, f"synthetic/{split}/labels").permutation(n)
    labels = (order % num_classes).astype(np.int64)
    images = np.empty((n, 3, size, size), np.float32)
    for i in range(n):
        img = _render(int(labels[i]), rngmod.stream(seed, f"synthetic/{split}/image", i), size)
        images[i] = img.transpose(2, 0, 1)
    return Dataset(images, labels)


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

def parse_idx(buf: bytes, expected_magic: int | None = None) -> np.ndarray:
    """Parse an unsigned-byte IDX buffer into an array of its declared shape."""
    if len(buf) < 4:
        raise IdxFormatError(f"truncated header at byte offset {len(buf)}: need 4 magic bytes")
    (magic,) = struct.unpack_from(">I", buf, 0)
    if magic >> 16 != 0 or (magic >> 8) & 0xFF != 0x08:
        raise IdxFormatError(f"bad magic 0x{magic:08x} at byte offset 0: expected unsigned-byte IDX (0x000008nn)")
    if expected_magic is not None and magic != expected_magic:
        raise IdxFormatError(f"bad magic 0x{magic:08x} at byte offset 0: expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    if ndim == 0:
        raise IdxFormatError("bad magic at byte offset 3: zero dimensions declared")
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise IdxFormatError(f"truncated header at byte offset {len(buf)}: need {header} bytes for {ndim} dims")
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) < header + count:
        raise IdxFormatError(f"truncated payload at byte offset {len(buf)}: dims {dims} need "
                             f"{count} bytes from offset {header}")
    if len(buf) > header + count:
        raise IdxFormatError(f"trailing data at byte offset {header + count}: "
                             f"{len(buf) - header - count} unexpected bytes")
    return np.frombuffer(buf, np.uint8, count, header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    head = struct.pack(">I", 0x0800 | arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(head + arr.tobytes())


def load_idx_pair(images_path, labels_path) -> Dataset:
    raw = Path(images_path).read_bytes()
    color = len(raw) >= 4 and struct.unpack_from(">I", raw, 0)[0] == IDX_COLOR_IMAGES_MAGIC
    imgs = parse_idx(raw, IDX_COLOR_IMAGES_MAGIC if color else IDX_IMAGES_MAGIC)
    labels = parse_idx(Path(labels_path).read_bytes(), IDX_LABELS_MAGIC)
    if len(imgs) != len(labels):
        raise IdxFormatError(f"image count {len(imgs)} does not match label count {len(labels)}")
    if not color:
        imgs = imgs[:, None]
    return Dataset((imgs / 255.0).astype(np.float32), labels.astype(np.int64))
