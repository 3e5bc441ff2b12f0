"""Synthetic two-class segmentation data and the on-disk dataset layout.

Every sample is a pure function of ``(seed, index, size)``.  The draw order
below is part of the format so other implementations can reproduce the bytes:

1. state ``stream_key(seed, index)``; all uniforms are ``random()`` (53-bit).
2. background: ``3 * G * G`` uniforms (channel-major, then row, then column)
   form a coarse ``G x G`` grid per channel, ``G = 5``, mapped to
   ``0.15 + 0.7 * u``; the grid is bilinearly resized to ``size x size`` with
   aligned corners.  Then ``3 * size * size`` uniforms add texture
   ``0.08 * (u - 0.5)``.
3. shapes: repeat until the foreground fraction lies in ``(0.02, 0.6)``:
   draw ``n = 1 + below(3)`` shapes, each as ``kind = below(2)`` (0 rectangle,
   1 ellipse), centre ``cy, cx = size * uniform(0.15, 0.85)`` (y first),
   half extents ``ry, rx = size * uniform(0.08, 0.3)``, then a colour of
   three uniforms redrawn until its mean absolute difference from the
   background mean colour is at least 0.3.
4. render: 4x4 sub-pixel coverage per shape, composited in draw order;
   the mask is 1 where any shape covers the pixel centre.
5. image values are clipped to [0, 1] and stored as float32.
"""
from __future__ import annotations

import os
import re
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .exceptions import ConfigError, DataError, FormatError
from .rng import SplitMix64, stream_key
from .tensorcore import read_btf, save_btf

GRID = 5
SUPERSAMPLE = 4
FG_RANGE = (0.02, 0.6)


@dataclass(frozen=True)
class SyntheticSample:
    image: np.ndarray     # (3, H, W) float32 in [0, 1]
    mask: np.ndarray      # (H, W) int32 in {0, 1}

    @property
    def foreground(self) -> float:
        return float(self.mask.mean())


def _bilinear(grid: np.ndarray, size: int) -> np.ndarray:
    g = grid.shape[-1]
    t = np.arange(size, dtype=np.float64) * (g - 1) / (size - 1)
    i0 = np.minimum(np.floor(t).astype(np.int64), g - 2)
    f = t - i0
    rows = grid[..., i0, :] * (1 - f)[:, None] + grid[..., i0 + 1, :] * f[:, None]
    return rows[..., i0] * (1 - f) + rows[..., i0 + 1] * f


def _inside(kind: int, cy, cx, ry, rx, yy, xx) -> np.ndarray:
    if kind == 0:
        return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _draw_shapes(rng: SplitMix64, size: int, bg_mean: np.ndarray):
    shapes = []
    for _ in range(1 + rng.below(3)):
        kind = rng.below(2)
        cy, cx = size * rng.uniform(0.15, 0.85), size * rng.uniform(0.15, 0.85)
        ry, rx = size * rng.uniform(0.08, 0.3), size * rng.uniform(0.08, 0.3)
        while True:
            colour = rng.random(3)
            if np.abs(colour - bg_mean).mean() >= 0.3:
                break
        shapes.append((kind, cy, cx, ry, rx, colour))
    return shapes


def make_sample(seed: int, index: int, size: int) -> SyntheticSample:
    if size < 16 or size % 16:
        raise ConfigError(f"size must be a positive multiple of 16, got {size}")
    rng = SplitMix64(stream_key(seed, index))
    grid = 0.15 + 0.7 * rng.random(3 * GRID * GRID).reshape(3, GRID, GRID)
    image = _bilinear(grid, size) + 0.08 * (rng.random(3 * size * size).reshape(3, size, size) - 0.5)
    bg_mean = image.mean(axis=(1, 2))

    centre = np.arange(size, dtype=np.float64) + 0.5
    yy, xx = centre[:, None], centre[None, :]
    sub = (np.arange(SUPERSAMPLE, dtype=np.float64) + 0.5) / SUPERSAMPLE
    syy = (np.arange(size)[:, None] + sub[None, :]).reshape(-1)[:, None]
    sxx = (np.arange(size)[:, None] + sub[None, :]).reshape(-1)[None, :]
    while True:
        shapes = _draw_shapes(rng, size, bg_mean)
        mask = np.zeros((size, size), dtype=bool)
        for kind, cy, cx, ry, rx, _ in shapes:
            mask |= _inside(kind, cy, cx, ry, rx, yy, xx)
        if FG_RANGE[0] < mask.mean() < FG_RANGE[1]:
            break
    for kind, cy, cx, ry, rx, colour in shapes:
        cover = _inside(kind, cy, cx, ry, rx, syy, sxx).astype(np.float64)
        cover = cover.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(1, 3))
        image = image * (1 - cover) + colour[:, None, None] * cover
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return SyntheticSample(image, mask.astype(np.int32))


def gen_dataset(seed: int, n: int, size: int, start: int = 0) -> List[SyntheticSample]:
    if n < 0:
        raise ConfigError("n must be non-negative")
    return [make_sample(seed, start + i, size) for i in range(n)]


def stack(samples) -> Tuple[np.ndarray, np.ndarray]:
    """``(N, 3, H, W)`` images and ``(N, H, W)`` masks."""
    if not samples:
        raise DataError("empty dataset")
    return np.stack([s.image for s in samples]), np.stack([s.mask for s in samples])


# -- directory layout --------------------------------------------------------

_NAME = re.compile(r"^(\d{5})\.(img|mask)\.btf$")


def write_dataset(samples, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    for i, s in enumerate(samples):
        save_btf(os.path.join(out_dir, f"{i:05d}.img.btf"), s.image)
        save_btf(os.path.join(out_dir, f"{i:05d}.mask.btf"), s.mask)


def read_dataset(path) -> List[SyntheticSample]:
    """Load ``NNNNN.img.btf`` / ``NNNNN.mask.btf`` pairs; indices must be contiguous from 0."""
    if not os.path.isdir(path):
        raise DataError(f"not a dataset directory: {path}")
    found = {}
    for name in os.listdir(path):
        m = _NAME.match(name)
        if m:
            found.setdefault(int(m.group(1)), {})[m.group(2)] = os.path.join(path, name)
    if not found:
        raise DataError(f"no samples in {path}")
    if sorted(found) != list(range(len(found))):
        raise DataError("sample indices must run 00000, 00001, ... without gaps")
    samples = []
    for i in range(len(found)):
        pair = found[i]
        if set(pair) != {"img", "mask"}:
            raise DataError(f"sample {i:05d} is missing its image or mask")
        try:
            image, mask = read_btf(pair["img"]), read_btf(pair["mask"])
        except FormatError as exc:
            raise DataError(f"sample {i:05d}: {exc}") from exc
        if not isinstance(image, np.ndarray) or image.ndim != 3 or image.dtype != np.float32:
            raise DataError(f"sample {i:05d}: image must be a float (C, H, W) tensor")
        if not isinstance(mask, np.ndarray) or mask.shape != image.shape[1:] or mask.dtype.kind != "i":
            raise DataError(f"sample {i:05d}: mask must be an int (H, W) tensor matching the image")
        samples.append(SyntheticSample(image, mask))
    return samples
