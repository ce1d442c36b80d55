"""Jigsaw transform: cut an image into a g x g grid and shuffle the tiles."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np


class GridError(ValueError):
    pass


class EmptyDomainError(ValueError):
    pass


@dataclass
class ImageSample:
    """A 3 x H x W float image with values in [0, 1]."""

    pixels: np.ndarray
    index: int = 0
    label: Optional[int] = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise ValueError(f"expected a 3 x H x W image, got {self.pixels.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]


@dataclass
class JigsawSample:
    source_index: int
    patches: List[np.ndarray]
    permutation: np.ndarray
    grid: int
    label: Optional[int] = field(default=None, compare=False)

    @property
    def m(self) -> int:
        return len(self.patches)


ImageLike = Union[ImageSample, np.ndarray]


def _pixels(image: ImageLike) -> np.ndarray:
    return image.pixels if isinstance(image, ImageSample) else np.asarray(image, dtype=np.float64)


def _check_grid(h: int, w: int, grid: int) -> None:
    if grid < 1 or h % grid or w % grid:
        raise GridError(f"image {h}x{w} is not divisible into a {grid}x{grid} grid (H={h}, W={w}, g={grid})")


def extract_patches(image: ImageLike, grid: int) -> List[np.ndarray]:
    """Row-major list of the g*g tiles, each 3 x H/g x W/g."""
    px = _pixels(image)
    _, h, w = px.shape
    _check_grid(h, w, grid)
    ph, pw = h // grid, w // grid
    return [px[:, r * ph:(r + 1) * ph, c * pw:(c + 1) * pw].copy() for r in range(grid) for c in range(grid)]


def sample_permutation(m: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform permutation of range(m) by Fisher-Yates."""
    if m < 1:
        raise EmptyDomainError("cannot permute an empty set")
    perm = np.arange(m)
    for i in range(m - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def apply_jigsaw(
    image: ImageLike,
    rng: Optional[np.random.Generator] = None,
    grid: int = 3,
    permutation: Optional[Sequence[int]] = None,
) -> JigsawSample:
    """Shuffle the grid tiles: ``patches[i] = tiles[permutation[i]]``."""
    tiles = extract_patches(image, grid)
    m = len(tiles)
    if permutation is None:
        if rng is None:
            raise ValueError("apply_jigsaw needs an rng or an explicit permutation")
        perm = sample_permutation(m, rng)
    else:
        perm = np.asarray(permutation, dtype=np.int64)
        if sorted(perm.tolist()) != list(range(m)):
            raise ValueError(f"{perm.tolist()} is not a permutation of range({m})")
    idx = image.index if isinstance(image, ImageSample) else 0
    label = image.label if isinstance(image, ImageSample) else None
    return JigsawSample(idx, [tiles[p] for p in perm], perm, grid, label)


def reassemble(sample: JigsawSample) -> ImageSample:
    """Invert :func:`apply_jigsaw` exactly."""
    g = sample.grid
    if sample.m != g * g:
        raise ValueError(f"expected {g * g} patches, got {sample.m}")
    shape = sample.patches[0].shape
    if any(p.shape != shape for p in sample.patches):
        raise ValueError(f"inconsistent patch shapes: {[p.shape for p in sample.patches]}")
    c, ph, pw = shape
    out = np.empty((c, ph * g, pw * g), dtype=np.float64)
    for slot, tile_id in enumerate(sample.permutation):
        r, col = divmod(int(tile_id), g)
        out[:, r * ph:(r + 1) * ph, col * pw:(col + 1) * pw] = sample.patches[slot]
    return ImageSample(out, sample.source_index, sample.label)


def jigsaw_batch(
    images: np.ndarray, rng: np.random.Generator, grid: int = 3
) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized transform of a B x 3 x H x W batch.

    Returns patches as B x m x 3 x H/g x W/g and the B x m permutations.
    """
    b, c, h, w = images.shape
    _check_grid(h, w, grid)
    ph, pw = h // grid, w // grid
    m = grid * grid
    tiles = images.reshape(b, c, grid, ph, grid, pw).transpose(0, 2, 4, 1, 3, 5).reshape(b, m, c, ph, pw)
    perms = np.stack([sample_permutation(m, rng) for _ in range(b)])
    return np.take_along_axis(tiles, perms[:, :, None, None, None], axis=1), perms
