"""Overlapping block segmentation, aggregation, and training-block sampling."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .image import YUV420, DimensionError, Frame, convert_420_to_444, frame_to_tensor

TILE_SIZE = 96
TILE_OVERLAP = 8


class CoverageError(RuntimeError):
    """A frame pixel is not covered by any tile."""


def axis_origins(length: int, tile: int, overlap: int) -> List[int]:
    stride = tile - overlap
    if stride <= 0:
        raise ValueError(f"overlap {overlap} must be smaller than tile {tile}")
    if length < tile:
        raise DimensionError(f"dimension {length} smaller than tile size {tile}")
    origins = list(range(0, length - tile + 1, stride))
    if origins[-1] + tile < length:
        origins.append(length - tile)
    return origins


@dataclass(frozen=True)
class TileGrid:
    frame_width: int
    frame_height: int
    tile_size: int
    overlap: int
    origins: Tuple[Tuple[int, int], ...] = field(default=())

    @classmethod
    def for_frame(cls, width, height, tile_size=TILE_SIZE, overlap=TILE_OVERLAP):
        xs = axis_origins(width, tile_size, overlap)
        ys = axis_origins(height, tile_size, overlap)
        return cls(width, height, tile_size, overlap,
                   tuple((x, y) for y in ys for x in xs))

    @property
    def stride(self) -> int:
        return self.tile_size - self.overlap

    def halved(self) -> "TileGrid":
        """The matching grid on the 2x down-sampled frame."""
        vals = [self.frame_width, self.frame_height, self.tile_size, self.overlap]
        vals += [c for o in self.origins for c in o]
        if any(v % 2 for v in vals):
            raise DimensionError("grid has odd coordinates and cannot be halved")
        return TileGrid(self.frame_width // 2, self.frame_height // 2,
                        self.tile_size // 2, self.overlap // 2,
                        tuple((x // 2, y // 2) for x, y in self.origins))

    def permuted(self, order: Sequence[int]) -> "TileGrid":
        return TileGrid(self.frame_width, self.frame_height, self.tile_size,
                        self.overlap, tuple(self.origins[i] for i in order))

    def coverage(self) -> np.ndarray:
        counts = np.zeros((self.frame_height, self.frame_width), dtype=np.int64)
        s = self.tile_size
        for x, y in self.origins:
            counts[y:y + s, x:x + s] += 1
        return counts


def extract_tiles(t: np.ndarray, tile_size=TILE_SIZE, overlap=TILE_OVERLAP):
    """Cut a (C, H, W) tensor into overlapping square tiles.

    The last tile along each axis is pulled back so it ends on the frame edge.
    """
    t = np.asarray(t)
    if t.ndim != 3:
        raise DimensionError(f"expected a (C, H, W) tensor, got shape {t.shape}")
    _, h, w = t.shape
    grid = TileGrid.for_frame(w, h, tile_size, overlap)
    s = tile_size
    tiles = [t[:, y:y + s, x:x + s].copy() for x, y in grid.origins]
    return tiles, grid


def aggregate_tiles(tiles: Sequence[np.ndarray], grid: TileGrid) -> np.ndarray:
    """Average overlapping tiles back into one (C, H, W) tensor.

    ``tiles[i]`` belongs at ``grid.origins[i]``. Contributions are summed in
    float64 in raster order of their origins, so any joint permutation of
    tiles and origins gives a bit-identical result.
    """
    if len(tiles) != len(grid.origins):
        raise ValueError(f"{len(tiles)} tiles for {len(grid.origins)} grid origins")
    if not tiles:
        raise ValueError("no tiles to aggregate")
    s = grid.tile_size
    c = tiles[0].shape[0]
    acc = np.zeros((c, grid.frame_height, grid.frame_width))
    counts = np.zeros((grid.frame_height, grid.frame_width))
    order = sorted(range(len(tiles)), key=lambda i: grid.origins[i][::-1])
    for i in order:
        x, y = grid.origins[i]
        tile = tiles[i]
        if tile.shape != (c, s, s):
            raise DimensionError(f"tile {i} has shape {tile.shape}, expected {(c, s, s)}")
        acc[:, y:y + s, x:x + s] += tile
        counts[y:y + s, x:x + s] += 1
    if (counts == 0).any():
        raise CoverageError("tile grid leaves pixels uncovered")
    out = acc / counts
    return out.astype(np.result_type(tiles[0].dtype, np.float32))


def extract_training_blocks(frames: Sequence[Frame], block=TILE_SIZE, count=1,
                            seed=0) -> List[np.ndarray]:
    """Sample ``count`` random blocks, each rotated by a random multiple of 90 degrees."""
    if not frames:
        raise ValueError("no frames to sample training blocks from")
    tensors = []
    for f in frames:
        if f.width < block or f.height < block:
            raise DimensionError(
                f"frame {f.width}x{f.height} smaller than block {block}")
        tensors.append(frame_to_tensor(convert_420_to_444(f) if f.format == YUV420 else f))
    rng = np.random.default_rng(seed)
    blocks = []
    for _ in range(count):
        t = tensors[rng.integers(len(tensors))]
        _, h, w = t.shape
        y = int(rng.integers(h - block + 1))
        x = int(rng.integers(w - block + 1))
        k = int(rng.integers(4))
        b = np.rot90(t[:, y:y + block, x:x + block], k, axes=(1, 2))
        blocks.append(np.ascontiguousarray(b))
    return blocks
