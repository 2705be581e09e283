"""Tile-grid geometry, tiling of images and overlap-averaged untiling.

Images are ``(H, W, C)`` float arrays and scalar maps are ``(H, W)`` arrays.
Tiles are laid out on a zero-padded canvas; tile ``(i, j)`` covers rows
``[stride_h*i, stride_h*i + tile_h)`` and columns
``[stride_w*j, stride_w*j + tile_w)`` of that canvas.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Iterator, NamedTuple

import numpy as np

from .memory import BufferAccountant, ensure


class TilingError(ValueError):
    pass


class TileIndex(NamedTuple):
    i: int
    j: int

    @property
    def name(self) -> str:
        return f"r{self.i}_c{self.j}"


@dataclass(frozen=True)
class TileGrid:
    image_h: int
    image_w: int
    tile_h: int
    tile_w: int
    stride_h: int
    stride_w: int
    n_rows: int
    n_cols: int
    padded_h: int
    padded_w: int

    @property
    def n_tiles(self) -> int:
        return self.n_rows * self.n_cols

    @property
    def shape(self) -> tuple[int, int]:
        return self.n_rows, self.n_cols

    def indices(self) -> list[TileIndex]:
        """All tile indices in row-major order."""
        return [TileIndex(i, j) for i in range(self.n_rows) for j in range(self.n_cols)]

    @property
    def overlapping(self) -> bool:
        return self.stride_h < self.tile_h or self.stride_w < self.tile_w


def _axis(dim: int, tile: int, stride: int, name: str) -> tuple[int, int]:
    if dim <= 0 or tile <= 0 or stride <= 0:
        raise TilingError(f"{name}: image size, tile size and stride must be positive")
    if stride > tile:
        raise TilingError(
            f"{name}: stride {stride} > tile size {tile} would leave uncovered gaps"
        )
    n = max(0, math.ceil((dim - tile) / stride)) + 1
    return n, (n - 1) * stride + tile


def compute_grid(image_h: int, image_w: int, tile_h: int, tile_w: int,
                 stride_h: int, stride_w: int) -> TileGrid:
    """Smallest zero-padded canvas fully covered by the tile grid.

    >>> g = compute_grid(512, 512, 256, 256, 128, 128)
    >>> g.n_rows, g.n_cols, g.padded_h
    (3, 3, 512)
    """
    n_rows, padded_h = _axis(image_h, tile_h, stride_h, "height")
    n_cols, padded_w = _axis(image_w, tile_w, stride_w, "width")
    return TileGrid(image_h, image_w, tile_h, tile_w, stride_h, stride_w,
                    n_rows, n_cols, padded_h, padded_w)


def tile_pixel_span(grid: TileGrid, idx: TileIndex) -> tuple[range, range]:
    i, j = idx
    if not (0 <= i < grid.n_rows and 0 <= j < grid.n_cols):
        raise TilingError(f"tile index {tuple(idx)} outside {grid.n_rows}x{grid.n_cols} grid")
    r0, c0 = grid.stride_h * i, grid.stride_w * j
    return range(r0, r0 + grid.tile_h), range(c0, c0 + grid.tile_w)


def _as_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.ndim != 3:
        raise TilingError(f"expected (H, W, C) image, got shape {image.shape}")
    return image


def _check_dims(image: np.ndarray, grid: TileGrid) -> None:
    if image.shape[:2] != (grid.image_h, grid.image_w):
        raise TilingError(
            f"image is {image.shape[0]}x{image.shape[1]} but grid expects "
            f"{grid.image_h}x{grid.image_w}"
        )


def extract_tile(image: np.ndarray, grid: TileGrid, idx: TileIndex) -> np.ndarray:
    """Copy one tile out of ``image``; canvas pixels beyond the image are zero."""
    image = _as_image(image)
    _check_dims(image, grid)
    rows, cols = tile_pixel_span(grid, idx)
    out = np.zeros((grid.tile_h, grid.tile_w, image.shape[2]), dtype=np.float64)
    r1 = min(rows.stop, grid.image_h)
    c1 = min(cols.stop, grid.image_w)
    if r1 > rows.start and c1 > cols.start:
        out[: r1 - rows.start, : c1 - cols.start] = image[rows.start:r1, cols.start:c1]
    return out


def iter_tiles(image: np.ndarray, grid: TileGrid) -> Iterator[tuple[TileIndex, np.ndarray]]:
    """Lazily yield ``(index, tile)`` in row-major order."""
    image = _as_image(image)
    _check_dims(image, grid)
    for idx in grid.indices():
        yield idx, extract_tile(image, grid, idx)


def tile(image: np.ndarray, grid: TileGrid) -> list[tuple[TileIndex, np.ndarray]]:
    return list(iter_tiles(image, grid))


class MergeBuffer:
    """Accumulates tile maps into an image-sized mean.

    Tiles may arrive in any order, but they are summed in row-major order:
    out-of-order arrivals wait in a reorder queue until their predecessors
    have been added. This makes the result bit-identical for every
    completion schedule. With in-order arrival the queue stays empty.
    """

    def __init__(self, grid: TileGrid, accountant: BufferAccountant | None = None):
        self.grid = grid
        self._acc = ensure(accountant)
        self._order = grid.indices()
        self._next = 0
        self._pending: dict[TileIndex, tuple[np.ndarray, object]] = {}
        self._seen: set[TileIndex] = set()
        self._sum = np.zeros((grid.padded_h, grid.padded_w), dtype=np.float64)
        self._count = np.zeros((grid.padded_h, grid.padded_w), dtype=np.float64)
        self._handles = [self._acc.register("merge", self._sum),
                         self._acc.register("merge", self._count)]

    def add(self, idx: TileIndex, tile_map: np.ndarray) -> None:
        idx = TileIndex(*idx)
        tile_pixel_span(self.grid, idx)
        if idx in self._seen:
            raise TilingError(f"duplicate tile index {tuple(idx)}")
        tile_map = np.asarray(tile_map, dtype=np.float64)
        if tile_map.shape != (self.grid.tile_h, self.grid.tile_w):
            raise TilingError(
                f"tile map {tuple(idx)} has shape {tile_map.shape}, expected "
                f"{(self.grid.tile_h, self.grid.tile_w)}"
            )
        self._seen.add(idx)
        if idx != self._order[self._next]:
            # held until its row-major predecessors arrive
            copy = tile_map.copy()
            self._pending[idx] = (copy, self._acc.register("merge", copy))
            return
        self._accumulate(idx, tile_map)
        self._next += 1
        while self._next < len(self._order) and self._order[self._next] in self._pending:
            nxt = self._order[self._next]
            held, h = self._pending.pop(nxt)
            self._accumulate(nxt, held)
            self._acc.release(h)
            self._next += 1

    def _accumulate(self, idx: TileIndex, tile_map: np.ndarray) -> None:
        rows, cols = tile_pixel_span(self.grid, idx)
        self._sum[rows.start:rows.stop, cols.start:cols.stop] += tile_map
        self._count[rows.start:rows.stop, cols.start:cols.stop] += 1.0

    @property
    def complete(self) -> bool:
        return self._next == len(self._order)

    def result(self) -> np.ndarray:
        if not self.complete:
            missing = [tuple(ix) for ix in self._order if ix not in self._seen]
            raise TilingError(f"missing tile maps for indices {missing}")
        g = self.grid
        return self._sum[: g.image_h, : g.image_w] / self._count[: g.image_h, : g.image_w]

    def close(self) -> None:
        for _, h in self._pending.values():
            self._acc.release(h)
        self._pending.clear()
        for h in self._handles:
            self._acc.release(h)
        self._handles = []


def untile(maps: Iterable[tuple[TileIndex, np.ndarray]], grid: TileGrid) -> np.ndarray:
    """Reassemble tile maps into an image-sized map, averaging overlaps."""
    buf = MergeBuffer(grid)
    for idx, m in maps:
        buf.add(idx, m)
    try:
        return buf.result()
    finally:
        buf.close()


def untile_image(tiles: Iterable[tuple[TileIndex, np.ndarray]], grid: TileGrid) -> np.ndarray:
    """Per-channel :func:`untile` for ``(tile_h, tile_w, C)`` tiles."""
    tiles = list(tiles)
    if not tiles:
        raise TilingError("no tiles given")
    channels = np.asarray(tiles[0][1]).shape[2]
    planes = [untile(((ix, np.asarray(t)[:, :, c]) for ix, t in tiles), grid)
              for c in range(channels)]
    return np.stack(planes, axis=2)
