import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tiled_ensemble.tiling import (
    MergeBuffer,
    TileIndex,
    TilingError,
    compute_grid,
    tile,
    tile_pixel_span,
    untile,
    untile_image,
)


def brute_force_padded(dim, tile_size, stride):
    """Smallest canvas >= dim where tiles fit exactly and cover everything."""
    for size in itertools.count(max(dim, tile_size)):
        if (size - tile_size) % stride == 0:
            return size


def coverage_average(maps, grid):
    """Per-pixel sum and count over all spans, then divide."""
    total = np.zeros((grid.padded_h, grid.padded_w))
    count = np.zeros((grid.padded_h, grid.padded_w))
    for (i, j), m in sorted(maps, key=lambda p: tuple(p[0])):
        for a in range(grid.tile_h):
            for b in range(grid.tile_w):
                total[grid.stride_h * i + a, grid.stride_w * j + b] += m[a, b]
                count[grid.stride_h * i + a, grid.stride_w * j + b] += 1
    return total[: grid.image_h, : grid.image_w] / count[: grid.image_h, : grid.image_w]


class TestComputeGrid:
    def test_nine_overlapping_tiles(self):
        g = compute_grid(512, 512, 256, 256, 128, 128)
        assert (g.n_rows, g.n_cols, g.n_tiles) == (3, 3, 9)
        assert (g.padded_h, g.padded_w) == (512, 512)

    def test_single_tile(self):
        g = compute_grid(256, 256, 256, 256, 256, 256)
        assert (g.n_rows, g.n_cols, g.padded_h, g.padded_w) == (1, 1, 256, 256)

    def test_inexact_fit_pads(self):
        g = compute_grid(500, 500, 256, 256, 256, 256)
        assert (g.n_rows, g.n_cols) == (2, 2)
        assert (g.padded_h, g.padded_w) == (512, 512)

    @pytest.mark.parametrize("dim,t,s", [(d, t, s) for d in (1, 7, 31, 64, 100)
                                          for t in (1, 4, 16, 33) for s in (1, 2, 4, 16, 33) if s <= t])
    def test_padding_matches_brute_force(self, dim, t, s):
        g = compute_grid(dim, dim, t, t, s, s)
        assert g.padded_h == brute_force_padded(dim, t, s)
        assert g.n_rows == (g.padded_h - t) // s + 1

    @pytest.mark.parametrize("args", [(0, 10, 4, 4, 2, 2), (10, 10, 4, 4, 5, 2),
                                      (10, 10, 4, 4, 2, 0), (10, 10, 4, 0, 2, 2)])
    def test_rejects(self, args):
        with pytest.raises(TilingError):
            compute_grid(*args)

    def test_tile_bigger_than_image_pads(self):
        g = compute_grid(10, 10, 16, 16, 8, 8)
        assert (g.n_rows, g.padded_h) == (1, 16)


class TestSpan:
    grid = compute_grid(512, 512, 256, 256, 128, 128)

    def test_overlap_example(self):
        r00, c00 = tile_pixel_span(self.grid, TileIndex(0, 0))
        r01, c01 = tile_pixel_span(self.grid, TileIndex(0, 1))
        assert (r01, c01) == (range(0, 256), range(128, 384))
        overlap = sorted(set(c00) & set(c01))
        assert (overlap[0], overlap[-1] + 1) == (128, 256)
        assert (r00, c00) == (range(0, 256), range(0, 256))

    def test_last(self):
        assert tile_pixel_span(self.grid, TileIndex(2, 2)) == (range(256, 512), range(256, 512))

    def test_out_of_range(self):
        with pytest.raises(TilingError):
            tile_pixel_span(self.grid, TileIndex(3, 0))


class TestTile:
    def test_quadrants_round_trip(self, rng):
        img = rng.random((512, 512, 3))
        g = compute_grid(512, 512, 256, 256, 256, 256)
        tiles = tile(img, g)
        assert [tuple(ix) for ix, _ in tiles] == [(0, 0), (0, 1), (1, 0), (1, 1)]
        top = np.concatenate([tiles[0][1], tiles[1][1]], axis=1)
        bottom = np.concatenate([tiles[2][1], tiles[3][1]], axis=1)
        np.testing.assert_array_equal(np.concatenate([top, bottom], axis=0), img)

    def test_zero_padding(self, rng):
        img = rng.random((500, 500, 1)) + 0.1
        g = compute_grid(500, 500, 256, 256, 256, 256)
        br = tile(img, g)[-1][1]
        assert np.all(br[-12:, :, :] == 0) and np.all(br[:, -12:, :] == 0)
        assert np.all(br[:-12, :-12] > 0)

    def test_overlap_column(self, rng):
        img = rng.random((512, 512, 2))
        g = compute_grid(512, 512, 256, 256, 128, 128)
        t01 = dict(tile(img, g))[TileIndex(0, 1)]
        np.testing.assert_array_equal(t01[:, 0], img[:256, 128])

    def test_dim_mismatch(self, rng):
        g = compute_grid(64, 64, 32, 32, 32, 32)
        with pytest.raises(TilingError):
            tile(rng.random((60, 64, 1)), g)


class TestUntile:
    def test_non_overlapping_identity(self, rng):
        src = rng.random((64, 64))
        g = compute_grid(64, 64, 32, 32, 32, 32)
        maps = [(ix, t[:, :, 0]) for ix, t in tile(src, g)]
        np.testing.assert_array_equal(untile(maps, g), src)

    @pytest.mark.parametrize("stride", [32, 16, 8])
    def test_constant(self, stride):
        g = compute_grid(70, 50, 32, 32, stride, stride)
        out = untile([(ix, np.full((32, 32), 3.25)) for ix in g.indices()], g)
        assert out.shape == (70, 50)
        assert np.all(out == 3.25)

    def test_index_valued_tiles(self):
        g = compute_grid(512, 512, 256, 256, 128, 128)
        maps = [(ix, np.full((256, 256), float(k))) for k, ix in enumerate(g.indices())]
        out = untile(maps, g)
        assert out[0, 0] == 0.0
        assert out[0, 255] == 0.5
        assert out[255, 255] == 2.0
        np.testing.assert_array_equal(out, coverage_average(maps, g))

    def test_missing_and_duplicate(self):
        g = compute_grid(8, 8, 4, 4, 4, 4)
        m = np.zeros((4, 4))
        with pytest.raises(TilingError, match="missing"):
            untile([(TileIndex(0, 0), m)], g)
        with pytest.raises(TilingError, match="duplicate"):
            untile([(TileIndex(0, 0), m), (TileIndex(0, 0), m)], g)
        with pytest.raises(TilingError, match="shape"):
            untile([(TileIndex(0, 0), np.zeros((3, 4)))], g)

    def test_order_independence(self, rng):
        g = compute_grid(40, 36, 16, 12, 8, 4)
        maps = [(ix, rng.random((16, 12))) for ix in g.indices()]
        ref = untile(maps, g)
        for _ in range(10):
            perm = rng.permutation(len(maps))
            np.testing.assert_array_equal(untile([maps[k] for k in perm], g), ref)

    def test_interior_coverage_four(self):
        g = compute_grid(64, 64, 16, 16, 8, 8)
        buf = MergeBuffer(g)
        for ix in g.indices():
            buf.add(ix, np.zeros((16, 16)))
        count = buf._count
        assert count.min() >= 1
        assert np.all(count[8:-8, 8:-8] == 4)

    def test_padding_neutrality(self, rng):
        # tile maps that are span-restricted functions of the image
        img = rng.random((30, 30, 1))
        big = np.zeros((37, 41, 1))
        big[:30, :30] = img
        for src in (img, big):
            g = compute_grid(src.shape[0], src.shape[1], 8, 8, 4, 4)
            out = untile([(ix, t[:, :, 0] ** 2) for ix, t in tile(src, g)], g)
            if src is img:
                ref = out
            else:
                np.testing.assert_array_equal(out[:26, :26], ref[:26, :26])


@settings(max_examples=60, deadline=None)
@given(h=st.integers(1, 40), w=st.integers(1, 40), th=st.integers(1, 16), tw=st.integers(1, 16),
       fh=st.sampled_from([1, 2, 4]), fw=st.sampled_from([1, 2, 4]), seed=st.integers(0, 2**16))
def test_untile_matches_coverage_oracle(h, w, th, tw, fh, fw, seed):
    sh, sw = max(1, th // fh), max(1, tw // fw)
    g = compute_grid(h, w, th, tw, sh, sw)
    img = np.random.default_rng(seed).random((h, w, 1))
    maps = [(ix, t[:, :, 0]) for ix, t in tile(img, g)]
    np.testing.assert_array_equal(untile(maps, g), coverage_average(maps, g))
    if sh == th and sw == tw:
        np.testing.assert_array_equal(untile_image(tile(img, g), g), img)
