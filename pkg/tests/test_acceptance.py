"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line.

The lines are printed in the terminal summary (see ``conftest.py``); run
``pytest tests/test_acceptance.py -v`` to see them.
"""

import dataclasses
import filecmp
import time
from contextlib import contextmanager
from fractions import Fraction

import numpy as np
from PIL import Image

from oracles import (
    aupro_sweep,
    auroc_pairs,
    coverage_average_2d,
    dense_gaussian_reference,
    seam_band_oracle,
)
from tiled_ensemble import pipeline
from tiled_ensemble.config import config_from_dict, preset
from tiled_ensemble.dataio import SyntheticSpec, generate_synthetic, load_mask, resize, scan_dataset, synthesize
from tiled_ensemble.ensemble import (
    DEFAULT_BAND_FRACTION,
    EnsembleModel,
    ScorerConfig,
    SmoothingConfig,
    predict,
    smooth_seams,
    train_ensemble,
)
from tiled_ensemble.features import FeatureConfig
from tiled_ensemble.memory import BufferAccountant
from tiled_ensemble.metrics import anomaly_size_stats, aupro, auroc, parse_report
from tiled_ensemble.scorers import TilePrediction, bare_predict
from tiled_ensemble.tiling import TileIndex, compute_grid, tile, tile_pixel_span, untile

RESULTS: dict[int, str] = {}


@contextmanager
def criterion(number, title):
    info = {"detail": ""}
    start = time.perf_counter()
    ok = False
    try:
        yield info
        ok = True
    finally:
        elapsed = time.perf_counter() - start
        status = "PASS" if ok else "FAIL"
        RESULTS[number] = f"criterion {number:2d} {status}: {title} ({elapsed:.1f}s) {info['detail']}".rstrip()


# --------------------------------------------------------------------------- 1


def test_c01_tiling_oracle():
    with criterion(1, "untile(tile(x)) vs coverage averaging, 200 instances") as info:
        start = time.perf_counter()
        r = np.random.default_rng(101)
        exact_checked = 0
        for _ in range(200):
            th, tw = (int(v) for v in r.choice([4, 8, 12, 16, 20, 24, 32], size=2))
            sh, sw = (int(t // int(r.choice([1, 2, 4]))) for t in (th, tw))
            h, w = (int(v) for v in r.integers(max(th, tw) // 2 + 1, 65, size=2))
            img = r.random((h, w))
            grid = compute_grid(h, w, th, tw, sh, sw)
            maps = [(ix, t[:, :, 0]) for ix, t in tile(img, grid)]
            r.shuffle(maps)
            merged = untile(maps, grid)
            assert np.array_equal(merged, coverage_average_2d(img, (th, tw), (sh, sw)))
            if sh == th and sw == tw:
                assert np.array_equal(merged, img)
                exact_checked += 1
        elapsed = time.perf_counter() - start
        info["detail"] = f"[{exact_checked} non-overlapping exact]"
        assert exact_checked > 0
        assert elapsed < 10.0


# --------------------------------------------------------------------------- 2


def test_c02_reference_geometry():
    with criterion(2, "512/256/128 geometry and presets"):
        g = compute_grid(512, 512, 256, 256, 128, 128)
        assert (g.n_rows, g.n_cols, g.n_tiles) == (3, 3, 9)
        _, c00 = tile_pixel_span(g, TileIndex(0, 0))
        _, c01 = tile_pixel_span(g, TileIndex(0, 1))
        shared = sorted(set(c00) & set(c01))
        assert (shared[0], shared[-1] + 1) == (128, 256)
        for name, tiles in (("ENS4", 4), ("ENS9", 9), ("SM256", 1), ("SM512", 1), ("ST4", 4), ("ST9", 9)):
            s = preset(name)
            grid = compute_grid(*s.resolution, *s.tile, *s.stride)
            assert grid.n_tiles == tiles
            if name.startswith("SM"):
                assert grid.shape == (1, 1)


# --------------------------------------------------------------------------- 3


def test_c03_degenerate_grid():
    with criterion(3, "1x1 grid equals bare scorer, 20 images per kind"):
        r = np.random.default_rng(3)
        feats = FeatureConfig(cell_size=8, channels=3)
        grid = compute_grid(32, 48, 32, 48, 32, 48)
        train = [r.random((32, 48, 3)) for _ in range(6)]
        for kind in ("gaussian", "knn"):
            ens, _ = train_ensemble(train, grid, scorer=ScorerConfig(kind=kind, features=feats),
                                    compute_stats=False)
            model = ens.models[TileIndex(0, 0)]
            for _ in range(20):
                im = r.random((32, 48, 3))
                p = predict(ens, im, smoothing=SmoothingConfig(enabled=False))
                ref = bare_predict(model, im)
                assert np.array_equal(p.map, ref.map)
                assert p.score == ref.score


# --------------------------------------------------------------------------- 4


def test_c04_metric_oracles():
    with criterion(4, "AUROC x500 vs pair counting, AUPRO x100 vs threshold sweep"):
        r = np.random.default_rng(4)
        for _ in range(500):
            n = int(r.integers(2, 65))
            labels = r.integers(0, 2, n)
            labels[:2] = [0, 1]
            scores = np.round(r.random(n), int(r.integers(1, 4)))
            assert abs(auroc(scores, labels) - auroc_pairs(scores, labels)) <= 1e-12

        g = np.zeros((4, 4))
        g[0, :] = 1
        m = np.full((4, 4), 0.5)
        m[0] = [1, 1, 0, 0]
        assert aupro([m], [g], 0.3) == 0.5 == aupro_sweep([m], [g], 0.3)
        for _ in range(99):
            k = int(r.integers(1, 4))
            maps, masks = [], []
            for _ in range(k):
                h, w = (int(v) for v in r.integers(2, 33, size=2))
                mask = r.random((h, w)) < r.uniform(0.02, 0.3)
                maps.append(np.round(r.random((h, w)) + 0.4 * mask, int(r.integers(1, 4))))
                masks.append(mask)
            masks[0].flat[0] = True
            masks[0].flat[-1] = False
            lim = float(r.choice([0.05, 0.1, 0.3, 1.0]))
            assert abs(aupro(maps, masks, lim) - aupro_sweep(maps, masks, lim)) <= 1e-9

        gt = np.zeros((16, 16))
        gt[2:5, 3:9] = 1
        gt[10:14, 10:12] = 1
        assert aupro([gt.copy()], [gt]) == 1.0 == aupro_sweep([gt.copy()], [gt], 0.3)


# --------------------------------------------------------------------------- 5


def _peak_model_working(setup_name, image, train):
    s = preset(setup_name, 64)
    grid = compute_grid(*s.resolution, *s.tile, *s.stride)
    feats = FeatureConfig(cell_size=8, orientation_bins=10, channels=3)
    assert feats.dim == 16
    ens, _ = train_ensemble([resize(t, *s.resolution) for t in train], grid, s.mode,
                            ScorerConfig("gaussian", feats), compute_stats=False)
    acc = BufferAccountant(audit=True)
    predict(ens, resize(image, *s.resolution), accountant=acc)
    assert acc.current == 0
    return acc.peak_excluding("merge"), acc.peak_by_tag["merge"]


def test_c05_memory_bound():
    with criterion(5, "ENS4 peak <= 1.25x SM-tile, SM-full >= 3x ENS4") as info:
        start = time.perf_counter()
        r = np.random.default_rng(5)
        train = [r.random((128, 128, 3)) for _ in range(4)]
        image = r.random((128, 128, 3))
        ens4, merge4 = _peak_model_working("ENS4", image, train)
        sm_tile, _ = _peak_model_working("SM256", image, train)
        sm_full, _ = _peak_model_working("SM512", image, train)
        assert _peak_model_working("ENS4", image, train) == (ens4, merge4)
        info["detail"] = (f"[ENS4 {ens4} B, SM-tile {sm_tile} B, SM-full {sm_full} B, "
                          f"ratios {ens4 / sm_tile:.3f} / {sm_full / ens4:.3f}; merge buffer {merge4} B]")
        assert ens4 <= 1.25 * sm_tile
        assert sm_full >= 3.0 * ens4
        assert time.perf_counter() - start < 30.0


# --------------------------------------------------------------------------- 6


SMALL_ANOMALY_EPSILON = 1e-3


def _small_anomaly_run(seed, kind):
    d = synthesize(SyntheticSpec(seed=seed, image_size=128, train_count=60, test_normal=20, test_anomalous=20))
    feats = FeatureConfig(cell_size=8, channels=3)
    scorer = ScorerConfig(kind, feats, epsilon=SMALL_ANOMALY_EPSILON, coreset_ratio=0.1)
    ens_grid = compute_grid(128, 128, 80, 80, 48, 48)
    assert ens_grid.shape == (2, 2) and ens_grid.overlapping
    ens, _ = train_ensemble(d.train, ens_grid, scorer=scorer, compute_stats=False)
    a_ens = auroc([predict(ens, im).score for im in d.test], d.labels)

    half = lambda ims: [resize(im, 64, 64) for im in ims]
    sm, _ = train_ensemble(half(d.train), compute_grid(64, 64, 64, 64, 64, 64), scorer=scorer,
                           compute_stats=False)
    a_sm = auroc([predict(sm, im).score for im in half(d.test)], d.labels)
    ratio = anomaly_size_stats([m for m, l in zip(d.masks, d.labels) if l])
    return a_ens, a_sm, ratio


def test_c06_small_anomaly_trend():
    with criterion(6, "ENS full-res beats SM half-res by >= 0.05 AUROC (median of 5 seeds)") as info:
        start = time.perf_counter()
        details = []
        for kind in ("gaussian", "knn"):
            runs = np.array([_small_anomaly_run(seed, kind) for seed in range(5)])
            diffs = runs[:, 0] - runs[:, 1]
            assert np.all((runs[:, 2] >= 0.0005) & (runs[:, 2] <= 0.002))
            details.append(f"{kind}: ENS {np.median(runs[:, 0]):.3f} SM {np.median(runs[:, 1]):.3f} "
                           f"median diff {np.median(diffs):+.3f}")
            info["detail"] = "[" + "; ".join(details) + "]"
            assert np.median(diffs) >= 0.05
            assert np.median(runs[:, 0]) - np.median(runs[:, 1]) >= 0.05
        assert time.perf_counter() - start < 300.0


# --------------------------------------------------------------------------- 7


class StubModel:
    kind = "stub"
    nbytes = 0

    def __init__(self, values):
        self.values = values

    def predict(self, tile_, accountant=None):
        return TilePrediction(self.values.copy(), float(self.values.max()))


def test_c07_merge_semantics():
    with criterion(7, "avg/max merge exact on stubs; 50 schedules invariant"):
        r = np.random.default_rng(7)
        grid = compute_grid(40, 40, 16, 16, 12, 12)
        maps = {ix: r.random((16, 16)) for ix in grid.indices()}
        ens = EnsembleModel(grid, "per-location", {ix: StubModel(m) for ix, m in maps.items()}, ScorerConfig())
        tile_scores = [float(maps[ix].max()) for ix in grid.indices()]
        exp_avg = float(Fraction(sum(Fraction(s) for s in tile_scores)) / len(tile_scores))

        canvas_sum = np.zeros((grid.padded_h, grid.padded_w))
        canvas_cnt = np.zeros_like(canvas_sum)
        for ix in grid.indices():
            r0, c0 = ix.i * 12, ix.j * 12
            canvas_sum[r0:r0 + 16, c0:c0 + 16] += maps[ix]
            canvas_cnt[r0:r0 + 16, c0:c0 + 16] += 1
        exp_map = canvas_sum[:40, :40] / canvas_cnt[:40, :40]

        off = SmoothingConfig(enabled=False)
        base = predict(ens, np.zeros((40, 40, 1)), merge="avg", smoothing=off)
        assert base.score == exp_avg
        assert np.array_equal(base.map, exp_map)
        assert predict(ens, np.zeros((40, 40, 1)), merge="max", smoothing=off).score == max(tile_scores)

        smoothed = predict(ens, np.zeros((40, 40, 1)))
        for _ in range(50):
            order = list(grid.indices())
            r.shuffle(order)
            p = predict(ens, np.zeros((40, 40, 1)), order=order)
            assert np.array_equal(p.map, smoothed.map)
            assert p.score == smoothed.score
            assert np.array_equal(p.tile_scores, smoothed.tile_scores)
        threaded = predict(ens, np.zeros((40, 40, 1)), tile_workers=4)
        assert np.array_equal(threaded.map, smoothed.map)


# --------------------------------------------------------------------------- 8


def test_c08_seam_smoothing():
    with criterion(8, "seam band smoothing vs dense convolution"):
        assert DEFAULT_BAND_FRACTION == 0.10
        assert SmoothingConfig().band_fraction == 0.10
        r = np.random.default_rng(8)
        for (h, w, t, s) in ((64, 64, 32, 32), (64, 64, 32, 16), (70, 58, 20, 10), (96, 96, 40, 40)):
            grid = compute_grid(h, w, t, t, s, s)
            m = r.random((h, w))
            out = smooth_seams(m, grid)
            band = seam_band_oracle(h, w, (t, t), (s, s), 0.10)
            assert band.any()
            assert np.array_equal(out[~band], m[~band])
            sigma = int(0.10 * t + 0.5) / 4
            ref = dense_gaussian_reference(m, sigma)
            assert np.max(np.abs(out[band] - ref[band])) <= 1e-9
            const = np.full((h, w), 0.731)
            assert np.array_equal(smooth_seams(const, grid), const)


# --------------------------------------------------------------------------- 9


def _tree(root):
    return sorted(p.relative_to(root).as_posix() for p in root.rglob("*") if p.is_file())


def test_c09_determinism(tmp_path):
    with criterion(9, "byte-identical artifacts across runs and workers {1, 4}"):
        base = config_from_dict({
            "seed": 11,
            "synthetic": {"image_size": 64, "train_count": 8, "test_normal": 4, "test_anomalous": 4,
                          "anomaly_area": [4, 12]},
            "setup": {"preset": "ENS9", "preset_tile": 32},
            "scorer": {"kind": "knn", "cell_size": 4, "coreset_ratio": 0.2},
        })
        dirs = []
        for run, workers in enumerate((1, 1, 4)):
            cfg = dataclasses.replace(base, workers=workers)
            out = tmp_path / f"run{run}"
            pipeline.run_train(cfg, out)
            pipeline.run_eval(cfg, out / "ensemble", out)
            dirs.append(out)
        first = dirs[0]
        files = _tree(first)
        assert "ensemble/manifest.json" in files and "predictions.csv" in files
        assert any(f.startswith("heatmaps/") for f in files)
        specific = set(pipeline.RUN_SPECIFIC_FILES)
        drop = ("mean_latency_ms", "throughput_ips")
        for other in dirs[1:]:
            assert _tree(other) == files
            for f in files:
                if f.split("/")[-1] in specific:
                    continue
                assert filecmp.cmp(first / f, other / f, shallow=False), f
            a = parse_report((first / "report.txt").read_text())
            b = parse_report((other / "report.txt").read_text())
            assert {k: v for k, v in a.items() if k not in drop} == {k: v for k, v in b.items() if k not in drop}


# --------------------------------------------------------------------------- 10


def test_c10_anomaly_size_statistic(tmp_path):
    with criterion(10, "anomaly_size_stats equals direct pixel counting"):
        for seed, size, area in ((0, 128, (8, 33)), (1, 512, (26, 26)), (2, 64, (10, 200))):
            spec = SyntheticSpec(category=f"c{seed}", seed=seed, image_size=size, train_count=1,
                                 test_normal=2, test_anomalous=6, anomaly_area=area,
                                 anomalies_per_image=(1, 3))
            generate_synthetic(spec, tmp_path)
            idx = scan_dataset(tmp_path, spec.category)
            paths = [s.mask_path for s in idx.test if s.label]
            total = Fraction(0)
            for p in paths:
                with Image.open(p) as im:
                    pixels = np.asarray(im).ravel().tolist()
                    total += Fraction(sum(1 for v in pixels if v), im.width * im.height)
            expected = float(total / len(paths))
            assert anomaly_size_stats([load_mask(p) for p in paths]) == expected
