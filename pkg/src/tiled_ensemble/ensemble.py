"""Tiled ensemble: per-location training, tile-wise inference and merging.

Inference follows a load-score-release loop. For each tile the model is
registered with the accountant as resident, the tile is scored, and model and
working buffers are released before the next tile. Tile maps go to the
:class:`~tiled_ensemble.tiling.MergeBuffer`, which is the only image-sized
allocation.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from collections.abc import Mapping
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter1d

from . import modelio
from .features import FeatureConfig
from .memory import BufferAccountant, ensure
from .modelio import CorruptModelError, FingerprintMismatchError, VersionMismatchError
from .scorers import fit_tile_model
from .tiling import MergeBuffer, TileGrid, TileIndex, compute_grid, extract_tile

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
MODES = ("per-location", "shared")
MERGE_STRATEGIES = ("avg", "max")
DEFAULT_BAND_FRACTION = 0.10


class EnsembleError(ValueError):
    pass


@dataclass(frozen=True)
class ScorerConfig:
    kind: str = "gaussian"
    features: FeatureConfig = field(default_factory=FeatureConfig)
    epsilon: float = 0.01
    coreset_ratio: float = 0.1
    coreset_seed: int | None = None

    def __post_init__(self):
        if self.kind not in ("gaussian", "knn"):
            raise EnsembleError(f"unknown scorer kind {self.kind!r}")


@dataclass(frozen=True)
class SmoothingConfig:
    enabled: bool = True
    band_fraction: float = DEFAULT_BAND_FRACTION
    sigma: float | None = None


@dataclass(frozen=True)
class NormStats:
    map_min: float
    map_max: float
    score_min: float
    score_max: float


@dataclass
class Prediction:
    map: np.ndarray
    score: float
    tile_scores: np.ndarray
    normalized: bool = False


@dataclass
class LocationReport:
    index: str
    seconds: float
    peak_bytes: int


@dataclass
class EnsembleModel:
    grid: TileGrid
    mode: str
    models: Mapping
    scorer: ScorerConfig
    stats: NormStats | None = None

    def model_for(self, idx: TileIndex):
        key = "shared" if self.mode == "shared" else TileIndex(*idx)
        try:
            return self.models[key]
        except KeyError:
            raise EnsembleError(f"no model for tile {tuple(idx)}") from None


# --------------------------------------------------------------------------- training


def _check_images(images: Sequence[np.ndarray], grid: TileGrid) -> list[np.ndarray]:
    if len(images) == 0:
        raise EnsembleError("training set is empty")
    out = []
    for k, im in enumerate(images):
        im = np.asarray(im, dtype=np.float64)
        if im.ndim == 2:
            im = im[:, :, None]
        if im.shape[:2] != (grid.image_h, grid.image_w):
            raise EnsembleError(
                f"training image {k} is {im.shape[0]}x{im.shape[1]}, grid expects "
                f"{grid.image_h}x{grid.image_w}"
            )
        out.append(im)
    return out


def _fit(tiles, scorer: ScorerConfig, acc: BufferAccountant):
    return fit_tile_model(tiles, scorer.kind, scorer.features, epsilon=scorer.epsilon,
                          coreset_ratio=scorer.coreset_ratio, coreset_seed=scorer.coreset_seed,
                          accountant=acc)


def _train_job(images, grid, indices, scorer, name):
    acc = BufferAccountant()
    start = time.perf_counter()
    tiles = [extract_tile(im, grid, idx) for im in images for idx in indices]
    with acc.hold("tile", sum(t.nbytes for t in tiles)):
        model = _fit(tiles, scorer, acc)
        with acc.hold("model", model.nbytes):
            pass
    return model, LocationReport(name, time.perf_counter() - start, acc.peak)


def train_ensemble(images: Sequence[np.ndarray], grid: TileGrid, mode: str = "per-location",
                   scorer: ScorerConfig = ScorerConfig(), workers: int = 1,
                   compute_stats: bool = True, merge: str = "avg",
                   smoothing: SmoothingConfig | None = SmoothingConfig()) -> tuple[EnsembleModel, list[LocationReport]]:
    """Train one model per tile location (or one shared model on all tiles).

    Locations are independent jobs. With ``workers > 1`` they run on a thread
    pool, and results are collected in row-major order so the outcome does
    not depend on the schedule.
    """
    if mode not in MODES:
        raise EnsembleError(f"mode must be one of {MODES}, got {mode!r}")
    images = _check_images(images, grid)
    if mode == "shared":
        jobs = [("shared", grid.indices())]
    else:
        jobs = [(idx, [idx]) for idx in grid.indices()]

    def run(job):
        key, indices = job
        name = key if isinstance(key, str) else key.name
        return _train_job(images, grid, indices, scorer, name)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(job) for job in jobs]

    models = {key: model for (key, _), (model, _) in zip(jobs, results)}
    ensemble = EnsembleModel(grid, mode, models, scorer)
    if compute_stats:
        ensemble.stats = training_stats(ensemble, images, smoothing, merge, workers)
    return ensemble, [rep for _, rep in results]


def training_stats(ensemble: EnsembleModel, images: Sequence[np.ndarray],
                   smoothing: SmoothingConfig | None = SmoothingConfig(), merge: str = "avg",
                   workers: int = 1) -> NormStats:
    """Min/max of merged maps and scores over the training images."""
    def one(im):
        p = predict(ensemble, im, merge=merge, smoothing=smoothing)
        return float(p.map.min()), float(p.map.max()), p.score

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            vals = list(pool.map(one, images))
    else:
        vals = [one(im) for im in images]
    return NormStats(min(v[0] for v in vals), max(v[1] for v in vals),
                     min(v[2] for v in vals), max(v[2] for v in vals))


# --------------------------------------------------------------------------- inference


def merge_scores(scores, strategy: str = "avg") -> float:
    scores = [float(s) for s in np.ravel(np.asarray(scores, dtype=np.float64))]
    if not scores:
        raise EnsembleError("no tile scores to merge")
    if strategy == "avg":
        # exact rational mean, rounded once
        return float(sum(map(Fraction, scores), Fraction(0)) / len(scores))
    if strategy == "max":
        return max(scores)
    raise EnsembleError(f"merge strategy must be one of {MERGE_STRATEGIES}, got {strategy!r}")


def _score_tile(ensemble, image, idx, acc):
    t = extract_tile(image, ensemble.grid, idx)
    model = ensemble.model_for(idx)
    with acc.hold("tile", t), acc.hold("model", model.nbytes):
        return model.predict(t, acc)


def predict(ensemble: EnsembleModel, image: np.ndarray, merge: str = "avg",
            smoothing: SmoothingConfig | None = SmoothingConfig(),
            accountant: BufferAccountant | None = None, tile_workers: int = 1,
            order: Sequence[TileIndex] | None = None) -> Prediction:
    """Tile, score each tile with its model, untile, smooth seams and merge scores.

    ``order`` fixes the sequence in which tiles are scored. ``tile_workers > 1``
    scores several tiles at once, which keeps several models resident.
    """
    grid = ensemble.grid
    acc = ensure(accountant)
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.shape[:2] != (grid.image_h, grid.image_w):
        raise EnsembleError(
            f"image is {image.shape[0]}x{image.shape[1]}, ensemble expects {grid.image_h}x{grid.image_w}"
        )
    if merge not in MERGE_STRATEGIES:
        raise EnsembleError(f"merge strategy must be one of {MERGE_STRATEGIES}, got {merge!r}")
    order = grid.indices() if order is None else [TileIndex(*ix) for ix in order]

    buf = MergeBuffer(grid, acc)
    scores: dict[TileIndex, float] = {}
    try:
        if tile_workers > 1:
            with ThreadPoolExecutor(max_workers=tile_workers) as pool:
                futures = {pool.submit(_score_tile, ensemble, image, ix, acc): ix for ix in order}
                for fut in as_completed(futures):
                    ix = futures[fut]
                    pred = fut.result()
                    buf.add(ix, pred.map)
                    scores[ix] = pred.score
        else:
            for ix in order:
                pred = _score_tile(ensemble, image, ix, acc)
                buf.add(ix, pred.map)
                scores[ix] = pred.score
        merged = buf.result()
    finally:
        buf.close()

    with acc.hold("merge", merged):
        if smoothing is not None and smoothing.enabled:
            merged = smooth_seams(merged, grid, smoothing.sigma, smoothing.band_fraction)
    tile_scores = np.array([scores[ix] for ix in grid.indices()])
    return Prediction(merged, merge_scores(tile_scores, merge), tile_scores)


# --------------------------------------------------------------------------- post-processing


def _band_width(fraction: float, tile_size: int) -> int:
    return int(math.floor(fraction * tile_size + 0.5))


def seam_positions(grid: TileGrid) -> tuple[list[int], list[int]]:
    """Interior tile edges inside the image, as (row, column) boundary offsets.

    A boundary at ``p`` lies between pixel ``p - 1`` and pixel ``p``.
    """
    def axis(n, stride, size, limit):
        edges = {stride * i for i in range(1, n)} | {stride * i + size for i in range(n - 1)}
        return sorted(p for p in edges if 0 < p < limit)

    return (axis(grid.n_rows, grid.stride_h, grid.tile_h, grid.image_h),
            axis(grid.n_cols, grid.stride_w, grid.tile_w, grid.image_w))


def seam_band_mask(grid: TileGrid, band_fraction: float = DEFAULT_BAND_FRACTION) -> np.ndarray:
    """Boolean image-sized mask of pixels within the band around any seam."""
    if not 0.0 <= band_fraction <= 0.5:
        raise EnsembleError(f"band_fraction must be in [0, 0.5], got {band_fraction}")
    mask = np.zeros((grid.image_h, grid.image_w), dtype=bool)
    bh, bw = _band_width(band_fraction, grid.tile_h), _band_width(band_fraction, grid.tile_w)
    rows, cols = seam_positions(grid)
    if bh:
        for p in rows:
            mask[max(0, p - bh):p + bh, :] = True
    if bw:
        for p in cols:
            mask[:, max(0, p - bw):p + bw] = True
    return mask


def default_sigma(grid: TileGrid, band_fraction: float) -> float:
    return max(_band_width(band_fraction, grid.tile_h), _band_width(band_fraction, grid.tile_w)) / 4.0


def gaussian_blur(values: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian filter with half-sample reflected borders, truncated at 4 sigma.

    Filtering is done relative to the first element so constant input comes
    back bit-identical.
    """
    ref = values.flat[0]
    out = gaussian_filter1d(values - ref, sigma, axis=0, mode="reflect", truncate=4.0)
    out = gaussian_filter1d(out, sigma, axis=1, mode="reflect", truncate=4.0)
    return out + ref


def smooth_seams(anomaly_map: np.ndarray, grid: TileGrid, sigma: float | None = None,
                 band_fraction: float = DEFAULT_BAND_FRACTION) -> np.ndarray:
    """Replace pixels near interior tile seams with their Gaussian-filtered value."""
    anomaly_map = np.asarray(anomaly_map, dtype=np.float64)
    if anomaly_map.shape != (grid.image_h, grid.image_w):
        raise EnsembleError(f"map is {anomaly_map.shape}, grid image is {(grid.image_h, grid.image_w)}")
    mask = seam_band_mask(grid, band_fraction)
    if sigma is None:
        sigma = default_sigma(grid, band_fraction)
    out = anomaly_map.copy()
    if not mask.any() or sigma <= 0:
        return out
    out[mask] = gaussian_blur(anomaly_map, sigma)[mask]
    return out


def _scale(values, lo: float, hi: float):
    if hi == lo:
        return np.full_like(np.asarray(values, dtype=np.float64), 0.5)
    return np.clip((np.asarray(values, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)


def normalize(prediction: Prediction, stats: NormStats | None) -> Prediction:
    """Min-max scale map and score to [0, 1] using training statistics."""
    if stats is None:
        raise EnsembleError("normalization statistics are missing; train with compute_stats=True")
    return Prediction(_scale(prediction.map, stats.map_min, stats.map_max),
                      float(_scale(prediction.score, stats.score_min, stats.score_max)),
                      prediction.tile_scores.copy(), normalized=True)


def apply_threshold(values, tau: float):
    """``values >= tau``; arrays give masks, scalars give a bool label."""
    if math.isnan(tau):
        raise EnsembleError("threshold is NaN")
    out = np.asarray(values) >= tau
    return bool(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------- persistence


def _model_filename(key) -> str:
    return "shared.bin" if key == "shared" else f"{key.name}.bin"


def _manifest(ensemble: EnsembleModel, files: dict[str, bytes]) -> dict:
    s = ensemble.scorer
    return {
        "format_version": MANIFEST_VERSION,
        "mode": ensemble.mode,
        "grid": asdict(ensemble.grid),
        "scorer": {
            "kind": s.kind,
            "epsilon": s.epsilon,
            "coreset_ratio": s.coreset_ratio,
            "coreset_seed": s.coreset_seed,
            "features": asdict(s.features),
        },
        "fingerprint": s.features.fingerprint().hex(),
        "normalization": None if ensemble.stats is None else asdict(ensemble.stats),
        "models": {name: hashlib.sha256(data).hexdigest() for name, data in sorted(files.items())},
    }


def save_ensemble(ensemble: EnsembleModel, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    keys = ["shared"] if ensemble.mode == "shared" else ensemble.grid.indices()
    files = {_model_filename(k): modelio.dumps(ensemble.models[k]) for k in keys}
    for name, data in files.items():
        (path / name).write_bytes(data)
    text = json.dumps(_manifest(ensemble, files), indent=2, sort_keys=True) + "\n"
    (path / MANIFEST_NAME).write_text(text)
    return path


class LazyModels(Mapping):
    """Reads each model from disk on access; nothing is cached."""

    def __init__(self, root: Path, names: dict, digests: dict, fingerprint: bytes):
        self._root, self._names, self._digests, self._fp = root, names, digests, fingerprint

    def __getitem__(self, key):
        name = self._names[key]
        return _read_model(self._root / name, self._digests[name], self._fp)

    def __iter__(self):
        return iter(self._names)

    def __len__(self):
        return len(self._names)


def _read_model(file: Path, digest: str, fingerprint: bytes):
    if not file.exists():
        raise CorruptModelError(f"model file {file} is missing")
    data = file.read_bytes()
    if hashlib.sha256(data).hexdigest() != digest:
        raise CorruptModelError(f"model file {file} does not match its manifest checksum")
    return modelio.loads(data, expected_fingerprint=fingerprint)


def load_ensemble(path, expected_features: FeatureConfig | None = None,
                  lazy: bool = False) -> EnsembleModel:
    """Load an ensemble directory, validating version, grid and fingerprint.

    ``lazy=True`` keeps models on disk and reads each one when its tile is
    scored.
    """
    path = Path(path)
    try:
        man = json.loads((path / MANIFEST_NAME).read_text())
    except FileNotFoundError:
        raise CorruptModelError(f"no {MANIFEST_NAME} in {path}") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptModelError(f"unreadable manifest: {exc}") from exc
    if not isinstance(man, dict):
        raise CorruptModelError("manifest is not a mapping")
    if man.get("format_version") != MANIFEST_VERSION:
        raise VersionMismatchError(
            f"ensemble format version {man.get('format_version')}, expected {MANIFEST_VERSION}"
        )
    try:
        g = man["grid"]
        grid = compute_grid(g["image_h"], g["image_w"], g["tile_h"], g["tile_w"],
                            g["stride_h"], g["stride_w"])
        if asdict(grid) != g:
            raise CorruptModelError("stored grid geometry is inconsistent")
        sc = man["scorer"]
        feats = FeatureConfig(**sc["features"])
        scorer = ScorerConfig(sc["kind"], feats, sc["epsilon"], sc["coreset_ratio"], sc["coreset_seed"])
        mode = man["mode"]
        digests = man["models"]
        norm = man["normalization"]
        stored_fp = bytes.fromhex(man["fingerprint"])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CorruptModelError):
            raise
        raise CorruptModelError(f"malformed manifest: {exc}") from exc
    if stored_fp != feats.fingerprint():
        raise FingerprintMismatchError("manifest fingerprint does not match its feature configuration")
    if expected_features is not None and expected_features.fingerprint() != stored_fp:
        raise FingerprintMismatchError(
            f"ensemble was trained with features {feats}, caller expects {expected_features}"
        )
    if mode not in MODES:
        raise CorruptModelError(f"unknown mode {mode!r}")

    keys = ["shared"] if mode == "shared" else grid.indices()
    names = {k: _model_filename(k) for k in keys}
    if set(names.values()) != set(digests):
        raise CorruptModelError("manifest model list does not match the grid")
    if lazy:
        models = LazyModels(path, names, digests, stored_fp)
    else:
        models = {k: _read_model(path / n, digests[n], stored_fp) for k, n in names.items()}
    stats = None if norm is None else NormStats(**norm)
    return EnsembleModel(grid, mode, models, scorer, stats)
