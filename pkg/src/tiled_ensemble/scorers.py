"""Per-tile anomaly models.

Two classical stand-ins for the usual patch-based paradigms:

* :class:`GaussianPatchModel` fits one multivariate Gaussian per patch cell
  and scores with the Mahalanobis distance.
* :class:`MemoryBankModel` keeps a greedy farthest-point coreset of training
  patch embeddings and scores with the distance to the nearest one.

Both expose ``predict(tile, accountant)`` returning a :class:`TilePrediction`
whose map has the tile's pixel size and whose score is the map maximum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .features import FeatureConfig, extract_features
from .memory import BufferAccountant, ensure

# bound on elements of the query x bank x dim difference block
_KNN_BLOCK = 1 << 21


class ScorerError(ValueError):
    pass


@dataclass
class TilePrediction:
    map: np.ndarray
    score: float


class TileModel(Protocol):
    kind: str

    @property
    def nbytes(self) -> int: ...

    def predict(self, tile: np.ndarray, accountant: BufferAccountant | None = None) -> TilePrediction: ...


def tile_score(anomaly_map: np.ndarray) -> float:
    anomaly_map = np.asarray(anomaly_map)
    if anomaly_map.size == 0:
        raise ScorerError("cannot score an empty map")
    return float(anomaly_map.max())


def _lerp_axis(values: np.ndarray, size: int, axis: int) -> np.ndarray:
    src = values.shape[axis]
    if size == src:
        return values
    if size == 1:
        pos = np.array([(src - 1) / 2.0])
    else:
        pos = np.arange(size) * ((src - 1) / (size - 1))
    i0 = np.clip(np.floor(pos).astype(np.int64), 0, src - 1)
    i1 = np.minimum(i0 + 1, src - 1)
    frac = pos - i0
    shape = [1] * values.ndim
    shape[axis] = size
    frac = frac.reshape(shape)
    v0 = np.take(values, i0, axis=axis)
    v1 = np.take(values, i1, axis=axis)
    return v0 + frac * (v1 - v0)


def bilinear_resize(values: np.ndarray, height: int, width: int) -> np.ndarray:
    """Corner-aligned bilinear resize over the first two axes.

    A target axis of length 1 samples the source centre.
    """
    if height < 1 or width < 1:
        raise ScorerError(f"degenerate target size {height}x{width}")
    values = np.asarray(values, dtype=np.float64)
    return _lerp_axis(_lerp_axis(values, height, 0), width, 1)


def upsample_map(patch_map: np.ndarray, tile_h: int, tile_w: int) -> np.ndarray:
    patch_map = np.asarray(patch_map, dtype=np.float64)
    if tile_h < patch_map.shape[0] or tile_w < patch_map.shape[1]:
        raise ScorerError(
            f"target {tile_h}x{tile_w} is smaller than source {patch_map.shape[0]}x{patch_map.shape[1]}"
        )
    return bilinear_resize(patch_map, tile_h, tile_w)


# --------------------------------------------------------------------------- gaussian


@dataclass
class GaussianPatchModel:
    mean: np.ndarray  # (gh, gw, d)
    cov: np.ndarray  # (gh, gw, d, d), regularizer already on the diagonal
    epsilon: float
    feature_config: FeatureConfig | None = None
    kind: str = field(default="gaussian", init=False)

    @property
    def nbytes(self) -> int:
        return self.mean.nbytes + self.cov.nbytes

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.mean.shape[0], self.mean.shape[1]

    def predict(self, tile, accountant=None) -> TilePrediction:
        return _predict(self, tile, accountant)


def _check_feature_maps(features: Sequence[np.ndarray]) -> np.ndarray:
    if len(features) == 0:
        raise ScorerError("need at least one training feature map")
    shape = np.shape(features[0])
    for f in features:
        if np.shape(f) != shape:
            raise ScorerError(f"feature map shape {np.shape(f)} != {shape}")
    return np.asarray(features, dtype=np.float64)


def fit_gaussian(features: Sequence[np.ndarray], epsilon: float,
                 feature_config: FeatureConfig | None = None,
                 accountant: BufferAccountant | None = None) -> GaussianPatchModel:
    """Per-cell population mean and covariance, plus ``epsilon * I``."""
    acc = ensure(accountant)
    stack = _check_feature_maps(features)
    if stack.ndim != 4:
        raise ScorerError(f"expected (grid_h, grid_w, dim) feature maps, got {stack.shape[1:]}")
    n, gh, gw, d = stack.shape
    with acc.hold("features", stack):
        mean = stack.mean(axis=0)
        centered = stack - mean
        with acc.hold("work", centered):
            cov = np.einsum("nhwi,nhwj->hwij", centered, centered) / n
    cov[..., np.arange(d), np.arange(d)] += epsilon
    return GaussianPatchModel(mean, cov, float(epsilon), feature_config)


def score_gaussian(model: GaussianPatchModel, features: np.ndarray,
                   accountant: BufferAccountant | None = None) -> np.ndarray:
    acc = ensure(accountant)
    features = np.asarray(features, dtype=np.float64)
    if features.shape != model.mean.shape:
        raise ScorerError(f"feature map {features.shape} does not match model {model.mean.shape}")
    delta = features - model.mean
    try:
        chol = np.linalg.cholesky(model.cov)
    except np.linalg.LinAlgError as exc:
        raise ScorerError("regularized covariance is not positive definite; increase epsilon") from exc
    with acc.hold("work", chol), acc.hold("work", delta):
        white = np.linalg.solve(chol, delta[..., None])[..., 0]
        return np.sqrt((white ** 2).sum(axis=-1))


# --------------------------------------------------------------------------- memory bank


@dataclass
class MemoryBankModel:
    bank: np.ndarray  # (k, d)
    ratio: float
    feature_config: FeatureConfig | None = None
    kind: str = field(default="knn", init=False)

    @property
    def nbytes(self) -> int:
        return self.bank.nbytes

    def predict(self, tile, accountant=None) -> TilePrediction:
        return _predict(self, tile, accountant)


def coreset_size(n: int, ratio: float) -> int:
    return max(1, math.ceil(round(ratio * n, 9)))


def coreset_subsample(candidates: np.ndarray, ratio: float,
                      feature_config: FeatureConfig | None = None,
                      seed: int | None = None,
                      accountant: BufferAccountant | None = None) -> MemoryBankModel:
    """Greedy farthest-point coreset.

    Starts from candidate 0 unless ``seed`` is given, in which case the start
    index is drawn from ``numpy.random.default_rng(seed)``.
    """
    acc = ensure(accountant)
    cand = np.asarray(candidates, dtype=np.float64)
    if cand.ndim == 1:
        cand = cand[:, None]
    n = cand.shape[0]
    if n == 0:
        raise ScorerError("no coreset candidates")
    if not (0.0 < ratio <= 1.0):
        raise ScorerError(f"coreset ratio must be in (0, 1], got {ratio}")
    k = coreset_size(n, ratio)
    start = 0 if seed is None else int(np.random.default_rng(seed).integers(n))

    selected = [start]
    with acc.hold("work", n * 8 * 2):
        min_d = ((cand - cand[start]) ** 2).sum(axis=1)
        min_d[start] = -1.0
        for _ in range(k - 1):
            nxt = int(np.argmax(min_d))
            selected.append(nxt)
            np.minimum(min_d, ((cand - cand[nxt]) ** 2).sum(axis=1), out=min_d)
            min_d[nxt] = -1.0
    return MemoryBankModel(cand[selected].copy(), float(ratio), feature_config)


def score_knn(model: MemoryBankModel, features: np.ndarray,
              accountant: BufferAccountant | None = None) -> np.ndarray:
    acc = ensure(accountant)
    features = np.asarray(features, dtype=np.float64)
    d = model.bank.shape[1]
    if features.shape[-1] != d:
        raise ScorerError(f"feature dim {features.shape[-1]} does not match bank dim {d}")
    flat = features.reshape(-1, d)
    out = np.empty(flat.shape[0])
    rows = max(1, _KNN_BLOCK // max(1, model.bank.shape[0] * d))
    with acc.hold("work", min(rows, flat.shape[0]) * model.bank.shape[0] * d * 8):
        for s in range(0, flat.shape[0], rows):
            diff = flat[s:s + rows, None, :] - model.bank[None, :, :]
            out[s:s + rows] = np.sqrt((diff ** 2).sum(axis=2).min(axis=1))
    return out.reshape(features.shape[:-1])


# --------------------------------------------------------------------------- shared


def _predict(model, tile: np.ndarray, accountant) -> TilePrediction:
    acc = ensure(accountant)
    acc.require(tile)
    feats = extract_features(tile, model.feature_config)
    with acc.hold("features", feats):
        if model.kind == "gaussian":
            patch = score_gaussian(model, feats, acc)
        else:
            patch = score_knn(model, feats, acc)
    with acc.hold("maps", patch):
        full = upsample_map(patch, tile.shape[0], tile.shape[1])
        with acc.hold("maps", full):
            return TilePrediction(full, tile_score(full))


def fit_tile_model(tiles: Sequence[np.ndarray], kind: str, feature_config: FeatureConfig, *,
                   epsilon: float = 0.01, coreset_ratio: float = 0.1,
                   coreset_seed: int | None = None,
                   accountant: BufferAccountant | None = None):
    """Train one model of ``kind`` on a set of same-sized tiles."""
    acc = ensure(accountant)
    if len(tiles) == 0:
        raise ScorerError("no training tiles")
    feats = [extract_features(t, feature_config) for t in tiles]
    if kind == "gaussian":
        return fit_gaussian(feats, epsilon, feature_config, acc)
    if kind == "knn":
        cand = np.concatenate([f.reshape(-1, feature_config.dim) for f in feats])
        with acc.hold("features", cand):
            return coreset_subsample(cand, coreset_ratio, feature_config, coreset_seed, acc)
    raise ScorerError(f"unknown scorer kind {kind!r}")


def bare_predict(model, image: np.ndarray) -> TilePrediction:
    """Apply a tile model to a whole image with no tiling involved."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    return model.predict(image)
