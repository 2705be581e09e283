"""Dataset ingestion, PNG codec, synthetic data and prediction artifacts.

Expected folder layout (MVTec AD style)::

    <root>/<category>/train/good/*.png
    <root>/<category>/test/<defect_type>/*.png        (defect_type "good" = normal)
    <root>/<category>/ground_truth/<defect_type>/<stem>_mask.png

Synthetic masks are rasterized with pixel centres at integer coordinates:
pixel ``(r, c)`` belongs to a blob centred at ``(cy, cx)`` with semi-axes
``a`` (along angle ``phi``) and ``b`` iff ``(u/a)^2 + (v/b)^2 <= 1`` where
``u = dx*cos(phi) + dy*sin(phi)``, ``v = -dx*sin(phi) + dy*cos(phi)``,
``dx = c - cx`` and ``dy = r - cy``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.ndimage import gaussian_filter

from .scorers import bilinear_resize

IMAGE_SUFFIX = ".png"


class DatasetError(Exception):
    pass


@dataclass(frozen=True)
class TestSample:
    path: Path
    defect_type: str
    mask_path: Path | None
    label: int

    @property
    def name(self) -> str:
        return f"{self.defect_type}/{self.path.stem}"


@dataclass
class DatasetIndex:
    category: str
    train: list[Path]
    test: list[TestSample]


def _pngs(folder: Path) -> list[Path]:
    return sorted(p for p in folder.iterdir() if p.is_file() and p.suffix.lower() == IMAGE_SUFFIX)


def scan_dataset(root, category: str) -> DatasetIndex:
    base = Path(root) / category
    train_dir = base / "train" / "good"
    if not train_dir.is_dir():
        raise DatasetError(f"missing training folder {train_dir}")
    train = _pngs(train_dir)
    test: list[TestSample] = []
    test_dir = base / "test"
    if test_dir.is_dir():
        for sub in sorted(p for p in test_dir.iterdir() if p.is_dir()):
            for img in _pngs(sub):
                if sub.name == "good":
                    test.append(TestSample(img, "good", None, 0))
                    continue
                mask = base / "ground_truth" / sub.name / f"{img.stem}_mask{IMAGE_SUFFIX}"
                if not mask.is_file():
                    raise DatasetError(f"anomalous sample {img} has no mask at {mask}")
                test.append(TestSample(img, sub.name, mask, 1))
    return DatasetIndex(category, train, test)


# --------------------------------------------------------------------------- images


def load_image(path, channels: int | None = None) -> np.ndarray:
    """Decode an 8- or 16-bit PNG into an ``(H, W, C)`` float array in [0, 1]."""
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
                arr = arr[:, :, None]
            else:
                if mode not in ("L", "RGB"):
                    im = im.convert("RGB" if mode in ("RGBA", "P", "CMYK", "YCbCr") else "L")
                arr = np.asarray(im, dtype=np.float64) / 255.0
                if arr.ndim == 2:
                    arr = arr[:, :, None]
    except (OSError, UnidentifiedImageError) as exc:
        raise DatasetError(f"cannot decode {path}: {exc}") from exc
    if channels is not None and arr.shape[2] != channels:
        if channels == 3 and arr.shape[2] == 1:
            arr = np.repeat(arr, 3, axis=2)
        elif channels == 1:
            arr = arr.mean(axis=2, keepdims=True) if arr.shape[2] != 3 else \
                (arr @ np.array([0.299, 0.587, 0.114]))[:, :, None]
        else:
            raise DatasetError(f"cannot convert {arr.shape[2]} channels to {channels}")
    return arr


def load_mask(path) -> np.ndarray:
    return load_image(path)[:, :, 0] > 0


def resize(image: np.ndarray, height: int, width: int) -> np.ndarray:
    if height < 1 or width < 1:
        raise DatasetError(f"cannot resize to {height}x{width}")
    if image.shape[:2] == (height, width):
        return image
    return bilinear_resize(image, height, width)


def resize_mask(mask: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbour resize on the same corner-aligned sample grid."""
    h, w = mask.shape
    if (h, w) == (height, width):
        return mask.astype(bool)
    rows = np.rint(np.arange(height) * ((h - 1) / max(height - 1, 1))).astype(int)
    cols = np.rint(np.arange(width) * ((w - 1) / max(width - 1, 1))).astype(int)
    return mask[np.ix_(rows, cols)].astype(bool)


def save_png8(path, image: np.ndarray) -> None:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    q = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(q).save(path, format="PNG")


def save_png16(path, values: np.ndarray) -> None:
    q = np.rint(np.clip(values, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(q).save(path, format="PNG")


# --------------------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SyntheticSpec:
    category: str = "synthetic"
    image_size: int = 128
    channels: int = 3
    seed: int = 0
    train_count: int = 60
    test_normal: int = 20
    test_anomalous: int = 20
    anomaly_area: tuple[int, int] = (8, 33)
    anomalies_per_image: tuple[int, int] = (1, 1)
    contrast: float = 0.3
    texture_sigma: float = 1.0
    texture_amplitude: float = 0.08

    def validate(self) -> None:
        lo, hi = self.anomaly_area
        if lo < 1 or hi < lo or hi > self.image_size ** 2:
            raise DatasetError(f"anomaly area range {self.anomaly_area} must satisfy 1 <= min <= max <= image area")
        c_lo, c_hi = self.anomalies_per_image
        if c_lo < 1 or c_hi < c_lo:
            raise DatasetError(f"anomalies_per_image {self.anomalies_per_image} is invalid")
        if self.image_size < 2 or self.channels not in (1, 3):
            raise DatasetError("image_size must be >= 2 and channels 1 or 3")
        if self.train_count < 1 or self.test_normal < 0 or self.test_anomalous < 0:
            raise DatasetError("sample counts must be non-negative with at least one training image")


@dataclass
class SyntheticData:
    train: list[np.ndarray]
    test: list[np.ndarray]
    masks: list[np.ndarray]
    labels: list[int]
    names: list[str] = field(default_factory=list)


_TINT = np.array([0.95, 1.0, 1.05])


def _texture(rng: np.random.Generator, spec: SyntheticSpec) -> np.ndarray:
    n = spec.image_size
    noise = gaussian_filter(rng.standard_normal((n, n)), spec.texture_sigma, mode="wrap")
    noise /= noise.std()
    base = 0.5 + spec.texture_amplitude * noise
    if spec.channels == 1:
        return base[:, :, None]
    return base[:, :, None] * _TINT


def ellipse_mask(size: int, cy: int, cx: int, a: float, b: float, phi: float) -> np.ndarray:
    rr, cc = np.mgrid[0:size, 0:size]
    dx, dy = cc - cx, rr - cy
    u = dx * math.cos(phi) + dy * math.sin(phi)
    v = -dx * math.sin(phi) + dy * math.cos(phi)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _blob(rng, spec: SyntheticSpec) -> np.ndarray:
    area = rng.uniform(spec.anomaly_area[0], spec.anomaly_area[1])
    aspect = rng.uniform(0.5, 2.0)
    a = math.sqrt(area * aspect / math.pi)
    b = math.sqrt(area / (aspect * math.pi))
    margin = int(math.ceil(max(a, b))) + 1
    hi = max(margin + 1, spec.image_size - margin)
    cy, cx = (int(v) for v in rng.integers(min(margin, hi - 1), hi, size=2))
    return ellipse_mask(spec.image_size, cy, cx, a, b, rng.uniform(0, math.pi))


def _quantize(image: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


def synthesize(spec: SyntheticSpec) -> SyntheticData:
    """Generate the dataset in memory, quantized and ordered exactly as stored on disk."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    train = [_quantize(_texture(rng, spec)) for _ in range(spec.train_count)]
    test, masks, labels, names = [], [], [], []
    for k in range(spec.test_normal):
        test.append(_quantize(_texture(rng, spec)))
        masks.append(np.zeros((spec.image_size,) * 2, dtype=bool))
        labels.append(0)
        names.append(f"good/{k:03d}")
    for k in range(spec.test_anomalous):
        img = _texture(rng, spec)
        mask = np.zeros((spec.image_size,) * 2, dtype=bool)
        count = int(rng.integers(spec.anomalies_per_image[0], spec.anomalies_per_image[1] + 1))
        for _ in range(count):
            blob = _blob(rng, spec)
            sign = 1.0 if rng.random() < 0.5 else -1.0
            img[blob] += sign * spec.contrast
            mask |= blob
        test.append(_quantize(img))
        masks.append(mask)
        labels.append(1)
        names.append(f"blob/{k:03d}")
    order = sorted(range(len(names)), key=names.__getitem__)
    return SyntheticData(train, [test[k] for k in order], [masks[k] for k in order],
                         [labels[k] for k in order], [names[k] for k in order])


def generate_synthetic(spec: SyntheticSpec, root) -> Path:
    """Write a synthetic category in the MVTec layout under ``root``."""
    data = synthesize(spec)
    base = Path(root) / spec.category
    try:
        for k, im in enumerate(data.train):
            save_png8(base / "train" / "good" / f"{k:03d}.png", im)
        for name, im, mask, label in zip(data.names, data.test, data.masks, data.labels):
            defect, stem = name.split("/")
            save_png8(base / "test" / defect / f"{stem}.png", im)
            if label:
                save_png8(base / "ground_truth" / defect / f"{stem}_mask.png", mask.astype(np.float64))
    except OSError as exc:
        raise DatasetError(f"cannot write synthetic dataset under {base}: {exc}") from exc
    return base


# --------------------------------------------------------------------------- outputs


def write_outputs(out_dir, names: Sequence[str], predictions, normalized, labels=None,
                  report_text: str | None = None) -> Path:
    """Write 16-bit heatmaps, ``predictions.csv`` and optionally ``report.txt``.

    ``predictions`` carries raw scores and per-tile scores; ``normalized``
    carries the [0, 1] maps that become heatmaps.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        n_tiles = len(predictions[0].tile_scores) if predictions else 0
        with open(out / "predictions.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["image", "label", "score", "normalized_score"]
                       + [f"tile_{k}" for k in range(n_tiles)])
            for k, (name, pred, norm) in enumerate(zip(names, predictions, normalized)):
                save_png16(out / "heatmaps" / f"{name}.png", norm.map)
                label = "" if labels is None else int(labels[k])
                w.writerow([name, label, repr(float(pred.score)), repr(float(norm.score))]
                           + [repr(float(s)) for s in pred.tile_scores])
        if report_text is not None:
            (out / "report.txt").write_text(report_text)
    except OSError as exc:
        raise DatasetError(f"cannot write outputs to {out}: {exc}") from exc
    return out


def read_predictions_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
