"""End-to-end train / predict / eval / bench runs driven by a :class:`PipelineConfig`.

Every run writes its artifacts under one output directory together with
``artifacts.json``, which lists each file with its SHA-256. Run-specific files
(wall-clock timings, the worker count in ``runtime.json``) are listed without
a digest; every other artifact depends only on the config and seed.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import PipelineConfig, Setup, dump_config, validate
from .dataio import (
    DatasetError,
    generate_synthetic,
    load_image,
    load_mask,
    resize,
    resize_mask,
    scan_dataset,
    write_outputs,
)
from .ensemble import (
    EnsembleError,
    EnsembleModel,
    load_ensemble,
    normalize,
    predict,
    save_ensemble,
    train_ensemble,
)
from .memory import BufferAccountant
from .metrics import MetricError, aupro, auroc, f1_sweep, format_report
from .tiling import compute_grid

ARTIFACTS_NAME = "artifacts.json"
RUN_SPECIFIC_FILES = ("runtime.json", "train_report.json", "report.txt", "bench.csv", "bench.txt")


@dataclass
class Split:
    names: list[str]
    images: list[np.ndarray]
    masks: list[np.ndarray | None]
    labels: list[int | None]


def grid_for(setup: Setup):
    return compute_grid(*setup.resolution, *setup.tile, *setup.stride)


def dataset_root(cfg: PipelineConfig, out: Path) -> Path:
    """Configured dataset root, or a freshly generated synthetic category under ``out``."""
    if cfg.data.root is not None:
        return Path(cfg.data.root)
    root = out / "data"
    generate_synthetic(cfg.synthetic_spec(), root)
    return root


def _read(path, cfg: PipelineConfig, size) -> np.ndarray:
    return resize(load_image(path, cfg.data.channels), *size)


def load_train(cfg: PipelineConfig, root: Path, size) -> list[np.ndarray]:
    index = scan_dataset(root, cfg.data.category)
    if not index.train:
        raise DatasetError(f"no training images in {root / cfg.data.category / 'train' / 'good'}")
    return [_read(p, cfg, size) for p in index.train]


def load_test(cfg: PipelineConfig, root: Path, size) -> Split:
    index = scan_dataset(root, cfg.data.category)
    if not index.test:
        raise DatasetError(f"no test images in {root / cfg.data.category / 'test'}")
    split = Split([], [], [], [])
    for s in index.test:
        img = _read(s.path, cfg, size)
        if s.mask_path is None:
            mask = np.zeros(size, dtype=bool)
        else:
            mask = resize_mask(load_mask(s.mask_path), *size)
        split.names.append(s.name)
        split.images.append(img)
        split.masks.append(mask)
        split.labels.append(s.label)
    return split


def load_inputs(cfg: PipelineConfig, path: Path, size) -> Split:
    """Unlabeled images from a single PNG or a folder of PNGs."""
    path = Path(path)
    files = [path] if path.is_file() else sorted(p for p in path.glob("*.png"))
    if not files:
        raise DatasetError(f"no PNG images found at {path}")
    return Split([p.stem for p in files], [_read(p, cfg, size) for p in files],
                 [None] * len(files), [None] * len(files))


def write_artifacts(out: Path, command: str, cfg: PipelineConfig) -> Path:
    entries = {}
    for p in sorted(out.rglob("*")):
        if not p.is_file() or p.name == ARTIFACTS_NAME:
            continue
        rel = p.relative_to(out).as_posix()
        if rel.startswith("data/"):
            continue
        specific = p.name in RUN_SPECIFIC_FILES
        entries[rel] = None if specific else hashlib.sha256(p.read_bytes()).hexdigest()
    doc = {"command": command, "config_sha256": hashlib.sha256(_experiment_config(cfg).encode()).hexdigest(),
           "files": entries}
    target = out / ARTIFACTS_NAME
    target.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return target


def _experiment_config(cfg: PipelineConfig) -> str:
    # the worker count never changes results, so it is kept out of the config record
    return dump_config(dataclasses.replace(cfg, workers=1))


def _prepare(cfg: PipelineConfig, out) -> tuple[Path, Setup, list[str]]:
    warnings = validate(cfg)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(_experiment_config(cfg))
    (out / "runtime.json").write_text(json.dumps({"workers": cfg.workers}) + "\n")
    return out, cfg.resolved_setup(), warnings


# --------------------------------------------------------------------------- train


def train(cfg: PipelineConfig, setup: Setup, images) -> tuple[EnsembleModel, list]:
    return train_ensemble(images, grid_for(setup), setup.mode, cfg.scorer_config(), workers=cfg.workers,
                          merge=cfg.merge, smoothing=cfg.smoothing_config())


def run_train(cfg: PipelineConfig, out) -> Path:
    out, setup, _ = _prepare(cfg, out)
    root = dataset_root(cfg, out)
    images = load_train(cfg, root, setup.resolution)
    ensemble, reports = train(cfg, setup, images)
    model_dir = save_ensemble(ensemble, out / "ensemble")
    report = {
        "setup": setup.name,
        "mode": setup.mode,
        "tiles": grid_for(setup).n_tiles,
        "models": len(ensemble.models),
        "locations": [{"index": r.index, "seconds": r.seconds, "peak_bytes": r.peak_bytes} for r in reports],
    }
    (out / "train_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    write_artifacts(out, "train", cfg)
    return model_dir


# --------------------------------------------------------------------------- predict / eval


@dataclass
class Inference:
    predictions: list
    normalized: list
    peak_bytes: int
    latencies: list[float]
    wall_seconds: float


def _load_model(cfg: PipelineConfig, setup: Setup, model_dir) -> EnsembleModel:
    ensemble = load_ensemble(model_dir, expected_features=cfg.scorer_config().features, lazy=True)
    expected = grid_for(setup)
    if ensemble.grid != expected:
        raise EnsembleError(
            f"ensemble grid {ensemble.grid.shape} at {ensemble.grid.image_h}x{ensemble.grid.image_w} "
            f"does not match the configured setup {setup.name} ({expected.shape} at "
            f"{expected.image_h}x{expected.image_w}); retrain or use the matching config"
        )
    if ensemble.mode != setup.mode:
        raise EnsembleError(f"ensemble mode {ensemble.mode!r} differs from configured {setup.mode!r}")
    return ensemble


def infer(cfg: PipelineConfig, ensemble: EnsembleModel, images) -> Inference:
    """Predict every image, each with its own accountant; parallel over images."""
    smoothing = cfg.smoothing_config()

    def one(im):
        acc = BufferAccountant()
        start = time.perf_counter()
        pred = predict(ensemble, im, merge=cfg.merge, smoothing=smoothing, accountant=acc)
        return pred, acc.peak, time.perf_counter() - start

    start = time.perf_counter()
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(one, images))
    else:
        results = [one(im) for im in images]
    wall = time.perf_counter() - start
    preds = [r[0] for r in results]
    return Inference(preds, [normalize(p, ensemble.stats) for p in preds],
                     max(r[1] for r in results), [r[2] for r in results], wall)


def _sorted_split(split: Split) -> Split:
    order = sorted(range(len(split.names)), key=lambda k: split.names[k])
    return Split(*[[lst[k] for k in order] for lst in (split.names, split.images, split.masks, split.labels)])


def run_predict(cfg: PipelineConfig, model_dir, out, inputs=None) -> Path:
    out, setup, _ = _prepare(cfg, out)
    ensemble = _load_model(cfg, setup, model_dir)
    if inputs is None:
        split = load_test(cfg, dataset_root(cfg, out), setup.resolution)
    else:
        split = load_inputs(cfg, inputs, setup.resolution)
    split = _sorted_split(split)
    res = infer(cfg, ensemble, split.images)
    labels = None if any(l is None for l in split.labels) else split.labels
    write_outputs(out, split.names, res.predictions, res.normalized, labels)
    write_artifacts(out, "predict", cfg)
    return out


def evaluate(cfg: PipelineConfig, setup: Setup, split: Split, res: Inference) -> dict:
    """Metrics on raw (pre-normalization) scores and maps, in name order."""
    if any(m is None for m in split.masks):
        raise MetricError("evaluation needs ground truth for every test image")
    scores = [p.score for p in res.predictions]
    maps = [p.map for p in res.predictions]
    tau, f1 = f1_sweep(scores, split.labels)
    n = len(res.latencies)
    return {
        "category": cfg.data.category,
        "setup": setup.name,
        "seed": cfg.seed,
        "auroc": auroc(scores, split.labels),
        "aupro": aupro(maps, split.masks, cfg.metrics.fpr_limit),
        "fpr_limit": cfg.metrics.fpr_limit,
        "best_f1": f1,
        "threshold": tau,
        "peak_accounted_bytes": res.peak_bytes,
        "mean_latency_ms": 1000.0 * sum(res.latencies) / n,
        "throughput_ips": n / res.wall_seconds if res.wall_seconds > 0 else float("inf"),
    }


def run_eval(cfg: PipelineConfig, model_dir, out) -> dict:
    out, setup, _ = _prepare(cfg, out)
    ensemble = _load_model(cfg, setup, model_dir)
    split = _sorted_split(load_test(cfg, dataset_root(cfg, out), setup.resolution))
    res = infer(cfg, ensemble, split.images)
    record = evaluate(cfg, setup, split, res)
    write_outputs(out, split.names, res.predictions, res.normalized, split.labels, format_report(record))
    write_artifacts(out, "eval", cfg)
    return record


# --------------------------------------------------------------------------- bench


BENCH_COLUMNS = ("setup", "mode", "tiles", "resolution", "latency_ms", "throughput_ips",
                 "peak_accounted_bytes", "peak_model_working_bytes", "merge_bytes")


def _median_seconds(fn, warmup: int, repetitions: int) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repetitions):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return statistics.median(times)


def bench_setup(cfg: PipelineConfig, setup: Setup, root: Path) -> dict:
    train_images = load_train(cfg, root, setup.resolution)
    test = load_test(cfg, root, setup.resolution)
    ensemble, _ = train(cfg, setup, train_images)
    smoothing = cfg.smoothing_config()
    b = cfg.bench
    image = test.images[0]
    batch = [test.images[k % len(test.images)] for k in range(b.batch_size)]

    acc = BufferAccountant()
    predict(ensemble, image, merge=cfg.merge, smoothing=smoothing, accountant=acc)

    def single():
        predict(ensemble, image, merge=cfg.merge, smoothing=smoothing)

    def batched():
        if cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                list(pool.map(lambda im: predict(ensemble, im, merge=cfg.merge, smoothing=smoothing), batch))
        else:
            for im in batch:
                predict(ensemble, im, merge=cfg.merge, smoothing=smoothing)

    latency = _median_seconds(single, b.warmup, b.repetitions)
    batch_time = _median_seconds(batched, b.warmup, b.repetitions)
    return {
        "setup": setup.name,
        "mode": setup.mode,
        "tiles": ensemble.grid.n_tiles,
        "resolution": f"{setup.resolution[0]}x{setup.resolution[1]}",
        "latency_ms": 1000.0 * latency,
        "throughput_ips": b.batch_size / batch_time,
        "peak_accounted_bytes": acc.peak,
        "peak_model_working_bytes": acc.peak_excluding("merge"),
        "merge_bytes": acc.peak_by_tag.get("merge", 0),
    }


def format_table(rows: list[dict]) -> str:
    def cell(v):
        return f"{v:.3f}" if isinstance(v, float) else str(v)

    body = [[cell(r[c]) for c in BENCH_COLUMNS] for r in rows]
    widths = [max(len(c), *(len(b[k]) for b in body)) for k, c in enumerate(BENCH_COLUMNS)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(BENCH_COLUMNS, widths)).rstrip()]
    lines += ["  ".join(v.ljust(w) for v, w in zip(b, widths)).rstrip() for b in body]
    return "\n".join(lines) + "\n"


def run_bench(cfg: PipelineConfig, out, presets: list[str] | None = None) -> list[dict]:
    out, _, _ = _prepare(cfg, out)
    names = presets or list(cfg.bench.presets)
    if not names:
        raise EnsembleError("bench needs at least one setup")
    root = dataset_root(cfg, out)
    rows = []
    for name in names:
        sub = cfg.with_preset(name)
        validate(sub)
        rows.append(bench_setup(sub, sub.resolved_setup(), root))
    with open(out / "bench.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    (out / "bench.txt").write_text(format_table(rows))
    write_artifacts(out, "bench", cfg)
    return rows
