"""Versioned YAML pipeline configuration and the named setup presets.

Example::

    schema_version: 1
    seed: 0
    workers: 1
    data:
      root: null          # null -> generate the synthetic category under <out>/data
      category: synthetic
    setup:
      preset: ENS9
      preset_tile: 64     # scale the full-size geometry (256 px tiles) down
    scorer:
      kind: gaussian
      cell_size: 8

Unknown keys anywhere are errors.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .dataio import DatasetError, SyntheticSpec
from .ensemble import MERGE_STRATEGIES, MODES, ScorerConfig, SmoothingConfig
from .features import FeatureConfig
from .tiling import TilingError, compute_grid

SCHEMA_VERSION = 1
FULL_TILE = 256


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Setup:
    name: str
    resolution: tuple[int, int]
    tile: tuple[int, int]
    stride: tuple[int, int]
    mode: str = "per-location"


def preset(name: str, tile: int = FULL_TILE) -> Setup:
    """Setup presets; ``tile`` is the base tile size (256 reproduces the original geometry)."""
    t, half = tile, tile // 2
    table = {
        "SM256": ((t, t), (t, t), (t, t), "per-location"),
        "SM512": ((2 * t, 2 * t), (2 * t, 2 * t), (2 * t, 2 * t), "per-location"),
        "ENS4": ((2 * t, 2 * t), (t, t), (t, t), "per-location"),
        "ENS9": ((2 * t, 2 * t), (t, t), (half, half), "per-location"),
        "ST4": ((2 * t, 2 * t), (t, t), (t, t), "shared"),
        "ST9": ((2 * t, 2 * t), (t, t), (half, half), "shared"),
    }
    if name not in table:
        raise ConfigError(f"unknown preset {name!r}; choose one of {', '.join(PRESETS)}")
    if tile < 2 or tile % 2:
        raise ConfigError(f"preset_tile must be an even size >= 2, got {tile}")
    res, tl, st, mode = table[name]
    return Setup(name, res, tl, st, mode)


PRESETS = ("SM256", "SM512", "ENS4", "ENS9", "ST4", "ST9")


@dataclass
class DataSection:
    root: str | None = None
    category: str = "synthetic"
    channels: int = 3


@dataclass
class SetupSection:
    preset: str | None = None
    preset_tile: int = FULL_TILE
    name: str | None = None
    resolution: list[int] | None = None
    tile: list[int] | None = None
    stride: list[int] | None = None
    mode: str | None = None


@dataclass
class ScorerSection:
    kind: str = "gaussian"
    cell_size: int = 8
    orientation_bins: int = 4
    epsilon: float = 0.01
    coreset_ratio: float = 0.1
    coreset_seed: int | None = None


@dataclass
class SmoothingSection:
    enabled: bool = True
    band_fraction: float = 0.10
    sigma: float | None = None


@dataclass
class MetricsSection:
    fpr_limit: float = 0.3


@dataclass
class BenchSection:
    warmup: int = 1
    repetitions: int = 5
    batch_size: int = 8
    presets: list[str] = field(default_factory=lambda: ["SM256", "SM512", "ENS4", "ENS9", "ST4", "ST9"])


@dataclass
class SyntheticSection:
    image_size: int = 128
    train_count: int = 60
    test_normal: int = 20
    test_anomalous: int = 20
    anomaly_area: list[int] = field(default_factory=lambda: [8, 33])
    anomalies_per_image: list[int] = field(default_factory=lambda: [1, 1])
    contrast: float = 0.3
    texture_sigma: float = 1.0
    texture_amplitude: float = 0.08


@dataclass
class PipelineConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    workers: int = 1
    data: DataSection = field(default_factory=DataSection)
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)
    setup: SetupSection = field(default_factory=lambda: SetupSection(preset="ENS9", preset_tile=64))
    scorer: ScorerSection = field(default_factory=ScorerSection)
    merge: str = "avg"
    smoothing: SmoothingSection = field(default_factory=SmoothingSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    bench: BenchSection = field(default_factory=BenchSection)

    # ---- derived views
    def resolved_setup(self) -> Setup:
        s = self.setup
        base = preset(s.preset, s.preset_tile) if s.preset else None

        def pick(value, attr):
            if value is not None:
                if len(value) != 2:
                    raise ConfigError(f"setup.{attr} must be [height, width], got {value}")
                return int(value[0]), int(value[1])
            if base is None:
                raise ConfigError(f"setup.{attr} is required when no preset is given")
            return getattr(base, attr)

        return Setup(
            name=s.name or (base.name if base else "custom"),
            resolution=pick(s.resolution, "resolution"),
            tile=pick(s.tile, "tile"),
            stride=pick(s.stride, "stride"),
            mode=s.mode or (base.mode if base else "per-location"),
        )

    def with_preset(self, name: str) -> "PipelineConfig":
        tile = self.setup.preset_tile
        return dataclasses.replace(self, setup=SetupSection(preset=name, preset_tile=tile))

    def scorer_config(self) -> ScorerConfig:
        s = self.scorer
        seed = s.coreset_seed
        if seed is None and s.kind == "knn":
            seed = self.seed
        return ScorerConfig(kind=s.kind,
                            features=FeatureConfig(s.cell_size, s.orientation_bins, self.data.channels),
                            epsilon=s.epsilon, coreset_ratio=s.coreset_ratio, coreset_seed=seed)

    def smoothing_config(self) -> SmoothingConfig:
        s = self.smoothing
        return SmoothingConfig(s.enabled, s.band_fraction, s.sigma)

    def synthetic_spec(self) -> SyntheticSpec:
        s = self.synthetic
        return SyntheticSpec(category=self.data.category, image_size=s.image_size, channels=self.data.channels,
                             seed=self.seed, train_count=s.train_count, test_normal=s.test_normal,
                             test_anomalous=s.test_anomalous, anomaly_area=tuple(s.anomaly_area),
                             anomalies_per_image=tuple(s.anomalies_per_image), contrast=s.contrast,
                             texture_sigma=s.texture_sigma, texture_amplitude=s.texture_amplitude)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# --------------------------------------------------------------------------- loading


def _build(cls, data, path: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown key(s) {', '.join(where + k for k in unknown)}; "
                          f"allowed: {', '.join(sorted(known))}")
    kwargs = {}
    for name, value in data.items():
        sub = _SECTIONS.get((cls, name))
        kwargs[name] = _build(sub, value, f"{path}.{name}" if path else name) if sub else value
    return cls(**kwargs)


_SECTIONS = {
    (PipelineConfig, "data"): DataSection,
    (PipelineConfig, "synthetic"): SyntheticSection,
    (PipelineConfig, "setup"): SetupSection,
    (PipelineConfig, "scorer"): ScorerSection,
    (PipelineConfig, "smoothing"): SmoothingSection,
    (PipelineConfig, "metrics"): MetricsSection,
    (PipelineConfig, "bench"): BenchSection,
}


def config_from_dict(data: dict | None) -> PipelineConfig:
    cfg = _build(PipelineConfig, data or {}, "")
    if cfg.schema_version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version {cfg.schema_version} is not supported (expected {SCHEMA_VERSION})")
    return cfg


def load_config(path) -> PipelineConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    return config_from_dict(data)


def dump_config(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


# --------------------------------------------------------------------------- validation


def _positive_int(value, name):
    if not isinstance(value, int) or isinstance(value, bool) or value < 1:
        raise ConfigError(f"{name} must be a positive integer, got {value!r}")


def validate(cfg: PipelineConfig) -> list[str]:
    """Raise :class:`ConfigError` on invalid settings; return advisory warnings."""
    warnings: list[str] = []
    _positive_int(cfg.workers, "workers")
    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {cfg.seed!r}")
    if cfg.merge not in MERGE_STRATEGIES:
        raise ConfigError(f"merge must be one of {MERGE_STRATEGIES}, got {cfg.merge!r}")
    setup = cfg.resolved_setup()
    if setup.mode not in MODES:
        raise ConfigError(f"setup.mode must be one of {MODES}, got {setup.mode!r}")
    for v, n in ((setup.resolution, "resolution"), (setup.tile, "tile"), (setup.stride, "stride")):
        for x in v:
            _positive_int(x, f"setup.{n}")
    for axis, res, t, s in zip(("height", "width"), setup.resolution, setup.tile, setup.stride):
        if s > t:
            raise ConfigError(f"stride {s} exceeds tile {t} along {axis}, which would leave gaps; "
                              f"use a stride <= {t} (e.g. {t} for non-overlapping or {t // 2} for half overlap)")
        if t > res:
            raise ConfigError(f"tile {t} is larger than the input {axis} {res}; "
                              f"reduce the tile to {res} or increase the resolution")
        if (res - t) % s:
            n = -(-(res - t) // s) + 1
            fit = (n - 1) * s + t
            warnings.append(f"{axis} {res} is not covered exactly by tile {t} / stride {s}; "
                            f"the input is zero-padded to {fit}. Use resolution {fit - s} or {fit} for an exact fit")
    sc = cfg.scorer
    _positive_int(sc.cell_size, "scorer.cell_size")
    _positive_int(sc.orientation_bins, "scorer.orientation_bins")
    for t in setup.tile:
        if t % sc.cell_size:
            lo = max(sc.cell_size, t - t % sc.cell_size)
            raise ConfigError(f"tile size {t} is not divisible by scorer.cell_size {sc.cell_size}; "
                              f"use tile {lo} or {lo + sc.cell_size}, or a cell size dividing {t}")
    if sc.kind not in ("gaussian", "knn"):
        raise ConfigError(f"scorer.kind must be 'gaussian' or 'knn', got {sc.kind!r}")
    if not sc.epsilon >= 0:
        raise ConfigError(f"scorer.epsilon must be >= 0, got {sc.epsilon}")
    if not 0 < sc.coreset_ratio <= 1:
        raise ConfigError(f"scorer.coreset_ratio must be in (0, 1], got {sc.coreset_ratio}")
    if cfg.data.channels not in (1, 3):
        raise ConfigError(f"data.channels must be 1 or 3, got {cfg.data.channels}")
    sm = cfg.smoothing
    if not 0 <= sm.band_fraction <= 0.5:
        raise ConfigError(f"smoothing.band_fraction must be in [0, 0.5], got {sm.band_fraction}")
    if sm.sigma is not None and not sm.sigma > 0:
        raise ConfigError(f"smoothing.sigma must be positive or null, got {sm.sigma}")
    if not 0 < cfg.metrics.fpr_limit <= 1:
        raise ConfigError(f"metrics.fpr_limit must be in (0, 1], got {cfg.metrics.fpr_limit}")
    b = cfg.bench
    _positive_int(b.repetitions, "bench.repetitions")
    _positive_int(b.batch_size, "bench.batch_size")
    if not isinstance(b.warmup, int) or b.warmup < 0:
        raise ConfigError(f"bench.warmup must be a non-negative integer, got {b.warmup!r}")
    for p in b.presets:
        preset(p, cfg.setup.preset_tile)
    if cfg.data.root is None:
        try:
            cfg.synthetic_spec().validate()
        except DatasetError as exc:
            raise ConfigError(f"synthetic: {exc}") from exc
    try:
        compute_grid(*setup.resolution, *setup.tile, *setup.stride)
    except TilingError as exc:
        raise ConfigError(str(exc)) from exc
    return warnings
