"""One JSON document configuring every stage; defaults follow the reference training protocol."""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .boundary_sampler import SamplerConfig
from .dbresnet import NetworkConfig
from .patch_engine import PatchSpec
from .phantom_gen import PhantomSpec
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class PhantomSection:
    n_cases: int = 80
    n_test: int = 20
    seed: int = 0
    shape: list = field(default_factory=lambda: [24, 64, 64])
    spacing: list = field(default_factory=lambda: [1.0, 1.0, 1.0])
    noise_std: float = 20.0
    diameter_range: list = field(default_factory=lambda: [6.0, 12.0])
    small_range: list = field(default_factory=lambda: [3.0, 5.5])
    seed_margin: int = 2


@dataclass
class VolumeSection:
    hu_lo: float = -1000.0
    hu_hi: float = 400.0


@dataclass
class PatchSection:
    view_size: int = 35
    scale_sizes: list = field(default_factory=lambda: [65, 50, 35])


@dataclass
class SamplerSection:
    small_diameter_mm: float = 6.0
    band_width: int = 10
    near_fraction: float = 0.5
    seed: int = 0
    max_samples: int | None = None
    strategy: str = "bws"
    nodule_fraction: float = 0.4
    gt_source: str = "consensus"


@dataclass
class NetworkSection:
    depth: int = 32
    cip_placement: int = 1
    cip_kernels: list = field(default_factory=lambda: [1, 3])
    channel_divisor: int = 1
    pooling: str = "max"
    seed: int = 0


@dataclass
class TrainerSection:
    lr: float = 0.001
    lr_decay: float = 0.9
    decay_every: int = 5
    momentum: float = 0.9
    batch_size: int = 32
    max_epochs: int = 20
    patience: int = 10
    val_fraction: float = 0.1
    seed: int = 0


@dataclass
class SegmenterSection:
    threshold: float = 0.5
    stop_ratio: float = 0.3
    post: bool = True
    batch_size: int = 256


@dataclass
class EvaluatorSection:
    gt_source: str = "consensus"
    histogram_bins: int = 10


def _default_rows() -> list:
    row = {"scale": True, "bws": True, "depth": 32, "cip": 0, "post": False}
    rows = [
        {"name": "DB-ResNet32 - Scale - BWS", **row, "scale": False, "bws": False},
        {"name": "DB-ResNet32 - BWS", **row, "bws": False},
        {"name": "DB-ResNet32", **row},
        {"name": "DB-ResNet83", **row, "depth": 83},
        {"name": "DB-ResNet134", **row, "depth": 134},
    ]
    rows += [{"name": f"DB-ResNet32 + CIP_{n}", **row, "cip": n} for n in range(1, 5)]
    rows.append({"name": "DB-ResNet32 + CIP_1 + Post", **row, "cip": 1, "post": True})
    return rows


@dataclass
class AblationSection:
    rows: list = field(default_factory=_default_rows)


ROW_KEYS = {"name", "scale", "bws", "depth", "cip", "post"}


@dataclass
class PipelineConfig:
    phantom: PhantomSection = field(default_factory=PhantomSection)
    volume: VolumeSection = field(default_factory=VolumeSection)
    patch: PatchSection = field(default_factory=PatchSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    trainer: TrainerSection = field(default_factory=TrainerSection)
    segmenter: SegmenterSection = field(default_factory=SegmenterSection)
    evaluator: EvaluatorSection = field(default_factory=EvaluatorSection)
    ablation: AblationSection = field(default_factory=AblationSection)

    # -- construction -----------------------------------------------------

    @classmethod
    def from_dict(cls, obj: dict) -> "PipelineConfig":
        cfg = cls()
        cfg.update(obj)
        return cfg

    @classmethod
    def load(cls, path=None, overrides=()) -> "PipelineConfig":
        cfg = cls()
        if path is not None:
            try:
                cfg.update(json.loads(Path(path).read_text()))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        for item in overrides:
            cfg.set(item)
        cfg.validate()
        return cfg

    def update(self, obj: dict) -> None:
        if not isinstance(obj, dict):
            raise ConfigError("config must be a JSON object")
        for section, values in obj.items():
            target = getattr(self, section, None)
            if not is_dataclass(target):
                raise ConfigError(f"unknown config section {section!r}")
            if not isinstance(values, dict):
                raise ConfigError(f"section {section!r} must be an object")
            known = {f.name for f in fields(target)}
            for key, value in values.items():
                if key not in known:
                    raise ConfigError(f"unknown config key {section}.{key}")
                setattr(target, key, copy.deepcopy(value))

    def set(self, assignment: str) -> None:
        """Apply one ``section.key=value`` override; the value is parsed as JSON when possible."""
        if "=" not in assignment:
            raise ConfigError(f"override {assignment!r} is not key=value")
        key, raw = assignment.split("=", 1)
        parts = key.strip().split(".")
        if len(parts) != 2:
            raise ConfigError(f"override key {key!r} must be section.key")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        current = getattr(getattr(self, parts[0], None), parts[1], None)
        if isinstance(current, str) and not isinstance(value, str):
            value = raw
        self.update({parts[0]: {parts[1]: value}})

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)

    def validate(self) -> None:
        try:
            self.sampler_config()
            self.network_config()
            self.train_config()
            self.patch_spec()
            self.phantom_spec()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        for src in (self.sampler.gt_source, self.evaluator.gt_source):
            if src not in ("consensus", "true"):
                raise ConfigError(f"gt_source must be 'consensus' or 'true', got {src!r}")
        if not 0.0 <= self.segmenter.threshold <= 1.0:
            raise ConfigError("segmenter.threshold must lie in [0, 1]")
        if not 0.0 <= self.segmenter.stop_ratio <= 1.0:
            raise ConfigError("segmenter.stop_ratio must lie in [0, 1]")
        if not 0 <= self.phantom.n_test <= self.phantom.n_cases:
            raise ConfigError("phantom.n_test must lie in [0, n_cases]")
        for row in self.ablation.rows:
            extra = set(row) - ROW_KEYS
            if extra or "name" not in row:
                raise ConfigError(f"ablation row {row!r}: unknown keys {sorted(extra)} or missing name")

    # -- typed views --------------------------------------------------------

    def sampler_config(self) -> SamplerConfig:
        s = self.sampler
        return SamplerConfig(
            small_diameter_mm=s.small_diameter_mm,
            band_width=s.band_width,
            near_fraction=s.near_fraction,
            seed=s.seed,
            max_samples=s.max_samples,
            strategy=s.strategy,
            nodule_fraction=s.nodule_fraction,
        )

    def patch_spec(self) -> PatchSpec:
        return PatchSpec(self.patch.view_size, tuple(self.patch.scale_sizes), self.patch.view_size)

    def network_config(self) -> NetworkConfig:
        n = self.network
        return NetworkConfig(
            depth=n.depth,
            cip_placement=n.cip_placement,
            cip_kernels=tuple(n.cip_kernels),
            channel_divisor=n.channel_divisor,
            view_size=self.patch.view_size,
            n_scales=len(self.patch.scale_sizes),
            pooling=n.pooling,
            seed=n.seed,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(**asdict(self.trainer))

    def phantom_spec(self) -> PhantomSpec:
        p = self.phantom
        return PhantomSpec(
            shape=tuple(p.shape), spacing=tuple(p.spacing), noise_std=p.noise_std, seed_margin=p.seed_margin
        )

    def with_row(self, row: dict) -> "PipelineConfig":
        """Copy with one ablation row's toggles applied."""
        cfg = copy.deepcopy(self)
        if not row.get("scale", True):
            cfg.patch.scale_sizes = [s for s in cfg.patch.scale_sizes if s != 50]
        if not row.get("bws", True):
            cfg.sampler.strategy = "fraction"
        cfg.network.depth = int(row.get("depth", cfg.network.depth))
        cfg.network.cip_placement = int(row.get("cip", cfg.network.cip_placement))
        cfg.segmenter.post = bool(row.get("post", cfg.segmenter.post))
        cfg.validate()
        return cfg
