"""Run configuration files (YAML or JSON), parsed strictly.

Unknown keys are errors that name the offending key path, never ignored.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from .datagen import SlideParams, generate_slide
from .errors import ConfigError, DataError
from .model import EncoderConfig
from .pretext import make_task
from .trainer import TrainConfig

CONFIG_VERSION = 1


def _strict(cls, data, where: str, nested: Optional[dict] = None):
    """Build dataclass ``cls`` from a mapping, rejecting unknown keys."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        keys = ", ".join(f"{where}.{k}" if where else k for k in unknown)
        raise ConfigError(f"unknown config key(s): {keys}")
    kwargs = dict(data)
    for key, sub in (nested or {}).items():
        if key in kwargs and kwargs[key] is not None:
            kwargs[key] = _strict(sub, kwargs[key], f"{where}.{key}" if where else key)
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def slide_params(params: dict, where: str) -> SlideParams:
    if not isinstance(params, dict):
        raise ConfigError(f"{where}: expected a mapping")
    known = {f.name for f in fields(SlideParams)}
    unknown = sorted(set(params) - known)
    if unknown:
        raise ConfigError("unknown config key(s): " + ", ".join(f"{where}.{k}" for k in unknown))
    try:
        p = SlideParams.from_dict(params)
        p.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None
    return p


@dataclass
class TargetSection:
    domain: str = "B"
    slides: int = 28
    slide_seed: int = 3000
    patches_per_slide: Optional[int] = None
    split_fractions: Optional[list] = field(default_factory=lambda: [0.7, 0.0, 0.3])
    # overrides applied on top of the source slide parameters
    params: dict = field(default_factory=dict)


@dataclass
class DataSection:
    slides: int = 12
    slide_seed: int = 1000
    patches_per_slide: int = 20
    label_budget: float = 1.0
    granularity: str = "patch"
    split_fractions: Optional[list] = field(default_factory=lambda: [0.7, 0.15, 0.15])
    placement_seed: int = 0
    domain: str = "A"
    params: dict = field(default_factory=dict)
    target: Optional[TargetSection] = None

    def __post_init__(self):
        if self.slides < 1 or self.patches_per_slide < 1:
            raise ConfigError("slides and patches_per_slide must be >= 1")
        if not 0.0 <= self.label_budget <= 1.0:
            raise ConfigError("label_budget must lie in [0, 1]")
        if self.granularity not in ("patch", "slide"):
            raise ConfigError("granularity must be 'patch' or 'slide'")

    @property
    def slide_params(self) -> SlideParams:
        return slide_params(self.params, "data.params")

    @property
    def target_params(self) -> SlideParams:
        merged = {**self.params, **(self.target.params if self.target else {})}
        return slide_params(merged, "data.target.params")


@dataclass
class TrainSection:
    mode: str = "semi"
    tasks: list = field(default_factory=list)
    epochs: Optional[int] = None
    batch_size: Optional[int] = None
    lr: Optional[float] = None
    encoder: dict = field(default_factory=dict)
    grl_lambda: float = 1.0
    selection: str = "val"
    gan_as_printed: bool = True
    z_dim: int = 100


@dataclass
class SweepSection:
    budgets: list = field(default_factory=lambda: [0.01])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    # arm name -> task list; the arm's tasks replace train.tasks
    arms: dict = field(default_factory=lambda: {"supervised": []})


@dataclass
class HeatmapSection:
    checkpoint: Optional[str] = None
    slides: int = 8
    slide_seed: int = 7000
    tumor_slide_fraction: float = 0.5
    train_fraction: float = 0.5
    forest_seed: int = 0
    overlays: bool = True
    params: dict = field(default_factory=dict)


@dataclass
class PreviewSection:
    tasks: list = field(default_factory=lambda: ["rotation", "flipping", "magnification", "jigmag",
                                                 "hematoxylin"])
    samples: int = 3
    slide_seed: int = 1000


@dataclass
class RunConfig:
    format_version: int = CONFIG_VERSION
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    heatmap: HeatmapSection = field(default_factory=HeatmapSection)
    preview: PreviewSection = field(default_factory=PreviewSection)

    def snapshot(self) -> dict:
        return asdict(self)

    def train_config(self, tasks: Optional[list] = None, seed: Optional[int] = None,
                     label_budget: Optional[float] = None) -> TrainConfig:
        t = self.train
        specs = parse_tasks(t.tasks if tasks is None else tasks, "train.tasks")
        enc = _strict(EncoderConfig, t.encoder, "train.encoder")
        return TrainConfig(mode=t.mode, tasks=specs, epochs=t.epochs, batch_size=t.batch_size, lr=t.lr,
                           seed=self.seed if seed is None else seed,
                           label_budget=self.data.label_budget if label_budget is None else label_budget,
                           encoder=enc, grl_lambda=t.grl_lambda, selection=t.selection,
                           gan_as_printed=t.gan_as_printed, z_dim=t.z_dim)


def parse_tasks(items, where: str) -> list:
    if not isinstance(items, list):
        raise ConfigError(f"{where}: expected a list")
    out = []
    for i, item in enumerate(items):
        key = f"{where}[{i}]"
        if isinstance(item, str):
            name, weight = item, 1.0
        elif isinstance(item, dict):
            unknown = sorted(set(item) - {"name", "weight"})
            if unknown:
                raise ConfigError("unknown config key(s): " + ", ".join(f"{key}.{k}" for k in unknown))
            if "name" not in item:
                raise ConfigError(f"{key}: missing 'name'")
            name, weight = item["name"], item.get("weight", 1.0)
        else:
            raise ConfigError(f"{key}: expected a task name or mapping")
        try:
            out.append(make_task(name, weight))
        except ConfigError as exc:
            raise ConfigError(f"{key}.name: {exc}") from None
    return out


def from_dict(raw: dict) -> RunConfig:
    cfg = _strict(RunConfig, raw, "", nested={
        "data": DataSection, "train": TrainSection, "sweep": SweepSection,
        "heatmap": HeatmapSection, "preview": PreviewSection,
    })
    if cfg.format_version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config format_version {cfg.format_version}")
    if isinstance(cfg.data.target, dict):
        cfg.data.target = _strict(TargetSection, cfg.data.target, "data.target")
    # validate eagerly so bad values fail before any work starts
    cfg.data.slide_params
    if cfg.data.target is not None:
        cfg.data.target_params
    cfg.train_config()
    for arm, tasks in cfg.sweep.arms.items():
        parse_tasks(tasks, f"sweep.arms.{arm}")
    parse_tasks(cfg.preview.tasks, "preview.tasks")
    return cfg


def load(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise DataError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        if path.suffix.lower() == ".json":
            raw = json.loads(text)
        else:
            import yaml

            raw = yaml.safe_load(text)
    except Exception as exc:  # parser-specific exception types
        raise ConfigError(f"{path}: cannot parse config: {exc}") from None
    return from_dict(raw or {})


def workers() -> int:
    """Data-pipeline parallelism cap from SELFPATH_WORKERS (default 1)."""
    try:
        return max(1, int(os.environ.get("SELFPATH_WORKERS", "1")))
    except ValueError:
        raise ConfigError("SELFPATH_WORKERS must be an integer") from None


def _generate(params: SlideParams, seeds, prefix: str, domain: str) -> list:
    jobs = [(params, s, f"{prefix}{i}", domain) for i, s in enumerate(seeds)]
    with ThreadPoolExecutor(max_workers=workers()) as pool:
        # map preserves order, so results do not depend on scheduling
        return list(pool.map(lambda a: generate_slide(*a), jobs))


def source_slides(data: DataSection) -> list:
    seeds = range(data.slide_seed, data.slide_seed + data.slides)
    return _generate(data.slide_params, seeds, f"{data.domain.lower()}", data.domain)


def target_slides(data: DataSection) -> list:
    t = data.target
    if t is None:
        raise ConfigError("data.target is required for mode 'da'")
    if t.domain == data.domain:
        raise ConfigError(f"source and target share the domain identifier {t.domain!r}")
    seeds = range(t.slide_seed, t.slide_seed + t.slides)
    return _generate(data.target_params, seeds, f"{t.domain.lower()}", t.domain)
