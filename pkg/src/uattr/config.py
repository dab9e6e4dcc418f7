"""Run configuration: nested JSON sections, dotted overrides, workspace-relative paths."""
from __future__ import annotations

import dataclasses
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .datasets import DatasetSpec, PlantedGroup
from .diffusion import KV_SEGMENTS, DiffusionConfig
from .trainer import TrainConfig
from .unlearn import UnlearnConfig

METHODS = ("unlearning", "pixel_cosine", "projected_influence", "single_timestep")


class ConfigError(ValueError):
    pass


def default_groups() -> list[dict]:
    """20 exact-duplicate groups (one per query) plus jittered same-class distractor clusters."""
    exact = [{"group_id": g, "cls": g % 4, "count": 10, "jitter_std": 0.0} for g in range(20)]
    near = [{"group_id": 100 + g, "cls": g % 4, "count": 10, "jitter_std": 0.2} for g in range(8)]
    return exact + near


@dataclass
class DatasetSection:
    n: int = 2000
    num_classes: int = 4
    image_shape: list = field(default_factory=lambda: [1, 8, 8])
    planted_groups: list = field(default_factory=default_groups)
    pgm_dir: str | None = None
    pgm_labels: str | None = None


@dataclass
class DiffusionSection:
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class TrainSection:
    epochs: int = 60
    batch_size: int = 64
    learning_rate: float = 0.1
    momentum: float = 0.9
    flip_augment: bool = True


@dataclass
class FisherSection:
    draws_per_example: int = 5


@dataclass
class UnlearnSection:
    alpha: float = 0.01
    steps: int = 1
    mask: list = field(default_factory=lambda: list(KV_SEGMENTS))
    stride: int = 10
    region: list | None = None
    scale_by_n: bool = True


@dataclass
class AttributionSection:
    methods: list = field(default_factory=lambda: list(METHODS))
    stride: int = 10
    proj_dim: int = 256
    t_fixed: int = 80
    influence_mask: list | None = None
    flip_augment: bool = True
    ensemble: int = 1


@dataclass
class QueriesSection:
    groups: list = field(default_factory=lambda: list(range(20)))
    t_start: int = 10


@dataclass
class EvalSection:
    k_grid: list = field(default_factory=lambda: [10, 25, 50, 100])
    models_per_k: int = 3
    methods: list = field(default_factory=lambda: list(METHODS))
    loss_stride: int = 1
    encoder_epochs: int = 8


@dataclass
class SeedsSection:
    dataset: int = 0
    train: int = 0
    fisher: int = 1
    queries: int = 2
    unlearn: int = 3
    attribution: int = 3
    eval: int = 4
    encoder: int = 5


@dataclass
class PathsSection:
    data: str = "data"
    runs: str = "runs"
    fisher: str = "fisher/fisher.bin"
    queries: str = "queries"
    unlearned: str = "unlearned"
    scores: str = "scores"
    eval: str = "eval"
    report: str = "report"


@dataclass
class RunConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    train: TrainSection = field(default_factory=TrainSection)
    fisher: FisherSection = field(default_factory=FisherSection)
    unlearn: UnlearnSection = field(default_factory=UnlearnSection)
    attribution: AttributionSection = field(default_factory=AttributionSection)
    queries: QueriesSection = field(default_factory=QueriesSection)
    eval: EvalSection = field(default_factory=EvalSection)
    seeds: SeedsSection = field(default_factory=SeedsSection)
    paths: PathsSection = field(default_factory=PathsSection)
    root: Path = field(default=Path("."), compare=False, repr=False)

    # -- typed views -------------------------------------------------------
    def dataset_spec(self) -> DatasetSpec:
        d = self.dataset
        return DatasetSpec(n=d.n, num_classes=d.num_classes, seed=self.seeds.dataset,
                           image_shape=tuple(d.image_shape),
                           planted_groups=tuple(PlantedGroup(**g) for g in d.planted_groups))

    def diffusion_config(self) -> DiffusionConfig:
        d = self.diffusion
        return DiffusionConfig(T=d.T, beta_start=d.beta_start, beta_end=d.beta_end,
                               image_shape=tuple(self.dataset.image_shape), num_classes=self.dataset.num_classes)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(epochs=t.epochs, batch_size=t.batch_size, learning_rate=t.learning_rate,
                           momentum=t.momentum, flip_augment=t.flip_augment, seed=self.seeds.train)

    def unlearn_config(self, n_train: int) -> UnlearnConfig:
        """UnlearnConfig with the effective step size (alpha/N when ``scale_by_n``)."""
        u = self.unlearn
        alpha = u.alpha / n_train if u.scale_by_n else u.alpha
        return UnlearnConfig(alpha=alpha, steps=u.steps, mask=tuple(u.mask), stride=u.stride,
                             region=None if u.region is None else u.region, seed=self.seeds.unlearn)

    def path(self, name: str) -> Path:
        return self.root / getattr(self.paths, name)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("root")
        return d


def _build(cls, data, where: str):
    if not dataclasses.is_dataclass(cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.name != "root"}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) {', '.join((where + '.' if where else '') + k for k in unknown)}")
    kwargs = {}
    for k, v in data.items():
        kwargs[k] = _build(hints[k], v, f"{where}.{k}" if where else k)
    return cls(**kwargs)


def from_dict(data: dict, root=".") -> RunConfig:
    cfg = _build(RunConfig, data, "")
    cfg.root = Path(root)
    # typed views double as validation
    try:
        cfg.dataset_spec()
        cfg.diffusion_config()
        cfg.train_config()
        unknown = set(cfg.attribution.methods) - set(METHODS) | set(cfg.eval.methods) - set(METHODS)
        if unknown:
            raise ConfigError(f"unknown method(s): {sorted(unknown)}")
        if sorted(cfg.eval.k_grid) != list(cfg.eval.k_grid) or any(k < 1 for k in cfg.eval.k_grid):
            raise ConfigError("eval.k_grid must be ascending positive integers")
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def parse_value(text: str):
    """JSON literal if it parses, else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``a.b=value`` assignments to a raw config dict (copy)."""
    data = json.loads(json.dumps(data))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override must look like section.key=value: {item!r}")
        path, raw = item.split("=", 1)
        keys = path.strip().split(".")
        node = data
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override inside non-object {path!r}")
        node[keys[-1]] = parse_value(raw)
    return data


def resolve_root(flag: str | None) -> Path:
    root = flag or os.environ.get("UATTR_WORKSPACE")
    if not root:
        raise ConfigError("no workspace root: pass --workspace or set UATTR_WORKSPACE")
    return Path(root).resolve()


def load_config(path, overrides=(), root=".") -> RunConfig:
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
    return from_dict(apply_overrides(data, overrides), root)
