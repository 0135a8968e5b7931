"""Run configuration: one JSON document per run, sweeps as lists over scalar fields."""

from __future__ import annotations

import copy
import hashlib
import itertools
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Optional

from .backbone import STRATEGIES, BackboneSpec, build_backbone
from .context import ContextSpec
from .data import DATASETS, ToyConfig
from .engine import TrainingConfig
from .errors import ConfigError
from .heads import HEAD_KINDS, ObjectiveConfig

DATASET_INPUT = {"cifar10": (3, 32, 32), "svhn": (3, 32, 32), "stl10": (3, 96, 96)}


@dataclass
class BackboneConfig:
    family: str = "resnet"
    depth: int = 32
    blocks_per_stage: Optional[list[int]] = None
    widths: list[int] = field(default_factory=lambda: [16, 32, 64])


@dataclass
class DatasetConfig:
    name: str = "toy"
    root: Optional[str] = None
    augmentation_on: bool = True
    toy: ToyConfig = field(default_factory=ToyConfig)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        if self.name == "toy":
            return (3, self.toy.size, self.toy.size)
        return DATASET_INPUT[self.name]

    @property
    def num_classes(self) -> int:
        return self.toy.num_classes if self.name == "toy" else 10


@dataclass
class TrainingBlock:
    """:class:`TrainingConfig` without the seed, which comes from ``RunConfig.seeds``."""

    epochs: int = 160
    batch_size: int = 1024
    lr: float = 0.8
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: str = "cosine"
    nesterov: bool = True

    def to_training_config(self, seed: int) -> TrainingConfig:
        return TrainingConfig(seed=seed, **asdict(self))


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    K: int = 2
    partition: str = "equal_units"
    context: str = "R0"
    head_kind: str = "softmax"
    temperature: float = 0.5
    decoder_on: bool = False
    rec_weight: float = 1.0
    training: TrainingBlock = field(default_factory=TrainingBlock)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    context_overrides: dict[str, str] = field(default_factory=dict)
    zero_init_adapters: bool = False
    timing_repetitions: int = 5
    output_dir: str = "runs"
    seeds: list[int] = field(default_factory=lambda: [0])

    def validate(self) -> "RunConfig":
        ContextSpec.parse(self.context)
        for tag in self.context_overrides.values():
            ContextSpec.parse(tag)
        if self.partition not in STRATEGIES:
            raise ConfigError(f"partition must be one of {STRATEGIES}")
        if self.head_kind not in HEAD_KINDS:
            raise ConfigError(f"head_kind must be one of {HEAD_KINDS}")
        if self.dataset.name not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if self.timing_repetitions and self.timing_repetitions < 3:
            raise ConfigError("timing_repetitions must be 0 (off) or >= 3")
        self.objective()
        self.training.to_training_config(0)
        self.backbone_spec()
        return self

    def objective(self) -> ObjectiveConfig:
        return ObjectiveConfig(self.head_kind, self.temperature, self.decoder_on, self.rec_weight)

    def backbone_spec(self) -> BackboneSpec:
        b = self.backbone
        return build_backbone(
            b.family,
            b.depth,
            input_shape=self.dataset.input_shape,
            num_classes=self.dataset.num_classes,
            blocks_per_stage=tuple(b.blocks_per_stage) if b.blocks_per_stage else None,
            widths=tuple(b.widths),
        )

    def overrides(self) -> dict[int, str]:
        return {int(k): v for k, v in self.context_overrides.items()}

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "").validate()

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from exc

    def config_hash(self) -> str:
        """Hash of everything that affects results (output location and seeds excluded)."""
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("seeds")
        d.pop("timing_repetitions")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    def run_name(self, seed: int) -> str:
        b = self.backbone
        arch = f"{b.family}{b.depth}" if not b.blocks_per_stage else f"{b.family}-{'-'.join(map(str, b.blocks_per_stage))}"
        return f"{self.dataset.name}_{arch}_K{self.K}_{self.context}_{self.config_hash()[:8]}_s{seed}"


_NESTED = {"backbone": BackboneConfig, "training": TrainingBlock, "dataset": DatasetConfig, "toy": ToyConfig}


def _build(cls, d: Any, path: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{path or 'config'} must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {path or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for k, v in d.items():
        if k in _NESTED:
            kwargs[k] = _build(_NESTED[k], v, f"{path}{k}.")
        elif isinstance(v, list) and k in ("input_shape",):
            kwargs[k] = tuple(v)
        else:
            kwargs[k] = v
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# sweeps

# fields whose natural value is already a list; a list-of-lists sweeps them
_LIST_FIELDS = {"seeds", "widths", "blocks_per_stage"}


def _axes(d: dict, prefix=""):
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and k != "context_overrides":
            yield from _axes(v, key + ".")
        elif isinstance(v, list):
            if k in _LIST_FIELDS:
                if v and all(isinstance(x, list) or x is None for x in v):
                    yield key, v
            else:
                yield key, v


def _assign(d: dict, dotted: str, value):
    *parents, leaf = dotted.split(".")
    for p in parents:
        d = d[p]
    d[leaf] = value


def expand_sweep(doc: dict) -> list[RunConfig]:
    """Cartesian product over every scalar field given as a list (in document order)."""
    axes = list(_axes(doc))
    if not axes:
        return [RunConfig.from_dict(doc)]
    out = []
    for combo in itertools.product(*(values for _, values in axes)):
        d = copy.deepcopy(doc)
        for (key, _), value in zip(axes, combo):
            _assign(d, key, value)
        out.append(RunConfig.from_dict(d))
    return out


def _read(path: str) -> str:
    try:
        with open(path) as fh:
            return fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc.strerror}") from exc


def load_config(path: str) -> RunConfig:
    return RunConfig.from_json(_read(path))


def load_sweep(path: str) -> list[RunConfig]:
    try:
        return expand_sweep(json.loads(_read(path)))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from exc
