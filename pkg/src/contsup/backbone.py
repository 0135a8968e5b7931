"""Residual backbones as sequences of indivisible units, and their partitioning.

A backbone is described declaratively by a :class:`BackboneSpec` (a tuple of
:class:`MinimalUnit`), which can be turned into ``nn.Module`` objects with
:func:`build_unit` and split into gradient-isolated segments with
:func:`partition_equal` or :func:`partition_memory_balanced`.

Unit index 0 is always the stem convolution; every other unit is one basic
residual block.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InvariantViolation

STEM = "stem"
RESIDUAL_BLOCK = "residual_block"

EQUAL_UNITS = "equal_units"
MEMORY_BALANCED = "memory_balanced"
STRATEGIES = (EQUAL_UNITS, MEMORY_BALANCED)


@dataclass(frozen=True)
class MinimalUnit:
    index: int
    kind: str
    in_channels: int
    out_channels: int
    spatial_in: int
    spatial_out: int
    downsamples: bool

    @property
    def stride(self) -> int:
        return self.spatial_in // self.spatial_out

    @property
    def has_projection(self) -> bool:
        return self.kind == RESIDUAL_BLOCK and (
            self.downsamples or self.in_channels != self.out_channels
        )

    @property
    def output_shape(self) -> tuple[int, int, int]:
        return (self.out_channels, self.spatial_out, self.spatial_out)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.in_channels, self.spatial_in, self.spatial_in)


@dataclass(frozen=True)
class BackboneSpec:
    units: tuple[MinimalUnit, ...]
    num_classes: int
    input_shape: tuple[int, int, int]

    def __len__(self) -> int:
        return len(self.units)

    @property
    def feature_channels(self) -> int:
        return self.units[-1].out_channels

    def validate(self) -> None:
        if not self.units or self.units[0].kind != STEM:
            raise InvariantViolation("unit 0 must be the stem")
        if self.units[0].input_shape != tuple(self.input_shape):
            raise InvariantViolation(
                f"stem input {self.units[0].input_shape} != input_shape {tuple(self.input_shape)}"
            )
        for prev, unit in zip(self.units, self.units[1:]):
            if unit.kind != RESIDUAL_BLOCK:
                raise InvariantViolation(f"unit {unit.index} must be a residual block")
            if unit.input_shape != prev.output_shape:
                raise InvariantViolation(
                    f"unit {unit.index} expects {unit.input_shape}, "
                    f"unit {prev.index} produces {prev.output_shape}"
                )
        for i, unit in enumerate(self.units):
            if unit.index != i:
                raise InvariantViolation(f"unit at position {i} has index {unit.index}")
            if unit.spatial_out * unit.stride != unit.spatial_in or unit.stride not in (1, 2):
                raise InvariantViolation(f"unit {i}: stride must be 1 or 2")


def resnet_blocks_per_stage(depth: int, num_stages: int = 3) -> tuple[int, ...]:
    """Blocks per stage for a CIFAR-style ResNet of the given depth (6n + 2)."""
    if depth < 8 or (depth - 2) % (2 * num_stages) != 0:
        raise ConfigError(
            f"ResNet depth must satisfy depth = {2 * num_stages}n + 2 with n >= 1; got {depth}"
        )
    n = (depth - 2) // (2 * num_stages)
    return (n,) * num_stages


def build_backbone(
    family: str = "resnet",
    depth: Optional[int] = 32,
    input_shape: Sequence[int] = (3, 32, 32),
    num_classes: int = 10,
    blocks_per_stage: Optional[Sequence[int]] = None,
    widths: Sequence[int] = (16, 32, 64),
) -> BackboneSpec:
    """Describe a CIFAR-style ResNet.

    Either ``depth`` (6n + 2) or an explicit ``blocks_per_stage`` must be
    given; the latter allows desk-scale stacks such as ``(3, 2, 2)`` whose
    unit count does not correspond to a standard depth. Every stage after
    the first halves the spatial size in its first block.
    """
    if family != "resnet":
        raise ConfigError(f"unknown backbone family {family!r}; only 'resnet' ships")
    if blocks_per_stage is None:
        if depth is None:
            raise ConfigError("either depth or blocks_per_stage is required")
        blocks_per_stage = resnet_blocks_per_stage(depth, len(widths))
    blocks_per_stage = tuple(int(b) for b in blocks_per_stage)
    if len(blocks_per_stage) != len(widths):
        raise ConfigError(
            f"blocks_per_stage has {len(blocks_per_stage)} stages but widths has {len(widths)}"
        )
    if any(b < 0 for b in blocks_per_stage) or any(w < 1 for w in widths):
        raise ConfigError("block counts must be >= 0 and widths >= 1")
    c, h, w = (int(v) for v in input_shape)
    if h != w:
        raise ConfigError(f"only square inputs are supported; got {h}x{w}")
    if num_classes < 2:
        raise ConfigError("num_classes must be >= 2")

    units = [MinimalUnit(0, STEM, c, widths[0], h, h, False)]
    channels, spatial = widths[0], h
    for stage, (n_blocks, width) in enumerate(zip(blocks_per_stage, widths)):
        for b in range(n_blocks):
            down = stage > 0 and b == 0
            if down and spatial % 2:
                raise ConfigError(f"spatial size {spatial} cannot be halved at stage {stage}")
            out_spatial = spatial // 2 if down else spatial
            units.append(
                MinimalUnit(len(units), RESIDUAL_BLOCK, channels, width, spatial, out_spatial, down)
            )
            channels, spatial = width, out_spatial
    spec = BackboneSpec(tuple(units), num_classes, (c, h, w))
    spec.validate()
    return spec


# ---------------------------------------------------------------------------
# nn.Module construction


class Stem(nn.Module):
    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 3, 1, 1, bias=False)
        self.bn = nn.BatchNorm2d(out_channels)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)))


class BasicBlock(nn.Module):
    def __init__(self, in_channels, out_channels, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride, 0, bias=False),
                nn.BatchNorm2d(out_channels),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


def init_weights(module: nn.Module) -> None:
    """He (fan-out) convolutions, unit/zero norms, zero linear biases."""
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm2d, nn.BatchNorm1d)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def build_unit(unit: MinimalUnit) -> nn.Module:
    if unit.kind == STEM:
        module = Stem(unit.in_channels, unit.out_channels)
    else:
        module = BasicBlock(unit.in_channels, unit.out_channels, unit.stride)
    init_weights(module)
    return module


# ---------------------------------------------------------------------------
# Partitioning


@dataclass(frozen=True)
class PartitionPlan:
    """Half-open unit-index ranges ``[start, stop)``, one per module."""

    boundaries: tuple[tuple[int, int], ...]
    strategy: str

    @property
    def K(self) -> int:
        return len(self.boundaries)

    @property
    def sizes(self) -> list[int]:
        return [stop - start for start, stop in self.boundaries]

    def module_of_unit(self, unit_index: int) -> int:
        for m, (start, stop) in enumerate(self.boundaries):
            if start <= unit_index < stop:
                return m
        raise IndexError(unit_index)

    def validate(self, n_units: int) -> None:
        expected = 0
        for start, stop in self.boundaries:
            if start != expected or stop <= start:
                raise InvariantViolation(f"plan {self.boundaries} is not a contiguous cover")
            expected = stop
        if expected != n_units:
            raise InvariantViolation(f"plan covers {expected} of {n_units} units")

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "boundaries": [list(b) for b in self.boundaries]}

    @classmethod
    def from_dict(cls, d: dict) -> "PartitionPlan":
        return cls(tuple((int(a), int(b)) for a, b in d["boundaries"]), d["strategy"])

    @classmethod
    def from_sizes(cls, sizes: Sequence[int], strategy: str) -> "PartitionPlan":
        bounds, start = [], 0
        for s in sizes:
            bounds.append((start, start + s))
            start += s
        return cls(tuple(bounds), strategy)


def _n_units(spec_or_n) -> int:
    return spec_or_n if isinstance(spec_or_n, int) else len(spec_or_n)


def _check_K(n: int, K: int) -> None:
    if K < 1:
        raise ConfigError(f"K must be >= 1; got {K}")
    if K > n:
        raise ConfigError(f"K={K} exceeds the number of minimal units ({n})")


def partition_equal(spec: BackboneSpec | int, K: int) -> PartitionPlan:
    """Equal unit counts; when uneven the earlier modules get one unit less."""
    n = _n_units(spec)
    _check_K(n, K)
    base, extra = divmod(n, K)
    sizes = [base] * (K - extra) + [base + 1] * extra
    return PartitionPlan.from_sizes(sizes, EQUAL_UNITS)


def _leximax_key(costs: Sequence[int]) -> tuple[int, ...]:
    return tuple(sorted(costs, reverse=True))


def partition_memory_balanced(
    spec: BackboneSpec | int,
    K: int,
    cost_model: Callable[[MinimalUnit], int] | Sequence[int] | None = None,
) -> PartitionPlan:
    """Contiguous K-partition minimising the largest per-module cost.

    ``cost_model`` is either a callable on units or an explicit list of
    per-unit costs (required when ``spec`` is a bare unit count). Defaults to
    :func:`contsup.accounting.unit_activation_bytes`.

    Ties on the maximum are broken by the next-largest module cost and so on
    (the sorted cost vector is minimised lexicographically), and remaining
    ties prefer fewer units in earlier modules. With uniform costs this
    reproduces :func:`partition_equal` exactly.
    """
    n = _n_units(spec)
    _check_K(n, K)
    costs = _resolve_costs(spec, cost_model)
    if any(c <= 0 for c in costs):
        raise ConfigError("every unit must have a positive cost")

    prefix = [0] + list(itertools.accumulate(costs))

    def seg(a, b):
        return prefix[b] - prefix[a]

    # best[k][j]: (leximax key, sizes) for the first j units in k modules.
    # Leximax order is preserved under adding the same segment cost, so the
    # optimal prefix per (k, j) extends to an optimal full plan.
    best: list[dict[int, tuple[tuple[int, ...], tuple[int, ...], tuple[int, ...]]]] = [
        {} for _ in range(K + 1)
    ]
    best[0][0] = ((), (), ())
    for k in range(1, K + 1):
        for j in range(k, n - (K - k) + 1):
            cand = None
            for i in range(k - 1, j):
                if i not in best[k - 1]:
                    continue
                _, prev_costs, prev_sizes = best[k - 1][i]
                mc = prev_costs + (seg(i, j),)
                item = (_leximax_key(mc), mc, prev_sizes + (j - i,))
                if cand is None or (item[0], item[2]) < (cand[0], cand[2]):
                    cand = item
            best[k][j] = cand
    return PartitionPlan.from_sizes(best[K][n][2], MEMORY_BALANCED)


def _resolve_costs(spec, cost_model) -> list[int]:
    if cost_model is None:
        if isinstance(spec, int):
            raise ConfigError("explicit costs are required when only a unit count is given")
        from .accounting import unit_activation_bytes

        cost_model = unit_activation_bytes
    if callable(cost_model):
        if isinstance(spec, int):
            raise ConfigError("a callable cost model needs a BackboneSpec")
        return [int(cost_model(u)) for u in spec.units]
    costs = [int(c) for c in cost_model]
    if len(costs) != _n_units(spec):
        raise ConfigError(f"got {len(costs)} costs for {_n_units(spec)} units")
    return costs


def plan_max_cost(plan: PartitionPlan, costs: Sequence[int]) -> int:
    return max(sum(costs[a:b]) for a, b in plan.boundaries)


def make_plan(spec: BackboneSpec, K: int, strategy: str = EQUAL_UNITS, cost_model=None) -> PartitionPlan:
    if strategy == EQUAL_UNITS:
        return partition_equal(spec, K)
    if strategy == MEMORY_BALANCED:
        return partition_memory_balanced(spec, K, cost_model)
    raise ConfigError(f"unknown partition strategy {strategy!r}; expected one of {STRATEGIES}")
