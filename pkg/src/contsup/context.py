"""Context selection and the adapters that fold context into module inputs.

Modes are written as short tags:

* ``R0``     no context (plain decoupled greedy learning)
* ``E``      the origin input, through a small convolutional encoder
* ``Rn``     the ``n`` most recent earlier augmented features, each through
             a 1x1 aligner
* ``RnE``    both of the above
* ``MiR1E``  ``R1E`` plus ``i`` evenly spaced intermediate augmented features

Module indices are 1-based throughout this module. ``augmented(j)`` denotes
the input of module ``j + 1`` after its own context was added; the input of
module 1 is the origin input itself, so ``augmented(0)`` is the origin input
routed through an aligner rather than the encoder.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import torch
import torch.nn as nn

from .errors import ConfigError, InvariantViolation

ENCODER_E = "encoder_E"
ALIGNER_R = "aligner_R"

_TAG_RE = re.compile(r"^(?:M(?P<mi>\d+)R1E|R(?P<n>\d+)(?P<e>E?)|(?P<only_e>E))$")


@dataclass(frozen=True)
class ContextSpec:
    mode: str  # one of R0, E, Rn, RnE, MiR1E
    n: int = 0
    i: int = 0

    def __post_init__(self):
        if self.mode not in ("R0", "E", "Rn", "RnE", "MiR1E"):
            raise ConfigError(f"unknown context mode {self.mode!r}")
        if self.mode in ("Rn", "RnE") and self.n < 1:
            raise ConfigError(f"{self.mode} needs n >= 1")
        if self.mode == "MiR1E" and self.i < 1:
            raise ConfigError("MiR1E needs i >= 1")

    @classmethod
    def parse(cls, tag: str) -> "ContextSpec":
        tag = tag.strip()
        if tag == "R0":
            return cls("R0")
        m = _TAG_RE.match(tag)
        if m is None or (m.group("n") is not None and int(m.group("n")) == 0):
            raise ConfigError(
                f"cannot parse context tag {tag!r}; expected R0, E, R<n>, R<n>E or M<i>R1E"
            )
        if m.group("only_e"):
            return cls("E")
        if m.group("mi") is not None:
            return cls("MiR1E", n=1, i=int(m.group("mi")))
        n = int(m.group("n"))
        return cls("RnE" if m.group("e") else "Rn", n=n)

    @property
    def tag(self) -> str:
        if self.mode in ("R0", "E"):
            return self.mode
        if self.mode == "Rn":
            return f"R{self.n}"
        if self.mode == "RnE":
            return f"R{self.n}E"
        return f"M{self.i}R1E"

    def __str__(self) -> str:
        return self.tag

    @property
    def uses_origin(self) -> bool:
        return self.mode in ("E", "RnE", "MiR1E")

    @property
    def shortcut_depth(self) -> int:
        return self.n if self.mode in ("Rn", "RnE", "MiR1E") else 0

    @property
    def intermediate_points(self) -> int:
        return self.i if self.mode == "MiR1E" else 0


class Source(NamedTuple):
    kind: str  # "origin" or "augmented"
    index: int  # augmented feature index j; 0 for the origin input

    def __str__(self):
        return "x" if self.kind == "origin" else f"h{self.index}c"


ORIGIN = Source("origin", 0)


def augmented(j: int) -> Source:
    return Source("augmented", j)


@dataclass(frozen=True)
class ContextSources:
    module_index: int
    sources: tuple[Source, ...]

    def __len__(self):
        return len(self.sources)


def _round_half_down(v: float) -> int:
    return math.ceil(v - 0.5)


def intermediate_indices(l: int, i: int) -> list[int]:
    """Evenly spaced interior augmented-feature indices for module ``l``."""
    top = l - 2
    if top < 1:
        return []
    out = []
    for k in range(1, i + 1):
        j = min(max(_round_half_down(k * top / (i + 1)), 1), top)
        if j not in out:
            out.append(j)
    return out


def sources_for_module(spec: ContextSpec, l: int) -> ContextSources:
    if l == 1:
        return ContextSources(1, ())
    srcs: list[Source] = []
    if spec.uses_origin:
        srcs.append(ORIGIN)
    for i in range(1, spec.shortcut_depth + 1):
        j = l - 1 - i
        if j >= 0:
            srcs.append(augmented(j))
    for j in intermediate_indices(l, spec.intermediate_points):
        if augmented(j) not in srcs:
            srcs.append(augmented(j))
    return ContextSources(l, tuple(srcs))


def resolve_sources(spec: ContextSpec | str, K: int, overrides: Optional[dict] = None) -> list[ContextSources]:
    """Per-module context sources for a K-module network.

    ``overrides`` maps a 1-based module index to another spec (or tag) used
    for that module only, which is how hybrid schemes are expressed.
    """
    if isinstance(spec, str):
        spec = ContextSpec.parse(spec)
    if K < 1:
        raise ConfigError(f"K must be >= 1; got {K}")
    overrides = {int(k): (ContextSpec.parse(v) if isinstance(v, str) else v) for k, v in (overrides or {}).items()}
    bad = [k for k in overrides if not 1 <= k <= K]
    if bad:
        raise ConfigError(f"override module indices {bad} outside 1..{K}")
    return [sources_for_module(overrides.get(l, spec), l) for l in range(1, K + 1)]


# ---------------------------------------------------------------------------
# Adapters


class ContextAdapter(nn.Module):
    """Maps one context source onto the shape of a module's incoming feature.

    ``encoder_E``: two 3x3 conv + BN + ReLU at the source resolution.
    ``aligner_R``: one 1x1 conv + BN + ReLU. Both end in adaptive average
    pooling to the target spatial size.
    """

    def __init__(self, kind: str, source_shape: Sequence[int], target_shape: Sequence[int], zero_init: bool = False):
        super().__init__()
        if kind not in (ENCODER_E, ALIGNER_R):
            raise ConfigError(f"unknown adapter kind {kind!r}")
        self.kind = kind
        self.source_shape = tuple(int(v) for v in source_shape)
        self.target_shape = tuple(int(v) for v in target_shape)
        cin, cout = self.source_shape[0], self.target_shape[0]
        if kind == ENCODER_E:
            layers = [
                nn.Conv2d(cin, cout, 3, 1, 1, bias=False),
                nn.BatchNorm2d(cout),
                nn.ReLU(),
                nn.Conv2d(cout, cout, 3, 1, 1, bias=False),
                nn.BatchNorm2d(cout),
                nn.ReLU(),
            ]
        else:
            layers = [nn.Conv2d(cin, cout, 1, 1, 0, bias=False), nn.BatchNorm2d(cout), nn.ReLU()]
        layers.append(nn.AdaptiveAvgPool2d(self.target_shape[1:]))
        self.body = nn.Sequential(*layers)

        from .backbone import init_weights

        init_weights(self)
        if zero_init:
            self.final_norm.weight.data.zero_()

    @property
    def final_norm(self) -> nn.BatchNorm2d:
        return [m for m in self.body if isinstance(m, nn.BatchNorm2d)][-1]

    @property
    def convs(self) -> list[nn.Conv2d]:
        return [m for m in self.body if isinstance(m, nn.Conv2d)]

    def forward(self, c):
        return self.body(c)


def adapter_kind_for(source: Source) -> str:
    return ENCODER_E if source.kind == "origin" else ALIGNER_R


def analytic_adapter_params(kind: str, source_channels: int, target_channels: int) -> int:
    cin, cout = source_channels, target_channels
    if kind == ENCODER_E:
        return cin * cout * 9 + 2 * cout + cout * cout * 9 + 2 * cout
    return cin * cout + 2 * cout


def adapter_param_count(adapter: ContextAdapter) -> int:
    """Learned parameters of one adapter, norm affine terms included."""
    return sum(p.numel() for p in adapter.parameters())


def compose(h_in: torch.Tensor, sources: Sequence[torch.Tensor], adapters: Sequence[nn.Module]) -> torch.Tensor:
    """``h_in + sum_k adapters[k](sources[k])``; returns ``h_in`` itself when empty."""
    if len(sources) != len(adapters):
        raise InvariantViolation(f"{len(sources)} context values for {len(adapters)} adapters")
    out = h_in
    for k, (src, adapter) in enumerate(zip(sources, adapters)):
        target = getattr(adapter, "target_shape", None)
        if target is not None and tuple(target) != tuple(h_in.shape[1:]):
            raise InvariantViolation(
                f"adapter {k} targets {tuple(target)} but incoming feature is {tuple(h_in.shape[1:])}"
            )
        c = adapter(src)
        if c.shape != h_in.shape:
            raise InvariantViolation(
                f"adapter {k} produced {tuple(c.shape)}; incoming feature is {tuple(h_in.shape)}"
            )
        out = out + c
    return out


def adapter_weight_matrix(network) -> list[list[Optional[float]]]:
    """Mean |w| over the conv weights of each adapter, as a (source, destination) grid.

    Row ``s`` is the source feature index (0 = origin input), column ``d`` the
    receiving module. Mean absolute value equals the L1 norm divided by the
    number of channel pairs and kernel taps. Missing connections are ``None``.
    """
    K = len(network.bundles)
    grid: list[list[Optional[float]]] = [[None] * (K + 1) for _ in range(K + 1)]
    for bundle in network.bundles:
        d = bundle.module_index
        for src, adapter in zip(bundle.sources.sources, bundle.adapters):
            s = 0 if src.kind == "origin" else src.index
            ws = torch.cat([c.weight.detach().abs().flatten() for c in adapter.convs])
            val = float(ws.mean())
            grid[s][d] = val if grid[s][d] is None else (grid[s][d] + val) / 2
    return grid
