"""Analytic memory, parameter and multiply-accumulate accounting, plus timing.

Activation counts are per sample and cover every map kept for the backward
pass: convolution, normalization and rectifier outputs, residual sums,
pooled vectors and linear outputs. Bytes are ``elements * element_size *
batch``. Parameters are counted once and optimizer state as one momentum
buffer per parameter.
"""

from __future__ import annotations

import platform
import resource
import statistics
import time
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import torch

from .backbone import STEM, BackboneSpec, MinimalUnit, PartitionPlan
from .context import ENCODER_E, ContextSpec, adapter_kind_for, analytic_adapter_params, resolve_sources
from .heads import CONTRAST, ObjectiveConfig

EMBED_DIM = 128
AUX_HIDDEN = 128
DECODER_HIDDEN = 12


# ---------------------------------------------------------------------------
# per-component counts


def unit_activation_elements(unit: MinimalUnit) -> int:
    plane = unit.out_channels * unit.spatial_out**2
    if unit.kind == STEM:
        return 3 * plane  # conv, norm, relu
    maps = 7  # conv1, bn1, relu1, conv2, bn2, sum, relu
    if unit.has_projection:
        maps += 2
    return maps * plane


def unit_activation_bytes(unit: MinimalUnit, element_size: int = 4) -> int:
    return unit_activation_elements(unit) * element_size


def unit_params(unit: MinimalUnit) -> int:
    cin, cout = unit.in_channels, unit.out_channels
    if unit.kind == STEM:
        return cin * cout * 9 + 2 * cout
    p = cin * cout * 9 + 2 * cout + cout * cout * 9 + 2 * cout
    if unit.has_projection:
        p += cin * cout + 2 * cout
    return p


def unit_macs(unit: MinimalUnit) -> int:
    cin, cout, so = unit.in_channels, unit.out_channels, unit.spatial_out
    if unit.kind == STEM:
        return cin * cout * 9 * so * so
    m = cin * cout * 9 * so * so + cout * cout * 9 * so * so
    if unit.has_projection:
        m += cin * cout * so * so
    return m


def _aux_geometry(channels, spatial, input_spatial):
    stride = 2 if spatial * 2 >= input_spatial else 1
    out_c = channels * 2 if stride == 2 else channels
    return out_c, -(-spatial // stride)


def aux_classifier_params(channels, spatial, input_spatial, num_classes, head_kind) -> int:
    out_c, _ = _aux_geometry(channels, spatial, input_spatial)
    out = num_classes if head_kind != CONTRAST else EMBED_DIM
    return channels * out_c * 9 + 2 * out_c + out_c * AUX_HIDDEN + AUX_HIDDEN + AUX_HIDDEN * out + out


def aux_classifier_activations(channels, spatial, input_spatial, num_classes, head_kind) -> int:
    out_c, s = _aux_geometry(channels, spatial, input_spatial)
    out = num_classes if head_kind != CONTRAST else EMBED_DIM
    return 3 * out_c * s * s + out_c + 2 * AUX_HIDDEN + out


def aux_classifier_macs(channels, spatial, input_spatial, num_classes, head_kind) -> int:
    out_c, s = _aux_geometry(channels, spatial, input_spatial)
    out = num_classes if head_kind != CONTRAST else EMBED_DIM
    return channels * out_c * 9 * s * s + out_c * AUX_HIDDEN + AUX_HIDDEN * out


def final_head_params(channels, num_classes) -> int:
    return channels * num_classes + num_classes


def decoder_params(channels, out_channels=3) -> int:
    return channels * DECODER_HIDDEN * 9 + 2 * DECODER_HIDDEN + DECODER_HIDDEN * out_channels * 9 + out_channels


def decoder_activations(channels, input_spatial, out_channels=3) -> int:
    plane = input_spatial**2
    return channels * plane + 3 * DECODER_HIDDEN * plane + 2 * out_channels * plane


def adapter_activations(kind, source_shape, target_shape) -> int:
    ct, st = target_shape[0], target_shape[1]
    ss = source_shape[1]
    conv_maps = 6 if kind == ENCODER_E else 3
    return conv_maps * ct * ss * ss + ct * st * st


def adapter_macs(kind, source_shape, target_shape) -> int:
    cs, ss = source_shape[0], source_shape[1]
    ct = target_shape[0]
    if kind == ENCODER_E:
        return cs * ct * 9 * ss * ss + ct * ct * 9 * ss * ss
    return cs * ct * ss * ss


def _prod(shape) -> int:
    out = 1
    for v in shape:
        out *= int(v)
    return out


# ---------------------------------------------------------------------------
# network-level layout shared by memory and overhead accounting


@dataclass
class _ModuleLayout:
    index: int
    units: list
    input_shape: tuple
    output_shape: tuple
    adapters: list  # (kind, source_shape, target_shape, source)
    is_final: bool


def _layout(plan: PartitionPlan, context, backbone: BackboneSpec, overrides=None) -> list[_ModuleLayout]:
    plan.validate(len(backbone))
    spec = ContextSpec.parse(context) if isinstance(context, str) else context
    resolved = resolve_sources(spec, plan.K, overrides)
    inputs = [backbone.units[a].input_shape for a, _ in plan.boundaries]
    out = []
    for m, ((a, b), srcs) in enumerate(zip(plan.boundaries, resolved)):
        adapters = []
        for s in srcs.sources:
            shape = backbone.input_shape if s.kind == "origin" else inputs[s.index]
            adapters.append((adapter_kind_for(s), tuple(shape), inputs[m], s))
        units = list(backbone.units[a:b])
        out.append(_ModuleLayout(m + 1, units, inputs[m], units[-1].output_shape, adapters, m == plan.K - 1))
    return out


@dataclass
class MemoryAccount:
    batch_size: int
    element_size: int
    per_module_activation_bytes: list[int]
    per_module_aux_bytes: list[int]
    parameter_bytes: int
    optimizer_bytes: int
    peak_module: int
    peak_training_bytes: int
    e2e_training_bytes: int

    def to_dict(self) -> dict:
        return asdict(self)


def account_memory(
    plan: PartitionPlan,
    context_spec,
    backbone: BackboneSpec,
    batch_size: int,
    objective: ObjectiveConfig = ObjectiveConfig(),
    element_size: int = 4,
    overrides: Optional[dict] = None,
) -> MemoryAccount:
    """Peak training footprint of the partitioned network vs. plain end-to-end training.

    A module's own activations include the final classifier when it is the
    last module, so per-module activations always sum to the end-to-end
    activation total. Auxiliary bytes add the local head, decoder, context
    adapters, the augmented input and stored context features still awaited
    by later modules.
    """
    layout = _layout(plan, context_spec, backbone, overrides)
    S = backbone.input_shape[1]
    ncls = backbone.num_classes
    scale = batch_size * element_size

    act, aux, params = [], [], 0
    consumers: dict[int, int] = {}
    for mod in layout:
        for _, _, _, src in mod.adapters:
            if src.kind == "augmented" and src.index >= 1:
                consumers[src.index] = max(consumers.get(src.index, 0), mod.index)

    for mod in layout:
        c, s, _ = mod.output_shape
        a = sum(unit_activation_elements(u) for u in mod.units)
        params += sum(unit_params(u) for u in mod.units)
        x = 0
        if mod.is_final:
            a += c + ncls
            params += final_head_params(c, ncls)
        else:
            x += aux_classifier_activations(c, s, S, ncls, objective.head_kind)
            params += aux_classifier_params(c, s, S, ncls, objective.head_kind)
            if objective.decoder_on:
                x += decoder_activations(c, S, backbone.input_shape[0])
                params += decoder_params(c, backbone.input_shape[0])
        for kind, src_shape, tgt_shape, _ in mod.adapters:
            x += adapter_activations(kind, src_shape, tgt_shape)
            params += analytic_adapter_params(kind, src_shape[0], tgt_shape[0])
        if mod.adapters:
            x += _prod(mod.input_shape)
        # stored augmented inputs of earlier modules that a later module still needs
        for j, last in consumers.items():
            if j <= mod.index - 2 and last >= mod.index:
                x += _prod(layout[j].input_shape)
        act.append(a * scale)
        aux.append(x * scale)

    e2e_params = sum(unit_params(u) for u in backbone.units) + final_head_params(backbone.feature_channels, ncls)
    e2e_act = sum(unit_activation_elements(u) for u in backbone.units) + backbone.feature_channels + ncls
    e2e = e2e_act * scale + 2 * e2e_params * element_size

    totals = [a + x for a, x in zip(act, aux)]
    peak_m = max(range(len(totals)), key=lambda i: totals[i])
    param_bytes = params * element_size
    return MemoryAccount(
        batch_size=batch_size,
        element_size=element_size,
        per_module_activation_bytes=act,
        per_module_aux_bytes=aux,
        parameter_bytes=param_bytes,
        optimizer_bytes=param_bytes,
        peak_module=peak_m + 1,
        peak_training_bytes=totals[peak_m] + 2 * param_bytes,
        e2e_training_bytes=e2e,
    )


@dataclass
class OverheadReport:
    context_params: int
    backbone_params: int
    context_flops: int
    backbone_flops: int
    relative_inference_overhead: float
    per_adapter_params: list[int]

    def to_dict(self) -> dict:
        return asdict(self)


def account_overhead(plan: PartitionPlan, context_spec, backbone: BackboneSpec, overrides: Optional[dict] = None) -> OverheadReport:
    """Inference-time cost of the context adapters relative to the backbone (MACs)."""
    layout = _layout(plan, context_spec, backbone, overrides)
    per_adapter = []
    ctx_macs = 0
    for mod in layout:
        for kind, src_shape, tgt_shape, _ in mod.adapters:
            per_adapter.append(analytic_adapter_params(kind, src_shape[0], tgt_shape[0]))
            ctx_macs += adapter_macs(kind, src_shape, tgt_shape)
    c = backbone.feature_channels
    bb_params = sum(unit_params(u) for u in backbone.units) + final_head_params(c, backbone.num_classes)
    bb_macs = sum(unit_macs(u) for u in backbone.units) + c * backbone.num_classes
    return OverheadReport(
        context_params=sum(per_adapter),
        backbone_params=bb_params,
        context_flops=ctx_macs,
        backbone_flops=bb_macs,
        relative_inference_overhead=ctx_macs / bb_macs,
        per_adapter_params=per_adapter,
    )


# ---------------------------------------------------------------------------
# timing


def hardware_descriptor() -> str:
    return (
        f"{platform.machine()} {platform.processor() or 'cpu'}; python {platform.python_version()}; "
        f"torch {torch.__version__}; threads {torch.get_num_threads()}"
    )


@dataclass
class WallTime:
    mean: float
    std: float
    samples: list[float]
    hardware: str

    def to_dict(self) -> dict:
        return asdict(self)


def measure_wall_time(run_fn: Callable[[], object], repetitions: int = 5) -> WallTime:
    """Mean and sample std of ``run_fn`` over ``repetitions`` calls after one discarded warm-up."""
    if repetitions < 3:
        raise ValueError("repetitions must be >= 3")
    run_fn()
    samples = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        run_fn()
        samples.append(time.perf_counter() - t0)
    return WallTime(statistics.fmean(samples), statistics.stdev(samples), samples, hardware_descriptor())


def peak_rss_bytes() -> int:
    """Process high-water resident set size (secondary, non-analytic metric)."""
    kb = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    return kb * 1024 if platform.system() == "Linux" else kb
