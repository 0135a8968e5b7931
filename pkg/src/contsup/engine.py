"""Greedy local learning with optional context supply.

:class:`GLLNetwork` owns one :class:`ModuleBundle` per partition range. Each
bundle holds its backbone segment, its context adapters and its local head
(the final bundle's head is the network classifier). A training step walks
the bundles in order; every bundle's loss is back-propagated into that
bundle's parameters only and stepped by that bundle's optimizer.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Iterator, NamedTuple, Optional

import torch
import torch.nn as nn

from .backbone import BackboneSpec, MinimalUnit, PartitionPlan, build_unit
from .context import (
    ContextAdapter,
    ContextSources,
    ContextSpec,
    adapter_kind_for,
    compose,
    resolve_sources,
)
from .errors import ConfigError, NonFiniteLossError
from .heads import SOFTMAX, AuxClassifier, AuxDecoder, FinalHead, ObjectiveConfig, local_objective


@dataclass
class TrainingConfig:
    epochs: int = 160
    batch_size: int = 1024
    lr: float = 0.8
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: str = "cosine"  # cosine | constant | multistep:<e1>,<e2>[,...]
    seed: int = 0
    nesterov: bool = True

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("epochs >= 0, batch_size >= 1 and lr > 0 are required")
        lr_at(self, 0)

    @classmethod
    def for_dataset(cls, name: str, **overrides) -> "TrainingConfig":
        """Published defaults: STL-10 uses lr 0.1 / batch 128, the rest lr 0.8 / batch 1024."""
        base = dict(lr=0.1, batch_size=128) if name == "stl10" else {}
        base.update(overrides)
        return cls(**base)


def lr_at(cfg: TrainingConfig, epoch: int) -> float:
    """Learning rate used during 0-based ``epoch``."""
    s = cfg.schedule
    if s == "constant":
        return cfg.lr
    if s == "cosine":
        T = max(cfg.epochs, 1)
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / T))
    if s.startswith("multistep:"):
        try:
            milestones = [int(v) for v in s.split(":", 1)[1].split(",") if v]
        except ValueError as exc:
            raise ConfigError(f"bad multistep schedule {s!r}") from exc
        return cfg.lr * 0.1 ** sum(epoch >= m for m in milestones)
    raise ConfigError(f"unknown schedule {s!r}")


class ModuleBundle(nn.Module):
    def __init__(
        self,
        module_index: int,
        units: list[MinimalUnit],
        sources: ContextSources,
        source_shapes: list[tuple[int, int, int]],
        spec: BackboneSpec,
        objective: ObjectiveConfig,
        is_final: bool,
        zero_init_adapters: bool = False,
    ):
        super().__init__()
        self.module_index = module_index
        self.unit_indices = tuple(u.index for u in units)
        self.sources = sources
        self.is_final = is_final
        self.input_shape = units[0].input_shape
        self.output_shape = units[-1].output_shape
        self.segment = nn.Sequential(*[build_unit(u) for u in units])
        self.adapters = nn.ModuleList(
            ContextAdapter(adapter_kind_for(src), shape, self.input_shape, zero_init=zero_init_adapters)
            for src, shape in zip(sources.sources, source_shapes)
        )
        c, s, _ = self.output_shape
        input_spatial = spec.input_shape[1]
        if is_final:
            self.classifier = FinalHead(c, spec.num_classes)
        else:
            self.classifier = AuxClassifier(c, s, input_spatial, spec.num_classes, objective.head_kind)
        self.decoder = None
        if objective.decoder_on and not is_final:
            self.decoder = AuxDecoder(c, input_spatial, spec.input_shape[0])

    @property
    def reports_accuracy(self) -> bool:
        return self.classifier.head_kind == SOFTMAX


class ModuleOutput(NamedTuple):
    index: int  # 1-based
    h: torch.Tensor
    hc: torch.Tensor
    loss: Optional[torch.Tensor]
    diag: dict
    out: torch.Tensor


class GLLNetwork(nn.Module):
    def __init__(
        self,
        spec: BackboneSpec,
        plan: PartitionPlan,
        context: ContextSpec | str = "R0",
        objective: ObjectiveConfig = ObjectiveConfig(),
        overrides: Optional[dict] = None,
        zero_init_adapters: bool = False,
        detach_context: bool = True,
    ):
        super().__init__()
        plan.validate(len(spec))
        self.spec = spec
        self.plan = plan
        self.context = ContextSpec.parse(context) if isinstance(context, str) else context
        self.objective = objective
        self.overrides = {int(k): (v if isinstance(v, str) else v.tag) for k, v in (overrides or {}).items()}
        self.detach_context = detach_context
        self.resolved = resolve_sources(self.context, plan.K, self.overrides)
        module_inputs = [spec.units[start].input_shape for start, _ in plan.boundaries]
        bundles = []
        for m, ((start, stop), srcs) in enumerate(zip(plan.boundaries, self.resolved)):
            shapes = [spec.input_shape if s.kind == "origin" else module_inputs[s.index] for s in srcs.sources]
            bundles.append(
                ModuleBundle(
                    m + 1,
                    list(spec.units[start:stop]),
                    srcs,
                    shapes,
                    spec,
                    objective,
                    is_final=(m == plan.K - 1),
                    zero_init_adapters=zero_init_adapters,
                )
            )
        self.bundles = nn.ModuleList(bundles)

    def run_modules(
        self,
        x: torch.Tensor,
        labels: Optional[torch.Tensor] = None,
        target: Optional[torch.Tensor] = None,
    ) -> Iterator[ModuleOutput]:
        """Forward the modules one by one, yielding each module's local result.

        Inputs handed between modules and stored context features are
        detached (context features stay attached when ``detach_context`` is
        off). Losses are computed when ``labels`` is given.
        """
        stored = {0: x}
        h_prev = x
        for bundle in self.bundles:
            l = bundle.module_index
            values = []
            for src in bundle.sources.sources:
                v = x if src.kind == "origin" else stored[src.index]
                values.append(v.detach() if self.detach_context else v)
            hc = compose(h_prev, values, bundle.adapters)
            if l > 1:
                stored[l - 1] = hc.detach() if self.detach_context else hc
            h = bundle.segment(hc)
            if labels is not None:
                loss, diag, out = local_objective(h, labels, bundle.classifier, self.objective, bundle.decoder, target)
            else:
                loss, diag, out = None, {}, bundle.classifier(h)
            yield ModuleOutput(l, h, hc, loss, diag, out)
            h_prev = h.detach()

    def forward(self, x):
        out = None
        for res in self.run_modules(x):
            out = res.out
        return out

    def bundle_parameters(self) -> list[list[nn.Parameter]]:
        return [list(b.parameters()) for b in self.bundles]

    def describe(self) -> dict:
        return {
            "spec": backbone_spec_to_dict(self.spec),
            "plan": self.plan.to_dict(),
            "context": self.context.tag,
            "objective": asdict(self.objective),
            "overrides": {str(k): v for k, v in self.overrides.items()},
            "detach_context": self.detach_context,
        }


def backbone_spec_to_dict(spec: BackboneSpec) -> dict:
    return {
        "units": [asdict(u) for u in spec.units],
        "num_classes": spec.num_classes,
        "input_shape": list(spec.input_shape),
    }


def backbone_spec_from_dict(d: dict) -> BackboneSpec:
    units = tuple(MinimalUnit(**u) for u in d["units"])
    spec = BackboneSpec(units, int(d["num_classes"]), tuple(d["input_shape"]))
    spec.validate()
    return spec


def network_from_description(d: dict) -> GLLNetwork:
    return GLLNetwork(
        backbone_spec_from_dict(d["spec"]),
        PartitionPlan.from_dict(d["plan"]),
        d["context"],
        ObjectiveConfig(**d["objective"]),
        overrides=d.get("overrides") or None,
        detach_context=d.get("detach_context", True),
    )


def make_optimizers(net: GLLNetwork, cfg: TrainingConfig) -> list[torch.optim.SGD]:
    return [
        torch.optim.SGD(
            params,
            lr=cfg.lr,
            momentum=cfg.momentum,
            weight_decay=cfg.weight_decay,
            nesterov=cfg.nesterov and cfg.momentum > 0,
        )
        for params in net.bundle_parameters()
    ]


def _check_finite(res: ModuleOutput, step=None):
    if not torch.isfinite(res.loss):
        raise NonFiniteLossError(res.index, float(res.loss.detach()), step)


def _module_stats(res: ModuleOutput, labels, bundle) -> dict:
    d = {"loss": float(res.loss.detach()), "n": int(labels.shape[0])}
    d.update(res.diag)
    if bundle.reports_accuracy:
        d["wrong"] = int((res.out.argmax(1) != labels).sum())
    return d


def train_step(net: GLLNetwork, optimizers, x, labels, target=None, step=None) -> list[dict]:
    """One synchronous pass: each module computes, back-propagates and updates in turn."""
    net.train()
    stats = []
    if net.detach_context:
        for res, opt, bundle in zip(net.run_modules(x, labels, target), optimizers, net.bundles):
            _check_finite(res, step)
            opt.zero_grad(set_to_none=True)
            res.loss.backward()
            opt.step()
            stats.append(_module_stats(res, labels, bundle))
        return stats
    # attached context paths: all updates must wait until every loss has back-propagated
    results = list(net.run_modules(x, labels, target))
    for res in results:
        _check_finite(res, step)
    for opt in optimizers:
        opt.zero_grad(set_to_none=True)
    torch.stack([r.loss for r in results]).sum().backward()
    for opt in optimizers:
        opt.step()
    return [_module_stats(r, labels, b) for r, b in zip(results, net.bundles)]


@dataclass
class EvalResult:
    module_errors: list[Optional[float]]
    final_error: float
    n: int


@torch.no_grad()
def evaluate(net: GLLNetwork, dataset, split="test", batch_size: int = 1000) -> EvalResult:
    """Error rate of every softmax head and of the final head; parameters untouched."""
    was_training = net.training
    net.eval()
    wrong = [0] * len(net.bundles)
    n = 0
    try:
        for x, y, _ in dataset.batches(split, batch_size, shuffle=False, augment=False):
            for res, bundle in zip(net.run_modules(x), net.bundles):
                if bundle.reports_accuracy:
                    wrong[res.index - 1] += int((res.out.argmax(1) != y).sum())
            n += int(y.shape[0])
    finally:
        net.train(was_training)
    errors = [w / n if b.reports_accuracy else None for w, b in zip(wrong, net.bundles)]
    return EvalResult(errors, errors[-1], n)


METRIC_FIELDS = (
    "epoch",
    "module",
    "lr",
    "train_loss",
    "train_cls_loss",
    "train_rec_loss",
    "train_error",
    "test_error",
)


@dataclass
class TrainHistory:
    rows: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_test_error: float = 1.0
    final_test_error: float = 1.0
    final_module_errors: list = field(default_factory=list)
    status: str = "ok"
    failure: Optional[str] = None
    epoch_seconds: list[float] = field(default_factory=list)
    checkpoint_path: Optional[str] = None


def seed_everything(seed: int) -> torch.Generator:
    torch.manual_seed(seed)
    g = torch.Generator()
    g.manual_seed(seed)
    return g


def save_checkpoint(path, net: GLLNetwork, optimizers, epoch: int, config_hash: str = "") -> None:
    torch.save(
        {
            "format": "contsup-checkpoint-v1",
            "config_hash": config_hash,
            "network": net.describe(),
            "state_dict": net.state_dict(),
            "optimizers": [o.state_dict() for o in optimizers],
            "epoch": epoch,
        },
        path,
    )


def load_checkpoint(path) -> tuple[GLLNetwork, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    net = network_from_description(blob["network"])
    net.load_state_dict(blob["state_dict"])
    net.eval()
    return net, blob


def train(
    net: GLLNetwork,
    cfg: TrainingConfig,
    dataset,
    checkpoint_path: Optional[str] = None,
    config_hash: str = "",
    on_epoch=None,
) -> TrainHistory:
    """Train for ``cfg.epochs`` epochs; epoch 0 rows hold the initial evaluation.

    The best-test-error model is checkpointed when ``checkpoint_path`` is set.
    A non-finite loss stops training and marks the history as failed.
    """
    gen = torch.Generator()
    gen.manual_seed(cfg.seed)
    optimizers = make_optimizers(net, cfg)
    hist = TrainHistory()
    hist.checkpoint_path = checkpoint_path

    def record(epoch, lr, sums):
        ev = evaluate(net, dataset, "test")
        for m, bundle in enumerate(net.bundles):
            s = sums[m] if sums else None
            row = {"epoch": epoch, "module": m + 1, "lr": lr}
            if s and s["n"]:
                row["train_loss"] = s["loss"] / s["batches"]
                row["train_cls_loss"] = s["cls"] / s["batches"]
                row["train_rec_loss"] = s["rec"] / s["batches"] if "rec_seen" in s else None
                row["train_error"] = s["wrong"] / s["n"] if bundle.reports_accuracy else None
            else:
                row.update(train_loss=None, train_cls_loss=None, train_rec_loss=None, train_error=None)
            row["test_error"] = ev.module_errors[m]
            hist.rows.append(row)
        hist.final_test_error = ev.final_error
        hist.final_module_errors = ev.module_errors
        if epoch == 0 or ev.final_error < hist.best_test_error:
            hist.best_epoch, hist.best_test_error = epoch, ev.final_error
            if checkpoint_path:
                save_checkpoint(checkpoint_path, net, optimizers, epoch, config_hash)
        if on_epoch is not None:
            on_epoch(epoch, ev)

    record(0, lr_at(cfg, 0), None)
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_at(cfg, epoch)
        for opt in optimizers:
            for group in opt.param_groups:
                group["lr"] = lr
        sums = [dict(loss=0.0, cls=0.0, rec=0.0, wrong=0, n=0, batches=0) for _ in net.bundles]
        try:
            for x, y, unit in dataset.batches("train", cfg.batch_size, shuffle=True, generator=gen):
                for s, st in zip(sums, train_step(net, optimizers, x, y, unit, step)):
                    s["loss"] += st["loss"]
                    s["cls"] += st["cls"]
                    if "rec" in st:
                        s["rec"] += st["rec"]
                        s["rec_seen"] = True
                    s["wrong"] += st.get("wrong", 0)
                    s["n"] += st["n"]
                    s["batches"] += 1
                step += 1
        except NonFiniteLossError as exc:
            hist.status, hist.failure = "failed", str(exc)
            return hist
        hist.epoch_seconds.append(time.perf_counter() - t0)
        record(epoch + 1, lr, sums)
    return hist
