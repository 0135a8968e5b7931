"""Probe-based lower bounds on task-relevant information ``I(h, y)``.

A probe classifier ``q(y | h)`` is fit on frozen features; by Gibbs'
inequality its held-out mean negative log-likelihood upper-bounds the
conditional entropy, so ``H(y) - NLL`` lower-bounds the mutual information
(in nats) on the evaluation sample.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import init_weights


@dataclass(frozen=True)
class ProbeConfig:
    width: int = 32
    blocks: int = 3
    spatial: int = 8  # conv probes resample features to this size first
    lr: float = 1e-2
    weight_decay: float = 0.0
    batch_size: int = 128
    max_epochs: int = 200
    patience: int = 5
    holdout: float = 0.2
    seed: int = 0


@dataclass
class InfoEstimate:
    module_index: int
    estimate_nats: float
    raw_estimate_nats: float
    label_entropy_nats: float
    heldout_nll_nats: float
    n_samples: int
    n_eval: int
    epochs_trained: int
    probe_config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def empirical_entropy(labels: torch.Tensor) -> float:
    """Plug-in entropy of a label sample, in nats."""
    _, counts = torch.unique(labels, return_counts=True)
    p = counts.double() / counts.sum()
    return float(-(p * p.log()).sum())


class ConvProbe(nn.Module):
    """Resample + 1x1 channel alignment, then ``blocks`` 3x3 conv blocks, pooling, linear."""

    def __init__(self, in_channels, num_classes, cfg: ProbeConfig):
        super().__init__()
        self.spatial = cfg.spatial
        layers = [nn.Conv2d(in_channels, cfg.width, 1, bias=False), nn.BatchNorm2d(cfg.width), nn.ReLU()]
        for b in range(cfg.blocks):
            stride = 1 if b == 0 else 2
            layers += [nn.Conv2d(cfg.width, cfg.width, 3, stride, 1, bias=False), nn.BatchNorm2d(cfg.width), nn.ReLU()]
        self.body = nn.Sequential(*layers)
        self.fc = nn.Linear(cfg.width, num_classes)
        init_weights(self)

    def forward(self, h):
        h = F.interpolate(h, size=(self.spatial, self.spatial), mode="bilinear", align_corners=False)
        return self.fc(F.adaptive_avg_pool2d(self.body(h), 1).flatten(1))


class MLPProbe(nn.Module):
    def __init__(self, in_features, num_classes, cfg: ProbeConfig):
        super().__init__()
        layers, d = [], in_features
        for _ in range(max(cfg.blocks - 1, 0)):
            layers += [nn.Linear(d, cfg.width), nn.ReLU()]
            d = cfg.width
        layers.append(nn.Linear(d, num_classes))
        self.body = nn.Sequential(*layers)

    def forward(self, h):
        return self.body(h.flatten(1))


def _canonical_labels(labels: torch.Tensor, order_from: torch.Tensor) -> tuple[torch.Tensor, int]:
    """Relabel classes by first appearance in ``order_from`` so estimates ignore label names."""
    mapping: dict[int, int] = {}
    for v in order_from.tolist():
        if v not in mapping:
            mapping[v] = len(mapping)
    for v in labels.tolist():
        if v not in mapping:
            mapping[v] = len(mapping)
    lut = torch.full((int(labels.max()) + 1,), -1, dtype=torch.long)
    for k, v in mapping.items():
        lut[k] = v
    return lut[labels], len(mapping)


def _mean_nll(probe, feats, labels, batch_size) -> float:
    probe.eval()
    total = 0.0
    with torch.no_grad():
        for s in range(0, len(labels), batch_size):
            logits = probe(feats[s : s + batch_size])
            total += float(F.cross_entropy(logits.double(), labels[s : s + batch_size], reduction="sum"))
    return total / len(labels)


def estimate_mi(
    features,
    labels,
    config: ProbeConfig = ProbeConfig(),
    module_index: int = 0,
    eval_features=None,
    eval_labels=None,
) -> InfoEstimate:
    """Lower-bound ``I(h, y)`` with a probe trained on frozen ``features``.

    Without explicit evaluation data the sample is split (seeded permutation,
    ``config.holdout`` held out). The probe is trained with early stopping on
    held-out NLL and the best held-out NLL is used. ``H(y)`` is the plug-in
    entropy of the held-out labels. The reported estimate is clamped at 0;
    the raw value is kept alongside.
    """
    feats = torch.as_tensor(features, dtype=torch.float32)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if feats.ndim == 1:
        feats = feats[:, None]
    if len(feats) != len(labels):
        raise ValueError(f"{len(feats)} features for {len(labels)} labels")
    if eval_features is None:
        g = torch.Generator().manual_seed(config.seed)
        perm = torch.randperm(len(labels), generator=g)
        n_eval = max(1, int(round(config.holdout * len(labels))))
        ev, tr = perm[:n_eval], perm[n_eval:]
        train_x, train_y, eval_x, eval_y = feats[tr], labels[tr], feats[ev], labels[ev]
    else:
        train_x, train_y = feats, labels
        eval_x = torch.as_tensor(eval_features, dtype=torch.float32)
        if eval_x.ndim == 1:
            eval_x = eval_x[:, None]
        eval_y = torch.as_tensor(eval_labels, dtype=torch.long)
    if len(torch.unique(labels)) < 2 or len(torch.unique(eval_y)) < 2:
        raise ValueError("need at least two classes present to estimate I(h, y)")

    all_y, C = _canonical_labels(torch.cat([train_y, eval_y]), train_y)
    train_y, eval_y = all_y[: len(train_y)], all_y[len(train_y) :]

    torch.manual_seed(config.seed)
    if train_x.ndim == 4:
        probe = ConvProbe(train_x.shape[1], C, config)
    else:
        probe = MLPProbe(train_x[0].numel(), C, config)
    opt = torch.optim.Adam(probe.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    gen = torch.Generator().manual_seed(config.seed)

    best_nll, best_epoch, stale, epochs = _mean_nll(probe, eval_x, eval_y, 1024), 0, 0, 0
    for epoch in range(1, config.max_epochs + 1):
        probe.train()
        perm = torch.randperm(len(train_y), generator=gen)
        for s in range(0, len(perm), config.batch_size):
            idx = perm[s : s + config.batch_size]
            if len(idx) < 2 and train_x.ndim == 4:
                continue
            loss = F.cross_entropy(probe(train_x[idx]), train_y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        epochs = epoch
        nll = _mean_nll(probe, eval_x, eval_y, 1024)
        if nll < best_nll - 1e-9:
            best_nll, best_epoch, stale = nll, epoch, 0
        else:
            stale += 1
            if stale >= config.patience:
                break

    h_y = empirical_entropy(eval_y)
    raw = h_y - best_nll
    return InfoEstimate(
        module_index=module_index,
        estimate_nats=max(raw, 0.0),
        raw_estimate_nats=raw,
        label_entropy_nats=h_y,
        heldout_nll_nats=best_nll,
        n_samples=len(labels) + (0 if eval_features is None else len(eval_y)),
        n_eval=len(eval_y),
        epochs_trained=epochs,
        probe_config=asdict(config),
    )


# ---------------------------------------------------------------------------
# feature extraction and dumps


@torch.no_grad()
def extract_features(net, dataset, split="test", batch_size=500, augmented=False):
    """Module output features ``h_l`` (or augmented inputs ``h_{l-1}^c``) over a split."""
    net.eval()
    per_module: list[list[torch.Tensor]] = [[] for _ in net.bundles]
    labels = []
    for x, y, _ in dataset.batches(split, batch_size, shuffle=False, augment=False):
        for res in net.run_modules(x):
            per_module[res.index - 1].append((res.hc if augmented else res.h).clone())
        labels.append(y)
    return [torch.cat(f) for f in per_module], torch.cat(labels)


_MAGIC = b"CSFD"


def dump_features(directory: str, features: Sequence[torch.Tensor], labels: torch.Tensor, kind: str = "h") -> str:
    """Write a flat binary container plus a JSON manifest; returns the manifest path.

    Each record is ``magic, int32 module_index, int32 ndim, int64 dims[ndim]``
    followed by little-endian float32 data (labels are stored as int64 under
    module index -1).
    """
    os.makedirs(directory, exist_ok=True)
    bin_path = os.path.join(directory, "features.bin")
    entries = []
    with open(bin_path, "wb") as fh:
        records = [(-1, labels.to(torch.int64), "labels")] + [
            (i + 1, f.to(torch.float32), kind) for i, f in enumerate(features)
        ]
        for idx, arr, k in records:
            offset = fh.tell()
            shape = tuple(arr.shape)
            fh.write(_MAGIC + struct.pack("<ii", idx, len(shape)) + struct.pack(f"<{len(shape)}q", *shape))
            data_offset = fh.tell()
            np_arr = arr.contiguous().numpy()
            fh.write(np_arr.astype(np_arr.dtype.newbyteorder("<"), copy=False).tobytes())
            entries.append(
                {
                    "module_index": idx,
                    "kind": k,
                    "shape": list(shape),
                    "n_samples": shape[0],
                    "dtype": str(np_arr.dtype),
                    "offset": offset,
                    "data_offset": data_offset,
                }
            )
    manifest = os.path.join(directory, "manifest.json")
    with open(manifest, "w") as fh:
        json.dump({"container": "features.bin", "entries": entries}, fh, indent=1)
    return manifest


def load_features(manifest_path: str):
    with open(manifest_path) as fh:
        man = json.load(fh)
    bin_path = os.path.join(os.path.dirname(manifest_path), man["container"])
    feats, labels = {}, None
    with open(bin_path, "rb") as fh:
        for e in man["entries"]:
            fh.seek(e["offset"])
            head = fh.read(12)
            if head[:4] != _MAGIC:
                raise ValueError(f"bad record header at offset {e['offset']}")
            idx, ndim = struct.unpack("<ii", head[4:])
            shape = struct.unpack(f"<{ndim}q", fh.read(8 * ndim))
            if idx != e["module_index"] or list(shape) != e["shape"]:
                raise ValueError("manifest and container disagree")
            count = math.prod(shape)
            arr = np.frombuffer(fh.read(count * np.dtype(e["dtype"]).itemsize), dtype=np.dtype(e["dtype"]).newbyteorder("<"))
            t = torch.from_numpy(arr.astype(e["dtype"]).reshape(shape))
            if idx == -1:
                labels = t
            else:
                feats[idx] = t
    return [feats[k] for k in sorted(feats)], labels


def info_curve(
    net,
    dataset,
    config: ProbeConfig = ProbeConfig(),
    split: str = "test",
    modules: Optional[Sequence[int]] = None,
    augmented: bool = False,
    fit_split: Optional[str] = "train",
) -> list[InfoEstimate]:
    """One estimate per module boundary feature (1-based ``modules`` to restrict).

    Probes are fit on ``fit_split`` features and scored on ``split``; with
    ``fit_split=None`` the ``split`` features alone are divided by
    ``config.holdout``.
    """
    feats, labels = extract_features(net, dataset, split, augmented=augmented)
    fit = extract_features(net, dataset, fit_split, augmented=augmented) if fit_split else None
    wanted = modules or range(1, len(feats) + 1)
    out = []
    for m in wanted:
        if fit is None:
            out.append(estimate_mi(feats[m - 1], labels, config, module_index=m))
        else:
            out.append(estimate_mi(fit[0][m - 1], fit[1], config, m, eval_features=feats[m - 1], eval_labels=labels))
    return out
