"""Local auxiliary classifiers, the optional local decoder, and local losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import init_weights
from .errors import ConfigError

SOFTMAX = "softmax"
CONTRAST = "contrast"
HEAD_KINDS = (SOFTMAX, CONTRAST)


class AuxClassifier(nn.Module):
    """3x3 conv + BN + ReLU, global pooling, FC->128 + ReLU, FC->classes (or 128).

    The conv strides by 2 and doubles the channels while the feature map is
    at full or half input resolution, and keeps stride 1 and the channel
    count once it is smaller.
    """

    def __init__(self, in_channels, spatial, input_spatial, num_classes=10, head_kind=SOFTMAX, hidden=128, embed_dim=128):
        super().__init__()
        if head_kind not in HEAD_KINDS:
            raise ConfigError(f"unknown head kind {head_kind!r}")
        self.head_kind = head_kind
        self.input_shape = (in_channels, spatial, spatial)
        stride = 2 if spatial * 2 >= input_spatial else 1
        out_channels = in_channels * 2 if stride == 2 else in_channels
        self.conv = nn.Conv2d(in_channels, out_channels, 3, stride, 1, bias=False)
        self.bn = nn.BatchNorm2d(out_channels)
        self.fc1 = nn.Linear(out_channels, hidden)
        self.fc2 = nn.Linear(hidden, num_classes if head_kind == SOFTMAX else embed_dim)
        init_weights(self)

    def forward(self, h):
        z = F.relu(self.bn(self.conv(h)))
        z = F.adaptive_avg_pool2d(z, 1).flatten(1)
        return self.fc2(F.relu(self.fc1(z)))


class FinalHead(nn.Module):
    """The network's own classifier: global average pooling and one linear layer."""

    def __init__(self, in_channels, num_classes=10):
        super().__init__()
        self.head_kind = SOFTMAX
        self.fc = nn.Linear(in_channels, num_classes)
        init_weights(self)

    def forward(self, h):
        return self.fc(F.adaptive_avg_pool2d(h, 1).flatten(1))


class AuxDecoder(nn.Module):
    """Bilinear upsampling to input size, 3x3 conv->12 + BN + ReLU, 3x3 conv->3 + sigmoid."""

    def __init__(self, in_channels, output_spatial, out_channels=3, hidden=12):
        super().__init__()
        self.output_spatial = output_spatial
        self.conv1 = nn.Conv2d(in_channels, hidden, 3, 1, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(hidden)
        self.conv2 = nn.Conv2d(hidden, out_channels, 3, 1, 1, bias=True)
        init_weights(self)

    def forward(self, h):
        size = (self.output_spatial, self.output_spatial)
        z = F.interpolate(h, size=size, mode="bilinear", align_corners=False)
        z = F.relu(self.bn1(self.conv1(z)))
        return torch.sigmoid(self.conv2(z))


# ---------------------------------------------------------------------------
# Losses


def cross_entropy_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean softmax negative log-likelihood in nats."""
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ValueError(f"logits {tuple(logits.shape)} do not match labels {tuple(labels.shape)}")
    C = logits.shape[1]
    if C < 2:
        raise ValueError("need at least two classes")
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= C):
        raise ValueError(f"labels must lie in [0, {C}); got range [{int(labels.min())}, {int(labels.max())}]")
    return F.cross_entropy(logits, labels)


class ContrastiveLoss(NamedTuple):
    loss: torch.Tensor
    has_positive: bool


def supervised_contrastive_loss(embeddings: torch.Tensor, labels: torch.Tensor, temperature: float = 0.5) -> ContrastiveLoss:
    """Supervised contrastive loss averaged over all positive pairs.

    For every ordered pair ``(i, j)``, ``i != j`` with equal labels the term is
    ``-log(exp(s_ij / t) / sum_{k != i} exp(s_ik / t))`` where ``s`` is the
    cosine similarity. A batch without positive pairs yields a zero loss and
    ``has_positive=False``.
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    N = embeddings.shape[0]
    if N < 2:
        raise ValueError("need at least two samples")
    if labels.shape[0] != N:
        raise ValueError("embeddings and labels differ in batch size")
    z = F.normalize(embeddings, dim=1)
    sim = z @ z.t() / temperature
    eye = torch.eye(N, dtype=torch.bool, device=z.device)
    sim = sim.masked_fill(eye, float("-inf"))
    log_prob = sim - torch.logsumexp(sim, dim=1, keepdim=True)
    positive = (labels[:, None] == labels[None, :]) & ~eye
    n_pos = int(positive.sum())
    if n_pos == 0:
        return ContrastiveLoss(embeddings.sum() * 0.0, False)
    loss = -log_prob.masked_select(positive).sum() / n_pos
    return ContrastiveLoss(loss, True)


def reconstruction_loss(decoded: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-element mean squared error."""
    if decoded.shape != target.shape:
        raise ValueError(f"decoded {tuple(decoded.shape)} vs target {tuple(target.shape)}")
    return F.mse_loss(decoded, target)


class _ScaleGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, scale):
        ctx.scale = scale
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return grad * ctx.scale, None


@dataclass(frozen=True)
class ObjectiveConfig:
    head_kind: str = SOFTMAX
    temperature: float = 0.5
    decoder_on: bool = False
    rec_weight: float = 1.0

    def __post_init__(self):
        if self.head_kind not in HEAD_KINDS:
            raise ConfigError(f"head_kind must be one of {HEAD_KINDS}; got {self.head_kind!r}")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if self.rec_weight < 0:
            raise ConfigError("rec_weight must be >= 0")


def local_objective(
    h: torch.Tensor,
    labels: torch.Tensor,
    classifier: nn.Module,
    config: ObjectiveConfig = ObjectiveConfig(),
    decoder: Optional[nn.Module] = None,
    target: Optional[torch.Tensor] = None,
):
    """Classifier loss plus, with a decoder, ``rec_weight`` times reconstruction.

    Returns ``(loss, diagnostics, output)`` where ``output`` is the raw head
    output (logits or embeddings). The decoder always receives the full
    reconstruction gradient; ``rec_weight`` scales only what reaches ``h``.
    """
    out = classifier(h)
    diag = {}
    if getattr(classifier, "head_kind", SOFTMAX) == CONTRAST:
        res = supervised_contrastive_loss(out, labels, config.temperature)
        cls_loss = res.loss
        diag["no_positive"] = not res.has_positive
    else:
        cls_loss = cross_entropy_loss(out, labels)
    diag["cls"] = float(cls_loss.detach())
    loss = cls_loss
    if config.decoder_on and decoder is not None:
        if target is None:
            raise ValueError("decoder enabled but no reconstruction target given")
        w = float(config.rec_weight)
        rec = reconstruction_loss(decoder(_ScaleGrad.apply(h, w)), target)
        diag["rec"] = float(rec.detach())
        # value: cls + w * rec; decoder grad: d rec; feature grad: w * d rec
        loss = cls_loss + w * rec.detach() + (rec - rec.detach())
    return loss, diag, out
