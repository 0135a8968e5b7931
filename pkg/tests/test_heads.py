import math

import pytest
import torch
import torch.nn as nn

from contsup.heads import (
    AuxClassifier,
    AuxDecoder,
    FinalHead,
    ObjectiveConfig,
    cross_entropy_loss,
    local_objective,
    reconstruction_loss,
    supervised_contrastive_loss,
)


def central_diff(f, params, eps=1e-6):
    """Numerical gradient of scalar ``f()`` w.r.t. each tensor in ``params`` (in place perturbation)."""
    grads = []
    for p in params:
        g = torch.zeros_like(p)
        flat, gflat = p.data.view(-1), g.view(-1)
        for k in range(flat.numel()):
            old = flat[k].item()
            flat[k] = old + eps
            up = f().item()
            flat[k] = old - eps
            down = f().item()
            flat[k] = old
            gflat[k] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def assert_grads_match(f, params, rtol=1e-4):
    for p in params:
        p.grad = None
    f().backward()
    numeric = central_diff(f, params)
    for p, n in zip(params, numeric):
        scale = max(p.grad.abs().max().item(), 1e-8)
        assert (p.grad - n).abs().max().item() <= rtol * scale


# ---------------------------------------------------------------------------


def test_ce_uniform_is_ln10():
    assert abs(cross_entropy_loss(torch.zeros(5, 10), torch.arange(5)).item() - math.log(10)) < 1e-6


def test_ce_hand_computed():
    logits = torch.tensor([[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]], dtype=torch.float64)
    labels = torch.tensor([1, 0])
    manual = 0.0
    for row, y in zip(logits.tolist(), labels.tolist()):
        z = sum(math.exp(v) for v in row)
        manual += -math.log(math.exp(row[y]) / z)
    assert abs(cross_entropy_loss(logits, labels).item() - manual / 2) < 1e-12


def test_ce_margin_limit():
    logits = torch.zeros(2, 10)
    logits[[0, 1], [3, 7]] = 60.0
    assert cross_entropy_loss(logits, torch.tensor([3, 7])).item() < 1e-20


def test_ce_label_range():
    with pytest.raises(ValueError):
        cross_entropy_loss(torch.zeros(2, 3), torch.tensor([0, 3]))


@pytest.mark.parametrize("N", [4, 64])
def test_supcon_identical_is_log_n_minus_1(N):
    emb = torch.ones(N, 128)
    res = supervised_contrastive_loss(emb, torch.zeros(N, dtype=torch.long), 0.5)
    assert res.has_positive
    assert abs(res.loss.item() - math.log(N - 1)) < 1e-6


def test_supcon_brute_force_n4():
    emb = torch.tensor([[1.0, 0.2, 0.0], [0.8, -0.1, 0.3], [-0.5, 1.0, 0.1], [0.0, 0.7, -0.9]], dtype=torch.float64)
    labels = [0, 0, 1, 1]
    tau = 0.5
    z = [[v / math.sqrt(sum(w * w for w in r)) for v in r] for r in emb.tolist()]

    def s(i, j):
        return sum(a * b for a, b in zip(z[i], z[j])) / tau

    terms = []
    for i in range(4):
        denom = sum(math.exp(s(i, k)) for k in range(4) if k != i)
        for j in range(4):
            if j != i and labels[j] == labels[i]:
                terms.append(-math.log(math.exp(s(i, j)) / denom))
    expected = sum(terms) / len(terms)
    got = supervised_contrastive_loss(emb, torch.tensor(labels), tau).loss.item()
    assert abs(got - expected) < 1e-12


def test_supcon_scale_and_permutation_invariance():
    torch.manual_seed(0)
    emb, labels = torch.randn(12, 16, dtype=torch.float64), torch.randint(0, 3, (12,))
    base = supervised_contrastive_loss(emb, labels).loss
    assert torch.allclose(base, supervised_contrastive_loss(emb * 7.5, labels).loss)
    perm = torch.randperm(12)
    assert torch.allclose(base, supervised_contrastive_loss(emb[perm], labels[perm]).loss)


def test_supcon_no_positive():
    res = supervised_contrastive_loss(torch.randn(3, 4), torch.tensor([0, 1, 2]))
    assert not res.has_positive and res.loss.item() == 0.0


def test_losses_nonnegative():
    torch.manual_seed(1)
    for _ in range(5):
        assert cross_entropy_loss(torch.randn(8, 10), torch.randint(0, 10, (8,))).item() >= 0
        assert supervised_contrastive_loss(torch.randn(8, 5), torch.randint(0, 2, (8,))).loss.item() >= 0


def test_reconstruction_oracles():
    t = torch.rand(2, 3, 2, 2)
    assert reconstruction_loss(t, t).item() == 0.0
    assert abs(reconstruction_loss(t + 0.1, t).item() - 0.01) < 1e-6
    torch.manual_seed(2)
    a, b = torch.rand(1, 3, 2, 2, dtype=torch.float64), torch.rand(1, 3, 2, 2, dtype=torch.float64)
    manual = sum((x - y) ** 2 for x, y in zip(a.flatten().tolist(), b.flatten().tolist())) / 12
    assert abs(reconstruction_loss(a, b).item() - manual) < 1e-15
    with pytest.raises(ValueError):
        reconstruction_loss(a, b[..., :1])


# finite differences on 10-parameter toys (float64)


def test_ce_grad_fd():
    torch.manual_seed(0)
    lin = nn.Linear(2, 2).double()  # 6 params
    extra = nn.Parameter(torch.randn(4, dtype=torch.float64))  # 4 params -> 10 total
    x, y = torch.randn(5, 2, dtype=torch.float64), torch.tensor([0, 1, 1, 0, 1])

    def f():
        return cross_entropy_loss(lin(x) + extra[:2] * extra[2:], y)

    assert_grads_match(f, [lin.weight, lin.bias, extra])


def test_supcon_grad_fd():
    torch.manual_seed(1)
    w = nn.Parameter(torch.randn(5, 2, dtype=torch.float64))  # 10 params
    x, y = torch.randn(6, 5, dtype=torch.float64), torch.tensor([0, 0, 1, 1, 2, 2])
    assert_grads_match(lambda: supervised_contrastive_loss(x @ w, y, 0.5).loss, [w])


def test_reconstruction_grad_fd():
    torch.manual_seed(2)
    w = nn.Parameter(torch.randn(10, dtype=torch.float64))
    x, t = torch.randn(4, 10, dtype=torch.float64), torch.rand(4, 10, dtype=torch.float64)
    assert_grads_match(lambda: reconstruction_loss(torch.sigmoid(x * w), t), [w])


# heads and objective


@pytest.mark.parametrize("spatial,channels,out_c,stride", [(32, 16, 32, 2), (16, 32, 64, 2), (8, 64, 64, 1)])
def test_aux_classifier_structure(spatial, channels, out_c, stride):
    head = AuxClassifier(channels, spatial, 32, 10)
    assert head.conv.out_channels == out_c and head.conv.stride == (stride, stride)
    assert head.fc1.out_features == 128
    assert head(torch.randn(2, channels, spatial, spatial)).shape == (2, 10)
    assert AuxClassifier(channels, spatial, 32, 10, "contrast")(torch.randn(2, channels, spatial, spatial)).shape == (2, 128)


def test_decoder_range_and_shape():
    dec = AuxDecoder(32, 32)
    out = dec(torch.randn(2, 32, 16, 16) * 10)
    assert out.shape == (2, 3, 32, 32)
    assert out.min() >= 0 and out.max() <= 1
    assert dec.conv1.out_channels == 12


def test_final_head():
    assert FinalHead(64, 10)(torch.randn(3, 64, 8, 8)).shape == (3, 10)


def _toy_parts(seed=0):
    torch.manual_seed(seed)
    h = torch.randn(4, 8, 8, 8, requires_grad=True)
    return h, torch.tensor([0, 1, 2, 1]), AuxClassifier(8, 8, 16, 3), AuxDecoder(8, 16), torch.rand(4, 3, 16, 16)


def test_objective_decoder_off_is_classifier_loss():
    h, y, cls, dec, t = _toy_parts()
    loss, diag, out = local_objective(h, y, cls, ObjectiveConfig(), dec, t)
    assert loss.item() == cross_entropy_loss(cls(h), y).item()
    assert "rec" not in diag


def test_objective_sum_of_terms():
    h, y, cls, dec, t = _toy_parts()
    cfg = ObjectiveConfig(decoder_on=True, rec_weight=1.0)
    loss, diag, _ = local_objective(h, y, cls, cfg, dec, t)
    expected = cross_entropy_loss(cls(h), y) + reconstruction_loss(dec(h), t)
    assert torch.allclose(loss, expected, rtol=1e-6)


def test_objective_zero_weight():
    h, y, cls, dec, t = _toy_parts()
    cfg = ObjectiveConfig(decoder_on=True, rec_weight=0.0)
    loss, _, _ = local_objective(h, y, cls, cfg, dec, t)
    assert torch.allclose(loss, cross_entropy_loss(cls(h), y))
    loss.backward()
    # the decoder still learns; the feature sees only the classifier gradient
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in dec.parameters())
    g_obj = h.grad.clone()
    h.grad = None
    cross_entropy_loss(cls(h), y).backward()
    assert torch.allclose(g_obj, h.grad, atol=1e-7)


def test_objective_weight_scales_feature_gradient():
    h, y, cls, dec, t = _toy_parts()
    grads = {}
    for w in (1.0, 3.0):
        h.grad = None
        loss, _, _ = local_objective(h, y, cls, ObjectiveConfig(decoder_on=True, rec_weight=w), dec, t)
        loss.backward()
        grads[w] = h.grad.clone()
    h.grad = None
    cross_entropy_loss(cls(h), y).backward()
    g_cls = h.grad.clone()
    assert torch.allclose(grads[3.0] - g_cls, 3 * (grads[1.0] - g_cls), atol=1e-6)


def test_contrast_objective():
    h, y, _, _, _ = _toy_parts()
    head = AuxClassifier(8, 8, 16, 3, "contrast")
    loss, diag, out = local_objective(h, y, head, ObjectiveConfig(head_kind="contrast"))
    assert out.shape == (4, 128) and not diag["no_positive"]
    assert loss.item() == supervised_contrastive_loss(out, y, 0.5).loss.item()
