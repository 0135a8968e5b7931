import math

import pytest
import torch

from contsup.probe import ProbeConfig, dump_features, empirical_entropy, estimate_mi, load_features

BSC_MI = math.log(2) + 0.1 * math.log(0.1) + 0.9 * math.log(0.9)


def exact_bsc(n, flip=0.1, seed=0):
    """Balanced bits, exactly ``flip`` of each class observed flipped, shuffled."""
    per = n // 2
    n_flip = int(round(flip * per))
    y = torch.cat([torch.zeros(per), torch.ones(per)]).long()
    h = y.clone().float()
    h[:n_flip] = 1 - h[:n_flip]
    h[per : per + n_flip] = 1 - h[per : per + n_flip]
    perm = torch.randperm(n, generator=torch.Generator().manual_seed(seed))
    return h[perm, None], y[perm]


def plugin_mi(h, y):
    """Plug-in I(h, y) in nats for discrete 1-d features."""
    keys = [(float(a), int(b)) for a, b in zip(h.flatten(), y)]
    n = len(keys)
    joint, ph, py = {}, {}, {}
    for a, b in keys:
        joint[(a, b)] = joint.get((a, b), 0) + 1
        ph[a] = ph.get(a, 0) + 1
        py[b] = py.get(b, 0) + 1
    return sum(c / n * math.log(c * n / (ph[a] * py[b])) for (a, b), c in joint.items())


def test_bsc_closed_form():
    assert BSC_MI == pytest.approx(0.3680642, abs=1e-6)
    h, y = exact_bsc(1000)
    assert plugin_mi(h, y) == pytest.approx(BSC_MI, abs=1e-12)


def test_bsc_estimate_bounded():
    h, y = exact_bsc(4000, seed=1)
    he, ye = exact_bsc(2000, seed=2)
    est = estimate_mi(h, y, ProbeConfig(), eval_features=he, eval_labels=ye)
    assert 0.33 <= est.estimate_nats <= BSC_MI + 1e-6
    assert est.label_entropy_nats == pytest.approx(math.log(2))


def test_gibbs_bound_on_random_splits():
    g = torch.Generator().manual_seed(3)
    for trial in range(3):
        y = torch.randint(0, 3, (600,), generator=g)
        noise = torch.randint(0, 3, (600,), generator=g)
        keep = torch.rand(600, generator=g) < 0.7
        h = torch.where(keep, y, noise).float()[:, None]
        est = estimate_mi(h, y, ProbeConfig(seed=trial))
        n_eval = est.n_eval
        perm = torch.randperm(600, generator=torch.Generator().manual_seed(trial))[:n_eval]
        assert est.raw_estimate_nats <= plugin_mi(h[perm], y[perm]) + 1e-6


def test_one_hot_features():
    y = torch.arange(1000) % 10
    est = estimate_mi(torch.nn.functional.one_hot(y, 10).float(), y)
    assert abs(est.estimate_nats - math.log(10)) <= 0.05


def test_independent_features():
    g = torch.Generator().manual_seed(0)
    est = estimate_mi(torch.randn(1000, 8, generator=g), torch.arange(1000) % 10)
    assert est.estimate_nats <= 0.05
    assert est.estimate_nats >= 0.0 and est.raw_estimate_nats <= est.estimate_nats


def test_estimate_below_label_entropy():
    y = torch.arange(500) % 5
    est = estimate_mi(torch.nn.functional.one_hot(y, 5).float() * 3, y)
    assert est.estimate_nats <= est.label_entropy_nats + 1e-9


def test_label_permutation_invariance():
    g = torch.Generator().manual_seed(4)
    y = torch.randint(0, 4, (400,), generator=g)
    h = torch.randn(400, 4, generator=g) + torch.nn.functional.one_hot(y, 4).float()
    perm = torch.tensor([2, 0, 3, 1])
    a = estimate_mi(h, y, ProbeConfig(seed=1))
    b = estimate_mi(h, perm[y], ProbeConfig(seed=1))
    assert a.raw_estimate_nats == b.raw_estimate_nats


def test_conv_probe_on_maps():
    g = torch.Generator().manual_seed(5)
    y = torch.arange(300) % 3
    maps = torch.randn(300, 4, 4, 4, generator=g) * 0.3
    maps[torch.arange(300), y] += 1.0
    est = estimate_mi(maps, y, ProbeConfig(width=8, blocks=2, spatial=4))
    assert est.estimate_nats > 0.5


def test_single_class_rejected():
    with pytest.raises(ValueError):
        estimate_mi(torch.randn(20, 2), torch.zeros(20, dtype=torch.long))


def test_empirical_entropy():
    assert empirical_entropy(torch.tensor([0, 1, 2, 3])) == pytest.approx(math.log(4))
    assert empirical_entropy(torch.tensor([1, 1])) == 0.0


def test_feature_dump_roundtrip(tmp_path):
    feats = [torch.randn(5, 2, 3, 3), torch.randn(5, 7)]
    labels = torch.tensor([0, 1, 0, 2, 1])
    manifest = dump_features(str(tmp_path), feats, labels)
    back, lab = load_features(manifest)
    assert torch.equal(lab, labels)
    assert all(torch.equal(a, b) for a, b in zip(feats, back))
