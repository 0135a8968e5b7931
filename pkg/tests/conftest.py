import itertools
import random

import pytest
import torch

from contsup.backbone import build_backbone
from contsup.data import ToyConfig, make_toy


def brute_force_min_max(costs, K):
    """Smallest achievable max-module cost over every contiguous K-partition."""
    n = len(costs)
    best = None
    for cuts in itertools.combinations(range(1, n), K - 1):
        edges = (0,) + cuts + (n,)
        worst = max(sum(costs[a:b]) for a, b in zip(edges, edges[1:]))
        best = worst if best is None else min(best, worst)
    return best


@pytest.fixture
def rng():
    return random.Random(1234)


@pytest.fixture(scope="session")
def spec16():
    """16-unit backbone on 16x16 inputs (stem + 15 blocks, narrow widths)."""
    return build_backbone(blocks_per_stage=(5, 5, 5), input_shape=(3, 16, 16), widths=(4, 8, 8))


@pytest.fixture(scope="session")
def tiny_toy():
    return make_toy(ToyConfig(n_train=128, n_test=64, size=8))


@pytest.fixture(autouse=True)
def _threads():
    torch.set_num_threads(1)


def isolation_violations(net, x, y):
    """Names of parameters outside bundle l that receive gradient from module l's loss."""
    owner = {}
    for m, params in enumerate(net.bundle_parameters()):
        for p in params:
            owner[id(p)] = m + 1
    everything = [p for params in net.bundle_parameters() for p in params]
    bad = []
    results = list(net.run_modules(x, y))
    for res in results:
        grads = torch.autograd.grad(res.loss, everything, allow_unused=True, retain_graph=True)
        for p, g in zip(everything, grads):
            if owner[id(p)] != res.index and g is not None and bool(g.abs().sum() > 0):
                bad.append((res.index, owner[id(p)]))
    return bad


def e2e_reference_trace(net, x_batches, y_batches, lr, momentum, weight_decay):
    """Losses of a hand-written monolithic training loop started from ``net``'s weights.

    Forward: the units in order, global average pooling, the final linear
    layer. Update: SGD with Nesterov momentum and L2 weight decay written
    out explicitly.
    """
    import copy

    import torch.nn.functional as F

    bundle = copy.deepcopy(net.bundles[0])
    units = list(bundle.segment)
    fc = bundle.classifier.fc
    params = [p for u in units for p in u.parameters()] + list(fc.parameters())
    bufs = [None] * len(params)
    losses = []
    for x, y in zip(x_batches, y_batches):
        h = x
        for u in units:
            h = u(h)
        logits = fc(h.mean(dim=(2, 3)))
        loss = F.cross_entropy(logits, y)
        grads = torch.autograd.grad(loss, params)
        with torch.no_grad():
            for k, (p, g) in enumerate(zip(params, grads)):
                g = g + weight_decay * p
                bufs[k] = g.clone() if bufs[k] is None else momentum * bufs[k] + g
                p -= lr * (g + momentum * bufs[k])
        losses.append(loss.item())
    return losses, params


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture(scope="session")
def acceptance():
    """Recorder: ``acceptance(n, ok, detail)`` prints and keeps one line per criterion."""

    def record(n, ok, detail):
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE[n] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
