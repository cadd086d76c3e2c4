import numpy as np
import pytest
import torch

from deepsent.bands import BANDS, group_of
from deepsent.scene import BandSeries, SceneStack


def random_stack(rng, h10=12, w10=12, n_images=3, bands=BANDS, scene_id="s") -> SceneStack:
    """Random LR scene with every band on its native grid (h10 must be divisible by 6)."""
    series = {}
    for b in bands:
        k = group_of(b).downscale_vs_10m
        series[b] = BandSeries(b, rng.uniform(0.0, 0.6, (n_images, h10 // k, w10 // k)).astype(np.float32))
    return SceneStack(series, scene_id)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


def fd_param_check(loss_fn, params, n_samples=None, eps=1e-6, seed=0):
    """Relative error between autograd and central differences for sampled parameter entries.

    ``params`` are float64 leaf tensors; ``loss_fn()`` returns a scalar. With
    ``n_samples`` only that many entries (spread over all tensors) are probed.
    """
    for p in params:
        p.grad = None
    loss_fn().backward()
    entries = [(i, j) for i, p in enumerate(params) for j in range(p.numel())]
    if n_samples is not None and n_samples < len(entries):
        pick = np.random.default_rng(seed).choice(len(entries), n_samples, replace=False)
        entries = [entries[k] for k in sorted(pick)]
    analytic, numeric = [], []
    with torch.no_grad():
        for i, j in entries:
            flat = params[i].view(-1)
            old = flat[j].item()
            flat[j] = old + eps
            up = loss_fn().item()
            flat[j] = old - eps
            down = loss_fn().item()
            flat[j] = old
            numeric.append((up - down) / (2 * eps))
            g = params[i].grad
            analytic.append(0.0 if g is None else g.view(-1)[j].item())
    a, n = np.array(analytic), np.array(numeric)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-30))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
