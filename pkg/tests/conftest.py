import numpy as np
import pytest

from reimts.types import RawSample, ScaleStack


def random_sample(rng, num_variables=None, max_obs=200, span=48.0, grid=None, sample_id=0):
    """Random raw sample with unique (timestamp, variable) pairs."""
    V = num_variables or int(rng.integers(1, 11))
    n = int(rng.integers(1, max_obs + 1))
    if grid:
        t = rng.integers(0, int(span / grid) + 1, size=n) * grid
    else:
        t = rng.uniform(0, span, size=n)
        t[rng.random(n) < 0.05] = 0.0
    v = rng.integers(0, V, size=n)
    _, keep = np.unique(np.stack([t, v]), axis=1, return_index=True)
    keep = np.sort(keep)
    return RawSample(t[keep], rng.standard_normal(len(keep)), v[keep], span, V, sample_id)


def random_stack(rng, span=48.0):
    levels = int(rng.integers(2, 5))
    periods = [span]
    for _ in range(levels - 1):
        periods.append(periods[-1] / int(rng.choice([2, 3, 4])))
    return ScaleStack(tuple(periods))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def toy_batch(rng, stack, num_variables=2, num_samples=3, max_obs=12, dtype=None, mode="time", grid=None):
    """Collated batch of random samples with three forecast query rows."""
    import torch

    from reimts.batching import collate
    from reimts.splitting import build_levels
    from reimts.types import ForecastQuery, align_and_pad

    span = stack.total_span
    samples, queries = [], []
    for i in range(num_samples):
        s = random_sample(rng, num_variables, max_obs, span, grid, sample_id=i)
        samples.append(build_levels(align_and_pad(s), stack, mode))
        qt = span + rng.uniform(0.1, 0.25 * span, size=(3, num_variables))
        qm = (rng.random((3, num_variables)) < 0.7).astype(np.int8)
        qm[0, 0] = 1
        truth = rng.standard_normal((3, num_variables)) * qm
        queries.append(ForecastQuery(qt * qm, qm, span, 0.25 * span, truth))
    return collate(samples, queries, dtype or torch.float64)


def central_difference_check(model, loss_fn, step=1e-5, max_params=None, rng=None):
    """Max relative error between autograd and central finite differences.

    Relative error is ``|a - f| / max(|a|, |f|, 1e-6)`` per coordinate.
    """
    import torch

    params = [p for p in model.parameters() if p.requires_grad]
    model.zero_grad()
    loss_fn().backward()
    analytic = [p.grad.detach().clone() for p in params]
    coords = [(i, j) for i, p in enumerate(params) for j in range(p.numel())]
    if max_params is not None and len(coords) > max_params:
        pick = (rng or np.random.default_rng(0)).choice(len(coords), max_params, replace=False)
        coords = [coords[c] for c in pick]
    worst = 0.0
    with torch.no_grad():
        for i, j in coords:
            flat = params[i].view(-1)
            old = flat[j].item()
            flat[j] = old + step
            up = loss_fn().item()
            flat[j] = old - step
            down = loss_fn().item()
            flat[j] = old
            fd = (up - down) / (2 * step)
            a = analytic[i].view(-1)[j].item()
            worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-6))
    return worst
