import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("ci", max_examples=40, deadline=None)
settings.load_profile("ci")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of scalar f at every entry of array x (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def model_grad_check(model, loss_fn, n_params=120, seed=0, h=1e-5):
    """Max relative error between tape gradients and central differences.

    ``loss_fn()`` must build the scalar loss Tensor from ``model``'s current
    parameters; ``n_params`` scalar entries are sampled across all tensors.
    Entries whose true gradient is ~0 (attention key biases are exactly 0 by
    softmax shift invariance) are judged on absolute error via the 1e-5
    denominator floor, since central differences carry ~1e-10 roundoff.
    """
    from ccspred import ndcore as nd

    params = model.parameters()
    for p in params:
        p.zero_grad()
    with nd.Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    sizes = np.array([p.data.size for p in params])
    rng = np.random.default_rng(seed)
    flat = rng.choice(sizes.sum(), size=min(n_params, sizes.sum()), replace=False)
    owners = np.searchsorted(np.cumsum(sizes), flat, side="right")
    worst = 0.0
    for f, o in zip(flat, owners):
        p = params[o]
        i = np.unravel_index(f - (sizes[:o].sum() if o else 0), p.data.shape)
        old = p.data[i]
        p.data[i] = old + h
        fp = float(loss_fn().data)
        p.data[i] = old - h
        fm = float(loss_fn().data)
        p.data[i] = old
        num, ana = (fp - fm) / (2 * h), p.grad[i]
        denom = max(abs(num), abs(ana), 1e-5)
        worst = max(worst, abs(num - ana) / denom)
    return worst, len(flat)
