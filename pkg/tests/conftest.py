"""Shared test helpers: finite-difference gradient checking."""

import numpy as np

import mixcrypt.autodiff as ad


def finite_difference_check(make_loss, tensors, h=1e-4, sample=None, rng=None):
    """Worst relative error between analytic and central-difference gradients.

    ``make_loss`` rebuilds the scalar loss from the current tensor data;
    ``sample`` limits the number of coordinates checked per tensor.
    """
    loss = make_loss()
    loss.backward()
    grads = [t.grad.copy() for t in tensors]
    for t in tensors:
        t.zero_grad()
    worst = 0.0
    for t, g in zip(tensors, grads):
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        idxs = np.arange(flat.size)
        if sample is not None and flat.size > sample:
            idxs = rng.choice(flat.size, size=sample, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            up = make_loss().item()
            flat[i] = orig - h
            down = make_loss().item()
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            rel = abs(gflat[i] - numeric) / max(abs(gflat[i]), abs(numeric), 1e-6)
            worst = max(worst, rel)
    return worst


def away_from_kinks(rng, shape, low=0.15, high=1.0):
    """Random values bounded away from 0 so abs/relu kinks can't be straddled."""
    mag = rng.uniform(low, high, size=shape)
    sign = np.where(rng.uniform(size=shape) < 0.5, -1.0, 1.0)
    return mag * sign


def make_param(rng, shape, scale=0.5):
    return ad.Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True)
