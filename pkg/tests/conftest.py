"""Shared test helpers: finite-difference gradient oracles."""

from __future__ import annotations

import numpy as np
import pytest

from eevit import autograd as ag
from eevit.autograd import Tensor

FD_STEP = 1e-5
FD_TOL = 1e-4


def numeric_grad(loss_fn, tensor: Tensor, h: float = FD_STEP) -> np.ndarray:
    """Central finite differences of ``loss_fn()`` w.r.t. one tensor's data."""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    grad_flat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn()
        flat[i] = orig - h
        down = loss_fn()
        flat[i] = orig
        grad_flat[i] = (up - down) / (2.0 * h)
    return grad


def grad_check(build_loss, tensors, h: float = FD_STEP) -> float:
    """Max relative error between analytic and finite-difference gradients.

    ``build_loss()`` must rebuild the graph from the given tensors and
    return a scalar Tensor; the tensors are mutated in place during the
    numeric sweep.
    """
    for t in tensors:
        t.grad = None
    loss = build_loss()
    ag.backward(loss)
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numeric_grad(lambda: build_loss().item(), t, h)
        scale = max(1.0, np.abs(numeric).max())
        worst = max(worst, float(np.abs(analytic - numeric).max() / scale))
    return worst


def sampled_grad_check(build_loss, params, rng: np.random.Generator, samples: int = 8,
                       h: float = FD_STEP) -> float:
    """Finite-difference check on randomly sampled parameter coordinates."""
    for p in params:
        p.grad = None
    loss = build_loss()
    ag.backward(loss)
    worst = 0.0
    for _ in range(samples):
        p = params[rng.integers(len(params))]
        flat = p.data.reshape(-1)
        i = int(rng.integers(flat.size))
        orig = flat[i]
        flat[i] = orig + h
        up = build_loss().item()
        flat[i] = orig - h
        down = build_loss().item()
        flat[i] = orig
        numeric = (up - down) / (2.0 * h)
        analytic = 0.0 if p.grad is None else float(p.grad.reshape(-1)[i])
        worst = max(worst, abs(analytic - numeric) / max(1.0, abs(numeric)))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(0)
