"""Shared fixtures and the central finite-difference gradient checker."""

import numpy as np
import pytest

from clisa.tensor import Tensor


def fd_check(fn, tensors, h=1e-5, rel_tol=1e-4, abs_tol=1e-8, max_coords=40, rng=None):
    """Check analytic grads of scalar fn() against central differences.

    fn rebuilds the loss from `tensors` on every call; for each tensor
    up to max_coords coordinates are probed (all of them when small).
    abs_tol passes gradients below the finite-difference cancellation
    noise floor. Returns the worst relative error seen.
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    loss = fn()
    assert loss.data.shape == (), f"fd_check needs a scalar loss, got {loss.data.shape}"
    loss.backward()
    worst = 0.0
    for t in tensors:
        assert t.grad is not None, "backward left a requires_grad tensor without grad"
        flat = t.data.reshape(-1)
        gflat = t.grad.reshape(-1)
        if flat.size <= max_coords:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            lp = float(fn().data)
            flat[i] = orig - h
            lm = float(fn().data)
            flat[i] = orig
            num = (lp - lm) / (2.0 * h)
            ana = float(gflat[i])
            if abs(ana - num) < abs_tol:
                continue
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-6)
            worst = max(worst, err)
            assert err < rel_tol, (
                f"gradient mismatch at coord {i}: analytic {ana}, numeric {num}, "
                f"rel err {err:.2e}"
            )
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def rand_tensor(rng, shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)
