"""Shared oracles for the test suite.

The central one is a finite-difference gradient check: every
differentiable op must agree with a central-difference estimate to a
relative error of 1e-4 (denominator floored at 1) before downstream
modules get to use it.
"""

import numpy as np
import pytest

from mrparse import autodiff as ad

FD_STEP = 1e-5
FD_TOL = 1e-4


def numeric_gradient(f, x, h=FD_STEP):
    """Central differences of scalar-valued ``f()`` wrt array ``x``.

    ``x`` is mutated in place and restored; ``f`` must read it live.
    """
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = f()
        flat[i] = keep - h
        down = f()
        flat[i] = keep
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def check_gradients(build, leaves, tol=FD_TOL, h=FD_STEP):
    """Backprop through ``build()`` and compare every leaf against FD."""
    for leaf in leaves:
        leaf.zero_grad()
    out = build()
    assert out.data.size == 1, "gradcheck target must be scalar"
    out.backward()
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        numeric = numeric_gradient(lambda: build().item(), leaf.data, h=h)
        err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
        worst = float(err.max()) if err.size else 0.0
        assert worst <= tol, f"max rel err {worst:.3g} exceeds {tol}"


def scalarize(t, proj):
    """Project a tensor to a scalar with fixed weights so FD applies."""
    return ad.reduce_sum(ad.mul(t, proj))


@pytest.fixture
def gradcheck():
    return check_gradients
