"""Shared test utilities: finite-difference gradient checking."""

from __future__ import annotations

import numpy as np

from pdploc import tensor as T


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of the scalar function f with respect
    to x, perturbing x in place one element at a time."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Hybrid absolute/relative error: |a - n| / max(1, |n|), maxed."""
    denom = np.maximum(1.0, np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_grads(build, arrays: list[np.ndarray], h: float = 1e-6, tol: float = 1e-4) -> float:
    """Gradient-check an op against central differences.

    `build` maps a list of Tensors to one output Tensor. The scalar under
    test is sum(output * W) for a fixed random W, realized on the autodiff
    side by seeding backward with W. Returns the worst error seen.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tensors = [T.Tensor(a, requires_grad=True) for a in arrays]
    out = build(tensors)
    w = np.random.default_rng(12345).standard_normal(out.data.shape)
    out.backward(grad=w)

    worst = 0.0
    for t, a in zip(tensors, arrays):

        def scalar() -> float:
            return float(np.sum(build([T.Tensor(x) for x in arrays]).data * w))

        num = numeric_grad(scalar, a, h=h)
        assert t.grad is not None, "missing analytic gradient"
        err = max_rel_err(t.grad, num)
        worst = max(worst, err)
        assert err < tol, f"gradient mismatch: {err:.3e} >= {tol:.0e}"
    return worst
