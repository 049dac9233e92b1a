"""Shared test utilities: central finite differences and error metrics."""

import numpy as np


def numeric_grad(f, x, h=1e-5):
    """Central-difference gradient of scalar f with respect to array x.

    Perturbs x in place and restores it, so f may close over x directly.
    """
    x = np.asarray(x)
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_err(analytic, numeric, floor=1e-4):
    """Max elementwise relative error with a floor on the denominator."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
