"""Finite-difference gradient checking used across the test suite."""

import numpy as np

STEP = 1e-4
TOL = 1e-3


def finite_diff(f, x, step=STEP):
    """Central-difference gradient of scalar f at array (or scalar) x."""
    if np.isscalar(x) or np.ndim(x) == 0:
        return (f(float(x) + step) - f(float(x) - step)) / (2 * step)
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp = x.copy()
        xp[idx] += step
        xm = x.copy()
        xm[idx] -= step
        g[idx] = (f(xp) - f(xm)) / (2 * step)
    return g


def grad_rel_err(analytic, numeric):
    """Norm-wise relative error between gradient arrays."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-10)
    return float(np.abs(a - n).max(initial=0.0) / denom)


def assert_grad_close(analytic, numeric, tol=TOL, what=""):
    err = grad_rel_err(analytic, numeric)
    assert err < tol, f"gradient mismatch{' for ' + what if what else ''}: rel err {err:.3e}"
