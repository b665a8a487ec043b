"""Central finite-difference checks for autodiff gradients."""

from __future__ import annotations

import numpy as np

from .engine import Tensor


def numerical_grad(fn, arrays, h=1e-5, which=None):
    """Central differences of scalar ``fn(*arrays)`` w.r.t. selected entries.

    ``which`` maps input index -> flat entry indices to perturb (all entries
    when omitted).  Returns a list of flat gradient arrays (NaN where skipped).
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    out = []
    for k, a in enumerate(arrays):
        g = np.full(a.size, np.nan)
        entries = range(a.size) if which is None or k not in which else which[k]
        flat = a.reshape(-1)
        for i in entries:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn(*arrays))
            flat[i] = orig - h
            fm = float(fn(*arrays))
            flat[i] = orig
            g[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def analytic_grad(fn_tensor, arrays):
    ts = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    y = fn_tensor(*ts)
    y.backward()
    return [np.zeros(t.data.size) if t.grad is None else t.grad.reshape(-1) for t in ts]


def relative_error(analytic, numeric, floor=1e-8):
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    ok = ~np.isnan(n)
    a, n = a[ok], n[ok]
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(n), np.linalg.norm(a), floor))


def check_gradients(fn_tensor, arrays, h=1e-5):
    """Max relative error over inputs between autodiff and central differences."""

    def fn_np(*arrs):
        return fn_tensor(*[Tensor(a) for a in arrs]).data.sum()

    ana = analytic_grad(fn_tensor, arrays)
    num = numerical_grad(fn_np, arrays, h=h)
    return max(relative_error(a, n) for a, n in zip(ana, num))
