"""Shared numeric oracles for the test suite."""

import numpy as np


def finite_difference(f, params, step=1e-5):
    """Central finite-difference gradients of scalar f() w.r.t. each tensor.

    `f` must recompute the loss from the tensors' current data. Entries are
    perturbed in place and restored.
    """
    out = []
    for p in params:
        grad = np.zeros(p.data.shape)
        flat = p.data.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f()
            flat[i] = orig - step
            lo = f()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
        out.append(grad)
    return out


def rel_err(analytic, numeric) -> float:
    """Max-norm relative disagreement between two gradient arrays."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-8)
    return float(np.abs(a - n).max(initial=0.0) / denom)


def check_gradients(build, params, tol, step=1e-5):
    """Tape-vs-finite-difference check.

    `build()` runs the forward pass from current parameter data and returns
    the scalar loss Tensor. Returns the worst relative error observed.
    """
    from rankgen import tensor as T

    with T.Tape() as tape:
        loss = build()
    grads = tape.backward(loss, wrt=params)
    numeric = finite_difference(lambda: build().item(), params, step=step)
    worst = 0.0
    for p, num in zip(params, numeric):
        worst = max(worst, rel_err(grads[p], num))
    assert worst < tol, f"gradient mismatch: rel err {worst:.3e} >= {tol:.1e}"
    return worst
