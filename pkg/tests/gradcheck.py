"""Central finite-difference oracle for the autodiff engine."""

import numpy as np

from loggia.nn.autodiff import Tensor

RTOL = 1e-4
ATOL = 1e-7  # floor for entries whose true derivative is ~0


def numeric_grad(f, arrays, i, h=1e-6):
    x = arrays[i]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        up = f(*arrays)
        x[idx] = old - h
        down = f(*arrays)
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def analytic_grads(build, arrays):
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*ts)
    out.backward()
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]


def check(build, arrays, wrt=None):
    """Compare backward() of scalar ``build(*tensors)`` with central differences; returns max violation."""
    arrays = [np.array(a, dtype=float) for a in arrays]
    grads = analytic_grads(build, arrays)

    def f(*xs):
        return float(build(*[Tensor(x) for x in xs]).data)

    worst = 0.0
    for i in (range(len(arrays)) if wrt is None else wrt):
        num = numeric_grad(f, arrays, i)
        err = np.abs(grads[i] - num) - (RTOL * np.maximum(np.abs(grads[i]), np.abs(num)) + ATOL)
        worst = max(worst, float(err.max()) if err.size else 0.0)
    return worst


def close(a, b):
    return np.all(np.abs(a - b) <= RTOL * np.maximum(np.abs(a), np.abs(b)) + ATOL)


def check_module(params, loss, rng, per_param=6, h=1e-6):
    """Finite-difference check of ``loss()`` against backward() on sampled entries of each parameter."""
    for p in params:
        p.grad = None
    out = loss()
    out.backward()
    grads = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(per_param, flat.size), replace=False)
        for k in picks:
            old = flat[k]
            flat[k] = old + h
            up = float(loss().data)
            flat[k] = old - h
            down = float(loss().data)
            flat[k] = old
            num = (up - down) / (2 * h)
            a = g.reshape(-1)[k]
            worst = max(worst, abs(a - num) - (RTOL * max(abs(a), abs(num)) + ATOL))
    return worst
