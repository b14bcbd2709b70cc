from __future__ import annotations

import numpy as np

from .tensor import Tensor


def grad_check(fn, inputs, h: float = 1e-5, wrt=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps a list of ``Tensor`` to a scalar ``Tensor``.  ``inputs`` are
    float64 arrays; ``wrt`` selects which of them are differentiated (all by
    default).  The error per coordinate is |a - n| / max(1, |n|).
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    wrt = range(len(arrays)) if wrt is None else wrt
    wrt = list(wrt)
    leaves = [Tensor(a.copy(), requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
    out = fn(leaves)
    out.backward()
    worst = 0.0
    for i in wrt:
        analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(arrays[i])
        flat = arrays[i].reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + h
            fp = float(fn([Tensor(a) for a in arrays]).data)
            flat[j] = old - h
            fm = float(fn([Tensor(a) for a in arrays]).data)
            flat[j] = old
            num = (fp - fm) / (2 * h)
            err = abs(analytic.reshape(-1)[j] - num) / max(1.0, abs(num))
            worst = max(worst, err)
    return worst
