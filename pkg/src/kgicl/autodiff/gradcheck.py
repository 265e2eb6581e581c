"""Central finite-difference gradient checks in float64 shadow mode."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .tape import Tape, Tensor


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    num = np.linalg.norm((a - b).ravel())
    den = max(np.linalg.norm(a.ravel()), np.linalg.norm(b.ravel()), 1e-12)
    return float(num / den)


def numeric_grads(fn: Callable[[Tape, dict[str, Tensor]], Tensor],
                  params: dict[str, np.ndarray], h: float = 1e-3) -> dict[str, np.ndarray]:
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def evaluate(values):
        tape = Tape(np.float64)
        leaves = {k: tape.param(k, v) for k, v in values.items()}
        return float(fn(tape, leaves).data)

    out = {}
    for name, arr in base.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = evaluate(base)
            flat[i] = orig - h
            fm = evaluate(base)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        out[name] = g
    return out


def analytic_grads(fn, params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    tape = Tape(np.float64)
    leaves = {k: tape.param(k, v) for k, v in params.items()}
    loss = fn(tape, leaves)
    return tape.backward(loss)


def gradcheck(fn, params: dict[str, np.ndarray], h: float = 1e-3) -> float:
    """Largest per-parameter relative error between analytic and numeric gradients."""
    ana = analytic_grads(fn, params)
    num = numeric_grads(fn, params, h)
    return max(relative_error(ana[k], num[k]) for k in params)
