"""Central-difference gradient checking in 64-bit precision."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, no_grad

DEFAULT_STEP = 1e-4


@dataclass
class GradcheckReport:
    max_rel_err: float
    worst_index: tuple[int, int]  # (input position, flat element index)
    analytic: float
    numeric: float
    n_checked: int

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol


def rel_err(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def gradcheck(f: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = DEFAULT_STEP,
              perturb: float = 0.0, max_checks: Optional[int] = None, seed: int = 0) -> GradcheckReport:
    """Compare backward() against ``(f(x+h) - f(x-h)) / 2h`` element by element.

    ``inputs`` are modified in place: upcast to float64, shifted by
    ``perturb`` (use it to move relu inputs off the kink) and marked
    ``requires_grad``. ``f(*inputs)`` must return a scalar tensor. When
    ``max_checks`` is set, each input is checked on at most that many
    elements drawn with ``seed``.
    """
    for t in inputs:
        t.data = t.data.astype(np.float64) + perturb
        t.requires_grad = True
        t.grad = None

    loss = f(*inputs)
    loss.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]
    for t in inputs:
        t.grad = None

    rng = np.random.default_rng(seed)
    worst = GradcheckReport(0.0, (0, 0), 0.0, 0.0, 0)
    checked = 0
    with no_grad():
        for pos, t in enumerate(inputs):
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_checks is not None and flat.size > max_checks:
                idx = np.sort(rng.choice(flat.size, size=max_checks, replace=False))
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f(*inputs).data.sum())
                flat[i] = orig - h
                fm = float(f(*inputs).data.sum())
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                ana = float(analytic[pos].reshape(-1)[i])
                err = float(rel_err(np.array(ana), np.array(num)))
                checked += 1
                if err > worst.max_rel_err or checked == 1:
                    worst = GradcheckReport(err, (pos, int(i)), ana, num, 0)
    worst.n_checked = checked
    return worst
