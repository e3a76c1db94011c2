from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Array, backward


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    n_coords: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def grad_check(f: Callable[[], Array], leaves: Sequence[Array], h: float = 1e-6, tol: float = 1e-5,
               atol: float = 1e-8, floor_frac: float = 1e-3, max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare backprop gradients of the scalar ``f()`` with central differences.

    ``f`` must rebuild its graph from the current ``leaf.data`` on every call.
    The relative error of each coordinate is ``|a - n| / max(|a|, |n|, floor)``
    with ``floor = max(atol, floor_frac * max|a|)``: coordinates whose gradient is
    far below the gradient's overall scale sit at finite-difference noise level
    and are judged against that scale instead.

    ``max_coords`` caps the number of perturbed coordinates per leaf; the subset
    is drawn with ``rng`` (seeded from 0 when omitted).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    for leaf in leaves:
        leaf.grad = None
    out = f()
    grads = backward(out)
    analytic = [np.array(grads.get(leaf, np.zeros(leaf.shape)), dtype=np.float64) for leaf in leaves]
    for leaf in leaves:
        leaf.grad = None

    scale = max((float(np.max(np.abs(g))) for g in analytic if g.size), default=0.0)
    floor = max(atol, floor_frac * scale)
    max_rel = max_abs = 0.0
    n = 0
    for leaf, ga in zip(leaves, analytic):
        if not leaf.data.flags.c_contiguous:
            raise ValueError("grad_check perturbs leaves in place and needs contiguous data")
        flat = leaf.data.reshape(-1)
        ga = ga.reshape(-1)
        coords = range(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            err = abs(ga[i] - num)
            max_abs = max(max_abs, err)
            max_rel = max(max_rel, err / max(abs(ga[i]), abs(num), floor))
            n += 1
    return GradCheckReport(max_rel, max_abs, n, tol)
