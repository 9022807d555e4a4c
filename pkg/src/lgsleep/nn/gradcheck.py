"""Central finite-difference check of analytic gradients."""
import math
from dataclasses import dataclass, field

import numpy as np

from .layers import track_kinks


def rel_error(a, n):
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-12)


@dataclass
class GradCheckResult:
    per_param: dict = field(default_factory=dict)
    n_coords: int = 0
    n_kinks: int = 0

    @property
    def max_rel_error(self) -> float:
        return max(self.per_param.values(), default=0.0)


def _difference(lp, lm) -> float:
    if np.ndim(lp) == 0:
        return float(lp) - float(lm)
    return math.fsum(np.asarray(lp, dtype=np.float64) - np.asarray(lm, dtype=np.float64))


def grad_check(loss_fn, params, h=1e-5, max_coords=200, seed=0) -> GradCheckResult:
    """Compare analytic gradients against central differences.

    ``loss_fn(backward)`` must return the scalar loss and, when ``backward``
    is true, leave analytic gradients in each ``Param.grad``. It has to be
    deterministic, so reseed any dropout generator inside it. Parameters
    larger than ``max_coords`` are checked on a random subset of that size.

    A coordinate whose +h or -h evaluation flips a ReLU mask or a pool
    argmax sits on a non-differentiable point; it is skipped, counted in
    ``n_kinks``, and replaced by another random coordinate.

    ``loss_fn`` may return either a scalar or an array of additive terms
    (per sample, per element). With terms the difference is taken piece by
    piece and summed exactly, so the estimate is not limited by the rounding
    of two nearly equal totals.
    """
    rng = np.random.default_rng(seed)
    for p in params:
        p.grad[...] = 0.0
    loss_fn(True)
    analytic = {p.name: p.grad.copy() for p in params}
    with track_kinks() as base:
        loss_fn(False)
    base = list(base)
    res = GradCheckResult()
    for p in params:
        flat = p.value.reshape(-1)
        want = min(flat.size, max_coords)
        order = rng.permutation(flat.size)
        a_all = analytic[p.name].reshape(-1)
        errs = []
        for c in order:
            if len(errs) == want:
                break
            old = flat[c]
            flat[c] = old + h
            with track_kinks() as kp:
                lp = loss_fn(False)
            flat[c] = old - h
            with track_kinks() as km:
                lm = loss_fn(False)
            flat[c] = old
            if kp != base or km != base:
                res.n_kinks += 1
                continue
            errs.append(float(rel_error(a_all[c], _difference(lp, lm) / (2 * h))))
        res.per_param[p.name] = max(errs, default=0.0)
        res.n_coords += len(errs)
    return res
