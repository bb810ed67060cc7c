"""Central finite-difference gradient checking.

The oracle works purely through the public forward interface: it perturbs
parameter entries in place, re-evaluates the loss closure, and compares the
central difference against the analytic gradient from the tape. Run the model
in float64 when tight tolerances matter; float32 central differences are
dominated by rounding noise long before 1e-4 relative error.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, OracleError
from .tensor import Tensor, backward


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor],
               eps: float = 1e-4, max_coords: int | None = None,
               seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must be a deterministic closure over `params` returning a scalar loss;
    determinism is verified by double evaluation. When `max_coords` is given,
    at most that many coordinates per parameter are sampled (deterministic in
    `seed`); otherwise every coordinate is checked.
    """
    if not (1e-5 <= eps <= 1e-2):
        raise ConfigError(f"grad_check eps must lie in [1e-5, 1e-2], got {eps}")
    params = list(params)

    first = f()
    second = f()
    if first.data.size != 1 or second.data.size != 1:
        raise OracleError("grad_check closure must return a scalar loss")
    if first.data.tobytes() != second.data.tobytes():
        raise OracleError("grad_check closure is not deterministic across evaluations")

    for p in params:
        p.grad = None
    loss = f()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.grad = None

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, a in zip(params, analytic):
        n = p.data.size
        if max_coords is not None and n > max_coords:
            coords = np.sort(rng.choice(n, size=max_coords, replace=False))
        else:
            coords = np.arange(n)
        flat = p.data.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(flat[i])
            f_hi = f().item()
            flat[i] = orig - eps
            lo = float(flat[i])
            f_lo = f().item()
            flat[i] = orig
            span = hi - lo  # actual representable step, not 2*eps
            cd = (f_hi - f_lo) / span
            ai = float(a.reshape(-1)[i])
            rel = abs(ai - cd) / max(abs(ai), abs(cd), 1e-8)
            if rel > worst:
                worst = rel
    return worst
