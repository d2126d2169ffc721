"""Central finite-difference checks of analytic gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np


def relative_errors(fn: Callable[[np.ndarray], float], x: np.ndarray, grad: np.ndarray,
                    coords, eps: float = 1e-4) -> np.ndarray:
    """``|g - fd| / (|fd| + 1e-8)`` for each coordinate in ``coords``.

    ``fn`` is evaluated on perturbed copies of ``x``; ``x`` itself is untouched.
    """
    errs = []
    for i in coords:
        xp = x.copy()
        xp[i] += eps
        xm = x.copy()
        xm[i] -= eps
        fd = (fn(xp) - fn(xm)) / (2 * eps)
        errs.append(abs(grad[i] - fd) / (abs(fd) + 1e-8))
    return np.array(errs)
