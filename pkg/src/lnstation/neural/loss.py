"""Focal loss for the heavily imbalanced positive/negative candidate mix.

For a predicted probability p and binary target y:

    y = 1:  -alpha       * (1 - p)**gamma * log(p)
    y = 0:  -(1 - alpha) * p**gamma       * log(1 - p)

With gamma = 0 and alpha = 0.5 this is exactly half the binary
cross-entropy. Probabilities are clamped to [eps, 1 - eps] before the
logs; the clamp kills the gradient at the saturated ends.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, add, clip, log, mul, mul_array, power, scale, shift

EPS = 1e-7


def focal_loss(p: Tensor, y, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Elementwise focal loss; scalar inputs give a scalar tensor.

    ``y`` is a constant array (or scalar) of 0/1 targets matching p's shape.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.shape != p.data.shape:
        y = np.broadcast_to(y, p.data.shape).copy()
    pc = clip(p, EPS, 1.0 - EPS)
    one_minus = shift(scale(pc, -1.0), 1.0)  # 1 - p
    pos = scale(mul(power(one_minus, gamma), log(pc)), -float(alpha))
    neg = scale(mul(power(pc, gamma), log(one_minus)), -(1.0 - float(alpha)))
    return add(mul_array(pos, y), mul_array(neg, 1.0 - y))
