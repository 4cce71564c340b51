"""Central-difference gradient verification for the autodiff engine."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import activation_trace
from .optim import ParameterSet

# Relative error denominators below this floor are treated as absolute
# comparisons, so genuinely zero gradients report zero error instead of
# amplifying finite-difference noise.
_REL_FLOOR = 1e-3


@dataclass
class GradCheckReport:
    max_rel_err: float
    n_checked: int
    n_skipped: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.n_checked > 0 and self.max_rel_err < self.tolerance


def _patterns_equal(t1, t2) -> bool:
    if len(t1) != len(t2):
        return False
    return all(np.array_equal(a, b) for a, b in zip(t1, t2))


def finite_diff_check(
    forward_fn,
    params: ParameterSet,
    tolerance: float = 1e-4,
    h: float = 1e-5,
    max_coords: int = 200,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of ``forward_fn()`` against central
    differences over a subsample of parameter coordinates.

    ``forward_fn`` must rebuild the graph from ``params`` on every call
    and return a scalar Tensor. Probes whose two one-sided evaluations
    disagree on any relu/clip activation pattern straddle a kink and are
    skipped rather than scored.
    """
    if rng is None:
        rng = np.random.default_rng(0)

    params.zero_grad()
    loss = forward_fn()
    loss.backward()
    analytic = {
        name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
        for name, t in params.items()
    }

    coords = [
        (name, idx)
        for name, t in params.items()
        for idx in range(t.data.size)
    ]
    if len(coords) > max_coords:
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    max_rel = 0.0
    n_checked = 0
    n_skipped = 0
    for name, idx in coords:
        t = params[name]
        flat = t.data.reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + h
        with activation_trace() as tr_plus:
            f_plus = float(forward_fn().data)
        flat[idx] = orig - h
        with activation_trace() as tr_minus:
            f_minus = float(forward_fn().data)
        flat[idx] = orig

        if not _patterns_equal(tr_plus, tr_minus):
            n_skipped += 1
            continue
        numeric = (f_plus - f_minus) / (2.0 * h)
        a = float(analytic[name].reshape(-1)[idx])
        err = abs(a - numeric)
        rel = err / max(abs(a), abs(numeric), _REL_FLOOR)
        max_rel = max(max_rel, rel)
        n_checked += 1

    return GradCheckReport(
        max_rel_err=max_rel,
        n_checked=n_checked,
        n_skipped=n_skipped,
        tolerance=tolerance,
    )
