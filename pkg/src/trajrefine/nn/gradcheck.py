"""Finite-difference verification of analytic gradients.

``grad_check`` perturbs every parameter coordinate (or a seeded random
subsample once the total exceeds a cap) with central differences and compares
against the gradients produced by ``backward()``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .modules import Parameter
from .tensor import Tensor

__all__ = ["GradCheckReport", "grad_check"]

SUBSAMPLE_THRESHOLD = 10_000


@dataclass
class GradCheckReport:
    max_rel_error: float
    num_checked: int
    worst_param: str = ""
    per_param: dict[str, float] = field(default_factory=dict)

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def grad_check(loss_fn, params: list[Parameter], eps: float = 1e-6,
               max_coords: int = SUBSAMPLE_THRESHOLD, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients of ``loss_fn()`` (scalar Tensor) against
    central finite differences on ``params``."""
    for p in params:
        p.grad = None
    loss = loss_fn()
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ValueError("loss_fn must return a scalar Tensor")
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("non-finite loss")
    loss.backward()
    analytic = {p.name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for p in params}
    # central differences carry cancellation noise of roughly
    # |loss| * machine_eps / eps; near-zero gradients (e.g. directions the
    # network is exactly invariant to, like a key-projection bias under
    # softmax) are compared against a floor well above that noise instead of
    # being amplified into spurious relative errors
    noise_floor = max(1e-8, abs(float(loss.data)) * 1e-10 / eps)

    total = sum(p.size for p in params)
    rng = np.random.default_rng(seed)
    report = GradCheckReport(max_rel_error=0.0, num_checked=0)
    for p in params:
        if total > max_coords:
            k = max(1, int(round(max_coords * p.size / total)))
            coords = rng.choice(p.size, size=min(k, p.size), replace=False)
        else:
            coords = np.arange(p.size)
        flat = p.data.reshape(-1)
        ana = analytic[p.name].reshape(-1)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            hi = float(loss_fn().data)
            flat[c] = orig - eps
            lo = float(loss_fn().data)
            flat[c] = orig
            numeric = (hi - lo) / (2 * eps)
            denom = max(abs(numeric), abs(ana[c]), noise_floor)
            rel = abs(numeric - ana[c]) / denom
            worst = max(worst, rel)
            report.num_checked += 1
        report.per_param[p.name] = worst
        if worst > report.max_rel_error:
            report.max_rel_error = worst
            report.worst_param = p.name
    return report
