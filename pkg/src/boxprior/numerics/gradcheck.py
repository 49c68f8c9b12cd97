"""Central finite-difference check of analytic gradients."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from boxprior.errors import EvaluationError
from boxprior.numerics.tensor import Tensor


@dataclass
class GradReport:
    """Worst relative error per parameter tensor, plus how many coordinates were probed."""

    errors: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_error < tol


def _evaluate(loss_fn) -> float:
    value = float(np.asarray(loss_fn().data))
    if not math.isfinite(value):
        raise EvaluationError(f"loss evaluated to {value}")
    return value


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Iterable[tuple[str, Tensor]],
    step: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradReport:
    """Compare backprop gradients of ``loss_fn()`` with central differences.

    ``loss_fn`` rebuilds the graph from the current parameter values on each
    call. Parameters are perturbed in place and restored afterwards. With
    ``max_coords`` set, at most that many coordinates per tensor are probed,
    chosen with ``rng``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    named = list(params.items() if isinstance(params, Mapping) else params)
    for _, p in named:
        p.grad = None
    loss = loss_fn()
    if not math.isfinite(float(loss.data)):
        raise EvaluationError(f"loss evaluated to {float(loss.data)}")
    loss.backward()
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for name, p in named}

    report = GradReport()
    rng = rng or np.random.default_rng(0)
    for name, p in named:
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        worst = 0.0
        a_flat = analytic[name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            f_plus = _evaluate(loss_fn)
            flat[i] = orig - step
            f_minus = _evaluate(loss_fn)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            worst = max(worst, relative_error(a_flat[i], numeric))
        report.errors[name] = worst
        report.checked[name] = len(coords)
    return report
