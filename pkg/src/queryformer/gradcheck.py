"""Finite-difference verification of tape gradients.

The harness evaluates a scalar-valued composite twice per probed entry
(central differences) and compares against the gradients accumulated by one
backward pass.  Relative error uses max(|analytic|, |numeric|) as the
denominator with an absolute floor: central differences carry roundoff
noise of roughly |f| * 1e-11 at eps = 1e-5, so gradients that are truly
zero would otherwise divide noise by itself.  The floor means absolute
disagreements below it are judged against the floor instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tape import DualTensor, Tape

REL_FLOOR = 1e-4


@dataclass
class GradReport:
    max_rel_err: float
    per_param: dict = field(default_factory=dict)
    nonfinite: bool = False

    def __str__(self) -> str:
        worst = max(self.per_param, key=self.per_param.get) if self.per_param else "-"
        return f"GradReport(max_rel_err={self.max_rel_err:.3e}, worst={worst}, nonfinite={self.nonfinite})"


def _eval_scalar(f: Callable, arrays: Mapping[str, np.ndarray]) -> float:
    tape = Tape()
    leaves = {name: DualTensor(a.copy()) for name, a in arrays.items()}
    out = f(tape, leaves)
    return float(out.values.reshape(()))


def grad_check(f: Callable, arrays: Mapping[str, np.ndarray], eps: float = 1e-5,
               max_entries: int | None = None, rng: np.random.Generator | None = None) -> GradReport:
    """Compare analytic and central-difference gradients of ``f``.

    ``f(tape, leaves)`` must build a scalar DualTensor from the named leaf
    tensors.  With ``max_entries`` set, at most that many entries per leaf
    are probed (chosen by ``rng``, default deterministic); otherwise every
    entry is probed.
    """
    arrays = {name: np.asarray(a, dtype=np.float64) for name, a in arrays.items()}
    base = _eval_scalar(f, arrays)
    if not np.isfinite(base):
        return GradReport(max_rel_err=float("inf"), nonfinite=True)

    tape = Tape()
    leaves = {name: DualTensor(a.copy()) for name, a in arrays.items()}
    out = f(tape, leaves)
    tape.backward(out)
    analytic = {name: leaves[name].grad.copy() for name in arrays}

    if rng is None:
        rng = np.random.default_rng(0)
    report = GradReport(max_rel_err=0.0)
    for name, a in arrays.items():
        flat_indices = np.arange(a.size)
        if max_entries is not None and a.size > max_entries:
            flat_indices = np.sort(rng.choice(a.size, size=max_entries, replace=False))
        worst = 0.0
        probe = a.copy()
        local = dict(arrays)
        local[name] = probe
        for idx in flat_indices:
            orig = probe.flat[idx]
            probe.flat[idx] = orig + eps
            f_plus = _eval_scalar(f, local)
            probe.flat[idx] = orig - eps
            f_minus = _eval_scalar(f, local)
            probe.flat[idx] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                report.nonfinite = True
                continue
            numeric = (f_plus - f_minus) / (2.0 * eps)
            ana = analytic[name].flat[idx]
            denom = max(abs(ana), abs(numeric), REL_FLOOR)
            worst = max(worst, abs(ana - numeric) / denom)
        report.per_param[name] = worst
        report.max_rel_err = max(report.max_rel_err, worst)
    return report
