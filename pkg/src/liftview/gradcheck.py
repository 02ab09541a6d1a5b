"""Central-difference verification of autodiff gradients.

`grad_check` compares reverse-mode gradients of a scalar-valued function
against central finite differences, coordinate by coordinate. Coordinates
sitting on a kink (detected by disagreement between one-sided differences)
are flagged and excluded rather than failed, since a subgradient is a valid
answer there and finite differences are not.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from liftview.tensor import NonScalarLoss, Tape, Tensor, no_grad


@dataclass
class GradCheckResult:
    passed: bool
    max_rel_err: float
    checked: int
    excluded: int
    tol: float
    h: float
    failures: list[tuple[int, float, float, float]] = field(default_factory=list)

    def __str__(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return (f"grad_check {status}: max_rel_err={self.max_rel_err:.3e} "
                f"checked={self.checked} excluded={self.excluded} tol={self.tol:g}")


def grad_check(f, x: Tensor, h: float = 1e-5, tol: float = 1e-4,
               abs_floor: float = 1e-8, kink_abs: float = 1e-3,
               kink_rel: float = 0.05) -> GradCheckResult:
    """Check d f(x) / dx via central differences.

    f must be a pure function of x returning a scalar Tensor. A coordinate
    passes when |ad - fd| / max(|ad|, |fd|) < tol, with an absolute fallback
    of `abs_floor` when both are near zero. Coordinates where forward and
    backward one-sided differences disagree beyond kink_abs + kink_rel*scale
    are excluded as kinks.
    """
    if not isinstance(x, Tensor) or not x.requires_grad:
        raise ValueError("grad_check: x must be a Tensor with requires_grad=True")
    saved_grad = x.grad
    x.grad = None
    with Tape() as tape:
        y = f(x)
        if not isinstance(y, Tensor) or y.data.shape != ():
            raise NonScalarLoss("grad_check: f must return a scalar tensor")
        tape.backward(y)
    ad = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = saved_grad
    f0 = float(y.data)

    flat = x.data.ravel()
    ad_flat = ad.ravel()
    max_rel = 0.0
    checked = 0
    excluded = 0
    failures: list[tuple[int, float, float, float]] = []
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(x).data)
            flat[i] = orig - h
            fm = float(f(x).data)
            flat[i] = orig
            fwd = (fp - f0) / h
            bwd = (f0 - fm) / h
            if abs(fwd - bwd) > kink_abs + kink_rel * max(abs(fwd), abs(bwd)):
                excluded += 1
                continue
            num = (fp - fm) / (2.0 * h)
            a = ad_flat[i]
            err = abs(a - num)
            denom = max(abs(a), abs(num))
            rel = err / denom if denom > 0.0 else 0.0
            ok = rel < tol or err < abs_floor
            checked += 1
            if rel > max_rel and not (err < abs_floor):
                max_rel = rel
            if not ok and len(failures) < 10:
                failures.append((i, float(a), float(num), float(rel)))
    return GradCheckResult(
        passed=not failures,
        max_rel_err=max_rel,
        checked=checked,
        excluded=excluded,
        tol=tol,
        h=h,
        failures=failures,
    )
