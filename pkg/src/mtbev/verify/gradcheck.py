"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

RTOL = 1e-4
ATOL = 1e-6
STEP = 1e-5


def finite_diff_grad(f: Callable[[np.ndarray], float], x, step: float = STEP) -> np.ndarray:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h`` for every coordinate.

    Raises:
        FloatingPointError: listing the coordinates where ``f`` was not finite.
    """
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    bad = []
    for i in np.ndindex(*x.shape):
        orig = x[i]
        x[i] = orig + step
        fp = float(f(x))
        x[i] = orig - step
        fm = float(f(x))
        x[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            bad.append(i)
            continue
        grad[i] = (fp - fm) / (2.0 * step)
    if bad:
        raise FloatingPointError(f"non-finite function value at coordinates {bad[:10]}")
    return grad


def compare_gradients(analytic: np.ndarray, numeric: np.ndarray, rtol: float = RTOL,
                      atol: float = ATOL) -> dict:
    """Relative error where ``|analytic| > atol``, absolute error elsewhere."""
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    diff = np.abs(analytic - numeric)
    large = np.abs(analytic) > atol
    rel = diff[large] / np.maximum(np.abs(analytic[large]), np.abs(numeric[large]))
    max_rel = float(rel.max()) if rel.size else 0.0
    max_abs_small = float(diff[~large].max()) if (~large).any() else 0.0
    return {"max_rel": max_rel, "max_abs": float(diff.max()) if diff.size else 0.0,
            "passed": max_rel <= rtol and max_abs_small <= atol, "n": int(analytic.size)}


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    max_abs_error: float
    passed: bool
    per_parameter: dict[str, dict] = field(default_factory=dict)

    def summary(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        worst = [k for k, v in self.per_parameter.items() if not v["passed"]]
        tail = f"  failing: {', '.join(worst)}" if worst else ""
        return (f"[{flag}] grad  {self.name:<34} max_rel={self.max_rel_error:.2e} "
                f"max_abs={self.max_abs_error:.2e} ({len(self.per_parameter)} tensors){tail}")


def check_gradients(name: str, fn: Callable[[], torch.Tensor], tensors: dict[str, torch.Tensor],
                    step: float = STEP, rtol: float = RTOL, atol: float = ATOL) -> GradCheckReport:
    """Compare autograd against central differences for every tensor in ``tensors``.

    ``fn`` must return a scalar and read the tensors afresh on each call; the
    tensors are float64 leaves that are perturbed in place.
    """
    for t in tensors.values():
        if t.dtype != torch.float64:
            raise TypeError(f"{name}: gradient checks run in float64, got {t.dtype}")
        t.requires_grad_(True)
        t.grad = None
    fn().backward()
    analytic = {k: (t.grad.detach().numpy().copy() if t.grad is not None else np.zeros(tuple(t.shape)))
                for k, t in tensors.items()}
    per = {}
    for key, t in tensors.items():
        view = t.data

        def f(x, view=view):
            view.copy_(torch.from_numpy(x))
            with torch.no_grad():
                return float(fn())

        base = view.numpy().copy()
        try:
            numeric = finite_diff_grad(f, base, step)
        finally:
            view.copy_(torch.from_numpy(base))
        per[key] = compare_gradients(analytic[key], numeric, rtol, atol)
    return GradCheckReport(
        name=name,
        max_rel_error=max((v["max_rel"] for v in per.values()), default=0.0),
        max_abs_error=max((v["max_abs"] for v in per.values()), default=0.0),
        passed=all(v["passed"] for v in per.values()),
        per_parameter=per)


def module_tensors(module: torch.nn.Module, prefix: str = "") -> dict[str, torch.Tensor]:
    return {prefix + k: p for k, p in module.named_parameters()}
