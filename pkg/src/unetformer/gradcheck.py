"""Central finite-difference gradient checker."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import ContractError, Tensor, no_grad


@dataclass
class GradReport:
    op_name: str
    max_rel_error: float
    worst_index: int
    analytic: float
    numeric: float
    n_checked: int = 0

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def rel_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))


def _scalarize(out: Tensor, projection: np.ndarray | None) -> Tensor:
    if out.size == 1:
        return out.reshape(())
    return (out * projection).sum()


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-4,
    op_name: str = "fn",
    max_coords: int | None = None,
    seed: int = 0,
) -> GradReport:
    """Compare backward() against central differences for every input coordinate.

    Non-scalar outputs are reduced with a fixed random projection so that every
    output element contributes. ``max_coords`` limits the check to a seeded
    random subset of coordinates per input (used for whole-model checks).
    Returns the worst coordinate under |a - n| / max(1, |a|, |n|).
    """
    rng = np.random.default_rng(seed)
    inputs = list(inputs)
    for t in inputs:
        if not np.all(np.isfinite(t.data)):
            raise ContractError("gradcheck inputs must be finite")

    with no_grad():
        probe = fn(*inputs)
        again = fn(*inputs)
    if not np.array_equal(probe.data, again.data):
        raise ContractError(f"{op_name}: function is not deterministic")
    projection = None if probe.size == 1 else rng.standard_normal(probe.shape)

    for t in inputs:
        t.grad = None
        t.requires_grad = True
    loss = _scalarize(fn(*inputs), projection)
    loss.backward()

    def value() -> float:
        with no_grad():
            return _scalarize(fn(*inputs), projection).item()

    worst = GradReport(op_name, 0.0, -1, 0.0, 0.0)
    offset = 0
    checked = 0
    for t in inputs:
        analytic = np.zeros(t.size) if t.grad is None else t.grad.reshape(-1)
        flat = t.data.reshape(-1)
        coords = np.arange(t.size)
        if max_coords is not None and t.size > max_coords:
            coords = np.sort(rng.choice(t.size, size=max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = value()
            flat[i] = orig - eps
            fm = value()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            err = rel_error(analytic[i], numeric)
            checked += 1
            if err > worst.max_rel_error or worst.worst_index < 0:
                worst = GradReport(op_name, float(err), offset + int(i), float(analytic[i]), float(numeric))
        offset += t.size
    worst.n_checked = checked
    return worst
