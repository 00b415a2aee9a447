"""Finite-difference gradient verification shared by the model modules."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Relative error uses a floored denominator so finite-difference noise on
# near-zero gradient coordinates cannot register as a failure.
_DENOM_FLOOR = 1e-4


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    worst_index: tuple
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def __str__(self) -> str:
        status = "OK" if self.passed else "FAIL"
        return (
            f"gradient check {status}: max relative error {self.max_rel_error:.3e} "
            f"at {self.worst_param}{list(self.worst_index)} "
            f"({self.n_checked} coordinates, tolerance {self.tolerance:.1e})"
        )


def compare_gradients(loss_fn, arrays: dict[str, np.ndarray], analytic: dict[str, np.ndarray],
                      n_coords: int = 100, step: float = 1e-5, seed: int = 0,
                      tolerance: float = 1e-4) -> GradCheckReport:
    """Check analytic gradients against central finite differences.

    ``loss_fn`` is re-evaluated with each sampled coordinate nudged by
    +/- step; arrays are mutated in place and restored. Coordinates are
    drawn uniformly over the concatenated parameter vector.
    """
    names = list(arrays)
    sizes = np.array([arrays[k].size for k in names])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat_idx = rng.choice(total, size=min(n_coords, total), replace=False)
    bounds = np.cumsum(sizes)

    worst = (-1.0, names[0], (0,))
    for fi in flat_idx:
        k = int(np.searchsorted(bounds, fi, side="right"))
        name = names[k]
        local = int(fi - (bounds[k - 1] if k else 0))
        arr = arrays[name]
        index = np.unravel_index(local, arr.shape)
        orig = arr[index]
        arr[index] = orig + step
        f_plus = loss_fn()
        arr[index] = orig - step
        f_minus = loss_fn()
        arr[index] = orig
        numeric = (f_plus - f_minus) / (2.0 * step)
        a = float(analytic[name][index])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), _DENOM_FLOOR)
        if rel > worst[0]:
            worst = (rel, name, index)

    return GradCheckReport(
        max_rel_error=worst[0], worst_param=worst[1], worst_index=worst[2],
        n_checked=len(flat_idx), tolerance=tolerance,
    )
