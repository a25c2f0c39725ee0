import dataclasses
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

__all__ = ["WindowFit", "remap_trajectory", "parameter_starts"]


@dataclass
class WindowFit:
    """Result of fitting one hypothesis on the observations of a window.

    `change_index` is the window-relative index of the first observation of
    the second segment, None under the no-change hypothesis. The fitted
    trajectory (inference domain) is kept on `times` to warm-start later fits.
    """

    value: float
    theta: np.ndarray
    psi: np.ndarray
    sigma: np.ndarray
    times: np.ndarray
    trajectory: np.ndarray
    change_index: Optional[int] = None
    converged: bool = True
    message: str = ""
    n_iter: int = 0

    @property
    def n_segments(self) -> int:
        return self.theta.shape[0]

    def with_segments(self, n_segments: int) -> "WindowFit":
        """Warm start with `n_segments` copies of the segment-averaged theta."""
        if self.n_segments == n_segments:
            theta = self.theta.copy()
        else:
            theta = np.tile(self.theta.mean(axis=0), (n_segments, 1))
        return dataclasses.replace(self, theta=theta)

    def segment_values(self, segment: int) -> np.ndarray:
        return self.theta[min(segment, self.n_segments - 1)].copy()


def remap_trajectory(
    fit: Optional[WindowFit], times: np.ndarray, default: np.ndarray
) -> np.ndarray:
    """Interpolates a previous fit onto `times`, using `default` outside its span."""

    x = np.array(default, dtype=float)
    if fit is None or len(fit.times) < 2:
        return x
    inside = (times >= fit.times[0]) & (times <= fit.times[-1])
    for d in range(x.shape[1]):
        x[inside, d] = np.interp(times[inside], fit.times, fit.trajectory[:, d])
    return x


def _quantile_levels(n: int) -> List[float]:
    levels = [0.5]
    depth = 2
    while len(levels) < n:
        levels += [k / 2**depth for k in range(1, 2**depth, 2)]
        depth += 1
    return levels[:n]


def parameter_starts(bounds: np.ndarray, n: int, geometric: bool) -> List[np.ndarray]:
    """Starting values spread over a box, beginning with its center.

    Positive boxes are spread geometrically when `geometric` is set.
    """

    bounds = np.asarray(bounds, dtype=float).reshape(-1, 2)
    lo, hi = bounds[:, 0], bounds[:, 1]
    starts = []
    for q in _quantile_levels(n):
        linear = lo + q * (hi - lo)
        if geometric and np.all(lo > 0):
            starts.append(np.exp(np.log(lo) + q * (np.log(hi) - np.log(lo))))
        else:
            starts.append(linear)
    return starts
