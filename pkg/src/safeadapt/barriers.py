"""Safe sets and barrier functions.

An affine barrier h(x) = p'x + q certifies safety as h >= 0 together with
the discrete decay condition h(x_{t+1}) >= (1 - eta) h(x_t). Nonlinear
hazards (angular bands, circles) keep an exact membership function for
violation accounting and are handed to the action filter as per-step
affine tangent models.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "AffineBarrier",
    "barrier_value",
    "SafeSetSpec",
    "check_safe",
    "AngularBandHazard",
    "CircleHazard",
]


@dataclass(frozen=True)
class AffineBarrier:
    """h(x) = p'x + q; safe side is h >= 0. ``eta`` is the decay rate."""

    p: np.ndarray
    q: float
    eta: float = 0.1
    name: str = ""

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64)
        if p.ndim != 1 or not np.any(p != 0.0):
            raise ValueError("p must be a nonzero vector")
        if not 0.0 < self.eta <= 1.0:
            raise ValueError("eta must lie in (0, 1]")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", float(self.q))

    def value(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return x @ self.p + self.q

    def normalized(self) -> "AffineBarrier":
        """Rescale so that the max-norm of p is 1 (the decision is homogeneous)."""
        s = float(np.max(np.abs(self.p)))
        return AffineBarrier(self.p / s, self.q / s, self.eta, self.name)


def barrier_value(barrier: AffineBarrier, x) -> float | np.ndarray:
    v = barrier.value(x)
    return float(v) if np.ndim(v) == 0 else v


class AngularBandHazard:
    """Forbidden angular band (lo, hi) on the wrapped angle coordinate.

    Safe iff the angle is outside the open band; the margin is the signed
    distance to the nearer band edge, h = max(lo - theta, theta - hi).
    """

    def __init__(self, lo: float, hi: float, angle_index: int = 0, name: str = "band"):
        if not lo < hi:
            raise ValueError("band must have lo < hi")
        self.lo = float(lo)
        self.hi = float(hi)
        self.angle_index = int(angle_index)
        self.name = name

    def value(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        theta = x[..., self.angle_index]
        return np.maximum(self.lo - theta, theta - self.hi)


class CircleHazard:
    """Keep-out disc in position coordinates; h is the distance to the rim."""

    def __init__(self, center, radius: float, pos_indices=(0, 1), name: str = "hazard"):
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)
        self.pos_indices = tuple(pos_indices)
        self.name = name

    def value(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        pos = x[..., list(self.pos_indices)]
        return np.linalg.norm(pos - self.center, axis=-1) - self.radius


@dataclass
class SafeSetSpec:
    """The safe set C as the intersection of per-barrier safe regions."""

    barriers: list = field(default_factory=list)
    label: str = ""

    def h_values(self, x) -> np.ndarray:
        """Stacked barrier values, shape (..., n_barriers)."""
        vals = [np.atleast_1d(b.value(x)) for b in self.barriers]
        return np.stack(vals, axis=-1)

    def check(self, x):
        """(is_safe, h_min); safe iff every barrier is nonnegative."""
        h = self.h_values(x)
        h_min = h.min(axis=-1)
        return h_min >= 0.0, h_min


def check_safe(spec: SafeSetSpec, x):
    x = np.asarray(x, dtype=np.float64)
    is_safe, h_min = spec.check(x)
    if x.ndim == 1:
        return bool(np.ravel(is_safe)[0]), float(np.ravel(h_min)[0])
    return is_safe, h_min
