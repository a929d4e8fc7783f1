"""Shared environment plumbing.

Environments are exact discrete-time control-affine maps
``x' = f(x, e) + g(x, e) a`` (Euler integration keeps the control-affine
structure exact), with a configuration vector ``e`` standing for hidden
physical conditions such as wind or drag. All dynamics methods are
vectorized over a leading batch axis; scalar wrappers operate on a batch
of one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..barriers import SafeSetSpec

TWO_PI = 2.0 * np.pi


def wrap_angle(theta):
    """Wrap to (-pi, pi]."""
    return np.pi - np.mod(np.pi - theta, TWO_PI)


@dataclass(frozen=True)
class ActionSpace:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("lo/hi must be matching vectors")
        if not np.all(lo < hi):
            raise ValueError("need lo < hi componentwise")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.size

    def clip(self, a):
        return np.clip(a, self.lo, self.hi)

    def sample(self, rng: np.random.Generator, size: int | None = None):
        shape = (self.dim,) if size is None else (size, self.dim)
        return rng.uniform(self.lo, self.hi, size=shape)

    def max_l1(self) -> float:
        """max over the box of the action 1-norm."""
        return float(np.sum(np.maximum(np.abs(self.lo), np.abs(self.hi))))


@dataclass(frozen=True)
class ConfigMode:
    """How the environment configuration e is drawn.

    kind: 'per_step' (resampled every step), 'per_episode' (fixed per
    episode), 'fixed' (constant direction ``angle``), 'schedule'
    (direction drifts at ``rate`` rad/s), or 'zero'.
    """

    kind: str = "per_step"
    angle: float = 0.0
    magnitude: float | None = None
    rate: float = 0.0

    def __post_init__(self):
        if self.kind not in ("per_step", "per_episode", "fixed", "schedule", "zero"):
            raise ValueError(f"unknown config mode {self.kind!r}")


class Env:
    """Base class; subclasses define the physics and the task."""

    env_id: str = ""
    n: int = 0
    m: int = 0
    k: int = 0
    dt: float = 0.0
    angle_dims: tuple = ()

    action_space: ActionSpace
    safe_set: SafeSetSpec
    config_magnitude: float = 1.0

    # --- dynamics -----------------------------------------------------

    def true_f_g_batch(self, x: np.ndarray, e: np.ndarray):
        raise NotImplementedError

    def step_batch(self, x: np.ndarray, a: np.ndarray, e: np.ndarray) -> np.ndarray:
        f, g = self.true_f_g_batch(x, e)
        return f + np.einsum("bnm,bm->bn", g, a)

    def step(self, x, a, e) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)[None]
        a = np.asarray(a, dtype=np.float64)[None]
        e = np.asarray(e, dtype=np.float64)[None]
        return self.step_batch(x, a, e)[0]

    def true_f_g(self, x, e):
        f, g = self.true_f_g_batch(
            np.asarray(x, dtype=np.float64)[None], np.asarray(e, dtype=np.float64)[None]
        )
        return f[0], g[0]

    # --- task ---------------------------------------------------------

    def reward_batch(self, x: np.ndarray, a: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def reward(self, x, a) -> float:
        return float(
            self.reward_batch(
                np.asarray(x, dtype=np.float64)[None], np.asarray(a, dtype=np.float64)[None]
            )[0]
        )

    def reset_batch(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Task initial states."""
        raise NotImplementedError

    def explore_state_batch(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Broad-coverage restart states for data collection."""
        return self.reset_batch(rng, size)

    def episode_success(self, x_traj: np.ndarray, violated: bool) -> bool:
        """Task success from a (T+1, n) state trajectory."""
        raise NotImplementedError

    def filter_barriers(self, x: np.ndarray):
        """Affine barriers handed to the action filter at states x (B, n).

        Returns a list of (p, q, eta, name) with p (B, n) and q (B,);
        rows may be deactivated by a large q. p is normalized to unit
        max-norm so one margin scalar applies to every barrier.
        """
        raise NotImplementedError

    # --- configuration ------------------------------------------------

    def config_from_angles(self, angles, magnitude: float | None = None) -> np.ndarray:
        w = self.config_magnitude if magnitude is None else magnitude
        angles = np.asarray(angles, dtype=np.float64)
        return np.stack([w * np.cos(angles), w * np.sin(angles)], axis=-1)

    def sample_config_batch(
        self, mode: ConfigMode, rng: np.random.Generator, size: int, t: int = 0
    ) -> np.ndarray:
        if mode.kind == "zero":
            return np.zeros((size, self.k))
        if mode.kind == "fixed":
            angles = np.full(size, mode.angle)
        elif mode.kind == "schedule":
            angles = np.full(size, mode.angle + mode.rate * t * self.dt)
        else:  # per_step / per_episode draw uniformly on the circle
            angles = rng.uniform(0.0, TWO_PI, size=size)
        return self.config_from_angles(angles, mode.magnitude)

    def sample_config(self, mode: ConfigMode, rng: np.random.Generator, t: int = 0):
        return self.sample_config_batch(mode, rng, 1, t)[0]

    # --- misc ---------------------------------------------------------

    def wrap_state(self, x: np.ndarray) -> np.ndarray:
        for i in self.angle_dims:
            x[..., i] = wrap_angle(x[..., i])
        return x

    def state_delta(self, x_next: np.ndarray, x: np.ndarray) -> np.ndarray:
        """x_next - x with angle coordinates compared on the circle."""
        d = x_next - x
        for i in self.angle_dims:
            d[..., i] = wrap_angle(d[..., i])
        return d
