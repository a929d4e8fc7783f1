"""Environment registry."""

from __future__ import annotations

from .base import ActionSpace, ConfigMode, Env, wrap_angle
from .car import BicycleCarEnv
from .pendulum import PendulumEnv
from .planar import PlanarRobotEnv

__all__ = [
    "ActionSpace",
    "ConfigMode",
    "Env",
    "make_env",
    "wrap_angle",
    "PendulumEnv",
    "PlanarRobotEnv",
    "BicycleCarEnv",
]

_FACTORIES = {
    "pendulum": lambda **kw: PendulumEnv(task="balance", **kw),
    "pendulum-hazard": lambda **kw: PendulumEnv(task="hazard", **kw),
    "planar": PlanarRobotEnv,
    "car": lambda **kw: BicycleCarEnv(real=False, **kw),
    "car-real": lambda **kw: BicycleCarEnv(real=True, **kw),
}


def make_env(env_id: str, **overrides) -> Env:
    try:
        factory = _FACTORIES[env_id]
    except KeyError:
        raise KeyError(
            f"unknown env id {env_id!r}; known: {sorted(_FACTORIES)}"
        ) from None
    return factory(**overrides)
