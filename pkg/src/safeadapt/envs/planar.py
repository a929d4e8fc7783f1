"""Planar point robot: a force-controlled double integrator with a
constant external force as the environment configuration.

State x = (px, py, vx, vy); action a is a force in a box. The task is to
reach a goal while keeping out of a circular hazard. The hazard barrier
used by the action filter (and by the heatmap emitter) is braking-aware:

    h(x) = dist(pos, hazard) - r_eff - relu(approach_speed)^2 / (2 a_brk)

i.e. the clearance must exceed the distance needed to stop at decel
``a_brk``. The filter consumes its affine tangent model, recomputed at
the current state every step.
"""

from __future__ import annotations

import numpy as np

from ..barriers import CircleHazard, SafeSetSpec
from .base import ActionSpace, Env


class PlanarRobotEnv(Env):
    n = 4
    m = 2
    k = 2
    angle_dims = ()

    def __init__(
        self,
        mass: float = 1.0,
        damping: float = 0.08,
        dt: float = 0.05,
        force_max: float = 1.0,
        config_magnitude: float = 0.8,
        hazard_center=(0.0, 0.0),
        hazard_radius: float = 0.4,
        hazard_pad: float = 0.06,
        brake_decel: float = 0.35,
        goal=(1.4, 0.0),
        start=(-1.4, 0.0),
        goal_radius: float = 0.3,
        eta: float = 0.1,
    ):
        self.env_id = "planar"
        self.mass = mass
        self.damping = damping
        self.dt = dt
        self.config_magnitude = config_magnitude
        self.hazard_center = np.asarray(hazard_center, dtype=np.float64)
        self.hazard_radius = hazard_radius
        self.hazard_pad = hazard_pad
        self.brake_decel = brake_decel
        self.goal = np.asarray(goal, dtype=np.float64)
        self.start = np.asarray(start, dtype=np.float64)
        self.goal_radius = goal_radius
        self.eta = eta
        self.action_space = ActionSpace(
            np.array([-force_max, -force_max]), np.array([force_max, force_max])
        )
        self.safe_set = SafeSetSpec(
            barriers=[CircleHazard(self.hazard_center, hazard_radius)],
            label=f"outside r={hazard_radius} hazard",
        )

    def true_f_g_batch(self, x, e):
        f = np.empty_like(x)
        f[:, :2] = x[:, :2] + self.dt * x[:, 2:]
        f[:, 2:] = x[:, 2:] + self.dt * (-self.damping * x[:, 2:] + e) / self.mass
        g = np.zeros((x.shape[0], 4, 2))
        g[:, 2, 0] = self.dt / self.mass
        g[:, 3, 1] = self.dt / self.mass
        return f, g

    def reward_batch(self, x, a):
        dist = np.linalg.norm(x[:, :2] - self.goal, axis=1)
        return -dist + 10.0 * (dist < self.goal_radius)

    def reset_batch(self, rng, size):
        x = np.zeros((size, 4))
        x[:, 0] = self.start[0]
        x[:, 1] = self.start[1] + rng.uniform(-0.15, 0.15, size)
        return x

    def explore_state_batch(self, rng, size):
        x = np.zeros((size, 4))
        pos = rng.uniform(-1.8, 1.8, size=(size, 2))
        bad = np.linalg.norm(pos - self.hazard_center, axis=1) < self.hazard_radius + 0.05
        pos[bad] *= 1.8 / np.maximum(np.linalg.norm(pos[bad], axis=1, keepdims=True), 1e-6)
        x[:, :2] = pos
        x[:, 2:] = rng.uniform(-1.0, 1.0, size=(size, 2))
        return x

    def episode_success(self, x_traj, violated):
        if violated:
            return False
        dist = np.linalg.norm(x_traj[:, :2] - self.goal, axis=1)
        return bool((dist < self.goal_radius).any())

    # --- braking barrier ------------------------------------------------

    def brake_h(self, x):
        """Nonlinear braking barrier value at states x (..., 4)."""
        x = np.asarray(x, dtype=np.float64)
        d = x[..., :2] - self.hazard_center
        dist = np.linalg.norm(d, axis=-1)
        u_out = d / np.maximum(dist, 1e-9)[..., None]
        approach = -np.einsum("...i,...i->...", u_out, x[..., 2:])
        s_plus = np.maximum(approach, 0.0)
        r_eff = self.hazard_radius + self.hazard_pad
        return dist - r_eff - s_plus**2 / (2.0 * self.brake_decel)

    def filter_barriers(self, x):
        d = x[:, :2] - self.hazard_center
        dist = np.maximum(np.linalg.norm(d, axis=1), 1e-9)
        u_out = d / dist[:, None]
        vel = x[:, 2:]
        approach = -np.einsum("bi,bi->b", u_out, vel)
        s_plus = np.maximum(approach, 0.0)
        # grad wrt pos: u + (s+/a)(v + s u)/dist; wrt vel: (s+/a) u
        coef = (s_plus / self.brake_decel)[:, None]
        g_pos = u_out + coef * (vel + approach[:, None] * u_out) / dist[:, None]
        g_vel = coef * u_out
        p = np.concatenate([g_pos, g_vel], axis=1)
        h = self.brake_h(x)
        q = h - np.einsum("bn,bn->b", p, x)
        scale = np.maximum(np.max(np.abs(p), axis=1), 1e-9)
        return [(p / scale[:, None], q / scale, self.eta, "brake")]
