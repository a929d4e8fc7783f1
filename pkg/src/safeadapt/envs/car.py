"""Kinematic bicycle car with drive-train lag and a planar drag force.

State x = (px, py, yaw, speed); action a = (target_speed, steer). The
speed channel follows the target through a first-order lag; the steer
command maps to yaw rate through the kinematic gain v / wheelbase, so
the discrete map stays exactly affine in the action. The drag force
e (N) enters through its longitudinal projection.

The "real" variant (``real=True``) models the deployment gap: heavier
body, slower drive-train, rolling resistance, and speed-dependent
understeer from tire slip. It shares the interface so the same pipeline
can collect data from either system.
"""

from __future__ import annotations

import numpy as np

from ..barriers import CircleHazard, SafeSetSpec
from .base import ActionSpace, Env, wrap_angle


class BicycleCarEnv(Env):
    n = 4
    m = 2
    k = 2
    angle_dims = (2,)

    def __init__(
        self,
        real: bool = False,
        wheelbase: float = 0.3,
        dt: float = 0.05,
        speed_lag: float = 0.3,
        mass: float = 1.0,
        slip_gain: float = 0.0,
        rolling: float = 0.0,
        config_magnitude: float = 0.5,
        speed_range=(-0.5, 2.0),
        steer_max: float = 0.45,
        obstacle_center=(1.2, 0.0),
        obstacle_radius: float = 0.35,
        obstacle_pad: float = 0.05,
        brake_decel: float = 1.2,
        goal=(2.5, 0.0),
        goal_radius: float = 0.3,
        eta: float = 0.1,
    ):
        self.real = real
        self.env_id = "car-real" if real else "car"
        if real:
            # deployment-gap defaults; explicit arguments still win
            mass = mass * 1.4
            speed_lag = speed_lag * 1.5
            slip_gain = slip_gain if slip_gain else 0.4
            rolling = rolling if rolling else 0.15
        self.wheelbase = wheelbase
        self.dt = dt
        self.speed_lag = speed_lag
        self.mass = mass
        self.slip_gain = slip_gain
        self.rolling = rolling
        self.config_magnitude = config_magnitude
        self.obstacle_center = np.asarray(obstacle_center, dtype=np.float64)
        self.obstacle_radius = obstacle_radius
        self.obstacle_pad = obstacle_pad
        self.brake_decel = brake_decel
        self.goal = np.asarray(goal, dtype=np.float64)
        self.goal_radius = goal_radius
        self.eta = eta
        self.action_space = ActionSpace(
            np.array([speed_range[0], -steer_max]), np.array([speed_range[1], steer_max])
        )
        self.safe_set = SafeSetSpec(
            barriers=[CircleHazard(self.obstacle_center, obstacle_radius)],
            label=f"outside r={obstacle_radius} obstacle",
        )

    def true_f_g_batch(self, x, e):
        yaw, speed = x[:, 2], x[:, 3]
        heading = np.stack([np.cos(yaw), np.sin(yaw)], axis=1)
        drag_long = np.einsum("bi,bi->b", e, heading) / self.mass
        f = np.empty_like(x)
        f[:, 0] = x[:, 0] + self.dt * speed * heading[:, 0]
        f[:, 1] = x[:, 1] + self.dt * speed * heading[:, 1]
        f[:, 2] = wrap_angle(yaw)
        f[:, 3] = speed + self.dt * (-speed / self.speed_lag - self.rolling * speed + drag_long)
        g = np.zeros((x.shape[0], 4, 2))
        g[:, 3, 0] = self.dt / self.speed_lag
        g[:, 2, 1] = self.dt * speed / (self.wheelbase * (1.0 + self.slip_gain * speed**2))
        return f, g

    def reward_batch(self, x, a):
        dist = np.linalg.norm(x[:, :2] - self.goal, axis=1)
        return -dist + 10.0 * (dist < self.goal_radius)

    def reset_batch(self, rng, size):
        x = np.zeros((size, 4))
        x[:, 1] = rng.uniform(-0.05, 0.05, size)
        x[:, 2] = rng.uniform(-0.05, 0.05, size)
        return x

    def explore_state_batch(self, rng, size):
        x = np.zeros((size, 4))
        x[:, 0] = rng.uniform(-1.0, 3.0, size)
        x[:, 1] = rng.uniform(-1.5, 1.5, size)
        x[:, 2] = rng.uniform(-np.pi, np.pi, size)
        x[:, 3] = rng.uniform(-0.5, 2.2, size)
        return x

    def episode_success(self, x_traj, violated):
        if violated:
            return False
        dist = np.linalg.norm(x_traj[:, :2] - self.goal, axis=1)
        return bool((dist < self.goal_radius).any())

    def filter_barriers(self, x):
        d = x[:, :2] - self.obstacle_center
        dist = np.maximum(np.linalg.norm(d, axis=1), 1e-9)
        u_out = d / dist[:, None]
        yaw, speed = x[:, 2], x[:, 3]
        heading = np.stack([np.cos(yaw), np.sin(yaw)], axis=1)
        # velocity = speed * heading; approach speed and its state gradients
        approach = -speed * np.einsum("bi,bi->b", u_out, heading)
        s_plus = np.maximum(approach, 0.0)
        coef = s_plus / self.brake_decel
        vel = speed[:, None] * heading
        g_pos = u_out + (coef / dist)[:, None] * (vel + approach[:, None] * u_out)
        dhead_dyaw = np.stack([-heading[:, 1], heading[:, 0]], axis=1)
        ds_dyaw = -speed * np.einsum("bi,bi->b", u_out, dhead_dyaw)
        ds_dv = -np.einsum("bi,bi->b", u_out, heading)
        p = np.zeros_like(x)
        p[:, :2] = g_pos
        p[:, 2] = -coef * ds_dyaw
        p[:, 3] = -coef * ds_dv
        r_eff = self.obstacle_radius + self.obstacle_pad
        h = dist - r_eff - s_plus**2 / (2.0 * self.brake_decel)
        q = h - np.einsum("bn,bn->b", p, x)
        scale = np.maximum(np.max(np.abs(p), axis=1), 1e-9)
        return [(p / scale[:, None], q / scale, self.eta, "obstacle")]
