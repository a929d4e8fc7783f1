"""Torque-limited pendulum with a planar wind force on the bob.

State x = (theta, omega) with theta measured from upright, increasing
toward +x; the bob sits at l*(sin theta, cos theta). The wind force
e = (w_x, w_y) produces the torque w_x l cos(theta) - w_y l sin(theta),
so the horizontal component dominates near upright and the vertical
component rescales effective gravity. Euler discretization:

    theta' = wrap(theta + dt * omega)
    omega' = omega + dt * (tau_drift + u) / (m l^2)
    tau_drift = (m G - w_y) l sin(theta) + w_x l cos(theta) - b * omega

The torque column of g is (0, dt / (m l^2)), independent of (x, e).

Two tasks share the physics. "balance": stay upright, safe set
|theta| < 45 deg. "hazard": an angular band (5 deg, 30 deg) clockwise of
upright is forbidden; episodes start just beyond the band at 35 deg, so
reaching upright requires the long swing through the bottom.
"""

from __future__ import annotations

import numpy as np

from ..barriers import AffineBarrier, AngularBandHazard, SafeSetSpec
from .base import ActionSpace, Env, wrap_angle

DEG = np.pi / 180.0

_INACTIVE = 1e9  # added to q to switch a tangent barrier off


class PendulumEnv(Env):
    n = 2
    m = 1
    k = 2
    angle_dims = (0,)

    def __init__(
        self,
        task: str = "balance",
        mass: float = 1.0,
        length: float = 1.0,
        gravity: float = 9.81,
        damping: float = 0.05,
        dt: float = 0.02,
        torque_max: float = 2.0,
        wind_magnitude: float | None = None,
        # filter barrier geometry (velocity-aware, |p|_inf = 1)
        sigma_gain: float = 0.3,
        sigma_bound: float = 0.03,
        hazard_lo: float = 5.0 * DEG,
        hazard_hi: float = 30.0 * DEG,
        hazard_pad: float = 0.005,
        upright_band: float = 5.0 * DEG,
        hold_steps: int = 50,
        eta: float | None = None,
    ):
        if task not in ("balance", "hazard"):
            raise ValueError(f"unknown pendulum task {task!r}")
        self.task = task
        self.env_id = "pendulum" if task == "balance" else "pendulum-hazard"
        self.mass = mass
        self.length = length
        self.gravity = gravity
        self.damping = damping
        self.dt = dt
        # wind comparable to the torque budget makes misreading its
        # direction catastrophic; the swing task needs headroom to hold
        # position near the band edge, hence the lighter default.
        if wind_magnitude is None:
            wind_magnitude = 1.6 if task == "balance" else 0.8
        if eta is None:
            eta = 0.1 if task == "balance" else 0.4
        self.wind_magnitude = wind_magnitude
        self.config_magnitude = wind_magnitude
        self.sigma_gain = sigma_gain
        self.sigma_bound = sigma_bound
        self.hazard_lo = hazard_lo
        self.hazard_hi = hazard_hi
        self.hazard_pad = hazard_pad
        self.upright_band = upright_band
        self.hold_steps = hold_steps
        self.eta = eta
        self.action_space = ActionSpace(np.array([-torque_max]), np.array([torque_max]))
        if task == "balance":
            limit = 45.0 * DEG
            self.safe_set = SafeSetSpec(
                barriers=[
                    AffineBarrier(np.array([-1.0, 0.0]), limit, eta, "theta_hi"),
                    AffineBarrier(np.array([1.0, 0.0]), limit, eta, "theta_lo"),
                ],
                label="|theta| < 45 deg",
            )
        else:
            self.safe_set = SafeSetSpec(
                barriers=[AngularBandHazard(hazard_lo, hazard_hi, 0, "band")],
                label="theta outside (5 deg, 30 deg)",
            )

    # --- dynamics -----------------------------------------------------

    def _inertia(self) -> float:
        return self.mass * self.length**2

    def true_f_g_batch(self, x, e):
        theta, omega = x[:, 0], x[:, 1]
        wx, wy = e[:, 0], e[:, 1]
        tau = (
            (self.mass * self.gravity - wy) * self.length * np.sin(theta)
            + wx * self.length * np.cos(theta)
            - self.damping * omega
        )
        f = np.stack(
            [wrap_angle(theta + self.dt * omega), omega + self.dt * tau / self._inertia()],
            axis=1,
        )
        g = np.zeros((x.shape[0], 2, 1))
        g[:, 1, 0] = self.dt / self._inertia()
        return f, g

    def reward_batch(self, x, a):
        return -0.1 * x[:, 0] ** 2 - 0.1 * x[:, 1] ** 2 - 1e-4 * a[:, 0] ** 2

    def mechanical_energy(self, x, e=None):
        """Kinetic plus potential energy relative to the upright rest state.

        Includes the wind potential when a configuration is given (the wind
        force is constant, hence conservative).
        """
        theta, omega = x[..., 0], x[..., 1]
        energy = 0.5 * self._inertia() * omega**2 + self.mass * self.gravity * self.length * (
            np.cos(theta) - 1.0
        )
        if e is not None:
            wx, wy = e[..., 0], e[..., 1]
            energy = energy - wx * self.length * np.sin(theta) - wy * self.length * (
                np.cos(theta) - 1.0
            )
        return energy

    # --- task ---------------------------------------------------------

    def reset_batch(self, rng, size):
        x = np.zeros((size, 2))
        if self.task == "balance":
            x[:, 0] = rng.uniform(-0.02, 0.02, size)
            x[:, 1] = rng.uniform(-0.05, 0.05, size)
        else:
            x[:, 0] = 35.0 * DEG + rng.uniform(-0.01, 0.01, size)
            x[:, 1] = rng.uniform(-0.02, 0.02, size)
        return x

    def explore_state_batch(self, rng, size):
        x = np.zeros((size, 2))
        if self.task == "balance":
            # the filtered system lives in a narrow tube about upright
            x[:, 0] = rng.uniform(-0.3, 0.3, size)
            x[:, 1] = rng.uniform(-1.5, 1.5, size)
        else:
            # anywhere on the circle outside the band, swing-rate speeds
            theta = rng.uniform(-np.pi, np.pi, size)
            bad = (theta > self.hazard_lo) & (theta < self.hazard_hi)
            theta[bad] = -theta[bad]
            x[:, 0] = theta
            x[:, 1] = rng.uniform(-7.0, 7.0, size)
        return x

    def episode_success(self, x_traj, violated):
        if violated:
            return False
        theta = np.abs(x_traj[1:, 0])
        inside = theta < self.upright_band
        if self.task == "balance":
            return bool(inside[-self.hold_steps :].all()) if inside.size >= self.hold_steps else False
        # hazard: the upright band held for hold_steps consecutive steps
        run = 0
        for ok in inside:
            run = run + 1 if ok else 0
            if run >= self.hold_steps:
                return True
        return False

    # --- filter barriers ----------------------------------------------

    def filter_barriers(self, x):
        size = x.shape[0]
        c = self.sigma_gain
        if self.task == "balance":
            p_hi = np.tile(np.array([-1.0, -c]), (size, 1))
            p_lo = np.tile(np.array([1.0, c]), (size, 1))
            q = np.full(size, self.sigma_bound)
            return [
                (p_hi, q, self.eta, "sigma_hi"),
                (p_lo, q.copy(), self.eta, "sigma_lo"),
            ]
        # hazard: guard the near edge of the band; which edge is "near"
        # depends on the side of the band the state is on.
        theta = x[:, 0]
        mid = 0.5 * (self.hazard_lo + self.hazard_hi)
        above = theta > mid
        # h_above = (theta - hi - pad) + c*omega, active above the band
        p_above = np.tile(np.array([1.0, c]), (size, 1))
        q_above = np.full(size, -(self.hazard_hi + self.hazard_pad))
        q_above[~above] += _INACTIVE
        # h_below = (lo - pad - theta) - c*omega, active below the band
        p_below = np.tile(np.array([-1.0, -c]), (size, 1))
        q_below = np.full(size, self.hazard_lo - self.hazard_pad)
        q_below[above] += _INACTIVE
        return [
            (p_above, q_above, self.eta, "band_above"),
            (p_below, q_below, self.eta, "band_below"),
        ]
