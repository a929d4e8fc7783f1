"""Metric computation and plot-ready emitters (CSV only)."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..adapt import WindowBuffer
from ..envs.base import Env


def write_csv(path, header, rows) -> None:
    """CSV with full-precision floats so reruns are byte-identical."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(
                [f"{v:.17g}" if isinstance(v, float) else v for v in row]
            )


@dataclass
class MetricsRow:
    method: str
    direction_deg: float
    episodes: int
    success_rate: float
    safety_rate: float
    mean_return: float
    violations: int
    filter_active_rate: float
    mean_h_min: float

    HEADER = (
        "method",
        "direction_deg",
        "episodes",
        "success_rate",
        "safety_rate",
        "mean_return",
        "violations",
        "filter_active_rate",
        "mean_h_min",
    )

    def as_row(self):
        return (
            self.method,
            self.direction_deg,
            self.episodes,
            self.success_rate,
            self.safety_rate,
            self.mean_return,
            self.violations,
            self.filter_active_rate,
            self.mean_h_min,
        )


def metrics_from_logs(method: str, direction_deg: float, logs) -> MetricsRow:
    """Rates are fractions of episodes, computed from terminal statuses only."""
    episodes = len(logs)
    violations = sum(lg.violation for lg in logs)
    successes = sum(lg.success for lg in logs)
    returns = [lg.undiscounted_return() for lg in logs]
    h_mins = np.concatenate([lg.h_min for lg in logs]) if logs else np.array([np.nan])
    active = (
        np.concatenate([(lg.filter_status > 0).astype(float) for lg in logs])
        if logs
        else np.array([np.nan])
    )
    return MetricsRow(
        method=method,
        direction_deg=float(direction_deg),
        episodes=episodes,
        success_rate=successes / episodes if episodes else 0.0,
        safety_rate=1.0 - violations / episodes if episodes else 0.0,
        mean_return=float(np.mean(returns)) if returns else 0.0,
        violations=violations,
        filter_active_rate=float(np.mean(active)),
        mean_h_min=float(np.mean(h_mins)),
    )


# ---------------------------------------------------------------------------
# Barrier-difference heat maps
# ---------------------------------------------------------------------------


def action_grid(env: Env, grid_n: int):
    lo, hi = env.action_space.lo, env.action_space.hi
    ax0 = np.linspace(lo[0], hi[0], grid_n)
    ax1 = np.linspace(lo[1], hi[1], grid_n)
    g0, g1 = np.meshgrid(ax0, ax1, indexing="ij")
    return ax0, ax1, np.stack([g0.ravel(), g1.ravel()], axis=1)


def heatmap_warmup(env: Env, probe_state, direction_rad: float, k: int,
                   rng: np.random.Generator, action_scale: float = 0.4):
    """Shared excitation history: k dithered steps from the probe state.

    Every method sees the same window and evaluation state, all generated
    by the true system under the true disturbance direction.
    """
    e = env.config_from_angles(np.array([direction_rad]))
    buf = WindowBuffer(1, env.n, env.m, k)
    x = np.asarray(probe_state, dtype=np.float64)[None].copy()
    mid = 0.5 * (env.action_space.lo + env.action_space.hi)
    half = 0.5 * (env.action_space.hi - env.action_space.lo)
    for _ in range(k):
        a = mid + action_scale * half * rng.uniform(-1.0, 1.0, size=(1, env.m))
        buf.push(x, a)
        x = env.step_batch(x, a, e)
    return buf, x, e


def delta_h_grid(env: Env, x_eval, actions, f_hat, g_hat) -> np.ndarray:
    """Barrier-value change h(x_next_hat(a)) - h(x) over an action grid.

    Uses the braking-aware hazard barrier; the velocity part is quadratic,
    so wrong beliefs about the disturbance shift the pattern rather than
    only its mean.
    """
    h_now = float(env.brake_h(x_eval[0]))
    x_next = f_hat[0][None, :] + actions @ g_hat[0].T
    return env.brake_h(x_next) - h_now


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a.ravel() - a.mean()
    b = b.ravel() - b.mean()
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    if denom < 1e-300:
        return 0.0
    return float(a @ b / denom)


def save_heatmap_csv(path, ax0, ax1, matrix: np.ndarray) -> None:
    rows = []
    for i, a0 in enumerate(ax0):
        for j, a1 in enumerate(ax1):
            rows.append((float(a0), float(a1), float(matrix[i * len(ax1) + j])))
    write_csv(path, ("action_0", "action_1", "delta_h"), rows)


# ---------------------------------------------------------------------------
# Open-loop prediction replay
# ---------------------------------------------------------------------------


def open_loop_predict(model, module, x_traj, a_traj, warm_steps: int = 10) -> np.ndarray:
    """Replay logged actions from a short warm-up of true states.

    The history window is seeded with the first ``warm_steps`` true
    (state, action) pairs, then rolls forward on its own predictions
    while executing the logged actions.
    """
    k = module.window
    buf = WindowBuffer(1, model.n, model.m, k)
    for t in range(warm_steps):
        buf.push(x_traj[t][None], a_traj[t][None])
    x = x_traj[warm_steps][None].copy()
    preds = [x_traj[warm_steps].copy()]
    for t in range(warm_steps, a_traj.shape[0]):
        z = module.infer_window(buf)
        x_next = model.predict_next(x, z, a_traj[t][None])
        buf.push(x, a_traj[t][None])
        x = x_next
        preds.append(x[0].copy())
    return np.asarray(preds)
