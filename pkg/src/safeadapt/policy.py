"""Control policies, rollouts, and a small policy-gradient trainer.

Policies expose ``act_batch(x, z, rng) -> a`` with actions clipped to the
action box. Latent-conditioned analytic controllers recover a physical
disturbance estimate from the latent through a linear read-out
(:class:`~safeadapt.dynlearn.LatentDecoder`) and compensate it by
feedforward. The neural path keeps the same structure and is trained
with REINFORCE plus a per-timestep batch baseline; the environment
encoder is frozen throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import networks as nets
from .adapt import AdaptModule, WindowBuffer
from .dynlearn import DynModel, LatentDecoder
from .envs.base import ConfigMode, Env
from .optim import OptimizerState, adam_step
from .serialize import read_arrays, write_arrays


# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------


class RandomPolicy:
    kind = "random"
    conditions_on_latent = False

    def __init__(self, action_space):
        self.action_space = action_space

    def act_batch(self, x, z, rng: np.random.Generator):
        return self.action_space.sample(rng, x.shape[0])


class AnalyticPendulumPolicy:
    """PD balance about upright with gravity/wind feedforward; for the
    hazard task, an energy-shaping swing through the bottom followed by a
    catch on the hazard-free side.

    The wind estimate comes from decoding the latent; with no latent (or
    no decoder) the controller runs uncompensated.
    """

    kind = "analytic_pendulum"
    conditions_on_latent = True

    def __init__(
        self,
        env,
        decoder: LatentDecoder | None = None,
        kp: float = 16.0,
        kd: float = 5.0,
        energy_gain: float = 1.4,
        catch_angle: float = -0.06,
    ):
        self.env = env
        self.decoder = decoder
        self.kp = kp
        self.kd = kd
        self.energy_gain = energy_gain
        self.catch_angle = catch_angle

    def _wind(self, x, z):
        if self.decoder is None or z is None:
            return np.zeros((x.shape[0], 2))
        return self.decoder(z)

    def _drift_torque(self, theta, w):
        env = self.env
        return (
            (env.mass * env.gravity - w[:, 1]) * env.length * np.sin(theta)
            + w[:, 0] * env.length * np.cos(theta)
        )

    def act_batch(self, x, z, rng=None):
        env = self.env
        theta, omega = x[:, 0], x[:, 1]
        w = self._wind(x, z)
        ff = -self._drift_torque(theta, w) + env.damping * omega
        pd = -self.kp * theta - self.kd * omega + ff
        if env.task == "balance":
            u = pd
        else:
            # swing up the long way: pump energy moving away from the band,
            # catch when arriving near upright from the hazard-free side
            energy = env.mechanical_energy(x, w)
            theta_c = self.catch_angle
            e_target = env.mass * env.gravity * env.length * (np.cos(theta_c) - 1.0) - w[
                :, 0
            ] * env.length * np.sin(theta_c) - w[:, 1] * env.length * (np.cos(theta_c) - 1.0)
            direction = np.where(np.abs(omega) > 0.05, np.sign(omega), 1.0)
            pump = self.energy_gain * (e_target - energy) * direction
            mid = 0.5 * (env.hazard_lo + env.hazard_hi)
            catch = (theta > -0.5) & (theta < env.hazard_lo - 0.03) & (np.abs(omega) < 1.5)
            retreat_below = (theta >= env.hazard_lo - 0.03) & (theta < mid)
            guard_above = (theta > env.hazard_hi) & (theta < env.hazard_hi + 0.25) & (omega < 0.2)
            u = pump
            u = np.where(guard_above, env.action_space.hi[0], u)
            u = np.where(catch, pd, u)
            u = np.where(retreat_below, env.action_space.lo[0], u)
        return env.action_space.clip(u[:, None])


class AnalyticNavPolicy:
    """PD goal seeking with disturbance-force feedforward (planar robot)."""

    kind = "analytic_nav"
    conditions_on_latent = True

    def __init__(self, env, decoder: LatentDecoder | None = None, kp: float = 1.2, kd: float = 1.8):
        self.env = env
        self.decoder = decoder
        self.kp = kp
        self.kd = kd

    def act_batch(self, x, z, rng=None):
        force = np.zeros((x.shape[0], 2)) if (self.decoder is None or z is None) else self.decoder(z)
        a = self.kp * (self.env.goal - x[:, :2]) - self.kd * x[:, 2:] - force
        return self.env.action_space.clip(a)


class AnalyticCarPolicy:
    """Speed toward the goal plus bearing-tracking steer."""

    kind = "analytic_car"
    conditions_on_latent = False

    def __init__(self, env, speed_gain: float = 0.8, steer_gain: float = 2.0):
        self.env = env
        self.speed_gain = speed_gain
        self.steer_gain = steer_gain

    def act_batch(self, x, z, rng=None):
        to_goal = self.env.goal - x[:, :2]
        dist = np.linalg.norm(to_goal, axis=1)
        bearing = np.arctan2(to_goal[:, 1], to_goal[:, 0])
        err = np.pi - np.mod(np.pi - (bearing - x[:, 2]), 2.0 * np.pi)
        a = np.stack([self.speed_gain * dist, self.steer_gain * err], axis=1)
        return self.env.action_space.clip(a)


class ScriptedCirclePolicy:
    """Hard-coded circle commands (constant per trajectory) for data runs."""

    kind = "scripted_circles"
    conditions_on_latent = False

    def __init__(self, action_space, target_speed: float, steer: float, dither: float = 0.05):
        self.action_space = action_space
        self.command = np.array([target_speed, steer])
        self.dither = dither

    def act_batch(self, x, z, rng: np.random.Generator):
        a = np.tile(self.command, (x.shape[0], 1))
        if self.dither > 0.0 and rng is not None:
            a = a + self.dither * rng.uniform(-1.0, 1.0, size=a.shape)
        return self.action_space.clip(a)


@dataclass
class NeuralPolicy:
    """Gaussian policy: mean from an MLP on (x[, z]), global log-std."""

    params: nets.NetworkParams
    action_space: object
    conditions_on_latent: bool = True
    x_mean: np.ndarray = None
    x_std: np.ndarray = None
    log_sigma: float = np.log(0.5)
    deterministic: bool = False

    kind = "neural"

    def __post_init__(self):
        if self.x_mean is None:
            dim = self.params.spec.input_dim
            self.x_mean = np.zeros(dim)
            self.x_std = np.ones(dim)

    def _input(self, x, z):
        if self.conditions_on_latent:
            if z is None:
                raise ValueError("latent-conditioned policy called without a latent")
            inp = np.concatenate([x, np.atleast_2d(z)], axis=1)
        else:
            inp = x
        return (inp - self.x_mean) / self.x_std

    def mean_batch(self, x, z):
        return nets.forward_mlp(self.params, self._input(x, z))

    def act_batch(self, x, z, rng: np.random.Generator = None):
        mu = self.mean_batch(x, z)
        if not self.deterministic and rng is not None:
            mu = mu + np.exp(self.log_sigma) * rng.normal(size=mu.shape)
        return self.action_space.clip(mu)

    def save(self, path, meta=None):
        meta = dict(meta or {})
        meta.update({"conditions_on_latent": self.conditions_on_latent,
                     "log_sigma": float(self.log_sigma)})
        write_arrays(path, "policy", {**meta, "spec": {
            "input_dim": self.params.spec.input_dim,
            "hidden_dims": list(self.params.spec.hidden_dims),
            "output_dim": self.params.spec.output_dim,
            "activation": self.params.spec.activation}},
            {"theta": self.params.theta, "x_mean": self.x_mean, "x_std": self.x_std,
             "lo": self.action_space.lo, "hi": self.action_space.hi})

    @classmethod
    def load(cls, path):
        from .envs.base import ActionSpace

        meta, arrays = read_arrays(path, "policy")
        s = meta["spec"]
        spec = nets.MlpSpec(s["input_dim"], tuple(s["hidden_dims"]), s["output_dim"], s["activation"])
        return cls(
            nets.NetworkParams(spec, arrays["theta"]),
            ActionSpace(arrays["lo"], arrays["hi"]),
            conditions_on_latent=meta["conditions_on_latent"],
            x_mean=arrays["x_mean"],
            x_std=arrays["x_std"],
            log_sigma=meta["log_sigma"],
        )


def act(policy, x, z=None, rng: np.random.Generator | None = None) -> np.ndarray:
    """Single-state wrapper; output is clipped to the action box."""
    x = np.asarray(x, dtype=np.float64)[None]
    zb = None if z is None else np.asarray(z, dtype=np.float64)[None]
    return policy.act_batch(x, zb, rng)[0]


# ---------------------------------------------------------------------------
# Rollouts
# ---------------------------------------------------------------------------


@dataclass
class EpisodeLog:
    env_id: str
    x: np.ndarray  # (T+1, n) states, truncated at violation
    e: np.ndarray  # (T, k)
    a_raw: np.ndarray
    a_safe: np.ndarray
    reward: np.ndarray
    h_min: np.ndarray  # safe-set margin at each post-step state
    filter_status: np.ndarray  # 0 inactive, 1 projected, 2 fallback
    filter_h: np.ndarray | None = None  # (T, nb) filter-barrier values at x_t
    filter_h_next: np.ndarray | None = None  # same barriers at x_{t+1}
    violation: bool = False
    violation_step: int = -1
    terminal: str = "timeout"
    success: bool = False

    def steps(self) -> int:
        return self.a_raw.shape[0]

    def undiscounted_return(self) -> float:
        return float(self.reward.sum())


def save_episodes(path, logs: list) -> None:
    meta = {
        "count": len(logs),
        "env_id": logs[0].env_id if logs else "",
        "episodes": [
            {
                "violation": bool(lg.violation),
                "violation_step": int(lg.violation_step),
                "terminal": lg.terminal,
                "success": bool(lg.success),
                "has_filter": lg.filter_h is not None,
            }
            for lg in logs
        ],
    }
    arrays = {}
    for i, lg in enumerate(logs):
        arrays[f"x{i}"] = lg.x
        arrays[f"e{i}"] = lg.e
        arrays[f"araw{i}"] = lg.a_raw
        arrays[f"asafe{i}"] = lg.a_safe
        arrays[f"r{i}"] = lg.reward
        arrays[f"hmin{i}"] = lg.h_min
        arrays[f"fs{i}"] = lg.filter_status.astype(np.float64)
        if lg.filter_h is not None:
            arrays[f"fh{i}"] = lg.filter_h
            arrays[f"fhn{i}"] = lg.filter_h_next
    write_arrays(path, "episodes", meta, arrays)


def load_episodes(path) -> list:
    meta, arrays = read_arrays(path, "episodes")
    logs = []
    for i, ep in enumerate(meta["episodes"]):
        logs.append(
            EpisodeLog(
                env_id=meta["env_id"],
                x=arrays[f"x{i}"],
                e=arrays[f"e{i}"],
                a_raw=arrays[f"araw{i}"],
                a_safe=arrays[f"asafe{i}"],
                reward=arrays[f"r{i}"],
                h_min=arrays[f"hmin{i}"],
                filter_status=arrays[f"fs{i}"].astype(int),
                filter_h=arrays.get(f"fh{i}"),
                filter_h_next=arrays.get(f"fhn{i}"),
                violation=ep["violation"],
                violation_step=ep["violation_step"],
                terminal=ep["terminal"],
                success=ep["success"],
            )
        )
    return logs


def rollout(
    env: Env,
    policy,
    num_episodes: int,
    steps: int,
    rng: np.random.Generator,
    config_mode: ConfigMode = ConfigMode("per_episode"),
    latent_source: str = "zero",
    model: DynModel | None = None,
    module: AdaptModule | None = None,
    safety_filter=None,
    noise_scale: float = 0.0,
    history_k: int = 20,
    terminate_on_violation: bool = True,
) -> list[EpisodeLog]:
    """Run episodes in a vectorized batch and return per-episode logs.

    ``latent_source`` feeds the policy: 'oracle_encoder' uses the true
    configuration through the frozen encoder, 'adaptation_module' the
    history window, 'zero' a zero latent. The safety filter (optional)
    maintains its own latent estimate and overwrites the executed action.
    The history window records executed actions.
    """
    if num_episodes <= 0:
        return []
    if latent_source in ("oracle_encoder", "adaptation_module") and model is None:
        raise ValueError(f"latent_source={latent_source!r} requires a model")
    if latent_source == "adaptation_module" and module is None:
        raise ValueError("latent_source='adaptation_module' requires a module")
    b = num_episodes
    k = module.window if module is not None else history_k
    latent_dim = model.latent_dim if model is not None else 1
    buf = WindowBuffer(b, env.n, env.m, k)
    state = env.reset_batch(rng, b)
    e = env.sample_config_batch(config_mode, rng, b, t=0)

    xs = np.zeros((b, steps + 1, env.n))
    es = np.zeros((b, steps, env.k))
    raw = np.zeros((b, steps, env.m))
    safe_a = np.zeros((b, steps, env.m))
    rew = np.zeros((b, steps))
    hmin = np.zeros((b, steps))
    fstat = np.zeros((b, steps), dtype=int)
    nb = 0
    fh = fhn = None
    xs[:, 0] = state
    alive = np.ones(b, dtype=bool)
    length = np.zeros(b, dtype=int)
    viol_step = np.full(b, -1, dtype=int)

    for t in range(steps):
        if not alive.any():
            break
        if config_mode.kind in ("per_step", "schedule"):
            e = env.sample_config_batch(config_mode, rng, b, t=t)
        if latent_source == "oracle_encoder":
            z_pol = model.encode(e)
        elif latent_source == "adaptation_module":
            z_pol = module.infer_window(buf)
        else:
            z_pol = np.zeros((b, latent_dim))
        a_raw_t = policy.act_batch(state, z_pol, rng)
        if noise_scale > 0.0:
            a_raw_t = a_raw_t + noise_scale * rng.normal(size=a_raw_t.shape)
        a_raw_t = env.action_space.clip(a_raw_t)
        if safety_filter is not None:
            a_exec, status_t, info = safety_filter.filter_batch(state, buf, a_raw_t, e_true=e)
            if fh is None:
                nb = info["h_now"].shape[1]
                fh = np.zeros((b, steps, nb))
                fhn = np.zeros((b, steps, nb))
            fh[:, t] = info["h_now"]
            fstat[:, t] = status_t
        else:
            a_exec = a_raw_t
        buf.push(state, a_exec)
        nxt = env.step_batch(state, a_exec, e)
        if safety_filter is not None:
            for j, (p, q, _, _) in enumerate(info["barriers"]):
                fhn[:, t, j] = np.einsum("bn,bn->b", p, nxt) + q
        safe, h = env.safe_set.check(nxt)
        rew_t = env.reward_batch(state, a_exec)
        upd = alive
        xs[upd, t + 1] = nxt[upd]
        es[upd, t] = e[upd]
        raw[upd, t] = a_raw_t[upd]
        safe_a[upd, t] = a_exec[upd]
        rew[upd, t] = rew_t[upd]
        hmin[upd, t] = h[upd]
        length[upd] = t + 1
        new_viol = upd & ~safe
        viol_step[new_viol & (viol_step < 0)] = t
        if terminate_on_violation:
            alive = alive & safe
        state = np.where(alive[:, None], nxt, state)

    logs = []
    for i in range(b):
        t_i = int(length[i])
        violated = viol_step[i] >= 0
        traj = xs[i, : t_i + 1]
        success = env.episode_success(traj, violated)
        terminal = "violation" if violated else ("success" if success else "timeout")
        logs.append(
            EpisodeLog(
                env_id=env.env_id,
                x=traj.copy(),
                e=es[i, :t_i].copy(),
                a_raw=raw[i, :t_i].copy(),
                a_safe=safe_a[i, :t_i].copy(),
                reward=rew[i, :t_i].copy(),
                h_min=hmin[i, :t_i].copy(),
                filter_status=fstat[i, :t_i].copy(),
                filter_h=fh[i, :t_i].copy() if fh is not None else None,
                filter_h_next=fhn[i, :t_i].copy() if fhn is not None else None,
                violation=bool(violated),
                violation_step=int(viol_step[i]),
                terminal=terminal,
                success=bool(success),
            )
        )
    return logs


# ---------------------------------------------------------------------------
# REINFORCE with a per-timestep batch baseline
# ---------------------------------------------------------------------------


@dataclass
class RlHyper:
    discount: float = 0.98
    steps_per_update: int = 4000
    total_steps: int = 200_000
    horizon: int = 200
    learning_rate: float = 3e-4
    entropy_weight: float = 1e-3
    safety_penalty: float = 0.0  # beta: extra penalty per violation step
    sigma_start: float = 0.5
    sigma_end: float = 0.05

    def __post_init__(self):
        if not 0.0 < self.discount < 1.0:
            raise ValueError("discount must lie in (0, 1)")


def make_neural_policy(env: Env, rng, latent_dim: int = 4, hidden=(64, 64),
                       conditions_on_latent: bool = True) -> NeuralPolicy:
    dim = env.n + (latent_dim if conditions_on_latent else 0)
    spec = nets.MlpSpec(dim, tuple(hidden), env.m, "tanh")
    return NeuralPolicy(nets.init_params(spec, rng), env.action_space,
                        conditions_on_latent=conditions_on_latent)


@dataclass
class PgReport:
    mean_returns: list = field(default_factory=list)
    violation_rates: list = field(default_factory=list)
    steps_trained: int = 0


def train_pg(
    env: Env,
    policy: NeuralPolicy,
    model: DynModel | None,
    hyper: RlHyper,
    rng: np.random.Generator,
    config_mode: ConfigMode = ConfigMode("per_episode"),
) -> tuple[NeuralPolicy, PgReport]:
    """Vanilla policy gradient on episode batches; the encoder is frozen.

    The Gaussian mean comes from the policy MLP; the global log-std is
    trained from the score function plus an entropy bonus and annealed
    downward from sigma_start toward sigma_end as a floor.
    """
    if policy.kind != "neural":
        raise ValueError("train_pg requires a neural policy")
    encoder_before = model.encoder.theta.copy() if model is not None else None
    report = PgReport()
    opt = OptimizerState.for_params(policy.params, learning_rate=hyper.learning_rate)
    episodes = max(1, hyper.steps_per_update // hyper.horizon)
    n_updates = max(1, hyper.total_steps // (episodes * hyper.horizon))
    policy.log_sigma = float(np.log(hyper.sigma_start))
    for update in range(n_updates):
        frac = update / max(1, n_updates - 1)
        sigma_floor = hyper.sigma_start + frac * (hyper.sigma_end - hyper.sigma_start)
        policy.log_sigma = max(policy.log_sigma, np.log(max(sigma_floor, 1e-3)))
        sigma = float(np.exp(policy.log_sigma))

        b, t_len = episodes, hyper.horizon
        state = env.reset_batch(rng, b)
        e = env.sample_config_batch(config_mode, rng, b, t=0)
        states = np.zeros((b, t_len, env.n))
        zs = np.zeros((b, t_len, model.latent_dim if model is not None else 0))
        noise = np.zeros((b, t_len, env.m))
        rewards = np.zeros((b, t_len))
        alive_mask = np.zeros((b, t_len))
        alive = np.ones(b, dtype=bool)
        violated = np.zeros(b, dtype=bool)
        for t in range(t_len):
            if config_mode.kind in ("per_step", "schedule"):
                e = env.sample_config_batch(config_mode, rng, b, t=t)
            z = model.encode(e) if (model is not None and policy.conditions_on_latent) else None
            mu = policy.mean_batch(state, z)
            eps_t = rng.normal(size=mu.shape)
            a = env.action_space.clip(mu + sigma * eps_t)
            nxt = env.step_batch(state, a, e)
            safe, _ = env.safe_set.check(nxt)
            r = env.reward_batch(state, a)
            r = r - hyper.safety_penalty * (~safe)
            states[:, t] = state
            if z is not None:
                zs[:, t] = z
            noise[:, t] = eps_t
            rewards[:, t] = r * alive
            alive_mask[:, t] = alive
            violated |= alive & ~safe
            alive = alive & safe
            state = np.where(alive[:, None], nxt, state)
        # discounted returns and per-timestep baseline
        returns = np.zeros_like(rewards)
        acc = np.zeros(b)
        for t in range(t_len - 1, -1, -1):
            acc = rewards[:, t] + hyper.discount * acc
            returns[:, t] = acc
        denom = np.maximum(alive_mask.sum(axis=0), 1.0)
        baseline = (returns * alive_mask).sum(axis=0) / denom
        adv = (returns - baseline) * alive_mask
        a_std = adv[alive_mask > 0].std()
        if a_std > 1e-8:
            adv = adv / a_std
        mean_ret = float(np.mean(rewards.sum(axis=1)))
        if not np.isfinite(mean_ret):
            raise FloatingPointError("policy-gradient training diverged")
        report.mean_returns.append(mean_ret)
        report.violation_rates.append(float(np.mean(violated)))
        report.steps_trained += episodes * t_len

        flat_x = states.reshape(b * t_len, env.n)
        if policy.conditions_on_latent and model is not None:
            flat_in = np.concatenate([flat_x, zs.reshape(b * t_len, -1)], axis=1)
        else:
            flat_in = flat_x
        flat_in = (flat_in - policy.x_mean) / policy.x_std
        flat_eps = noise.reshape(b * t_len, env.m)
        flat_adv = adv.reshape(b * t_len)
        # score function: d(-J)/d(mu) = -adv * (a - mu) / sigma^2 = -adv * eps / sigma
        coeff = -(flat_adv[:, None] * flat_eps) / (sigma * max(b, 1))
        leaves = nets.make_leaves(policy.params)
        mu_var = nets.mlp_apply(policy.params.spec, leaves, flat_in)
        surrogate = ad.vsum(ad.mul(ad.lift(coeff), mu_var))
        ad.backward(surrogate)
        adam_step(opt, policy.params, nets.collect_gradient(policy.params, leaves))
        # log-std score: E[adv * (|eps|^2 - m)] plus entropy bonus
        g_logsig = float(np.mean(flat_adv * (np.sum(flat_eps**2, axis=1) - env.m)))
        policy.log_sigma += 0.01 * (g_logsig + hyper.entropy_weight * env.m)
        policy.log_sigma = float(np.clip(policy.log_sigma, np.log(1e-3), np.log(2.0)))
    if encoder_before is not None and not np.array_equal(model.encoder.theta, encoder_before):
        raise AssertionError("encoder parameters changed during policy training")
    return policy, report
