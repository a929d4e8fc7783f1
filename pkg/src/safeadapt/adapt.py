"""History-based latent inference and few-shot fine-tuning.

Phase 2 trains a 1-D CNN to regress the encoder's latent from the last k
state-action pairs, using episodes with a fixed (but randomly drawn)
configuration. Phase 3 fine-tunes the dynamics heads together with this
module, end to end, on a small dataset from the deployment system where
the configuration is unknown.

Window convention: channels are the n state dimensions followed by the m
action dimensions, width k, oldest column first. States and actions are
standardized; columns that predate the episode start are zero (and the
window is flagged as cold until k steps have elapsed).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import networks as nets
from .dynlearn import DynModel, _angle_delta
from .envs.base import ConfigMode, Env
from .optim import OptimizerState, adam_step
from .serialize import read_arrays, write_arrays


# ---------------------------------------------------------------------------
# Windows
# ---------------------------------------------------------------------------


class WindowBuffer:
    """Rolling state-action history for a batch of episodes."""

    def __init__(self, batch: int, n: int, m: int, k: int):
        self.n, self.m, self.k = n, m, k
        self.x = np.zeros((batch, k, n))
        self.a = np.zeros((batch, k, m))
        self.count = np.zeros(batch, dtype=int)

    def push(self, x: np.ndarray, a: np.ndarray) -> None:
        self.x = np.roll(self.x, -1, axis=1)
        self.a = np.roll(self.a, -1, axis=1)
        self.x[:, -1] = x
        self.a[:, -1] = a
        self.count = np.minimum(self.count + 1, self.k)

    def reset_rows(self, mask) -> None:
        self.x[mask] = 0.0
        self.a[mask] = 0.0
        self.count[mask] = 0

    @property
    def full(self) -> np.ndarray:
        return self.count >= self.k

    def channels(self, x_mean, x_std, a_center, a_scale) -> np.ndarray:
        """Normalized (batch, n+m, k) stack with pre-episode slots zeroed."""
        xs = (self.x - x_mean) / x_std
        asn = (self.a - a_center) / a_scale
        out = np.concatenate([xs.transpose(0, 2, 1), asn.transpose(0, 2, 1)], axis=1)
        # zero the leading slots that were never written
        cols = np.arange(self.k)[None, :]  # column index, oldest first
        invalid = cols < (self.k - self.count)[:, None]
        return np.where(invalid[:, None, :], 0.0, out)


class HistoryWindow:
    """Single-episode view of the rolling history."""

    def __init__(self, n: int, m: int, k: int):
        self._buf = WindowBuffer(1, n, m, k)

    def push(self, x, a) -> None:
        self._buf.push(np.asarray(x, dtype=np.float64)[None], np.asarray(a, dtype=np.float64)[None])

    @property
    def full(self) -> bool:
        return bool(self._buf.full[0])

    @property
    def k(self) -> int:
        return self._buf.k

    def raw(self):
        return self._buf.x[0], self._buf.a[0], int(self._buf.count[0])

    def channels(self, x_mean, x_std, a_center, a_scale) -> np.ndarray:
        return self._buf.channels(x_mean, x_std, a_center, a_scale)[0]


# ---------------------------------------------------------------------------
# The adaptation module
# ---------------------------------------------------------------------------


@dataclass
class AdaptModule:
    params: nets.NetworkParams
    x_mean: np.ndarray
    x_std: np.ndarray
    a_center: np.ndarray
    a_scale: np.ndarray

    @property
    def latent_dim(self) -> int:
        return self.params.spec.output_dim

    @property
    def window(self) -> int:
        return self.params.spec.window

    def copy(self) -> "AdaptModule":
        return AdaptModule(
            self.params.copy(),
            self.x_mean.copy(),
            self.x_std.copy(),
            self.a_center.copy(),
            self.a_scale.copy(),
        )

    def infer_channels(self, channels: np.ndarray) -> np.ndarray:
        return nets.forward_conv1d(self.params, channels)

    def infer_window(self, window: HistoryWindow | WindowBuffer) -> np.ndarray:
        if isinstance(window, HistoryWindow):
            window = window._buf
        ch = window.channels(self.x_mean, self.x_std, self.a_center, self.a_scale)
        return self.infer_channels(ch)

    def save(self, path) -> None:
        meta = {"spec": _conv_dict(self.params.spec)}
        write_arrays(
            path,
            "adaptmodule",
            meta,
            {
                "theta": self.params.theta,
                "x_mean": self.x_mean,
                "x_std": self.x_std,
                "a_center": self.a_center,
                "a_scale": self.a_scale,
            },
        )

    @classmethod
    def load(cls, path) -> "AdaptModule":
        meta, arrays = read_arrays(path, "adaptmodule")
        spec = _conv_from(meta["spec"])
        return cls(
            nets.NetworkParams(spec, arrays["theta"]),
            arrays["x_mean"],
            arrays["x_std"],
            arrays["a_center"],
            arrays["a_scale"],
        )


def _conv_dict(spec: nets.Conv1dSpec) -> dict:
    return {
        "channels_in": spec.channels_in,
        "window": spec.window,
        "conv_layers": [list(c) for c in spec.conv_layers],
        "head_dims": list(spec.head_dims),
        "output_dim": spec.output_dim,
        "activation": spec.activation,
    }


def _conv_from(d: dict) -> nets.Conv1dSpec:
    return nets.Conv1dSpec(
        d["channels_in"],
        d["window"],
        tuple(tuple(c) for c in d["conv_layers"]),
        tuple(d["head_dims"]),
        d["output_dim"],
        d["activation"],
    )


def infer_latent(module: AdaptModule, window) -> np.ndarray:
    """Latent estimate from a history window (cold windows allowed)."""
    if isinstance(window, (HistoryWindow, WindowBuffer)):
        return module.infer_window(window)
    return module.infer_channels(np.asarray(window, dtype=np.float64))


# ---------------------------------------------------------------------------
# Phase 2 data collection and training
# ---------------------------------------------------------------------------


@dataclass
class AdaptSampleSet:
    """Windows and their latent targets (raw, unnormalized windows)."""

    env_id: str
    win_x: np.ndarray  # (N, k, n)
    win_a: np.ndarray  # (N, k, m)
    z: np.ndarray  # (N, d)
    seed: int | None = None

    def __len__(self) -> int:
        return len(self.z)

    def subset(self, idx) -> "AdaptSampleSet":
        return AdaptSampleSet(self.env_id, self.win_x[idx], self.win_a[idx], self.z[idx], self.seed)

    def save(self, path) -> None:
        meta = {"env_id": self.env_id, "count": len(self), "seed": self.seed}
        write_arrays(path, "adaptset", meta, {"win_x": self.win_x, "win_a": self.win_a, "z": self.z})

    @classmethod
    def load(cls, path) -> "AdaptSampleSet":
        meta, arrays = read_arrays(path, "adaptset")
        return cls(meta["env_id"], arrays["win_x"], arrays["win_a"], arrays["z"], meta.get("seed"))


def collect_adapt(
    env: Env,
    policy,
    model: DynModel,
    num_episodes: int,
    steps: int,
    rng: np.random.Generator,
    k: int = 20,
    latent_source: str = "oracle",
    module: AdaptModule | None = None,
    noise_scale: float = 0.0,
    config_mode: ConfigMode = ConfigMode("per_episode"),
    seed_label: int | None = None,
    sample_stride: int = 1,
) -> AdaptSampleSet:
    """Roll the policy with episodic configurations and harvest windows.

    One sample per post-warm-up step (thinned by ``sample_stride`` for
    long episodes): the raw window and the encoder's latent for the
    previous step's configuration. With ``latent_source`` set to
    'adaptation_module' the policy is driven by the current module (the
    refinement rounds use this to match the deployment distribution).
    """
    if num_episodes < 1:
        return AdaptSampleSet(env.env_id, np.zeros((0, k, env.n)), np.zeros((0, k, env.m)),
                              np.zeros((0, model.latent_dim)), seed_label)
    if latent_source == "adaptation_module" and module is None:
        raise ValueError("latent_source='adaptation_module' requires a module")
    buf = WindowBuffer(num_episodes, env.n, env.m, k)
    state = env.reset_batch(rng, num_episodes)
    e = env.sample_config_batch(config_mode, rng, num_episodes, t=0)
    e_prev = e.copy()
    alive = np.ones(num_episodes, dtype=bool)
    wins_x, wins_a, targets = [], [], []
    for t in range(steps):
        if config_mode.kind in ("per_step", "schedule"):
            e = env.sample_config_batch(config_mode, rng, num_episodes, t=t)
        if latent_source == "oracle":
            z_pol = model.encode(e)
        elif latent_source == "adaptation_module":
            z_pol = module.infer_window(buf)
        else:
            z_pol = np.zeros((num_episodes, model.latent_dim))
        a = policy.act_batch(state, z_pol, rng)
        if noise_scale > 0.0:
            a = a + noise_scale * rng.normal(size=a.shape)
        a = env.action_space.clip(a)
        record = alive & buf.full
        if t % sample_stride != 0:
            record &= False
        if record.any():
            wins_x.append(buf.x[record].copy())
            wins_a.append(buf.a[record].copy())
            targets.append(model.encode(e_prev[record]))
        buf.push(state, a)
        state = env.step_batch(state, a, e)
        safe, _ = env.safe_set.check(state)
        alive &= safe
        e_prev = e.copy()
        if not alive.any():
            break
    if not wins_x:
        return AdaptSampleSet(env.env_id, np.zeros((0, k, env.n)), np.zeros((0, k, env.m)),
                              np.zeros((0, model.latent_dim)), seed_label)
    return AdaptSampleSet(
        env.env_id,
        np.concatenate(wins_x),
        np.concatenate(wins_a),
        np.concatenate(targets),
        seed_label,
    )


@dataclass
class AdaptTrainConfig:
    epochs: int = 60
    batch_size: int = 256
    learning_rate: float = 1e-3
    lr_decay: float = 0.05  # cosine-anneal the rate to this fraction
    weight_decay: float = 1e-5
    holdout_frac: float = 0.1
    conv_layers: tuple = ((32, 5, 1), (32, 5, 1))
    head_dims: tuple = (64,)


@dataclass
class AdaptReport:
    train_loss: list = field(default_factory=list)
    holdout_mse: list = field(default_factory=list)
    holdout_idx: np.ndarray = None
    final_holdout_mse: float = float("nan")
    target_variance: float = float("nan")


def _window_channels(win_x, win_a, x_mean, x_std, a_center, a_scale):
    xs = (win_x - x_mean) / x_std
    asn = (win_a - a_center) / a_scale
    return np.concatenate([xs.transpose(0, 2, 1), asn.transpose(0, 2, 1)], axis=1)


def train_adapt(
    data: AdaptSampleSet,
    env: Env,
    config: AdaptTrainConfig,
    rng: np.random.Generator,
    module: AdaptModule | None = None,
) -> tuple[AdaptModule, AdaptReport]:
    """Fit the history-to-latent CNN by least squares on the latent."""
    if len(data) == 0:
        raise ValueError("empty adaptation dataset")
    k = data.win_x.shape[1]
    d = data.z.shape[1]
    if module is None:
        x_flat = data.win_x.reshape(-1, env.n)
        x_mean = x_flat.mean(axis=0)
        x_std = np.maximum(x_flat.std(axis=0), 1e-8)
        a_center = 0.5 * (env.action_space.lo + env.action_space.hi)
        a_scale = 0.5 * (env.action_space.hi - env.action_space.lo)
        spec = nets.Conv1dSpec(
            channels_in=env.n + env.m,
            window=k,
            conv_layers=config.conv_layers,
            head_dims=config.head_dims,
            output_dim=d,
        )
        module = AdaptModule(nets.init_params(spec, rng), x_mean, x_std, a_center, a_scale)
    channels = _window_channels(
        data.win_x, data.win_a, module.x_mean, module.x_std, module.a_center, module.a_scale
    )
    n_total = len(data)
    perm = rng.permutation(n_total)
    n_hold = max(1, int(round(config.holdout_frac * n_total))) if n_total > 1 else 0
    hold_idx = perm[n_total - n_hold :]
    train_idx = perm[: n_total - n_hold]
    if train_idx.size == 0:
        train_idx, hold_idx = perm, perm[:0]
    report = AdaptReport(holdout_idx=hold_idx)
    report.target_variance = float(np.sum(data.z[train_idx].var(axis=0)))
    opt = OptimizerState.for_params(module.params, learning_rate=config.learning_rate,
                                    weight_decay=config.weight_decay)
    n_train = train_idx.size
    batch = min(config.batch_size, n_train)
    spec = module.params.spec
    base_lr = config.learning_rate
    for epoch in range(config.epochs):
        frac = epoch / max(1, config.epochs - 1)
        opt.learning_rate = base_lr * (
            config.lr_decay + (1 - config.lr_decay) * 0.5 * (1 + np.cos(np.pi * frac))
        )
        order = rng.permutation(n_train)
        losses = []
        for lo in range(0, n_train, batch):
            sel = train_idx[order[lo : lo + batch]]
            leaves = nets.make_leaves(module.params)
            pred = nets.conv1d_apply(spec, leaves, channels[sel])
            err = ad.sub(pred, ad.lift(data.z[sel]))
            loss = ad.scale(ad.vsum(ad.square(err)), 1.0 / sel.size)
            ad.backward(loss)
            if not np.isfinite(loss.value):
                raise FloatingPointError(f"adaptation training diverged at epoch {epoch}")
            adam_step(opt, module.params, nets.collect_gradient(module.params, leaves))
            losses.append(float(loss.value))
        report.train_loss.append(float(np.mean(losses)))
        if hold_idx.size:
            z_hat = module.infer_channels(channels[hold_idx])
            report.holdout_mse.append(float(np.mean(np.sum((z_hat - data.z[hold_idx]) ** 2, axis=1))))
    if hold_idx.size:
        report.final_holdout_mse = report.holdout_mse[-1]
    return module, report


def adapt_residuals_l1(module: AdaptModule, data: AdaptSampleSet, idx=None) -> np.ndarray:
    """Per-sample 1-norm latent regression errors (feeds margin estimation)."""
    if idx is None:
        idx = np.arange(len(data))
    channels = _window_channels(
        data.win_x[idx], data.win_a[idx], module.x_mean, module.x_std,
        module.a_center, module.a_scale,
    )
    z_hat = module.infer_channels(channels)
    return np.sum(np.abs(z_hat - data.z[idx]), axis=1)


# ---------------------------------------------------------------------------
# Phase 3: few-shot fine-tuning on deployment data
# ---------------------------------------------------------------------------


@dataclass
class RealDataset:
    """Contiguous (x, a) trajectories from the deployment system."""

    env_id: str
    trajectories: list  # list of (x (T+1, n), a (T, m))
    source: str = ""

    def __len__(self) -> int:
        return len(self.trajectories)

    def num_transitions(self) -> int:
        return sum(a.shape[0] for _, a in self.trajectories)

    def save(self, path) -> None:
        meta = {
            "env_id": self.env_id,
            "source": self.source,
            "lengths": [int(a.shape[0]) for _, a in self.trajectories],
        }
        arrays = {}
        for i, (x, a) in enumerate(self.trajectories):
            arrays[f"x{i}"] = x
            arrays[f"a{i}"] = a
        write_arrays(path, "realdata", meta, arrays)

    @classmethod
    def load(cls, path) -> "RealDataset":
        meta, arrays = read_arrays(path, "realdata")
        trajs = []
        for i in range(len(meta["lengths"])):
            trajs.append((arrays[f"x{i}"], arrays[f"a{i}"]))
        return cls(meta["env_id"], trajs, meta.get("source", ""))


@dataclass
class TuneSamples:
    channels: np.ndarray  # (N, n+m, k) normalized windows
    x: np.ndarray
    a: np.ndarray
    delta: np.ndarray  # angle-aware x_next - x


def build_tune_samples(model: DynModel, module: AdaptModule, real: RealDataset) -> TuneSamples:
    k = module.window
    chs, xs, acts, deltas = [], [], [], []
    for x_traj, a_traj in real.trajectories:
        t_len = a_traj.shape[0]
        if t_len < k + 2:
            warnings.warn(f"skipping trajectory with {t_len} steps (< k+2 = {k + 2})")
            continue
        for t in range(k, t_len):
            win_x = x_traj[t - k : t]
            win_a = a_traj[t - k : t]
            chs.append(
                _window_channels(
                    win_x[None], win_a[None], module.x_mean, module.x_std,
                    module.a_center, module.a_scale,
                )[0]
            )
            xs.append(x_traj[t])
            acts.append(a_traj[t])
            deltas.append(_angle_delta(model.angle_dims, x_traj[t + 1][None], x_traj[t][None])[0])
    if not xs:
        raise ValueError("no usable trajectories (all shorter than k+2)")
    return TuneSamples(np.stack(chs), np.stack(xs), np.stack(acts), np.stack(deltas))


def tune_error(model: DynModel, module: AdaptModule, samples: TuneSamples, idx=None) -> float:
    """RMS one-step 2-norm prediction error with the module in the loop."""
    if idx is None:
        idx = np.arange(len(samples.x))
    z = module.infer_channels(samples.channels[idx])
    f, g = model.predict(samples.x[idx], z)
    pred_delta = (f - samples.x[idx]) + np.einsum("bnm,bm->bn", g, samples.a[idx])
    err = pred_delta - samples.delta[idx]
    return float(np.sqrt(np.mean(np.sum(err**2, axis=1))))


@dataclass
class TuneConfig:
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 1e-4
    holdout_frac: float = 0.2
    patience: int = 25


@dataclass
class TuneReport:
    error_before: float = float("nan")
    error_after: float = float("nan")
    holdout_idx: np.ndarray = None
    epochs_ran: int = 0

    @property
    def improvement_ratio(self) -> float:
        return self.error_before / max(self.error_after, 1e-300)


def finetune(
    model: DynModel,
    module: AdaptModule,
    real: RealDataset,
    config: TuneConfig,
    rng: np.random.Generator,
) -> tuple[DynModel, AdaptModule, TuneReport]:
    """End-to-end fine-tuning of (f, g, adaptation module) on real data.

    The encoder is untouched (it plays no role at deployment). Early
    stopping tracks the held-out split; the returned networks are never
    worse there than the inputs.
    """
    if real.num_transitions() == 0:
        raise ValueError("empty real dataset")
    samples = build_tune_samples(model, module, real)
    n_total = len(samples.x)
    perm = rng.permutation(n_total)
    n_hold = max(1, int(round(config.holdout_frac * n_total)))
    hold_idx = perm[n_total - n_hold :]
    train_idx = perm[: n_total - n_hold]
    if train_idx.size == 0:
        raise ValueError("real dataset too small to split")

    model = model.copy()
    module = module.copy()
    encoder_before = model.encoder.theta.copy()
    report = TuneReport(holdout_idx=hold_idx)
    report.error_before = tune_error(model, module, samples, hold_idx)

    best = (model.copy(), module.copy(), report.error_before)
    opts = [
        OptimizerState.for_params(p, learning_rate=config.learning_rate)
        for p in (model.f_head, model.g_head, module.params)
    ]
    n_train = train_idx.size
    batch = min(config.batch_size, n_train)
    stagnant = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n_train)
        for lo in range(0, n_train, batch):
            sel = train_idx[order[lo : lo + batch]]
            leaves_f = nets.make_leaves(model.f_head)
            leaves_g = nets.make_leaves(model.g_head)
            leaves_p = nets.make_leaves(module.params)
            z = nets.conv1d_apply(module.params.spec, leaves_p, samples.channels[sel])
            inp = ad.concat([ad.lift(model.norm_x(samples.x[sel])), z], axis=1)
            df = nets.mlp_apply(model.f_head.spec, leaves_f, inp)
            g_flat = nets.mlp_apply(model.g_head.spec, leaves_g, inp)
            g = ad.reshape(g_flat, (sel.size, model.n, model.m))
            pred = ad.add(df, ad.bmatvec(g, ad.lift(samples.a[sel])))
            err = ad.sub(pred, ad.lift(samples.delta[sel]))
            loss = ad.scale(ad.vsum(ad.square(err)), 1.0 / sel.size)
            ad.backward(loss)
            if not np.isfinite(loss.value):
                raise FloatingPointError("fine-tuning diverged")
            adam_step(opts[0], model.f_head, nets.collect_gradient(model.f_head, leaves_f))
            adam_step(opts[1], model.g_head, nets.collect_gradient(model.g_head, leaves_g))
            adam_step(opts[2], module.params, nets.collect_gradient(module.params, leaves_p))
        report.epochs_ran = epoch + 1
        hold_err = tune_error(model, module, samples, hold_idx)
        if hold_err < best[2]:
            best = (model.copy(), module.copy(), hold_err)
            stagnant = 0
        else:
            stagnant += 1
            if stagnant >= config.patience:
                break
    model, module, report.error_after = best
    if not np.array_equal(model.encoder.theta, encoder_before):
        raise AssertionError("encoder parameters changed during fine-tuning")
    return model, module, report
