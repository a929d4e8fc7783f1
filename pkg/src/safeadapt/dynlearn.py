"""Latent-conditioned control-affine dynamics learning.

An environment encoder maps the configuration e to a latent z; two heads
consume (x, z) and produce the drift prediction and the action gain so
that the one-step prediction

    x_next_hat = f_hat(x, z) + g_hat(x, z) a

is exactly affine in the action. The drift head predicts the state
increment (angle coordinates are compared on the circle), inputs are
standardized by training-set statistics, and the encoder output passes
through tanh so the latent is bounded. Everything is trained jointly by
minimizing the mean squared one-step prediction error.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import networks as nets
from .envs.base import ConfigMode, Env
from .optim import OptimizerState, adam_step
from .serialize import read_arrays, write_arrays


# ---------------------------------------------------------------------------
# Transition data
# ---------------------------------------------------------------------------


@dataclass
class TransitionDataset:
    """Rows of (x, e, a, x_next) from one environment."""

    env_id: str
    x: np.ndarray
    e: np.ndarray
    a: np.ndarray
    x_next: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        if not (len(self.x) == len(self.e) == len(self.a) == len(self.x_next)):
            raise ValueError("field lengths disagree")

    def __len__(self) -> int:
        return len(self.x)

    def subset(self, idx) -> "TransitionDataset":
        return TransitionDataset(
            self.env_id, self.x[idx], self.e[idx], self.a[idx], self.x_next[idx], self.seed
        )

    def save(self, path) -> None:
        meta = {
            "env_id": self.env_id,
            "n": self.x.shape[1],
            "m": self.a.shape[1],
            "k": self.e.shape[1],
            "count": len(self),
            "seed": self.seed,
        }
        write_arrays(
            path,
            "transitions",
            meta,
            {"x": self.x, "e": self.e, "a": self.a, "x_next": self.x_next},
        )

    @classmethod
    def load(cls, path) -> "TransitionDataset":
        meta, arrays = read_arrays(path, "transitions")
        return cls(meta["env_id"], arrays["x"], arrays["e"], arrays["a"], arrays["x_next"], meta.get("seed"))


def collect_random(
    env: Env,
    num_steps: int,
    rng: np.random.Generator,
    config_mode: ConfigMode = ConfigMode("per_step"),
    horizon: int = 200,
    chains: int = 64,
    seed_label: int | None = None,
) -> TransitionDataset:
    """Roll uniformly random actions and record every transition.

    Runs ``chains`` episodes in parallel; each chain restarts from a
    broad-coverage state when it leaves the safe set or reaches the
    horizon. The configuration is refreshed according to ``config_mode``
    (per-step redraws give maximally diverse data).
    """
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    chains = int(min(chains, max(1, num_steps)))
    xs = np.empty((num_steps, env.n))
    es = np.empty((num_steps, env.k))
    acts = np.empty((num_steps, env.m))
    xns = np.empty((num_steps, env.n))
    state = env.explore_state_batch(rng, chains)
    e_cur = env.sample_config_batch(config_mode, rng, chains, t=0)
    age = np.zeros(chains, dtype=int)
    filled = 0
    t = 0
    while filled < num_steps:
        if config_mode.kind in ("per_step", "fixed", "schedule"):
            e_cur = env.sample_config_batch(config_mode, rng, chains, t=t)
        a = env.action_space.sample(rng, chains)
        x_next = env.step_batch(state, a, e_cur)
        take = min(chains, num_steps - filled)
        xs[filled : filled + take] = state[:take]
        es[filled : filled + take] = e_cur[:take]
        acts[filled : filled + take] = a[:take]
        xns[filled : filled + take] = x_next[:take]
        filled += take
        age += 1
        safe, _ = env.safe_set.check(x_next)
        done = (~safe) | (age >= horizon)
        if done.any():
            n_done = int(done.sum())
            x_next[done] = env.explore_state_batch(rng, n_done)
            age[done] = 0
            if config_mode.kind == "per_episode":
                e_cur[done] = env.sample_config_batch(config_mode, rng, n_done, t=t)
        state = x_next
        t += 1
    return TransitionDataset(env.env_id, xs, es, acts, xns, seed_label)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass
class DynModel:
    env_id: str
    n: int
    m: int
    k: int
    latent_dim: int
    encoder: nets.NetworkParams
    f_head: nets.NetworkParams
    g_head: nets.NetworkParams
    angle_dims: tuple = ()
    blind: bool = False
    x_mean: np.ndarray = None
    x_std: np.ndarray = None
    e_mean: np.ndarray = None
    e_std: np.ndarray = None

    def __post_init__(self):
        if self.x_mean is None:
            self.x_mean = np.zeros(self.n)
            self.x_std = np.ones(self.n)
        if self.e_mean is None:
            self.e_mean = np.zeros(self.k)
            self.e_std = np.ones(self.k)

    def copy(self) -> "DynModel":
        return DynModel(
            self.env_id,
            self.n,
            self.m,
            self.k,
            self.latent_dim,
            self.encoder.copy(),
            self.f_head.copy(),
            self.g_head.copy(),
            tuple(self.angle_dims),
            self.blind,
            self.x_mean.copy(),
            self.x_std.copy(),
            self.e_mean.copy(),
            self.e_std.copy(),
        )

    # --- normalization ------------------------------------------------

    def norm_x(self, x):
        return (x - self.x_mean) / self.x_std

    def norm_e(self, e):
        if self.blind:
            return np.zeros_like(e)
        return (e - self.e_mean) / self.e_std

    # --- inference ----------------------------------------------------

    def encode(self, e) -> np.ndarray:
        """Latent z = tanh(encoder(normalized e)); bounded in (-1, 1)."""
        e = np.asarray(e, dtype=np.float64)
        single = e.ndim == 1
        z = np.tanh(nets.forward_mlp(self.encoder, self.norm_e(np.atleast_2d(e))))
        return z[0] if single else z

    def predict(self, x, z):
        """(f_hat, g_hat) at states x and latents z; batched or single."""
        x = np.asarray(x, dtype=np.float64)
        z = np.asarray(z, dtype=np.float64)
        single = x.ndim == 1
        xb = np.atleast_2d(x)
        zb = np.atleast_2d(z)
        if zb.shape[0] == 1 and xb.shape[0] > 1:
            zb = np.broadcast_to(zb, (xb.shape[0], zb.shape[1]))
        inp = np.concatenate([self.norm_x(xb), zb], axis=1)
        f = xb + nets.forward_mlp(self.f_head, inp)
        g = nets.forward_mlp(self.g_head, inp).reshape(-1, self.n, self.m)
        return (f[0], g[0]) if single else (f, g)

    def predict_next(self, x, z, a):
        f, g = self.predict(x, z)
        a = np.asarray(a, dtype=np.float64)
        if f.ndim == 1:
            return f + g @ a
        return f + np.einsum("bnm,bm->bn", g, a)

    # --- persistence ----------------------------------------------------

    def save(self, path) -> None:
        meta = {
            "env_id": self.env_id,
            "n": self.n,
            "m": self.m,
            "k": self.k,
            "latent_dim": self.latent_dim,
            "angle_dims": list(self.angle_dims),
            "blind": self.blind,
            "encoder_spec": _spec_dict(self.encoder.spec),
            "f_spec": _spec_dict(self.f_head.spec),
            "g_spec": _spec_dict(self.g_head.spec),
        }
        write_arrays(
            path,
            "dynmodel",
            meta,
            {
                "encoder": self.encoder.theta,
                "f_head": self.f_head.theta,
                "g_head": self.g_head.theta,
                "x_mean": self.x_mean,
                "x_std": self.x_std,
                "e_mean": self.e_mean,
                "e_std": self.e_std,
            },
        )

    @classmethod
    def load(cls, path) -> "DynModel":
        meta, arrays = read_arrays(path, "dynmodel")
        return cls(
            env_id=meta["env_id"],
            n=meta["n"],
            m=meta["m"],
            k=meta["k"],
            latent_dim=meta["latent_dim"],
            encoder=nets.NetworkParams(_spec_from(meta["encoder_spec"]), arrays["encoder"]),
            f_head=nets.NetworkParams(_spec_from(meta["f_spec"]), arrays["f_head"]),
            g_head=nets.NetworkParams(_spec_from(meta["g_spec"]), arrays["g_head"]),
            angle_dims=tuple(meta["angle_dims"]),
            blind=meta["blind"],
            x_mean=arrays["x_mean"],
            x_std=arrays["x_std"],
            e_mean=arrays["e_mean"],
            e_std=arrays["e_std"],
        )


def _spec_dict(spec: nets.MlpSpec) -> dict:
    return {
        "input_dim": spec.input_dim,
        "hidden_dims": list(spec.hidden_dims),
        "output_dim": spec.output_dim,
        "activation": spec.activation,
    }


def _spec_from(d: dict) -> nets.MlpSpec:
    return nets.MlpSpec(d["input_dim"], tuple(d["hidden_dims"]), d["output_dim"], d["activation"])


def make_dyn_model(
    env: Env,
    rng: np.random.Generator,
    latent_dim: int = 4,
    encoder_hidden=(64, 64),
    head_hidden=(64, 64),
    blind: bool = False,
    activation: str = "tanh",
) -> DynModel:
    enc_spec = nets.MlpSpec(env.k, tuple(encoder_hidden), latent_dim, activation)
    f_spec = nets.MlpSpec(env.n + latent_dim, tuple(head_hidden), env.n, activation)
    g_spec = nets.MlpSpec(env.n + latent_dim, tuple(head_hidden), env.n * env.m, activation)
    return DynModel(
        env_id=env.env_id,
        n=env.n,
        m=env.m,
        k=env.k,
        latent_dim=latent_dim,
        encoder=nets.init_params(enc_spec, rng),
        f_head=nets.init_params(f_spec, rng),
        g_head=nets.init_params(g_spec, rng),
        angle_dims=tuple(env.angle_dims),
        blind=blind,
    )


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class DynTrainConfig:
    epochs: int = 200
    batch_size: int = 256
    learning_rate: float = 1e-3
    lr_decay: float = 0.05  # cosine-anneal the rate to this fraction
    weight_decay: float = 1e-5
    latent_gain_penalty: float = 1e-3
    holdout_frac: float = 0.1


@dataclass
class DynReport:
    train_loss: list = field(default_factory=list)
    holdout_mse: list = field(default_factory=list)
    holdout_idx: np.ndarray = None
    final_holdout_mse: float = float("nan")


def _angle_delta(env_angle_dims, x_next, x):
    d = x_next - x
    for i in env_angle_dims:
        d[:, i] = np.pi - np.mod(np.pi - d[:, i], 2.0 * np.pi)
    return d


def dyn_loss_and_grads(model: DynModel, x, e, a, delta, latent_gain_penalty: float = 0.0):
    """One minibatch of the training loss; returns (loss, grads per network).

    The loss is the mean squared 2-norm of the one-step prediction error,
    plus an optional quadratic penalty on the latent-input rows of both
    heads' first layers (keeps the certified latent sensitivity small).
    """
    leaves_e = nets.make_leaves(model.encoder)
    leaves_f = nets.make_leaves(model.f_head)
    leaves_g = nets.make_leaves(model.g_head)
    e_in = model.norm_e(e)
    z = ad.tanh(nets.mlp_apply(model.encoder.spec, leaves_e, e_in))
    inp = ad.concat([ad.lift(model.norm_x(x)), z], axis=1)
    df = nets.mlp_apply(model.f_head.spec, leaves_f, inp)
    g_flat = nets.mlp_apply(model.g_head.spec, leaves_g, inp)
    g = ad.reshape(g_flat, (x.shape[0], model.n, model.m))
    pred = ad.add(df, ad.bmatvec(g, ad.lift(a)))
    err = ad.sub(pred, ad.lift(delta))
    loss = ad.scale(ad.vsum(ad.square(err)), 1.0 / x.shape[0])
    if latent_gain_penalty > 0.0:
        zrows_f = ad.slice_rows(leaves_f[0], model.n, model.n + model.latent_dim)
        zrows_g = ad.slice_rows(leaves_g[0], model.n, model.n + model.latent_dim)
        pen = ad.add(ad.vsum(ad.square(zrows_f)), ad.vsum(ad.square(zrows_g)))
        loss = ad.add(loss, ad.scale(pen, latent_gain_penalty))
    ad.backward(loss)
    return (
        float(loss.value),
        nets.collect_gradient(model.encoder, leaves_e),
        nets.collect_gradient(model.f_head, leaves_f),
        nets.collect_gradient(model.g_head, leaves_g),
    )


def train_dyn(
    dataset: TransitionDataset,
    model: DynModel,
    config: DynTrainConfig,
    rng: np.random.Generator,
) -> tuple[DynModel, DynReport]:
    """Jointly fit encoder and heads; reports held-out one-step error."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    n_total = len(dataset)
    perm = rng.permutation(n_total)
    n_hold = max(1, int(round(config.holdout_frac * n_total))) if n_total > 1 else 0
    hold_idx = perm[n_total - n_hold :]
    train_idx = perm[: n_total - n_hold]
    if train_idx.size == 0:
        train_idx, hold_idx = perm, perm[:0]

    x_tr, e_tr, a_tr = dataset.x[train_idx], dataset.e[train_idx], dataset.a[train_idx]
    model.x_mean = x_tr.mean(axis=0)
    model.x_std = np.maximum(x_tr.std(axis=0), 1e-8)
    model.e_mean = e_tr.mean(axis=0)
    model.e_std = np.maximum(e_tr.std(axis=0), 1e-8)
    delta_tr = _angle_delta(model.angle_dims, dataset.x_next[train_idx], x_tr)

    opts = {
        "enc": OptimizerState.for_params(model.encoder, learning_rate=config.learning_rate,
                                         weight_decay=config.weight_decay),
        "f": OptimizerState.for_params(model.f_head, learning_rate=config.learning_rate,
                                       weight_decay=config.weight_decay),
        "g": OptimizerState.for_params(model.g_head, learning_rate=config.learning_rate,
                                       weight_decay=config.weight_decay),
    }
    report = DynReport(holdout_idx=hold_idx)
    n_train = train_idx.size
    batch = min(config.batch_size, n_train)
    base_lr = config.learning_rate
    for epoch in range(config.epochs):
        frac = epoch / max(1, config.epochs - 1)
        lr = base_lr * (config.lr_decay + (1 - config.lr_decay) * 0.5 * (1 + np.cos(np.pi * frac)))
        for opt in opts.values():
            opt.learning_rate = lr
        order = rng.permutation(n_train)
        losses = []
        for lo in range(0, n_train, batch):
            sel = order[lo : lo + batch]
            loss, g_enc, g_f, g_g = dyn_loss_and_grads(
                model, x_tr[sel], e_tr[sel], a_tr[sel], delta_tr[sel],
                config.latent_gain_penalty,
            )
            if not np.isfinite(loss):
                raise FloatingPointError(
                    f"dynamics training diverged at epoch {epoch} (loss={loss})"
                )
            adam_step(opts["enc"], model.encoder, g_enc)
            adam_step(opts["f"], model.f_head, g_f)
            adam_step(opts["g"], model.g_head, g_g)
            losses.append(loss)
        report.train_loss.append(float(np.mean(losses)))
        if hold_idx.size:
            ev = eval_dyn(model, dataset.subset(hold_idx))
            report.holdout_mse.append(ev.mse)
    if hold_idx.size:
        report.final_holdout_mse = report.holdout_mse[-1]
    return model, report


@dataclass
class DynEval:
    mse: float
    per_dim_rmse: np.ndarray
    residual_l1_max: float
    residual_l1_q99: float
    residual_l1: np.ndarray = None


def eval_dyn(model: DynModel, dataset: TransitionDataset, keep_residuals: bool = False) -> DynEval:
    """One-step prediction errors; the 1-norm quantiles feed margin estimation."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    z = model.encode(dataset.e)
    pred = model.predict_next(dataset.x, z, dataset.a)
    err = _angle_delta(model.angle_dims, dataset.x_next, pred)
    sq = np.sum(err**2, axis=1)
    l1 = np.sum(np.abs(err), axis=1)
    return DynEval(
        mse=float(np.mean(sq)),
        per_dim_rmse=np.sqrt(np.mean(err**2, axis=0)),
        residual_l1_max=float(np.max(l1)),
        residual_l1_q99=float(np.quantile(l1, 0.99)),
        residual_l1=l1 if keep_residuals else None,
    )


# ---------------------------------------------------------------------------
# Linear read-out of the configuration from the latent (used by analytic
# controllers that need a physical disturbance estimate).
# ---------------------------------------------------------------------------


@dataclass
class LatentDecoder:
    weights: np.ndarray  # (latent_dim + 1, k)

    def __call__(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        zb = np.atleast_2d(z)
        aug = np.concatenate([zb, np.ones((zb.shape[0], 1))], axis=1)
        e = aug @ self.weights
        return e[0] if single else e


def fit_latent_decoder(model: DynModel, e_samples: np.ndarray, ridge: float = 1e-6) -> LatentDecoder:
    """Least-squares map from latent back to configuration."""
    z = model.encode(e_samples)
    aug = np.concatenate([z, np.ones((z.shape[0], 1))], axis=1)
    gram = aug.T @ aug + ridge * np.eye(aug.shape[1])
    w = np.linalg.solve(gram, aug.T @ e_samples)
    return LatentDecoder(w)
