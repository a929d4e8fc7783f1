"""Robust CBF action filtering and its margin arithmetic.

The filter solves, per step and per barrier h(x) = p'x + q,

    a_safe = argmin_a ||a - a_raw||_2
      s.t.  p' f_hat + p' g_hat a + q  >=  (1 - eta) h(x_t) + eps,
            a in the action box,

where eps >= 0 tightens the constraint against model and latent errors.
With the barrier normalized to |p|_inf = 1, forward invariance of the
decay condition holds whenever

    eps >= eps_fg + eps_z (L_f + L_f_hat) + eps_z |a|_1^max (L_g + L_g_hat),

with eps_fg a bound on the 1-norm one-step prediction residual, eps_z a
bound on the latent regression error (both estimated as holdout
quantiles), and the L terms 1-norm Lipschitz constants of the true and
learned dynamics with respect to the latent at fixed state. "certified"
mode upper-bounds the learned constants by per-layer induced-norm
products restricted to the latent inputs; "empirical" mode uses sampled
difference quotients.

The QP is separable with a single linear constraint, so the solution is
a_safe = clip_box(a_raw + (lambda/2) g_hat' p) with the dual scalar
lambda found by a monotone search; the piecewise-linear dual residual is
solved exactly segment by segment. Multiple barriers are handled by
iterating on the currently most-violated one; if no action can satisfy a
barrier, the filter falls back to the safest extreme of the box.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import networks as nets
from .adapt import AdaptModule, adapt_residuals_l1
from .barriers import AffineBarrier
from .dynlearn import DynModel, TransitionDataset, eval_dyn
from .envs.base import Env

STATUS_INACTIVE = 0
STATUS_PROJECTED = 1
STATUS_FALLBACK = 2

_STATUS_NAMES = {0: "inactive", 1: "projected", 2: "infeasible_fallback"}


# ---------------------------------------------------------------------------
# Error bounds and the robust margin
# ---------------------------------------------------------------------------


@dataclass
class ErrorBounds:
    eps_fg: float  # combined one-step residual bound (1-norm)
    eps_z: float  # latent regression error bound (1-norm)
    L_f: float  # true drift sensitivity to the latent
    L_g: float  # true gain sensitivity to the latent
    L_f_hat: float  # learned drift head sensitivity to the latent
    L_g_hat: float  # learned gain head sensitivity to the latent
    a_max_1: float  # max action 1-norm over the box
    quantile: float
    mode: str
    n_dyn: int = 0
    n_adapt: int = 0
    eps_f: float | None = None  # optional separated bounds
    eps_g: float | None = None


@dataclass
class RobustMargin:
    eps: float
    delta1: float
    delta2: float


def compose_margin(bounds: ErrorBounds, p_inf_norm: float = 1.0) -> RobustMargin:
    """Margin for a barrier with max-norm ``p_inf_norm`` (1 after normalizing).

    delta1 covers prediction residuals at the true latent; delta2 covers
    the latent estimation error through the Lipschitz constants.
    """
    if bounds.eps_f is not None and bounds.eps_g is not None:
        delta1 = (bounds.eps_f + bounds.eps_g * bounds.a_max_1) * p_inf_norm
    else:
        delta1 = bounds.eps_fg * p_inf_norm
    delta2 = (
        bounds.eps_z * (bounds.L_f + bounds.L_f_hat)
        + bounds.eps_z * bounds.a_max_1 * (bounds.L_g + bounds.L_g_hat)
    ) * p_inf_norm
    return RobustMargin(eps=delta1 + delta2, delta1=delta1, delta2=delta2)


def _quantile(values: np.ndarray, q: float) -> float:
    if values.size == 0:
        raise ValueError("no residuals to take a quantile of")
    if q >= 1.0:
        return float(np.max(values))
    return float(np.quantile(values, q))


def _induced_1norm(mat: np.ndarray) -> float:
    """Induced 1-norm of x -> M x: max absolute column sum."""
    return float(np.max(np.sum(np.abs(mat), axis=0))) if mat.size else 0.0


def _empirical_head_lipschitz(model: DynModel, x_pool, z_pool, rng, samples):
    idx_x = rng.integers(0, len(x_pool), size=samples)
    i1 = rng.integers(0, len(z_pool), size=samples)
    i2 = rng.integers(0, len(z_pool), size=samples)
    x = x_pool[idx_x]
    z1, z2 = z_pool[i1], z_pool[i2]
    dz = np.sum(np.abs(z1 - z2), axis=1)
    keep = dz > 1e-9
    if not keep.any():
        return 0.0, 0.0
    x, z1, z2, dz = x[keep], z1[keep], z2[keep], dz[keep]
    f1, g1 = model.predict(x, z1)
    f2, g2 = model.predict(x, z2)
    lf = np.max(np.sum(np.abs(f1 - f2), axis=1) / dz)
    dg = np.abs(g1 - g2).sum(axis=1)  # column abs sums, (B, m)
    lg = np.max(np.max(dg, axis=1) / dz)
    return float(lf), float(lg)


def _true_latent_lipschitz(model: DynModel, env: Env, x_pool, e_pool, rng, samples):
    """Latent sensitivity of the true dynamics, sampled through the encoder.

    Configuration pairs are drawn from the data the method was estimated
    on. Pairs with indistinguishable latents are skipped; a model whose
    training distribution carries no latent variation therefore reports
    zero (it has observed none).
    """
    idx_x = rng.integers(0, len(x_pool), size=samples)
    x = x_pool[idx_x]
    e1 = e_pool[rng.integers(0, len(e_pool), size=samples)]
    e2 = e_pool[rng.integers(0, len(e_pool), size=samples)]
    dz = np.sum(np.abs(model.encode(e1) - model.encode(e2)), axis=1)
    keep = dz > 1e-6
    if not keep.any():
        return 0.0, 0.0
    x, e1, e2, dz = x[keep], e1[keep], e2[keep], dz[keep]
    f1, g1 = env.true_f_g_batch(x, e1)
    f2, g2 = env.true_f_g_batch(x, e2)
    lf = np.max(np.sum(np.abs(f1 - f2), axis=1) / dz)
    dg = np.abs(g1 - g2).sum(axis=1)
    lg = np.max(np.max(dg, axis=1) / dz)
    return float(lf), float(lg)


def estimate_margin(
    model: DynModel,
    module: AdaptModule | None,
    dyn_holdout: TransitionDataset,
    adapt_holdout,
    env: Env | None = None,
    quantile: float = 1.0,
    mode: str = "certified",
    rng: np.random.Generator | None = None,
    lipschitz_samples: int = 20000,
    zero_action_data: TransitionDataset | None = None,
) -> tuple[ErrorBounds, RobustMargin]:
    """Estimate error bounds from held-out data and compose the margin.

    ``quantile`` = 1.0 takes the max residual (guarantee runs); 0.99 is
    the practical default. ``mode`` selects how the learned heads'
    latent Lipschitz constants are obtained; guarantee claims use
    "certified" only. The true-dynamics constants are always sampled
    difference quotients (they require the simulator; without one they
    are zero and the synthetic suite supplies exact values instead).
    """
    if mode not in ("certified", "empirical"):
        raise ValueError(f"unknown margin mode {mode!r}")
    if len(dyn_holdout) == 0:
        raise ValueError("empty dynamics holdout")
    rng = rng if rng is not None else np.random.default_rng(0)
    ev = eval_dyn(model, dyn_holdout, keep_residuals=True)
    eps_fg = _quantile(ev.residual_l1, quantile)
    if module is not None and adapt_holdout is not None and len(adapt_holdout) > 0:
        eps_z = _quantile(adapt_residuals_l1(module, adapt_holdout), quantile)
        z_pool = adapt_holdout.z
    else:
        eps_z = 0.0
        z_pool = model.encode(dyn_holdout.e)
    d = model.latent_dim
    z_slice = slice(model.n, model.n + d)
    if mode == "certified":
        lf_hat = nets.mlp_lipschitz_bound(model.f_head, z_slice)
        lg_hat = nets.mlp_lipschitz_bound(model.g_head, z_slice)
    else:
        lf_hat, lg_hat = _empirical_head_lipschitz(
            model, dyn_holdout.x, z_pool, rng, lipschitz_samples
        )
    if env is not None:
        lf_true, lg_true = _true_latent_lipschitz(
            model, env, dyn_holdout.x, dyn_holdout.e, rng, lipschitz_samples
        )
    else:
        lf_true = lg_true = 0.0
    a_max_1 = env.action_space.max_l1() if env is not None else float(
        np.sum(np.max(np.abs(dyn_holdout.a), axis=0))
    )
    eps_f = eps_g = None
    if zero_action_data is not None and len(zero_action_data) > 0:
        ev0 = eval_dyn(model, zero_action_data, keep_residuals=True)
        eps_f = _quantile(ev0.residual_l1, quantile)
        a_norm = np.sum(np.abs(dyn_holdout.a), axis=1)
        ok = a_norm > 1e-9
        if ok.any():
            eps_g = _quantile(
                np.maximum(ev.residual_l1[ok] - eps_f, 0.0) / a_norm[ok], quantile
            )
        else:
            eps_g = 0.0
    bounds = ErrorBounds(
        eps_fg=eps_fg,
        eps_z=eps_z,
        L_f=lf_true,
        L_g=lg_true,
        L_f_hat=lf_hat,
        L_g_hat=lg_hat,
        a_max_1=a_max_1,
        quantile=quantile,
        mode=mode,
        n_dyn=len(dyn_holdout),
        n_adapt=0 if adapt_holdout is None else len(adapt_holdout),
        eps_f=eps_f,
        eps_g=eps_g,
    )
    return bounds, compose_margin(bounds)


# ---------------------------------------------------------------------------
# The box-constrained single-constraint QP, solved exactly along the dual
# ---------------------------------------------------------------------------


def qp_project_batch(a_raw, c, rhs, lo, hi):
    """Minimize ||a - a_raw||^2 s.t. c'a >= rhs, lo <= a <= hi (batched).

    The candidate path a(lam) = clip(a_raw + (lam/2) c) makes
    phi(lam) = c'a(lam) piecewise linear and nondecreasing; the dual
    search locates the exact crossing. Returns (a, lam, status) with
    status 0 = constraint already satisfied, 1 = projected onto the
    constraint, 2 = infeasible (safest box extreme returned).
    """
    a_raw = np.asarray(a_raw, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    rhs = np.asarray(rhs, dtype=np.float64)
    b, m = a_raw.shape
    a0 = np.clip(a_raw, lo, hi)
    lam = np.zeros(b)
    status = np.zeros(b, dtype=int)
    phi0 = np.sum(c * a0, axis=1)
    need = phi0 < rhs - 1e-12
    if not need.any():
        return a0, lam, status
    a_sat = np.where(c > 0, hi, np.where(c < 0, lo, a0))
    phi_max = np.sum(c * a_sat, axis=1)
    infeasible = need & (phi_max < rhs - 1e-12)
    solve = need & ~infeasible
    out = a0.copy()
    out[infeasible] = a_sat[infeasible]
    status[infeasible] = STATUS_FALLBACK
    if solve.any():
        idx = np.nonzero(solve)[0]
        ar, cs, rh = a_raw[idx], c[idx], rhs[idx]
        with np.errstate(divide="ignore", invalid="ignore"):
            lam_en = np.where(
                cs > 0, 2.0 * (lo - ar) / cs, np.where(cs < 0, 2.0 * (hi - ar) / cs, 0.0)
            )
            lam_ex = np.where(
                cs > 0, 2.0 * (hi - ar) / cs, np.where(cs < 0, 2.0 * (lo - ar) / cs, 0.0)
            )
        bp = np.concatenate([np.maximum(lam_en, 0.0), np.maximum(lam_ex, 0.0)], axis=1)
        bp.sort(axis=1)
        vals = np.clip(ar[:, None, :] + 0.5 * bp[:, :, None] * cs[:, None, :], lo, hi)
        phis = np.einsum("bjm,bm->bj", vals, cs)
        bp = np.concatenate([np.zeros((idx.size, 1)), bp], axis=1)
        phis = np.concatenate([phi0[idx][:, None], phis], axis=1)
        ge = phis >= rh[:, None] - 1e-14
        j = np.argmax(ge, axis=1)
        j = np.maximum(j, 1)
        take = lambda arr, jj: np.take_along_axis(arr, jj[:, None], axis=1)[:, 0]
        bp_l, bp_r = take(bp, j - 1), take(bp, j)
        ph_l, ph_r = take(phis, j - 1), take(phis, j)
        slope = ph_r - ph_l
        frac = np.where(slope > 1e-300, (rh - ph_l) / np.maximum(slope, 1e-300), 1.0)
        lam_star = bp_l + np.clip(frac, 0.0, 1.0) * (bp_r - bp_l)
        out[idx] = np.clip(ar + 0.5 * lam_star[:, None] * cs, lo, hi)
        lam[idx] = lam_star
        status[idx] = STATUS_PROJECTED
    return out, lam, status


@dataclass
class FilterResult:
    a_safe: np.ndarray
    status: str
    lam: float
    h_predicted: float


def solve_cbf_qp(a_raw, f_hat, g_hat, barrier: AffineBarrier, margin_eps, h_now, box) -> FilterResult:
    """Single-instance robust CBF projection for one affine barrier."""
    if margin_eps < 0:
        raise ValueError("margin must be nonnegative")
    a_raw = np.asarray(a_raw, dtype=np.float64)
    f_hat = np.asarray(f_hat, dtype=np.float64)
    g_hat = np.asarray(g_hat, dtype=np.float64)
    p = barrier.p
    c = (g_hat.T @ p)[None, :]
    rhs = (1.0 - barrier.eta) * h_now + margin_eps - (p @ f_hat + barrier.q)
    a, lam, status = qp_project_batch(a_raw[None, :], c, np.array([rhs]), box.lo, box.hi)
    h_pred = float(p @ (f_hat + g_hat @ a[0]) + barrier.q)
    return FilterResult(a[0], _STATUS_NAMES[int(status[0])], float(lam[0]), h_pred)


# ---------------------------------------------------------------------------
# The assembled filter
# ---------------------------------------------------------------------------


class SafetyFilter:
    """Projects proposed actions through the robust CBF-QP, per step.

    ``dynamics='learned'`` uses the model and the history-based latent
    (the deployment configuration); ``dynamics='oracle'`` uses the true
    simulator and the true configuration (for exact-case verification).
    Cold history windows widen the margin by ``coldstart_factor``.
    """

    def __init__(
        self,
        env: Env,
        dynamics: str = "learned",
        model: DynModel | None = None,
        module: AdaptModule | None = None,
        margin: float = 0.0,
        latent_source: str = "adaptation_module",
        coldstart_factor: float = 2.0,
        max_rounds: int = 10,
        tol: float = 1e-9,
    ):
        if dynamics not in ("learned", "oracle"):
            raise ValueError(f"unknown dynamics source {dynamics!r}")
        if dynamics == "learned" and model is None:
            raise ValueError("learned dynamics requires a model")
        if dynamics == "learned" and latent_source == "adaptation_module" and module is None:
            raise ValueError("latent_source 'adaptation_module' requires a module")
        self.env = env
        self.dynamics = dynamics
        self.model = model
        self.module = module
        self.margin = float(margin)
        self.latent_source = latent_source
        self.coldstart_factor = coldstart_factor
        self.max_rounds = max_rounds
        self.tol = tol

    def _predict(self, x, window, e_true):
        if self.dynamics == "oracle":
            if e_true is None:
                raise ValueError("oracle filter requires the true configuration")
            return self.env.true_f_g_batch(x, e_true)
        if self.latent_source == "adaptation_module":
            z = self.module.infer_window(window)
        elif self.latent_source == "oracle_encoder":
            if e_true is None:
                raise ValueError("latent_source 'oracle_encoder' requires e_true")
            z = self.model.encode(e_true)
        else:
            z = np.zeros((x.shape[0], self.model.latent_dim))
        return self.model.predict(x, z)

    def filter_batch(self, x, window, a_raw, e_true=None):
        """Returns (a_safe, status (B,), info dict)."""
        x = np.asarray(x, dtype=np.float64)
        b = x.shape[0]
        f_hat, g_hat = self._predict(x, window, e_true)
        barriers = self.env.filter_barriers(x)
        eps_row = np.full(b, self.margin)
        if window is not None and self.coldstart_factor != 1.0:
            cold = ~window.full
            eps_row[cold] *= self.coldstart_factor
        lo, hi = self.env.action_space.lo, self.env.action_space.hi
        a = np.clip(a_raw, lo, hi)
        status = np.zeros(b, dtype=int)
        lam_row = np.zeros(b)
        h_now = np.stack([np.einsum("bn,bn->b", p, x) + q for p, q, _, _ in barriers], axis=1)
        pred = f_hat + np.einsum("bnm,bm->bn", g_hat, a)
        # rows whose most-endangered barrier is unsatisfiable keep its
        # maximally safe action; later rounds may not overwrite it with a
        # less endangered barrier's projection
        locked = np.zeros(b, dtype=bool)
        for _ in range(self.max_rounds):
            resid = np.stack(
                [
                    np.einsum("bn,bn->b", p, pred) + q - (1.0 - eta) * h_now[:, j] - eps_row
                    for j, (p, q, eta, _) in enumerate(barriers)
                ],
                axis=1,
            )
            worst = np.argmin(resid, axis=1)
            worst_val = np.take_along_axis(resid, worst[:, None], axis=1)[:, 0]
            active = (worst_val < -self.tol) & ~locked
            if not active.any():
                break
            idx = np.nonzero(active)[0]
            p_all = np.stack([p for p, _, _, _ in barriers], axis=1)  # (B, nb, n)
            q_all = np.stack([np.broadcast_to(q, (b,)) for _, q, _, _ in barriers], axis=1)
            eta_all = np.array([eta for _, _, eta, _ in barriers])
            pj = np.take_along_axis(p_all, worst[:, None, None], axis=1)[:, 0, :]
            qj = np.take_along_axis(q_all, worst[:, None], axis=1)[:, 0]
            etaj = eta_all[worst]
            hj = np.take_along_axis(h_now, worst[:, None], axis=1)[:, 0]
            c = np.einsum("bnm,bn->bm", g_hat[idx], pj[idx])
            rhs = (
                (1.0 - etaj[idx]) * hj[idx]
                + eps_row[idx]
                - (np.einsum("bn,bn->b", pj[idx], f_hat[idx]) + qj[idx])
            )
            a_new, lam_new, st = qp_project_batch(a_raw[idx], c, rhs, lo, hi)
            infeasible = st == STATUS_FALLBACK
            if infeasible.any():
                # no action satisfies the most-violated decay condition;
                # commit to the maximally safe action for the barrier whose
                # boundary is nearest NOW (a stable, model-noise-free pick)
                sub = idx[infeasible]
                nearest = np.argmin(h_now[sub], axis=1)
                p_near = np.take_along_axis(p_all[sub], nearest[:, None, None], axis=1)[:, 0, :]
                c_near = np.einsum("bnm,bn->bm", g_hat[sub], p_near)
                a_new[infeasible] = np.where(
                    c_near > 0, hi, np.where(c_near < 0, lo, np.clip(a_raw[sub], lo, hi))
                )
            a[idx] = a_new
            lam_row[idx] = lam_new
            status[idx] = np.maximum(status[idx], st)
            locked[idx] |= infeasible
            pred[idx] = f_hat[idx] + np.einsum("bnm,bm->bn", g_hat[idx], a_new)
        else:
            # rounds exhausted; flag whatever is still violated as fallback
            resid = np.stack(
                [
                    np.einsum("bn,bn->b", p, pred) + q - (1.0 - eta) * h_now[:, j] - eps_row
                    for j, (p, q, eta, _) in enumerate(barriers)
                ],
                axis=1,
            )
            status[(np.min(resid, axis=1) < -self.tol) & ~locked] = STATUS_FALLBACK
        info = {
            "h_now": h_now,
            "barriers": barriers,
            "f_hat": f_hat,
            "g_hat": g_hat,
            "lam": lam_row,
            "h_pred": np.stack(
                [np.einsum("bn,bn->b", p, pred) + q for p, q, _, _ in barriers], axis=1
            ),
        }
        return a, status, info


def filter_action(
    safety_filter: SafetyFilter, policy, x, window, z_policy=None, rng=None, e_true=None
) -> FilterResult:
    """One deployment step: infer the latent, propose, project.

    ``z_policy`` overrides the policy's latent (defaults to the filter's
    own latent estimate when the filter runs a learned model).
    """
    x = np.asarray(x, dtype=np.float64)[None]
    if z_policy is None and safety_filter.dynamics == "learned":
        if safety_filter.latent_source == "adaptation_module":
            z_policy = safety_filter.module.infer_window(window)
        elif safety_filter.latent_source == "oracle_encoder" and e_true is not None:
            z_policy = safety_filter.model.encode(np.asarray(e_true)[None])
    a_raw = policy.act_batch(x, z_policy, rng)
    a_safe, status, info = safety_filter.filter_batch(
        x, window, a_raw, e_true=None if e_true is None else np.asarray(e_true)[None]
    )
    worst = int(np.argmin(info["h_pred"][0] - info["h_now"][0]))
    return FilterResult(
        a_safe[0],
        _STATUS_NAMES[int(status[0])],
        float(info["lam"][0]),
        float(info["h_pred"][0, worst]),
    )


# ---------------------------------------------------------------------------
# Invariance verification
# ---------------------------------------------------------------------------


@dataclass
class DirectionReport:
    direction_deg: float
    episodes: int
    violations: int
    safety_rate: float
    mean_h_min: float
    filter_active_rate: float
    decay_violations: int
    min_decay_slack: float


def decay_check(logs, eta: float = 0.1, decay_tol: float = 1e-9):
    """Count violations of h(x_{t+1}) >= (1 - eta) h(x_t) - tol on the
    filter barriers along the realized trajectories."""
    worst = float("inf")
    count = 0
    for lg in logs:
        if lg.filter_h is None or lg.filter_h.size == 0:
            continue
        slack = lg.filter_h_next - (1.0 - eta) * lg.filter_h
        worst = min(worst, float(slack.min()))
        count += int((slack < -decay_tol).sum())
    return count, worst


def verify_invariance(
    env: Env,
    policy,
    safety_filter,
    directions_deg,
    episodes: int,
    steps: int,
    rng: np.random.Generator,
    latent_source: str = "zero",
    model=None,
    module=None,
    noise_scale: float = 0.0,
    decay_tol: float = 1e-9,
) -> list[DirectionReport]:
    """Sweep fixed disturbance directions; report safety and decay stats."""
    from .envs.base import ConfigMode
    from .policy import rollout

    reports = []
    for deg in directions_deg:
        logs = rollout(
            env,
            policy,
            episodes,
            steps,
            rng,
            config_mode=ConfigMode("fixed", angle=float(deg) * np.pi / 180.0),
            latent_source=latent_source,
            model=model,
            module=module,
            safety_filter=safety_filter,
            noise_scale=noise_scale,
        )
        violations = sum(lg.violation for lg in logs)
        h_mins = np.concatenate([lg.h_min for lg in logs]) if logs else np.array([0.0])
        active = np.concatenate([lg.filter_status for lg in logs]) if logs else np.array([0])
        d_count, d_worst = decay_check(logs, getattr(env, "eta", 0.1), decay_tol)
        reports.append(
            DirectionReport(
                direction_deg=float(deg),
                episodes=episodes,
                violations=violations,
                safety_rate=1.0 - violations / max(episodes, 1),
                mean_h_min=float(h_mins.mean()),
                filter_active_rate=float(np.mean(active > 0)),
                decay_violations=d_count,
                min_decay_slack=d_worst,
            )
        )
    return reports
