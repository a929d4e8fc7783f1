"""Command-line harness.

Subcommands map to pipeline stages; all take --config/--seed/--out/--jobs.
Stage outputs are content-addressed under the output directory and reruns
with unchanged inputs are cache hits.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .. import dynlearn as dl
from .. import policy as pol
from ..envs.base import ConfigMode
from .config import load_config, stage_seed
from .pipeline import Pipeline
from .sweeps import MetricsRow, metrics_from_logs, write_csv


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="YAML config file")
    p.add_argument("--seed", type=int, default=None, help="root seed override")
    p.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
    p.add_argument("--jobs", type=int, default=1, help="parallel sweep workers")
    p.add_argument("--env", type=str, default=None, help="environment id override")


def _pipeline(args) -> Pipeline:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.env is not None:
        overrides["env"] = args.env
    cfg = load_config(args.config, overrides)
    return Pipeline(cfg, args.out, jobs=args.jobs)


def cmd_collect(args):
    pipe = _pipeline(args)
    path = pipe.dataset("adaptive", args.mode)
    print(f"dataset: {path}")


def cmd_train_dyn(args):
    pipe = _pipeline(args)
    data = pipe.dataset("adaptive", "per_step")
    paths = pipe.dyn_model("adaptive", data, blind=args.blind)
    report = json.loads(Path(paths["report.json"]).read_text())
    print(f"model: {paths['model.ckpt']}")
    print(f"holdout mse: {report['final_holdout_mse']:.3e}")


def cmd_train_policy(args):
    pipe = _pipeline(args)
    cfg = pipe.cfg
    rl = cfg["policy"]["rl"]
    art = pipe.ensure_method("adaptive")
    model = dl.DynModel.load(art.model_path)
    rng = np.random.default_rng(stage_seed(pipe.seed, "train-policy"))
    policy = pol.make_neural_policy(
        pipe.env, rng, latent_dim=model.latent_dim, hidden=tuple(cfg["policy"]["hidden"])
    )
    hyper = pol.RlHyper(
        discount=rl["discount"],
        steps_per_update=rl["steps_per_update"],
        total_steps=rl["total_steps"],
        horizon=rl["horizon"],
        learning_rate=rl["learning_rate"],
        entropy_weight=rl["entropy_weight"],
        safety_penalty=rl["safety_penalty"],
    )
    policy, report = pol.train_pg(pipe.env, policy, model, hyper, rng)
    out = Path(args.out) / "policy.ckpt"
    policy.save(out, meta={"env": cfg["env"], "safety_penalty": rl["safety_penalty"]})
    print(f"policy: {out}")
    tail = report.mean_returns[-max(1, len(report.mean_returns) // 10) :]
    print(f"mean return (last 10% of updates): {float(np.mean(tail)):.2f}")


def cmd_train_adapt(args):
    pipe = _pipeline(args)
    data = pipe.dataset("adaptive", "per_step")
    dyn = pipe.dyn_model("adaptive", data)
    paths = pipe.adapt_module("adaptive", dyn["model.ckpt"], "per_episode")
    report = json.loads(Path(paths["report.json"]).read_text())
    print(f"module: {paths['module.ckpt']}")
    print(f"holdout latent mse: {report['final_holdout_mse']:.3e} "
          f"(target variance {report['target_variance']:.3e})")


def cmd_finetune(args):
    pipe = _pipeline(args)
    paths = pipe.finetune()
    report = json.loads(Path(paths["report.json"]).read_text())
    print(f"tuned model: {paths['model_tuned.ckpt']}")
    print(f"one-step error untuned/tuned: {report['improvement_ratio']:.2f}x "
          f"({report['error_before']:.4g} -> {report['error_after']:.4g})")


def cmd_margin(args):
    pipe = _pipeline(args)
    art = pipe.ensure_method(args.method)
    report = json.loads(Path(art.margin_path).read_text())
    print(json.dumps(report, indent=2))


def cmd_eval(args):
    pipe = _pipeline(args)
    art = pipe.ensure_method(args.method)
    policy_kind = pipe.cfg["policy"]["kind"]
    if policy_kind not in ("random", "analytic"):
        policy_kind = "random"
    policy, filt, model, module = pipe.build_runtime(art, policy_kind)
    rng = np.random.default_rng(stage_seed(pipe.seed, f"eval:{args.method}:{args.direction}"))
    latent = "adaptation_module" if (filt is not None and policy_kind == "analytic") else "zero"
    logs = pol.rollout(
        pipe.env, policy, args.episodes, args.steps, rng,
        config_mode=ConfigMode("fixed", angle=args.direction * np.pi / 180.0),
        latent_source=latent, model=model, module=module,
        safety_filter=filt if art.filtered else None,
        noise_scale=pipe.cfg["sweep"]["noise"],
    )
    out = Path(args.out) / f"eval_{args.method}_{int(args.direction)}.epis"
    pol.save_episodes(out, logs)
    row = metrics_from_logs(args.method, args.direction, logs)
    write_csv(Path(args.out) / f"eval_{args.method}_{int(args.direction)}.csv",
              MetricsRow.HEADER, [row.as_row()])
    print(f"episodes: {out}")
    print(f"safety_rate={row.safety_rate:.3f} success_rate={row.success_rate:.3f} "
          f"mean_return={row.mean_return:.2f}")


def cmd_sweep(args):
    pipe = _pipeline(args)
    paths = pipe.directional_sweep()
    print(f"metrics: {paths['metrics.csv']}")
    print(f"polar:   {paths['polar.csv']}")


def cmd_heatmap(args):
    pipe = _pipeline(args)
    paths = pipe.heatmap()
    print(f"correlations: {paths['correlations.csv']}")


def cmd_report(args):
    pipe = _pipeline(args)
    paths = pipe.finetune_report()
    print(f"errors:    {paths['errors.csv']}")
    print(f"open loop: {paths['open_loop.csv']}")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="safeadapt",
        description="Adaptive safe control benchmark harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("collect", help="collect a random-walk transition dataset")
    p.add_argument("--mode", default="per_step",
                   help="configuration mode: per_step, per_episode, or fixNN (degrees)")
    p.set_defaults(fn=cmd_collect)

    p = sub.add_parser("train-dyn", help="train encoder and dynamics heads")
    p.add_argument("--blind", action="store_true", help="zero the encoder input")
    p.set_defaults(fn=cmd_train_dyn)

    p = sub.add_parser("train-policy", help="train the neural policy (REINFORCE)")
    p.set_defaults(fn=cmd_train_policy)

    p = sub.add_parser("train-adapt", help="train the history-to-latent module")
    p.set_defaults(fn=cmd_train_adapt)

    p = sub.add_parser("finetune", help="few-shot fine-tuning on deployment data")
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("margin", help="estimate error bounds and the robust margin")
    p.add_argument("--method", default="adaptive")
    p.set_defaults(fn=cmd_margin)

    p = sub.add_parser("eval", help="roll out one method at a fixed direction")
    p.add_argument("--method", default="adaptive")
    p.add_argument("--direction", type=float, default=90.0)
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--steps", type=int, default=500)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="directional safety sweep over all methods")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("heatmap", help="barrier-difference heat maps over the action grid")
    p.set_defaults(fn=cmd_heatmap)

    p = sub.add_parser("report", help="fine-tuning precision and open-loop replay report")
    p.set_defaults(fn=cmd_report)

    for name, sp in sub.choices.items():
        _add_common(sp)

    args = parser.parse_args(argv)
    args.fn(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
