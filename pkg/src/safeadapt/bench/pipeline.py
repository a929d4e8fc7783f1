"""Pipeline orchestration with content-addressed stage caching.

Every stage writes into ``out/<stage>/<key>/`` where the key hashes the
stage's configuration subset and the content hashes of its inputs; a
completed stage is skipped on rerun. Because training and evaluation are
deterministic given the config and seed, a deleted intermediate artifact
is rebuilt bit-identically and downstream stages still cache-hit.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import adapt as ad_mod
from .. import dynlearn as dl
from .. import policy as pol
from .. import safeguard as sg
from ..envs import make_env
from ..envs.base import ConfigMode
from .config import config_hash, stage_seed
from .sweeps import (
    MetricsRow,
    action_grid,
    delta_h_grid,
    heatmap_warmup,
    metrics_from_logs,
    open_loop_predict,
    pearson,
    save_heatmap_csv,
    write_csv,
)


# salted into every stage key so cached artifacts are invalidated when
# the algorithms change
PIPELINE_VERSION = "2"


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


@dataclass
class MethodArtifacts:
    label: str
    model_path: Path | None = None
    module_path: Path | None = None
    margin_path: Path | None = None
    dataset_path: Path | None = None
    filtered: bool = True

    def load(self):
        model = dl.DynModel.load(self.model_path) if self.model_path else None
        module = ad_mod.AdaptModule.load(self.module_path) if self.module_path else None
        margin = json.loads(Path(self.margin_path).read_text()) if self.margin_path else None
        return model, module, margin


class Pipeline:
    """Stage runner for one experiment configuration."""

    def __init__(self, cfg: dict, out_dir, jobs: int = 1):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.jobs = max(1, int(jobs))
        self.env = make_env(cfg["env"], **cfg.get("env_overrides", {}))
        self.seed = int(cfg["seed"])
        self.manifest_path = self.out / "manifest.json"
        self.manifest = (
            json.loads(self.manifest_path.read_text()) if self.manifest_path.exists() else {}
        )

    # --- caching core ---------------------------------------------------

    def _stage(self, name: str, cfg_subset, inputs: list, outputs: list, builder):
        """Run ``builder(stage_dir)`` unless the keyed outputs already exist."""
        input_hashes = []
        for p in inputs:
            if not Path(p).exists():
                raise FileNotFoundError(
                    f"stage {name!r} is missing its input {p}; rerun the producing stage"
                )
            input_hashes.append(file_hash(p))
        key = config_hash(
            {"v": PIPELINE_VERSION, "stage": name, "cfg": cfg_subset, "inputs": input_hashes}
        )
        stage_dir = self.out / name / key
        marker = stage_dir / ".complete"
        paths = {o: stage_dir / o for o in outputs}
        cached = marker.exists() and all(p.exists() for p in paths.values())
        if not cached:
            stage_dir.mkdir(parents=True, exist_ok=True)
            builder(stage_dir)
            missing = [o for o, p in paths.items() if not p.exists()]
            if missing:
                raise RuntimeError(f"stage {name!r} did not produce {missing}")
            marker.write_text("ok\n")
        self.manifest[f"{name}/{key}"] = {
            "stage": name,
            "cached": bool(cached),
            "inputs": input_hashes,
            "outputs": {o: file_hash(p) for o, p in paths.items()},
        }
        self.manifest_path.write_text(json.dumps(self.manifest, indent=2, sort_keys=True))
        return paths

    def _rng(self, tag: str) -> np.random.Generator:
        return np.random.default_rng(stage_seed(self.seed, tag))

    # --- stages -----------------------------------------------------------

    def _mode_from_tag(self, tag: str) -> ConfigMode:
        if tag == "per_step":
            return ConfigMode("per_step")
        if tag == "per_episode":
            return ConfigMode("per_episode")
        if tag.startswith("fix"):
            return ConfigMode("fixed", angle=float(tag[3:]) * np.pi / 180.0)
        raise ValueError(f"unknown configuration tag {tag!r}")

    def dataset(self, tag: str, mode_tag: str, num_steps: int | None = None) -> Path:
        dcfg = self.cfg["dyn"]
        steps = int(num_steps if num_steps is not None else dcfg["num_steps"])
        subset = {
            "env": self.cfg["env"],
            "env_overrides": self.cfg.get("env_overrides", {}),
            "seed": self.seed,
            "tag": tag,
            "mode": mode_tag,
            "num_steps": steps,
            "horizon": dcfg["horizon"],
            "chains": dcfg["chains"],
        }

        def build(d: Path):
            rng = self._rng(f"collect:{tag}")
            data = dl.collect_random(
                self.env,
                steps,
                rng,
                config_mode=self._mode_from_tag(mode_tag),
                horizon=dcfg["horizon"],
                chains=dcfg["chains"],
                seed_label=self.seed,
            )
            data.save(d / "data.trans")

        return self._stage(f"collect-{tag}", subset, [], ["data.trans"], build)["data.trans"]

    def dyn_model(self, tag: str, dataset_path: Path, blind: bool = False,
                  epochs: int | None = None) -> dict:
        dcfg = self.cfg["dyn"]
        subset = {
            "tag": tag,
            "blind": blind,
            "latent_dim": dcfg["latent_dim"],
            "encoder_hidden": dcfg["encoder_hidden"],
            "head_hidden": dcfg["head_hidden"],
            "epochs": int(epochs if epochs is not None else dcfg["epochs"]),
            "batch_size": dcfg["batch_size"],
            "learning_rate": dcfg["learning_rate"],
            "weight_decay": dcfg["weight_decay"],
            "latent_gain_penalty": dcfg["latent_gain_penalty"],
            "holdout_frac": dcfg["holdout_frac"],
            "seed": self.seed,
        }

        def build(d: Path):
            rng = self._rng(f"dyn:{tag}")
            data = dl.TransitionDataset.load(dataset_path)
            model = dl.make_dyn_model(
                self.env,
                rng,
                latent_dim=dcfg["latent_dim"],
                encoder_hidden=tuple(dcfg["encoder_hidden"]),
                head_hidden=tuple(dcfg["head_hidden"]),
                blind=blind,
            )
            train_cfg = dl.DynTrainConfig(
                epochs=subset["epochs"],
                batch_size=dcfg["batch_size"],
                learning_rate=dcfg["learning_rate"],
                weight_decay=dcfg["weight_decay"],
                latent_gain_penalty=dcfg["latent_gain_penalty"],
                holdout_frac=dcfg["holdout_frac"],
            )
            model, report = dl.train_dyn(data, model, train_cfg, rng)
            model.save(d / "model.ckpt")
            data.subset(report.holdout_idx).save(d / "holdout.trans")
            ev = dl.eval_dyn(model, data.subset(report.holdout_idx))
            (d / "report.json").write_text(
                json.dumps(
                    {
                        "train_loss": report.train_loss,
                        "holdout_mse": report.holdout_mse,
                        "final_holdout_mse": report.final_holdout_mse,
                        "per_dim_rmse": ev.per_dim_rmse.tolist(),
                        "residual_l1_max": ev.residual_l1_max,
                        "residual_l1_q99": ev.residual_l1_q99,
                    },
                    indent=2,
                )
            )

        return self._stage(
            f"dyn-{tag}", subset, [dataset_path],
            ["model.ckpt", "holdout.trans", "report.json"], build,
        )

    def adapt_module(self, tag: str, model_path: Path, mode_tag: str,
                     episodes: int | None = None, dataset_path: Path | None = None) -> dict:
        acfg = self.cfg["adapt"]
        eps = int(episodes if episodes is not None else acfg["episodes"])
        subset = {
            "tag": tag,
            "mode": mode_tag,
            "episodes": eps,
            "steps": acfg["steps"],
            "k": acfg["k"],
            "stride": acfg.get("stride", 1),
            "epochs": acfg["epochs"],
            "batch_size": acfg["batch_size"],
            "learning_rate": acfg["learning_rate"],
            "weight_decay": acfg["weight_decay"],
            "holdout_frac": acfg["holdout_frac"],
            "rounds": acfg["rounds"],
            "policy": acfg["policy"],
            "noise": acfg["noise"],
            "conv_layers": acfg["conv_layers"],
            "head_dims": acfg["head_dims"],
            "seed": self.seed,
        }

        def build(d: Path):
            rng = self._rng(f"adapt:{tag}")
            model = dl.DynModel.load(model_path)
            policy = self._collection_policy(acfg["policy"], model, dataset_path=dataset_path)
            mode = self._mode_from_tag(mode_tag)
            train_cfg = ad_mod.AdaptTrainConfig(
                epochs=acfg["epochs"],
                batch_size=acfg["batch_size"],
                learning_rate=acfg["learning_rate"],
                weight_decay=acfg["weight_decay"],
                holdout_frac=acfg["holdout_frac"],
                conv_layers=tuple(tuple(c) for c in acfg["conv_layers"]),
                head_dims=tuple(acfg["head_dims"]),
            )
            module = None
            chunks = []
            rounds = max(1, int(acfg["rounds"]))
            per_round = max(1, eps // rounds)
            for r in range(rounds):
                source = "oracle" if module is None else "adaptation_module"
                chunk = ad_mod.collect_adapt(
                    self.env, policy, model, per_round, acfg["steps"], rng,
                    k=acfg["k"], latent_source=source, module=module,
                    noise_scale=acfg["noise"], config_mode=mode, seed_label=self.seed,
                    sample_stride=acfg.get("stride", 1),
                )
                chunks.append(chunk)
                data = _concat_adapt(chunks)
                module, report = ad_mod.train_adapt(data, self.env, train_cfg, rng)
            module.save(d / "module.ckpt")
            data.subset(report.holdout_idx).save(d / "holdout.adapt")
            (d / "report.json").write_text(
                json.dumps(
                    {
                        "final_holdout_mse": report.final_holdout_mse,
                        "target_variance": report.target_variance,
                        "samples": len(data),
                    },
                    indent=2,
                )
            )

        return self._stage(
            f"adapt-{tag}", subset, [model_path],
            ["module.ckpt", "holdout.adapt", "report.json"], build,
        )

    def margin(self, tag: str, model_path: Path, module_path: Path,
               dyn_holdout: Path, adapt_holdout: Path) -> Path:
        mcfg = self.cfg["margin"]
        subset = {"tag": tag, **{k: mcfg[k] for k in ("quantile", "mode", "lipschitz_samples")},
                  "seed": self.seed}

        def build(d: Path):
            model = dl.DynModel.load(model_path)
            module = ad_mod.AdaptModule.load(module_path)
            bounds, margin = sg.estimate_margin(
                model,
                module,
                dl.TransitionDataset.load(dyn_holdout),
                ad_mod.AdaptSampleSet.load(adapt_holdout),
                env=self.env,
                quantile=mcfg["quantile"],
                mode=mcfg["mode"],
                rng=self._rng(f"margin:{tag}"),
                lipschitz_samples=mcfg["lipschitz_samples"],
            )
            (d / "margin.json").write_text(
                json.dumps({"bounds": bounds.__dict__, "eps": margin.eps,
                            "delta1": margin.delta1, "delta2": margin.delta2}, indent=2)
            )

        return self._stage(
            f"margin-{tag}", subset,
            [model_path, module_path, dyn_holdout, adapt_holdout],
            ["margin.json"], build,
        )["margin.json"]

    # --- method bundles ---------------------------------------------------

    def ensure_method(self, label: str) -> MethodArtifacts:
        """Train (or cache-hit) everything one method needs."""
        bcfg = self.cfg["baselines"]
        if label == "nofilter":
            return MethodArtifacts(label, filtered=False)
        if label == "adaptive":
            data = self.dataset("adaptive", "per_step")
            dyn = self.dyn_model("adaptive", data, blind=False)
            ada = self.adapt_module("adaptive", dyn["model.ckpt"], "per_episode",
                                    dataset_path=data)
        elif label == "mix":
            data = self.dataset("adaptive", "per_step")
            dyn = self.dyn_model("mix", data, blind=True, epochs=bcfg["epochs"])
            ada = self.adapt_module(
                "mix", dyn["model.ckpt"], "per_episode", episodes=bcfg["adapt_episodes"],
                dataset_path=data,
            )
        elif label.startswith("fix"):
            angle = int(label[3:])
            if angle not in bcfg["fix_angles"]:
                raise ValueError(f"direction {angle} not in baselines.fix_angles")
            data = self.dataset(label, label, num_steps=bcfg["num_steps"])
            dyn = self.dyn_model(label, data, blind=False, epochs=bcfg["epochs"])
            ada = self.adapt_module(
                label, dyn["model.ckpt"], label, episodes=bcfg["adapt_episodes"],
                dataset_path=data,
            )
        else:
            raise ValueError(f"unknown method {label!r}")
        margin = self.margin(
            label, dyn["model.ckpt"], ada["module.ckpt"],
            dyn["holdout.trans"], ada["holdout.adapt"],
        )
        return MethodArtifacts(
            label,
            model_path=dyn["model.ckpt"],
            module_path=ada["module.ckpt"],
            margin_path=margin,
            dataset_path=data,
        )

    def _collection_policy(self, kind: str, model, dataset_path=None):
        if kind == "random":
            return pol.RandomPolicy(self.env.action_space)
        if kind == "analytic":
            decoder = None
            if model is not None and dataset_path is not None:
                data = dl.TransitionDataset.load(dataset_path)
                decoder = dl.fit_latent_decoder(model, data.e[:5000])
            return self._analytic_policy(decoder)
        raise ValueError(f"unknown collection policy {kind!r}")

    def _analytic_policy(self, decoder):
        if self.env.env_id.startswith("pendulum"):
            return pol.AnalyticPendulumPolicy(self.env, decoder)
        if self.env.env_id == "planar":
            return pol.AnalyticNavPolicy(self.env, decoder)
        return pol.AnalyticCarPolicy(self.env)

    def build_runtime(self, method: MethodArtifacts, policy_kind: str):
        """(policy, filter, model, module) ready for rollouts."""
        model = module = filt = None
        decoder = None
        if method.model_path is not None:
            model = dl.DynModel.load(method.model_path)
            module = ad_mod.AdaptModule.load(method.module_path)
            margin = json.loads(Path(method.margin_path).read_text())
            filt = sg.SafetyFilter(
                self.env,
                dynamics="learned",
                model=model,
                module=module,
                margin=margin["eps"],
                latent_source="adaptation_module",
                coldstart_factor=self.cfg["margin"]["coldstart_factor"],
            )
            if policy_kind == "analytic" and method.dataset_path is not None:
                data = dl.TransitionDataset.load(method.dataset_path)
                decoder = dl.fit_latent_decoder(model, data.e[:5000])
        if policy_kind == "random":
            policy = pol.RandomPolicy(self.env.action_space)
        elif policy_kind == "analytic":
            policy = self._analytic_policy(decoder)
        else:
            raise ValueError(f"unknown rollout policy {policy_kind!r}")
        return policy, filt, model, module

    # --- evaluation stages --------------------------------------------------

    def directional_sweep(self, methods=None) -> dict:
        scfg = self.cfg["sweep"]
        methods = list(methods if methods is not None else scfg["methods"])
        directions = [float(v) for v in scfg["directions"]]
        policy_kind = self.cfg["policy"]["kind"]
        if policy_kind not in ("random", "analytic"):
            policy_kind = "random"
        arts = {label: self.ensure_method(label) for label in methods}
        inputs = []
        for art in arts.values():
            for p in (art.model_path, art.module_path, art.margin_path):
                if p is not None:
                    inputs.append(p)
        subset = {
            "methods": methods,
            "directions": directions,
            "episodes": scfg["episodes"],
            "steps": scfg["steps"],
            "noise": scfg["noise"],
            "policy": policy_kind,
            "seed": self.seed,
        }

        def build(d: Path):
            cells = [(label, deg) for label in methods for deg in directions]

            def run_cell(cell):
                label, deg = cell
                policy, filt, model, module = self.build_runtime(arts[label], policy_kind)
                rng = self._rng(f"sweep:{label}:{deg}")
                latent = "adaptation_module" if (filt is not None and policy_kind == "analytic") else "zero"
                if label == "nofilter" and policy_kind == "analytic":
                    base = self.ensure_method("adaptive")
                    model = dl.DynModel.load(base.model_path)
                    module = ad_mod.AdaptModule.load(base.module_path)
                    latent = "adaptation_module"
                    data = dl.TransitionDataset.load(base.dataset_path)
                    decoder = dl.fit_latent_decoder(model, data.e[:5000])
                    policy = self._analytic_policy(decoder)
                logs = pol.rollout(
                    self.env, policy, scfg["episodes"], scfg["steps"], rng,
                    config_mode=ConfigMode("fixed", angle=deg * np.pi / 180.0),
                    latent_source=latent, model=model, module=module,
                    safety_filter=filt, noise_scale=scfg["noise"],
                )
                return metrics_from_logs(label, deg, logs)

            if self.jobs > 1:
                with ThreadPoolExecutor(max_workers=self.jobs) as ex:
                    rows = list(ex.map(run_cell, cells))
            else:
                rows = [run_cell(c) for c in cells]
            write_csv(d / "metrics.csv", MetricsRow.HEADER, [r.as_row() for r in rows])
            polar = [
                (r.method, r.direction_deg, r.safety_rate, r.success_rate) for r in rows
            ]
            write_csv(d / "polar.csv", ("method", "direction_deg", "safety_rate", "success_rate"), polar)

        paths = self._stage("sweep", subset, inputs, ["metrics.csv", "polar.csv"], build)
        return paths

    def heatmap(self) -> dict:
        hcfg = self.cfg["heatmap"]
        methods = list(hcfg["methods"])
        arts = {label: self.ensure_method(label) for label in methods}
        inputs = [p for a in arts.values() for p in (a.model_path, a.module_path) if p]
        probe = hcfg["probe_state"]
        if probe is None:
            probe = _default_probe(self.env)
        subset = {
            "direction": hcfg["direction"],
            "grid": hcfg["grid"],
            "methods": methods,
            "probe": list(probe),
            "seed": self.seed,
        }

        def build(d: Path):
            if self.env.m != 2:
                raise ValueError("heatmaps need a 2-D action space")
            rng = self._rng("heatmap")
            k = self.cfg["adapt"]["k"]
            direction = float(hcfg["direction"]) * np.pi / 180.0
            buf, x_eval, e = heatmap_warmup(self.env, probe, direction, k, rng)
            ax0, ax1, actions = action_grid(self.env, int(hcfg["grid"]))
            f_true, g_true = self.env.true_f_g_batch(x_eval, e)
            grids = {"oracle": delta_h_grid(self.env, x_eval, actions, f_true, g_true)}
            for label in methods:
                model, module, _ = arts[label].load()
                z = module.infer_window(buf)
                f_hat, g_hat = model.predict(x_eval, z)
                grids[label] = delta_h_grid(self.env, x_eval, actions, f_hat, g_hat)
            corr_rows = []
            for label, grid in grids.items():
                save_heatmap_csv(d / f"heatmap_{label}.csv", ax0, ax1, grid)
                corr_rows.append((label, pearson(grid, grids["oracle"])))
            write_csv(d / "correlations.csv", ("method", "pearson_vs_oracle"), corr_rows)

        outputs = ["correlations.csv", "heatmap_oracle.csv"] + [
            f"heatmap_{m}.csv" for m in methods
        ]
        return self._stage("heatmap", subset, inputs, outputs, build)

    # --- fine-tuning family ---------------------------------------------------

    def real_dataset(self) -> Path:
        fcfg = self.cfg["finetune"]
        n_real = max(1, int(round(fcfg["real_fraction"] * self.cfg["dyn"]["num_steps"])))
        subset = {
            "n_real": n_real,
            "speeds": fcfg["circle_speeds"],
            "steers": fcfg["circle_steers"],
            "seed": self.seed,
        }

        def build(d: Path):
            real = collect_scripted_circles(
                self.cfg, n_real, self._rng("real-data")
            )
            real.save(d / "real.real")

        return self._stage("real-data", subset, [], ["real.real"], build)["real.real"]

    def finetune(self) -> dict:
        fcfg = self.cfg["finetune"]
        art = self.ensure_method("adaptive")
        real_path = self.real_dataset()
        subset = {
            "epochs": fcfg["epochs"],
            "batch_size": fcfg["batch_size"],
            "learning_rate": fcfg["learning_rate"],
            "holdout_frac": fcfg["holdout_frac"],
            "patience": fcfg["patience"],
            "seed": self.seed,
        }

        def build(d: Path):
            model = dl.DynModel.load(art.model_path)
            module = ad_mod.AdaptModule.load(art.module_path)
            real = ad_mod.RealDataset.load(real_path)
            cfg = ad_mod.TuneConfig(
                epochs=fcfg["epochs"],
                batch_size=fcfg["batch_size"],
                learning_rate=fcfg["learning_rate"],
                holdout_frac=fcfg["holdout_frac"],
                patience=fcfg["patience"],
            )
            tuned_model, tuned_module, report = ad_mod.finetune(
                model, module, real, cfg, self._rng("finetune")
            )
            tuned_model.save(d / "model_tuned.ckpt")
            tuned_module.save(d / "module_tuned.ckpt")
            (d / "report.json").write_text(
                json.dumps(
                    {
                        "error_before": report.error_before,
                        "error_after": report.error_after,
                        "improvement_ratio": report.improvement_ratio,
                        "epochs_ran": report.epochs_ran,
                        "real_transitions": real.num_transitions(),
                    },
                    indent=2,
                )
            )

        return self._stage(
            "finetune", subset, [art.model_path, art.module_path, real_path],
            ["model_tuned.ckpt", "module_tuned.ckpt", "report.json"], build,
        )

    def finetune_report(self) -> dict:
        fcfg = self.cfg["finetune"]
        art = self.ensure_method("adaptive")
        tuned = self.finetune()
        real_path = self.real_dataset()
        subset = {"warm_steps": fcfg["warm_steps"], "seed": self.seed}

        def build(d: Path):
            model_u = dl.DynModel.load(art.model_path)
            module_u = ad_mod.AdaptModule.load(art.module_path)
            model_t = dl.DynModel.load(tuned["model_tuned.ckpt"])
            module_t = ad_mod.AdaptModule.load(tuned["module_tuned.ckpt"])
            report = json.loads(Path(tuned["report.json"]).read_text())
            # an unseen scripted trajectory for the open-loop comparison
            eval_real = collect_scripted_circles(
                self.cfg, 200, self._rng("real-eval"), speeds=[1.0], steers=[0.25]
            )
            x_traj, a_traj = eval_real.trajectories[0]
            warm = int(fcfg["warm_steps"])
            pred_u = open_loop_predict(model_u, module_u, x_traj, a_traj, warm)
            pred_t = open_loop_predict(model_t, module_t, x_traj, a_traj, warm)
            true_traj = x_traj[warm:]
            term_err_u = float(np.linalg.norm(pred_u[-1, :2] - true_traj[-1, :2]))
            term_err_t = float(np.linalg.norm(pred_t[-1, :2] - true_traj[-1, :2]))
            rows = []
            for t in range(len(true_traj)):
                rows.append(
                    (
                        t,
                        float(true_traj[t, 0]),
                        float(true_traj[t, 1]),
                        float(pred_u[t, 0]),
                        float(pred_u[t, 1]),
                        float(pred_t[t, 0]),
                        float(pred_t[t, 1]),
                    )
                )
            write_csv(
                d / "open_loop.csv",
                ("t", "true_x", "true_y", "untuned_x", "untuned_y", "tuned_x", "tuned_y"),
                rows,
            )
            write_csv(
                d / "errors.csv",
                ("quantity", "untuned", "tuned", "ratio"),
                [
                    (
                        "one_step_rms",
                        report["error_before"],
                        report["error_after"],
                        report["improvement_ratio"],
                    ),
                    (
                        "open_loop_terminal",
                        term_err_u,
                        term_err_t,
                        term_err_u / max(term_err_t, 1e-300),
                    ),
                ],
            )

        return self._stage(
            "report", subset,
            [art.model_path, tuned["model_tuned.ckpt"], real_path],
            ["open_loop.csv", "errors.csv"], build,
        )

    def run_all(self) -> dict:
        """Execute the stages this environment family supports."""
        results = {}
        if self.env.env_id.startswith("car"):
            results["finetune"] = {k: str(v) for k, v in self.finetune().items()}
            results["report"] = {k: str(v) for k, v in self.finetune_report().items()}
        else:
            results["sweep"] = {k: str(v) for k, v in self.directional_sweep().items()}
            if self.env.m == 2:
                results["heatmap"] = {k: str(v) for k, v in self.heatmap().items()}
        return results


def _concat_adapt(chunks):
    import numpy as _np

    keep = [c for c in chunks if len(c) > 0]
    if not keep:
        raise ValueError("no adaptation samples collected")
    return ad_mod.AdaptSampleSet(
        keep[0].env_id,
        _np.concatenate([c.win_x for c in keep]),
        _np.concatenate([c.win_a for c in keep]),
        _np.concatenate([c.z for c in keep]),
        keep[0].seed,
    )


def _default_probe(env) -> list:
    if env.env_id == "planar":
        return [-1.05, -0.25, 0.55, 0.18]
    if env.env_id.startswith("car"):
        return [0.2, -0.1, 0.0, 1.0]
    raise ValueError(f"no default heatmap probe for {env.env_id}")


def collect_scripted_circles(cfg, n_transitions: int, rng, speeds=None, steers=None):
    """Hard-coded circle commands on the deployment-variant car, no drag."""
    from ..envs import make_env as _make

    fcfg = cfg["finetune"]
    speeds = speeds if speeds is not None else fcfg["circle_speeds"]
    steers = steers if steers is not None else fcfg["circle_steers"]
    env_id = cfg["env"]
    real_id = "car-real" if env_id.startswith("car") else env_id
    env = _make(real_id, **cfg.get("env_overrides", {}))
    commands = [(s, st) for s in speeds for st in steers]
    k = cfg["adapt"]["k"]
    n_traj = max(1, min(len(commands), n_transitions // (k + 2)))
    per_traj = max(k + 2, n_transitions // n_traj)
    trajs = []
    for speed, steer in commands[:n_traj]:
        policy = pol.ScriptedCirclePolicy(env.action_space, speed, steer)
        x = env.reset_batch(rng, 1)
        xs = [x[0].copy()]
        acts = []
        for _ in range(per_traj):
            a = policy.act_batch(x, None, rng)
            x = env.step_batch(x, a, np.zeros((1, env.k)))
            xs.append(x[0].copy())
            acts.append(a[0].copy())
        trajs.append((np.asarray(xs), np.asarray(acts)))
    return ad_mod.RealDataset(real_id, trajs, source="scripted circles")
