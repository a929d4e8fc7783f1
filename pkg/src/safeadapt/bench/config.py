"""Experiment configuration: YAML files deep-merged over documented defaults."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import yaml

DEFAULTS = {
    "env": "pendulum",
    "seed": 0,
    "env_overrides": {},
    "dyn": {
        "num_steps": 60000,
        "horizon": 200,
        "chains": 64,
        "latent_dim": 4,
        "encoder_hidden": [64, 64],
        "head_hidden": [64, 64],
        "epochs": 60,
        "batch_size": 256,
        "learning_rate": 1e-3,
        "weight_decay": 1e-5,
        "latent_gain_penalty": 1e-3,
        "holdout_frac": 0.1,
    },
    "adapt": {
        "episodes": 400,
        "steps": 120,
        "k": 20,
        "stride": 1,
        "epochs": 50,
        "batch_size": 256,
        "learning_rate": 1e-3,
        "weight_decay": 1e-5,
        "holdout_frac": 0.1,
        "rounds": 2,
        "policy": "random",
        "noise": 0.0,
        "conv_layers": [[32, 5, 1], [32, 5, 1]],
        "head_dims": [64],
    },
    "baselines": {
        # reduced budgets for the fixed-direction and configuration-blind models
        "num_steps": 30000,
        "epochs": 40,
        "adapt_episodes": 200,
        "fix_angles": [45, 135, 225, 315],
    },
    "margin": {
        "quantile": 1.0,
        "mode": "certified",
        "lipschitz_samples": 20000,
        "coldstart_factor": 2.0,
    },
    "policy": {
        "kind": "random",  # random | analytic | neural
        "hidden": [64, 64],
        "rl": {
            "discount": 0.98,
            "steps_per_update": 4000,
            "total_steps": 200000,
            "horizon": 200,
            "learning_rate": 3e-4,
            "entropy_weight": 1e-3,
            "safety_penalty": 0.0,
        },
    },
    "sweep": {
        "directions": [0, 30, 60, 90, 120, 150, 180, 210, 240, 270, 300, 330],
        "episodes": 50,
        "steps": 500,
        "noise": 0.0,
        "methods": ["adaptive", "fix45", "fix135", "fix225", "fix315", "mix", "nofilter"],
    },
    "heatmap": {
        "direction": 135.0,
        "grid": 41,
        "methods": ["adaptive", "fix315", "mix"],
        "probe_state": None,  # env-specific default when null
        "warmup_policy_noise": 0.0,
    },
    "finetune": {
        "real_fraction": 0.001,
        "epochs": 300,
        "batch_size": 64,
        "learning_rate": 1e-4,
        "holdout_frac": 0.2,
        "patience": 30,
        "circle_speeds": [0.8, 1.2, 1.6],
        "circle_steers": [-0.35, -0.15, 0.15, 0.35],
        "warm_steps": 10,
    },
}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in (override or {}).items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        with open(Path(path)) as fh:
            user = yaml.safe_load(fh) or {}
        if not isinstance(user, dict):
            raise ValueError(f"config root must be a mapping: {path}")
        cfg = _merge(cfg, user)
    if overrides:
        cfg = _merge(cfg, overrides)
    return cfg


def config_hash(obj) -> str:
    """Stable short hash of any JSON-serializable configuration subset."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def stage_seed(root_seed: int, tag: str) -> int:
    """Deterministic per-stage seed derived from the root seed and a tag."""
    digest = hashlib.sha256(f"{root_seed}:{tag}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % (2**63)
