"""Reproducible experiment harness: config, cached pipeline, CLI."""

from .config import DEFAULTS, load_config, stage_seed
from .pipeline import MethodArtifacts, Pipeline

__all__ = ["DEFAULTS", "load_config", "stage_seed", "MethodArtifacts", "Pipeline"]
