"""Pipeline configuration: a single YAML file with env-var interpolation.

Stage keys mirror the subcommand names. Unknown keys are rejected so typos
fail loudly, and the stage list must follow the fixed dependency chain.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import yaml

STAGE_CHAIN = ("ingest", "normalize", "rule-filter", "perplexity", "dedup", "pack", "mix")

_KNOWN_KEYS = {
    "workspace", "seed", "workers", "stages",
    "ingest", "normalize", "rule-filter", "perplexity", "dedup", "pack", "mix",
    "eval", "instruct", "prefs", "clients",
}

WORKSPACE_ENV = "LEXCORPUS_WORKSPACE"


class ConfigError(Exception):
    """The pipeline configuration is invalid."""


_ENV_RE = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)(?::-([^}]*))?\}")


def interpolate_env(value):
    """Expand ${VAR} and ${VAR:-default} in strings, recursively."""
    if isinstance(value, str):
        def sub(m):
            var, default = m.group(1), m.group(2)
            if var in os.environ:
                return os.environ[var]
            if default is not None:
                return default
            raise ConfigError(f"environment variable {var} is not set "
                              f"and has no default")
        return _ENV_RE.sub(sub, value)
    if isinstance(value, dict):
        return {k: interpolate_env(v) for k, v in value.items()}
    if isinstance(value, list):
        return [interpolate_env(v) for v in value]
    return value


@dataclass
class PipelineConfig:
    workspace: Path
    seed: int = 0
    workers: int = 1
    stages: List[str] = field(default_factory=lambda: list(STAGE_CHAIN))
    stage_configs: Dict[str, dict] = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    instruct: dict = field(default_factory=dict)
    prefs: dict = field(default_factory=dict)
    clients: dict = field(default_factory=dict)

    def stage_config(self, stage: str) -> dict:
        return self.stage_configs.get(stage, {})


def _validate_stage_order(stages: List[str]) -> None:
    for stage in stages:
        if stage not in STAGE_CHAIN:
            raise ConfigError(f"unknown stage {stage!r}")
    if len(set(stages)) != len(stages):
        raise ConfigError("stages listed more than once")
    positions = [STAGE_CHAIN.index(s) for s in stages]
    for a, b in zip(positions, positions[1:]):
        if b <= a:
            raise ConfigError(f"stage {stages[positions.index(b)]!r} cannot run "
                              f"after {stages[positions.index(a)]!r}: the chain is "
                              + " -> ".join(STAGE_CHAIN))


def load_config(path, *, seed: Optional[int] = None,
                workers: Optional[int] = None) -> PipelineConfig:
    """Load and validate a pipeline config; CLI flags override file values."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot load config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    raw = interpolate_env(raw)

    unknown = set(raw) - _KNOWN_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    stages = list(raw.get("stages", STAGE_CHAIN))
    _validate_stage_order(stages)

    workspace = os.environ.get(WORKSPACE_ENV) or raw.get("workspace")
    if not workspace:
        raise ConfigError(f"no workspace configured (set 'workspace' or ${WORKSPACE_ENV})")

    return PipelineConfig(
        workspace=Path(workspace),
        seed=int(seed if seed is not None else raw.get("seed", 0)),
        workers=int(workers if workers is not None else raw.get("workers", 1)),
        stages=stages,
        stage_configs={s: raw.get(s, {}) for s in STAGE_CHAIN},
        eval=raw.get("eval", {}),
        instruct=raw.get("instruct", {}),
        prefs=raw.get("prefs", {}),
        clients=raw.get("clients", {}),
    )
