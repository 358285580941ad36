"""Structured run configuration.

JSON config files are deep-merged onto the defaults below. Unknown keys are
a hard error listing their dotted paths, so typos never silently fall back
to defaults. Where a published default exists for a training hyperparameter
it is the default here (delta 0.5, IL lr 4e-5 / batch 64, refinement N=8,
gamma 1.3, epsilon 0.05, beta 0.1, lr 1e-5 / batch 256).

All randomness flows from master_seed; the only environment overrides are
STEPROUTE_SEED and STEPROUTE_JOBS.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

from .env import EnvConfig, ScriptedPolicy
from .errors import ConfigError
from .il import ILTrainConfig
from .rl import RLConfig
from .rollout import CostModel
from .router import Architecture

DEFAULTS: dict = {
    "master_seed": 7,
    "jobs": None,  # null = available hardware parallelism
    "tasks": {
        "train_count": 200,
        "eval_count": 100,
    },
    "env": {
        "horizon": 12,
        "action_count": 5,
        "critical_count": 3,
        "critical_steps": None,
        "fork_count": 0,
        "fork_steps": None,
        "marker_observability": 1.0,
        "partial_credit": False,
        "phase_buckets": 6,
        "task_hash_dim": 4,
        "routine_reasoning_mean": 12.0,
        "critical_reasoning_mean": 32.0,
    },
    "policies": {
        "device": {"p_routine_correct": 0.95, "p_critical_correct": 0.2, "spread": 1.0},
        "cloud": {"p_routine_correct": 0.98, "p_critical_correct": 0.98, "spread": 1.0},
    },
    "router": {
        "architecture": "linear",
        "hidden_dim": 16,
        "init_seed": 1,
    },
    "il": {
        "delta": 0.5,
        "lr": 4e-5,
        "batch_size": 64,
        "iterations": 120_000,
        "eval_every": 500,
        "rollouts_per_task": 4,
        "replay_mode": "sample",
        "holdout_fraction": 0.1,
        "pos_weight": 1.0,
        "dedupe": False,
        "select_best": True,
    },
    "rl": {
        "n_rollouts": 8,
        "gamma": 1.3,
        "epsilon": 0.05,
        "beta": 0.1,
        "lr": 1e-5,
        "batch_size": 256,
        "iterations": 15,
        "steps_per_iteration": 8000,
        "eval_every": 2000,
    },
    "cost_model": {
        "cloud_cost_per_call": 0.001,
        "device_latency_per_step": 0.5,
        "cloud_latency_per_step": 2.0,
        "router_latency_per_step": 0.061,
    },
    "eval": {
        "seeds": [101, 102, 103],
        "episodes_per_task": 1,
        "success_threshold": 1.0,
        "random_grid": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
        "threshold_grid": [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
        "entropy_grid": [0.2, 0.8, 1.2, 1.55],
        "include_entropy_baseline": True,
    },
}


def _merge_strict(defaults: dict, overrides: dict, path: str = "") -> tuple[dict, list[str]]:
    merged = copy.deepcopy(defaults)
    unknown: list[str] = []
    for key, value in overrides.items():
        dotted = f"{path}.{key}" if path else key
        if key not in defaults:
            unknown.append(dotted)
            continue
        if isinstance(defaults[key], dict) and isinstance(value, dict):
            merged[key], sub_unknown = _merge_strict(defaults[key], value, dotted)
            unknown.extend(sub_unknown)
        else:
            merged[key] = copy.deepcopy(value)
    return merged, unknown


@dataclass
class Config:
    """Effective configuration (defaults materialized)."""

    raw: dict

    # -- section accessors -------------------------------------------------

    @property
    def master_seed(self) -> int:
        return int(self.raw["master_seed"])

    @property
    def jobs(self) -> int:
        value = self.raw["jobs"]
        if value is None:
            return os.cpu_count() or 1
        return int(value)

    def env_config(self) -> EnvConfig:
        e = self.raw["env"]
        return EnvConfig(
            horizon=e["horizon"],
            action_count=e["action_count"],
            critical_count=e["critical_count"],
            critical_steps=tuple(e["critical_steps"]) if e["critical_steps"] else None,
            fork_count=e["fork_count"],
            fork_steps=tuple(e["fork_steps"]) if e["fork_steps"] else None,
            marker_observability=e["marker_observability"],
            partial_credit=e["partial_credit"],
            phase_buckets=e["phase_buckets"],
            task_hash_dim=e["task_hash_dim"],
            routine_reasoning_mean=e["routine_reasoning_mean"],
            critical_reasoning_mean=e["critical_reasoning_mean"],
        )

    def policy(self, tier: str) -> ScriptedPolicy:
        p = self.raw["policies"][tier]
        return ScriptedPolicy(
            tier=tier,
            p_routine_correct=p["p_routine_correct"],
            p_critical_correct=p["p_critical_correct"],
            spread=p["spread"],
        )

    def architecture(self, input_dim: int) -> Architecture:
        r = self.raw["router"]
        return Architecture(
            kind=r["architecture"],
            input_dim=input_dim,
            hidden_dim=r["hidden_dim"] if r["architecture"] == "mlp" else 0,
        )

    def il_train_config(self) -> ILTrainConfig:
        s = self.raw["il"]
        return ILTrainConfig(
            lr=s["lr"],
            batch_size=s["batch_size"],
            iterations=s["iterations"],
            eval_every=s["eval_every"],
            holdout_fraction=s["holdout_fraction"],
            pos_weight=s["pos_weight"],
            select_best=s["select_best"],
        )

    def rl_config(self) -> RLConfig:
        s = self.raw["rl"]
        return RLConfig(
            n_rollouts=s["n_rollouts"],
            gamma=s["gamma"],
            epsilon=s["epsilon"],
            beta=s["beta"],
            lr=s["lr"],
            batch_size=s["batch_size"],
            iterations=s["iterations"],
            steps_per_iteration=s["steps_per_iteration"],
            eval_every=s["eval_every"],
        )

    def cost_model(self) -> CostModel:
        c = self.raw["cost_model"]
        return CostModel(
            cloud_cost_per_call=c["cloud_cost_per_call"],
            device_latency_per_step=c["device_latency_per_step"],
            cloud_latency_per_step=c["cloud_latency_per_step"],
            router_latency_per_step=c["router_latency_per_step"],
        )

    # -- validation / emission ---------------------------------------------

    def validate(self) -> None:
        self.env_config().validate()
        self.policy("device").validate()
        self.policy("cloud").validate()
        self.cost_model().validate()
        r = self.raw["router"]
        if r["architecture"] not in ("linear", "mlp"):
            raise ConfigError(f"router.architecture must be linear or mlp, got {r['architecture']!r}")
        s = self.raw["il"]
        if s["delta"] < 0:
            raise ConfigError("il.delta must be >= 0")
        if s["rollouts_per_task"] < 1:
            raise ConfigError("il.rollouts_per_task must be >= 1")
        if s["replay_mode"] not in ("sample", "greedy"):
            raise ConfigError("il.replay_mode must be sample or greedy")
        for section, key in (("il", "lr"), ("il", "batch_size"), ("il", "iterations"),
                             ("rl", "lr"), ("rl", "batch_size"), ("rl", "n_rollouts"),
                             ("rl", "gamma"), ("rl", "epsilon"), ("rl", "iterations"),
                             ("rl", "steps_per_iteration")):
            if self.raw[section][key] <= 0:
                raise ConfigError(f"{section}.{key} must be > 0")
        if self.raw["rl"]["beta"] < 0:
            raise ConfigError("rl.beta must be >= 0")
        ev = self.raw["eval"]
        if not ev["seeds"]:
            raise ConfigError("eval.seeds must be non-empty")
        if not 0.0 < ev["success_threshold"] <= 1.0:
            raise ConfigError("eval.success_threshold must be in (0, 1]")
        for p in ev["random_grid"]:
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"eval.random_grid value {p} outside [0,1]")
        for thr in ev["threshold_grid"]:
            if not 0.0 < thr < 1.0:
                raise ConfigError(f"eval.threshold_grid value {thr} outside (0,1)")
        for count_key in ("train_count", "eval_count"):
            if self.raw["tasks"][count_key] < 1:
                raise ConfigError(f"tasks.{count_key} must be >= 1")

    def effective(self) -> dict:
        return copy.deepcopy(self.raw)

    def dumps(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True) + "\n"

    def hash(self) -> str:
        canonical = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def load_config(path: str | Path) -> Config:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        overrides = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON ({exc})") from exc
    if not isinstance(overrides, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return config_from_dict(overrides, source=str(path))


def config_from_dict(overrides: dict, source: str = "<dict>") -> Config:
    merged, unknown = _merge_strict(DEFAULTS, overrides)
    if unknown:
        raise ConfigError(f"{source}: unknown config keys: {', '.join(sorted(unknown))}")
    seed_env = os.environ.get("STEPROUTE_SEED")
    if seed_env is not None:
        try:
            merged["master_seed"] = int(seed_env)
        except ValueError as exc:
            raise ConfigError(f"STEPROUTE_SEED must be an integer, got {seed_env!r}") from exc
    jobs_env = os.environ.get("STEPROUTE_JOBS")
    if jobs_env is not None:
        try:
            merged["jobs"] = int(jobs_env)
        except ValueError as exc:
            raise ConfigError(f"STEPROUTE_JOBS must be an integer, got {jobs_env!r}") from exc
    config = Config(merged)
    config.validate()
    return config


def bundled_config_path(name: str) -> Path:
    path = Path(__file__).parent / "configs" / f"{name}.json"
    if not path.exists():
        raise ConfigError(f"no bundled config named {name!r}")
    return path
