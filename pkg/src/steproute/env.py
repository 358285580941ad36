"""Synthetic long-horizon task families and scripted device/cloud policies.

A task is a fixed-horizon sequence of discrete-action steps. Steps come in
three classes:

  routine   one correct action; a wrong action wastes the step (progress
            does not advance).
  critical  one correct action; in binary-return mode a wrong action fails
            the episode (absorbing). A critical step carries a "hazard"
            marker in the state features with probability
            ``marker_observability``, decided once per (task, step) at task
            creation so every visit observes the same flag.
  fork      several acceptable actions; the device and cloud tiers prefer
            different members, so their actions usually disagree even though
            either choice advances progress. Fork steps carry their own
            always-visible marker (the multiplicity of acceptable
            continuations is observable in the action interface).

Per-step action distributions are closed-form, so predictive entropy is
exact. Everything here is a pure function of its inputs; stochastic pieces
take explicit numpy Generators.

State identity: ``canonical_key`` encodes the observable semantic content
(task id, phase bucket, markers, progress, failure flag) and deliberately
excludes the raw step index. Two states with equal keys have equal feature
vectors by construction; with partial marker observability an unflagged
critical step is intentionally indistinguishable from a routine step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ConfigError, UsageError
from .seeding import stable_hash, unit_hash

# Feature normalisation constants (keep feature magnitudes O(1)).
_HORIZON_SCALE = 50.0
_ACTION_SCALE = 20.0


@dataclass(frozen=True)
class EnvConfig:
    """Task-family parameters; see module docstring for step classes."""

    horizon: int = 12
    action_count: int = 5
    critical_count: int = 3
    critical_steps: tuple[int, ...] | None = None  # fixed positions for all tasks
    fork_count: int = 0
    fork_steps: tuple[int, ...] | None = None
    marker_observability: float = 1.0
    partial_credit: bool = False
    phase_buckets: int = 6
    task_hash_dim: int = 4
    routine_reasoning_mean: float = 12.0
    critical_reasoning_mean: float = 32.0

    def validate(self) -> None:
        if self.horizon < 1:
            raise ConfigError(f"horizon must be >= 1, got {self.horizon}")
        if self.action_count < 2:
            raise ConfigError(f"action_count must be >= 2, got {self.action_count}")
        crit = self.critical_steps
        n_crit = len(crit) if crit is not None else self.critical_count
        forks = self.fork_steps
        n_fork = len(forks) if forks is not None else self.fork_count
        if n_crit < 1:
            raise ConfigError("at least one critical step is required")
        if n_crit + n_fork > self.horizon:
            raise ConfigError(
                f"critical ({n_crit}) + fork ({n_fork}) steps exceed horizon {self.horizon}"
            )
        if crit is not None and any(t < 1 or t > self.horizon for t in crit):
            raise ConfigError(f"critical_steps out of range 1..{self.horizon}: {crit}")
        if forks is not None and any(t < 1 or t > self.horizon for t in forks):
            raise ConfigError(f"fork_steps out of range 1..{self.horizon}: {forks}")
        if crit is not None and forks is not None and set(crit) & set(forks):
            raise ConfigError("critical_steps and fork_steps overlap")
        if not 0.0 <= self.marker_observability <= 1.0:
            raise ConfigError(
                f"marker_observability must be in [0,1], got {self.marker_observability}"
            )
        if self.phase_buckets < 1:
            raise ConfigError("phase_buckets must be >= 1")
        if self.task_hash_dim < 0:
            raise ConfigError("task_hash_dim must be >= 0")
        if self.routine_reasoning_mean < 0 or self.critical_reasoning_mean < 0:
            raise ConfigError("reasoning length means must be >= 0")


@dataclass(frozen=True)
class TaskSpec:
    """Generative description of one task instance (self-contained)."""

    task_id: str
    horizon: int
    action_count: int
    critical_steps: frozenset[int]
    fork_steps: frozenset[int]
    marker_observability: float
    partial_credit: bool
    seed: int
    phase_buckets: int = 6
    task_hash_dim: int = 4
    routine_reasoning_mean: float = 12.0
    critical_reasoning_mean: float = 32.0

    def validate(self) -> None:
        if not 1 <= len(self.critical_steps) <= self.horizon:
            raise ConfigError(f"{self.task_id}: bad critical step count")
        if self.action_count < 2:
            raise ConfigError(f"{self.task_id}: action_count must be >= 2")
        if not 0.0 <= self.marker_observability <= 1.0:
            raise ConfigError(f"{self.task_id}: marker_observability out of range")
        if self.critical_steps & self.fork_steps:
            raise ConfigError(f"{self.task_id}: critical and fork steps overlap")
        for t in self.critical_steps | self.fork_steps:
            if not 1 <= t <= self.horizon:
                raise ConfigError(f"{self.task_id}: step {t} out of range")


@dataclass(frozen=True, eq=False)
class State:
    """One environment observation. feature_vector is what the router sees."""

    step_index: int  # 1-based; horizon+1 means the episode is over
    progress: int
    failed: bool
    feature_vector: np.ndarray
    canonical_key: bytes


@dataclass
class ActionDist:
    """Discrete distribution over the task's action ids."""

    probabilities: np.ndarray

    def validate(self, tol: float = 1e-9) -> None:
        p = self.probabilities
        if np.any(p < 0):
            raise UsageError("negative probability entry")
        if abs(float(p.sum()) - 1.0) > tol:
            raise UsageError(f"probabilities sum to {p.sum()!r}, not 1")


@dataclass(frozen=True)
class ScriptedPolicy:
    """Analytic stand-in for an agent tier.

    Puts ``p_routine_correct`` (routine and fork steps) or
    ``p_critical_correct`` (critical steps) on the tier's preferred action
    and spreads the residual mass over the remaining actions with geometric
    weights ``spread**j`` (uniform at spread=1).
    """

    tier: str  # "device" | "cloud"
    p_routine_correct: float
    p_critical_correct: float
    spread: float = 1.0

    def validate(self) -> None:
        if self.tier not in ("device", "cloud"):
            raise ConfigError(f"unknown tier {self.tier!r}")
        for name in ("p_routine_correct", "p_critical_correct"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0,1], got {v}")
        if self.spread <= 0:
            raise ConfigError(f"spread must be > 0, got {self.spread}")


# ---------------------------------------------------------------------------
# Task generation
# ---------------------------------------------------------------------------


def make_task_set(config: EnvConfig, count: int, seed: int) -> list[TaskSpec]:
    """Deterministically generate ``count`` task instances."""
    config.validate()
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    tasks = []
    for i in range(count):
        task_seed = stable_hash(seed, "task", i)
        rng = np.random.default_rng(task_seed)
        if config.critical_steps is not None:
            crit = frozenset(config.critical_steps)
        else:
            crit = frozenset(
                int(t) + 1
                for t in rng.choice(config.horizon, size=config.critical_count, replace=False)
            )
        if config.fork_steps is not None:
            forks = frozenset(config.fork_steps)
        else:
            pool = sorted(set(range(1, config.horizon + 1)) - crit)
            forks = frozenset(
                int(pool[j])
                for j in rng.choice(len(pool), size=config.fork_count, replace=False)
            ) if config.fork_count else frozenset()
        task = TaskSpec(
            task_id=f"task-{seed}-{i:05d}",
            horizon=config.horizon,
            action_count=config.action_count,
            critical_steps=crit,
            fork_steps=forks,
            marker_observability=config.marker_observability,
            partial_credit=config.partial_credit,
            seed=task_seed,
            phase_buckets=config.phase_buckets,
            task_hash_dim=config.task_hash_dim,
            routine_reasoning_mean=config.routine_reasoning_mean,
            critical_reasoning_mean=config.critical_reasoning_mean,
        )
        task.validate()
        tasks.append(task)
    return tasks


# ---------------------------------------------------------------------------
# Per-task derived structure (deterministic functions of the task seed)
# ---------------------------------------------------------------------------


def correct_action(task: TaskSpec, t: int) -> int:
    """The single correct action at a routine/critical step (shared by tiers)."""
    return stable_hash(task.seed, "act", t) % task.action_count


def fork_actions(task: TaskSpec, t: int) -> tuple[int, int]:
    """The two acceptable actions at a fork step (device-, cloud-preferred)."""
    a = correct_action(task, t)
    offset = 1 + stable_hash(task.seed, "fork", t) % (task.action_count - 1)
    return a, (a + offset) % task.action_count


def acceptable_actions(task: TaskSpec, t: int) -> frozenset[int]:
    if t in task.fork_steps:
        return frozenset(fork_actions(task, t))
    return frozenset((correct_action(task, t),))


def preferred_action(task: TaskSpec, t: int, tier: str) -> int:
    if t in task.fork_steps:
        dev, cloud = fork_actions(task, t)
        return dev if tier == "device" else cloud
    return correct_action(task, t)


def hazard_marker(task: TaskSpec, t: int) -> bool:
    """Whether the critical step t is flagged in the observation.

    Decided once per (task, step): repeated visits see the same flag, so the
    flag is semantic state content rather than per-visit noise.
    """
    if t not in task.critical_steps:
        return False
    return unit_hash(task.seed, "vis", t) < task.marker_observability


def phase_bucket(task: TaskSpec, t: int) -> int:
    return (t - 1) * task.phase_buckets // task.horizon


def feature_length(task: TaskSpec) -> int:
    return task.phase_buckets + 6 + task.task_hash_dim


@lru_cache(maxsize=4096)
def _task_descriptor(task: TaskSpec) -> np.ndarray:
    desc = np.zeros(3 + task.task_hash_dim)
    desc[0] = task.horizon / _HORIZON_SCALE
    desc[1] = task.action_count / _ACTION_SCALE
    desc[2] = len(task.critical_steps) / task.horizon
    for j in range(task.task_hash_dim):
        desc[3 + j] = 2.0 * unit_hash(task.seed, "feat", j) - 1.0
    return desc


@lru_cache(maxsize=65536)
def _static_features(task: TaskSpec, t: int) -> np.ndarray:
    """Feature vector at step t with progress fraction left at zero."""
    buckets = task.phase_buckets
    x = np.zeros(feature_length(task))
    x[phase_bucket(task, t)] = 1.0
    x[buckets] = 1.0 if hazard_marker(task, t) else 0.0
    x[buckets + 1] = 1.0 if t in task.fork_steps else 0.0
    x[buckets + 3:] = _task_descriptor(task)
    x.flags.writeable = False
    return x


def state_features(task: TaskSpec, t: int, progress: int) -> np.ndarray:
    x = _static_features(task, t).copy()
    x[task.phase_buckets + 2] = progress / task.horizon
    return x


def state_key(task: TaskSpec, t: int, progress: int, failed: bool) -> bytes:
    # Excludes the raw step index: identity is the observable content only.
    return (
        f"{task.task_id}|b{phase_bucket(task, t)}"
        f"|h{int(hazard_marker(task, t))}|k{int(t in task.fork_steps)}"
        f"|g{progress}|f{int(failed)}"
    ).encode("ascii")


def make_state(task: TaskSpec, t: int, progress: int, failed: bool = False) -> State:
    return State(
        step_index=t,
        progress=progress,
        failed=failed,
        feature_vector=state_features(task, t, progress),
        canonical_key=state_key(task, t, progress, failed),
    )


def initial_state(task: TaskSpec) -> State:
    return make_state(task, 1, 0, False)


def is_terminal(state: State, task: TaskSpec) -> bool:
    return state.failed or state.step_index > task.horizon


# ---------------------------------------------------------------------------
# Dynamics
# ---------------------------------------------------------------------------


def policy_dist(policy: ScriptedPolicy, state: State, task: TaskSpec) -> ActionDist:
    """Closed-form action distribution of ``policy`` at ``state``."""
    if is_terminal(state, task):
        raise UsageError("policy_dist called on a terminal state")
    return ActionDist(_dist_vector(policy, task, state.step_index).copy())


@lru_cache(maxsize=65536)
def _dist_vector(policy: ScriptedPolicy, task: TaskSpec, t: int) -> np.ndarray:
    a_count = task.action_count
    p = policy.p_critical_correct if t in task.critical_steps else policy.p_routine_correct
    pref = preferred_action(task, t, policy.tier)
    probs = np.zeros(a_count)
    probs[pref] = p
    others = [a for a in range(a_count) if a != pref]
    weights = np.array([policy.spread**j for j in range(len(others))])
    probs[others] = (1.0 - p) * weights / weights.sum()
    probs.flags.writeable = False
    return probs


def entropy(dist: ActionDist) -> float:
    """Shannon entropy in nats, with 0*log(0) = 0."""
    p = dist.probabilities
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def step(state: State, task: TaskSpec, action: int) -> tuple[State, float]:
    """Apply ``action``; returns (next state, reward). Rewards are terminal-only
    and the trajectory return is computed by the rollout layer, so the per-step
    reward here is always 0."""
    if is_terminal(state, task):
        raise UsageError("step called on a terminal state")
    if not 0 <= action < task.action_count:
        raise UsageError(
            f"action {action} out of range 0..{task.action_count - 1}"
        )
    t = state.step_index
    ok = action in acceptable_actions(task, t)
    progress = state.progress + (1 if ok else 0)
    failed = (
        not task.partial_credit
        and t in task.critical_steps
        and not ok
    )
    return make_state(task, t + 1, progress, failed), 0.0


def episode_return(task: TaskSpec, final_state: State) -> float:
    """Outcome-level return in [0,1] evaluated at a terminal state."""
    if task.partial_credit:
        return final_state.progress / task.horizon
    return 1.0 if final_state.progress == task.horizon else 0.0


def reasoning_length_mean(task: TaskSpec, t: int) -> float:
    """Scripted deliberation-length mean of the device tier at step t."""
    if t in task.critical_steps:
        return task.critical_reasoning_mean
    return task.routine_reasoning_mean
