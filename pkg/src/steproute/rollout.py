"""Episode execution, replay, and cost accounting.

Routing modes: device_only, cloud_only, random(p), router (temperature
sampling or greedy thresholding), and an entropy gate used as a baseline.

RNG design: every trajectory owns three independent sub-streams (decision,
action, reasoning-length) derived from (master_seed, stage, task_id,
trajectory_index). Keeping the streams separate means two modes that make
the same route decisions consume identical action randomness, so e.g.
random(0.0) reproduces device_only byte for byte and success comparisons
between routers are free of sampling noise wherever their decisions agree.

Action sampling walks an inverse-CDF whose order puts acceptable actions
first (preferred, then other acceptable members, then wrong actions by
ascending id). The marginal distribution is unchanged; the ordering only
couples the success event across policies with equal acceptable mass.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import env
from .env import ScriptedPolicy, State, TaskSpec
from .errors import ConfigError, UsageError
from .router import RouterParams, decide_greedy, logit, route_prob, sample_decision
from .seeding import derive_seed_sequence

TRAJECTORY_SCHEMA_VERSION = 1

DEVICE, CLOUD = 0, 1


@dataclass
class StepRecord:
    step_index: int
    canonical_key: bytes
    feature_vector: np.ndarray
    decision: int  # 0 device, 1 cloud
    route_prob: float
    action: int
    reward: float
    device_entropy: float
    reasoning_length: int


@dataclass
class Trajectory:
    task_id: str
    steps: list[StepRecord]
    ret: float  # outcome-level return R in [0,1]
    cloud_calls: int
    terminal_status: str  # success | failure | horizon_exhausted

    def __len__(self) -> int:
        return len(self.steps)


@dataclass(frozen=True)
class CostModel:
    cloud_cost_per_call: float = 0.001
    device_latency_per_step: float = 0.5
    cloud_latency_per_step: float = 2.0
    router_latency_per_step: float = 0.061

    def validate(self) -> None:
        for name in (
            "cloud_cost_per_call",
            "device_latency_per_step",
            "cloud_latency_per_step",
            "router_latency_per_step",
        ):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")


@dataclass(frozen=True)
class RoutingMode:
    """How the per-step device/cloud decision is made."""

    kind: str  # device_only | cloud_only | random | router | entropy_gate
    p: float = 0.0
    params: RouterParams | None = None
    gamma: float = 1.3
    sample: bool = True
    threshold: float = 0.5
    entropy_threshold: float = 0.0

    @classmethod
    def device_only(cls) -> "RoutingMode":
        return cls("device_only")

    @classmethod
    def cloud_only(cls) -> "RoutingMode":
        return cls("cloud_only")

    @classmethod
    def random(cls, p: float) -> "RoutingMode":
        if not 0.0 <= p <= 1.0:
            raise ConfigError(f"random routing probability must be in [0,1], got {p}")
        return cls("random", p=p)

    @classmethod
    def router(
        cls,
        params: RouterParams,
        gamma: float = 1.3,
        sample: bool = True,
        threshold: float = 0.5,
    ) -> "RoutingMode":
        if gamma <= 0:
            raise ConfigError(f"gamma must be > 0, got {gamma}")
        return cls("router", params=params, gamma=gamma, sample=sample, threshold=threshold)

    @classmethod
    def entropy_gate(cls, entropy_threshold: float) -> "RoutingMode":
        return cls("entropy_gate", entropy_threshold=entropy_threshold)


@dataclass
class EpisodeRng:
    """Per-trajectory stream bundle; see module docstring."""

    decision: np.random.Generator
    action: np.random.Generator
    length: np.random.Generator

    @classmethod
    def derive(cls, master_seed: int, *keys) -> "EpisodeRng":
        d, a, l = derive_seed_sequence(master_seed, *keys).spawn(3)
        return cls(
            np.random.default_rng(d),
            np.random.default_rng(a),
            np.random.default_rng(l),
        )


# ---------------------------------------------------------------------------
# Per-(task, policy) sampling tables
# ---------------------------------------------------------------------------


@lru_cache(maxsize=65536)
def _sampling_table(policy: ScriptedPolicy, task: TaskSpec, t: int):
    """(action order, cumulative probabilities, entropy) at step t.

    Order: preferred action, remaining acceptable actions, then wrong
    actions by ascending id.
    """
    probs = env._dist_vector(policy, task, t)
    pref = env.preferred_action(task, t, policy.tier)
    acceptable = env.acceptable_actions(task, t)
    order = [pref] + sorted(acceptable - {pref}) + sorted(
        a for a in range(task.action_count) if a not in acceptable
    )
    order_arr = np.array(order, dtype=np.int64)
    cum = np.cumsum(probs[order_arr])
    h = env.entropy(env.ActionDist(probs))
    return order_arr, cum, h


def _sample_action(policy: ScriptedPolicy, task: TaskSpec, t: int, u: float) -> int:
    order, cum, _ = _sampling_table(policy, task, t)
    idx = int(np.searchsorted(cum, u, side="right"))
    return int(order[min(idx, len(order) - 1)])


def _greedy_action(policy: ScriptedPolicy, task: TaskSpec, t: int) -> int:
    return int(np.argmax(env._dist_vector(policy, task, t)))


# ---------------------------------------------------------------------------
# Episode execution
# ---------------------------------------------------------------------------


def run_episode(
    task: TaskSpec,
    device: ScriptedPolicy,
    cloud: ScriptedPolicy,
    mode: RoutingMode,
    rngs: EpisodeRng,
) -> Trajectory:
    """Roll one episode; every step records decision, action, and device stats."""
    if mode.kind not in ("device_only", "cloud_only", "random", "router", "entropy_gate"):
        raise ConfigError(f"unknown routing mode {mode.kind!r}")
    if mode.kind == "router" and mode.params is None:
        raise ConfigError("router mode requires parameters")

    state = env.initial_state(task)
    steps: list[StepRecord] = []
    while not env.is_terminal(state, task):
        t = state.step_index
        _, _, device_entropy = _sampling_table(device, task, t)

        if mode.kind == "device_only":
            rp, d = 0.0, DEVICE
        elif mode.kind == "cloud_only":
            rp, d = 1.0, CLOUD
        elif mode.kind == "random":
            rp = mode.p
            d = sample_decision(rp, rngs.decision)
        elif mode.kind == "entropy_gate":
            d = CLOUD if device_entropy > mode.entropy_threshold else DEVICE
            rp = float(d)
        else:  # router
            ell = logit(mode.params, state.feature_vector)
            rp = route_prob(ell, mode.gamma)
            if mode.sample:
                d = sample_decision(rp, rngs.decision)
            else:
                d = decide_greedy(rp, mode.threshold)

        policy = cloud if d == CLOUD else device
        action = _sample_action(policy, task, t, rngs.action.random())
        length = int(rngs.length.poisson(env.reasoning_length_mean(task, t)))
        next_state, reward = env.step(state, task, action)
        steps.append(
            StepRecord(
                step_index=t,
                canonical_key=state.canonical_key,
                feature_vector=state.feature_vector,
                decision=d,
                route_prob=rp,
                action=action,
                reward=reward,
                device_entropy=device_entropy,
                reasoning_length=length,
            )
        )
        state = next_state

    ret = env.episode_return(task, state)
    if state.failed:
        status = "failure"
    elif state.progress == task.horizon:
        status = "success"
    else:
        status = "horizon_exhausted"
    steps[-1].reward = ret  # terminal-only reward
    return Trajectory(
        task_id=task.task_id,
        steps=steps,
        ret=ret,
        cloud_calls=sum(rec.decision for rec in steps),
        terminal_status=status,
    )


def collect_group(
    task: TaskSpec,
    device: ScriptedPolicy,
    cloud: ScriptedPolicy,
    mode: RoutingMode,
    n: int,
    master_seed: int,
    stage: str = "rollout",
) -> list[Trajectory]:
    """N trajectories from the shared initial state, one RNG stream each.

    Streams are keyed by (master_seed, stage, task_id, index), so the group
    is order-independent and safe to collect in parallel.
    """
    if n < 1:
        raise UsageError(f"n must be >= 1, got {n}")
    return [
        run_episode(
            task, device, cloud, mode,
            EpisodeRng.derive(master_seed, stage, task.task_id, i),
        )
        for i in range(n)
    ]


# ---------------------------------------------------------------------------
# Replay
# ---------------------------------------------------------------------------


@dataclass
class ReplayStep:
    step_index: int
    canonical_key: bytes
    device_action: int
    cloud_action: int
    matched: bool


def replay_device_on(
    trajectory: Trajectory,
    task: TaskSpec,
    device: ScriptedPolicy,
    sampling_mode: str = "sample",
    rng: np.random.Generator | None = None,
) -> list[ReplayStep]:
    """Feed each recorded cloud-visited state to the device policy.

    ``sampling_mode`` is "sample" (draw from the device distribution) or
    "greedy" (argmax, ties to the lowest action id).
    """
    if trajectory.task_id != task.task_id:
        raise UsageError("trajectory does not belong to the given task")
    if any(rec.decision != CLOUD for rec in trajectory.steps):
        raise UsageError("replay requires a cloud-only trajectory")
    if sampling_mode not in ("sample", "greedy"):
        raise UsageError(f"unknown sampling_mode {sampling_mode!r}")
    if sampling_mode == "sample" and rng is None:
        raise UsageError("sample mode requires an rng")

    out = []
    for rec in trajectory.steps:
        t = rec.step_index
        if sampling_mode == "greedy":
            dev_action = _greedy_action(device, task, t)
        else:
            dev_action = _sample_action(device, task, t, rng.random())
        out.append(
            ReplayStep(
                step_index=t,
                canonical_key=rec.canonical_key,
                device_action=dev_action,
                cloud_action=rec.action,
                matched=dev_action == rec.action,
            )
        )
    return out


# ---------------------------------------------------------------------------
# Accounting
# ---------------------------------------------------------------------------


def account(trajectory: Trajectory, cost_model: CostModel) -> tuple[float, float]:
    """(api_cost, latency) of one trajectory under the cost model."""
    cost_model.validate()
    api_cost = trajectory.cloud_calls * cost_model.cloud_cost_per_call
    latency = 0.0
    for rec in trajectory.steps:
        latency += cost_model.router_latency_per_step
        latency += (
            cost_model.cloud_latency_per_step
            if rec.decision == CLOUD
            else cost_model.device_latency_per_step
        )
    return api_cost, latency


def future_cloud_count(trajectory: Trajectory, t: int) -> int:
    """Cloud decisions at positions >= t (1-based, current step included)."""
    if not 1 <= t <= len(trajectory.steps):
        raise UsageError(f"t={t} out of range 1..{len(trajectory.steps)}")
    return sum(rec.decision for rec in trajectory.steps[t - 1 :])


# ---------------------------------------------------------------------------
# Serialization (JSONL, one trajectory per line)
# ---------------------------------------------------------------------------


def trajectory_to_json(trajectory: Trajectory) -> dict:
    return {
        "schema_version": TRAJECTORY_SCHEMA_VERSION,
        "task_id": trajectory.task_id,
        "steps": [
            {
                "t": rec.step_index,
                "canonical_key": rec.canonical_key.decode("ascii"),
                "features": [float(x) for x in rec.feature_vector],
                "d": rec.decision,
                "route_prob": rec.route_prob,
                "action": rec.action,
                "reward": rec.reward,
                "device_entropy": rec.device_entropy,
                "reasoning_length": rec.reasoning_length,
            }
            for rec in trajectory.steps
        ],
        "return": trajectory.ret,
        "cloud_calls": trajectory.cloud_calls,
        "terminal_status": trajectory.terminal_status,
    }


def trajectory_from_json(obj: dict) -> Trajectory:
    steps = [
        StepRecord(
            step_index=s["t"],
            canonical_key=s["canonical_key"].encode("ascii"),
            feature_vector=np.array(s["features"], dtype=float),
            decision=s["d"],
            route_prob=s["route_prob"],
            action=s["action"],
            reward=s["reward"],
            device_entropy=s["device_entropy"],
            reasoning_length=s["reasoning_length"],
        )
        for s in obj["steps"]
    ]
    return Trajectory(
        task_id=obj["task_id"],
        steps=steps,
        ret=obj["return"],
        cloud_calls=obj["cloud_calls"],
        terminal_status=obj["terminal_status"],
    )


def dumps_trajectory(trajectory: Trajectory) -> str:
    return json.dumps(trajectory_to_json(trajectory), sort_keys=True, separators=(",", ":"))
