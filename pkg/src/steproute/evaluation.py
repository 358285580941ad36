"""Evaluation harness: baseline and trained-router runs, trade-off sweeps,
and step-level replay analyses.

Episode RNG streams are keyed by (seed, "eval", task_id, episode_index) and
are method-independent, so every method sees identical environment
randomness; success differences between methods reflect routing decisions
only (common random numbers).

Cloud usage is published under two denominators: absolute mean cloud calls
per trajectory, and the fraction of the method's own executed steps routed
to the cloud.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import env
from .env import ScriptedPolicy, TaskSpec
from .errors import ConfigError, UsageError
from .rollout import (
    CostModel,
    EpisodeRng,
    RoutingMode,
    Trajectory,
    account,
    replay_device_on,
    run_episode,
)
from .seeding import derive_rng


@dataclass
class EvalRow:
    seed: int
    task_id: str
    ret: float
    success: bool
    steps: int
    cloud_calls: int
    api_cost: float
    latency: float


@dataclass
class EvalReport:
    method: str
    n_tasks: int
    seeds: list[int]
    success_threshold: float
    success_rate: float
    success_std: float
    mean_cloud_calls: float
    cloud_step_fraction: float
    mean_api_cost: float
    mean_latency: float
    rows: list[EvalRow] = field(repr=False, default_factory=list)


@dataclass
class SummaryStats:
    mean: float
    std: float
    count: int


@dataclass
class StepAnalysis:
    match_rate_overall: float
    positions: list[int]
    match_rate_by_position: list[float]
    counts_by_position: list[int]
    entropy_matched: SummaryStats
    entropy_mismatched: SummaryStats
    length_matched: SummaryStats
    length_mismatched: SummaryStats
    cdf_points: list[tuple[float, float]]  # (per-trajectory match fraction, cum prob)


@dataclass
class ParetoPoint:
    method: str
    knob: float
    mean_cloud_calls: float
    success_rate: float
    success_std: float


# ---------------------------------------------------------------------------
# Core evaluation
# ---------------------------------------------------------------------------


def evaluate(
    method: str,
    mode: RoutingMode,
    tasks: list[TaskSpec],
    device: ScriptedPolicy,
    cloud: ScriptedPolicy,
    seeds: list[int],
    cost_model: CostModel,
    success_threshold: float = 1.0,
    episodes_per_task: int = 1,
) -> EvalReport:
    """Run every task under every seed and aggregate."""
    if not tasks:
        raise UsageError("empty task set")
    if not seeds:
        raise UsageError("at least one seed is required")
    rows: list[EvalRow] = []
    per_seed_success: list[float] = []
    for seed in seeds:
        wins = 0
        for task in tasks:
            for episode_idx in range(episodes_per_task):
                rngs = EpisodeRng.derive(seed, "eval", task.task_id, episode_idx)
                traj = run_episode(task, device, cloud, mode, rngs)
                api_cost, latency = account(traj, cost_model)
                success = traj.ret >= success_threshold
                wins += success
                rows.append(
                    EvalRow(
                        seed=seed,
                        task_id=task.task_id,
                        ret=traj.ret,
                        success=success,
                        steps=len(traj),
                        cloud_calls=traj.cloud_calls,
                        api_cost=api_cost,
                        latency=latency,
                    )
                )
        per_seed_success.append(wins / (len(tasks) * episodes_per_task))
    agg = recompute_aggregates(rows, seeds)
    return EvalReport(
        method=method,
        n_tasks=len(tasks),
        seeds=list(seeds),
        success_threshold=success_threshold,
        rows=rows,
        **agg,
    )


def recompute_aggregates(rows: list[EvalRow], seeds: list[int]) -> dict:
    """Aggregates from per-task rows; reports must equal this recomputation."""
    per_seed = [
        float(np.mean([r.success for r in rows if r.seed == seed])) for seed in seeds
    ]
    total_steps = sum(r.steps for r in rows)
    return {
        "success_rate": float(np.mean(per_seed)),
        "success_std": float(np.std(per_seed, ddof=1)) if len(per_seed) > 1 else 0.0,
        "mean_cloud_calls": float(np.mean([r.cloud_calls for r in rows])),
        "cloud_step_fraction": (
            sum(r.cloud_calls for r in rows) / total_steps if total_steps else 0.0
        ),
        "mean_api_cost": float(np.mean([r.api_cost for r in rows])),
        "mean_latency": float(np.mean([r.latency for r in rows])),
    }


# ---------------------------------------------------------------------------
# Trade-off sweep
# ---------------------------------------------------------------------------


def pareto_sweep(
    entries: list[tuple[str, list[float], "callable"]],
    tasks: list[TaskSpec],
    device: ScriptedPolicy,
    cloud: ScriptedPolicy,
    seeds: list[int],
    cost_model: CostModel,
    success_threshold: float = 1.0,
) -> list[ParetoPoint]:
    """One (cloud calls, success) point per knob value per method.

    Each entry is (method name, knob grid, knob -> RoutingMode factory);
    for the random baseline the knob is p, for trained routers the greedy
    threshold.
    """
    if not entries or any(not grid for _, grid, _ in entries):
        raise UsageError("sweep needs a non-empty knob grid per method")
    points = []
    for method, grid, factory in entries:
        for knob in grid:
            report = evaluate(
                method, factory(knob), tasks, device, cloud, seeds, cost_model,
                success_threshold,
            )
            points.append(
                ParetoPoint(
                    method=method,
                    knob=float(knob),
                    mean_cloud_calls=report.mean_cloud_calls,
                    success_rate=report.success_rate,
                    success_std=report.success_std,
                )
            )
    return points


def interpolate_success_at_calls(
    points: list[ParetoPoint], target_calls: float
) -> float:
    """Linear interpolation of success on one method's calls/success curve."""
    curve = sorted(points, key=lambda p: p.mean_cloud_calls)
    if not curve:
        raise UsageError("empty curve")
    if target_calls <= curve[0].mean_cloud_calls:
        return curve[0].success_rate
    if target_calls >= curve[-1].mean_cloud_calls:
        return curve[-1].success_rate
    for lo, hi in zip(curve, curve[1:]):
        if lo.mean_cloud_calls <= target_calls <= hi.mean_cloud_calls:
            span = hi.mean_cloud_calls - lo.mean_cloud_calls
            if span == 0:
                return max(lo.success_rate, hi.success_rate)
            frac = (target_calls - lo.mean_cloud_calls) / span
            return lo.success_rate + frac * (hi.success_rate - lo.success_rate)
    raise AssertionError("unreachable")


# ---------------------------------------------------------------------------
# Step-level replay analysis
# ---------------------------------------------------------------------------


def analyze_steps(
    cloud_trajectories: dict[str, list[Trajectory]],
    tasks: dict[str, TaskSpec],
    device: ScriptedPolicy,
    sampling_mode: str,
    master_seed: int,
) -> StepAnalysis:
    """Replay the device on cloud trajectories and summarise agreement.

    Produces the overall and per-position match rates, matched-vs-mismatched
    summaries of device entropy and scripted reasoning length, and the CDF
    of per-trajectory match fractions.
    """
    matched_flags: list[bool] = []
    by_pos_match: dict[int, int] = {}
    by_pos_count: dict[int, int] = {}
    ent = {True: [], False: []}
    length = {True: [], False: []}
    traj_fractions: list[float] = []
    for task_id, trajs in cloud_trajectories.items():
        task = tasks[task_id]
        for j, traj in enumerate(trajs):
            rng = derive_rng(master_seed, "analysis", task_id, j)
            replayed = replay_device_on(traj, task, device, sampling_mode, rng)
            n_match = 0
            for rec, rep in zip(traj.steps, replayed):
                matched_flags.append(rep.matched)
                by_pos_count[rep.step_index] = by_pos_count.get(rep.step_index, 0) + 1
                by_pos_match[rep.step_index] = (
                    by_pos_match.get(rep.step_index, 0) + rep.matched
                )
                ent[rep.matched].append(rec.device_entropy)
                length[rep.matched].append(rec.reasoning_length)
                n_match += rep.matched
            traj_fractions.append(n_match / len(traj))
    if not matched_flags:
        raise UsageError("no cloud trajectories to analyze")
    positions = sorted(by_pos_count)
    fractions = sorted(traj_fractions)
    n_traj = len(fractions)
    cdf = [(f, (i + 1) / n_traj) for i, f in enumerate(fractions)]
    return StepAnalysis(
        match_rate_overall=float(np.mean(matched_flags)),
        positions=positions,
        match_rate_by_position=[by_pos_match[t] / by_pos_count[t] for t in positions],
        counts_by_position=[by_pos_count[t] for t in positions],
        entropy_matched=summary(ent[True]),
        entropy_mismatched=summary(ent[False]),
        length_matched=summary(length[True]),
        length_mismatched=summary(length[False]),
        cdf_points=cdf,
    )


def summary(values: list[float]) -> SummaryStats:
    if not values:
        return SummaryStats(mean=float("nan"), std=float("nan"), count=0)
    return SummaryStats(
        mean=float(np.mean(values)),
        std=float(np.std(values)) if len(values) > 1 else 0.0,
        count=len(values),
    )


# ---------------------------------------------------------------------------
# Entropy-gate baseline
# ---------------------------------------------------------------------------


def entropy_threshold_baseline(
    tasks: list[TaskSpec],
    device: ScriptedPolicy,
    cloud: ScriptedPolicy,
    thresholds: list[float],
    seeds: list[int],
    cost_model: CostModel,
    success_threshold: float = 1.0,
) -> list[tuple[float, EvalReport]]:
    """Route to cloud wherever device predictive entropy exceeds a threshold."""
    if not tasks:
        raise UsageError("empty task set")
    max_entropy = math.log(max(t.action_count for t in tasks))
    for thr in thresholds:
        if not 0.0 <= thr <= max_entropy + 1e-9:
            raise ConfigError(
                f"entropy threshold {thr} outside [0, log(action_count)={max_entropy:.4f}]"
            )
    out = []
    for thr in thresholds:
        report = evaluate(
            f"entropy({thr:g})", RoutingMode.entropy_gate(thr), tasks, device, cloud,
            seeds, cost_model, success_threshold,
        )
        out.append((thr, report))
    return out
