"""Stage II: cost-aware refinement on grouped rollout states.

Per refinement iteration: collect N temperature-sampled rollouts per task
from the shared initial state, pool every visit to an identical state
(canonical key) across those rollouts, estimate the decision-conditioned
mean trajectory return R_hat(d; s) and mean remaining cloud calls
C_hat(d; s), label each state by the margin rule

    y(s) = 1                 if R_hat(1;s) - R_hat(0;s) > epsilon
           0                 if R_hat(0;s) - R_hat(1;s) > epsilon
           argmin_d C_hat(d) otherwise (tie on C_hat resolves to device),

and update the router with BCE on those labels plus a squared-L2 pull
toward the frozen cold-start parameters.

A state visited under only one decision leaves the other arm's estimate
undefined; such groups are skipped (no label) rather than falling back to
the observed arm, relying on temperature sampling for coverage. Datasets
are rebuilt from fresh rollouts every iteration; stale labels are never
reused.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .env import ScriptedPolicy, TaskSpec
from .errors import ConfigError, TrainingError, UsageError
from .il import LabeledStep
from .rollout import RoutingMode, Trajectory, collect_group, future_cloud_count
from .router import (
    AnchorParams,
    RouterParams,
    anchored_loss_and_grad,
    init_optimizer,
    logits,
    optimizer_step,
)
from .seeding import derive_rng

SKIP_ARM0 = "arm-0-undefined"
SKIP_ARM1 = "arm-1-undefined"


@dataclass
class Occurrence:
    traj_index: int
    step_pos: int  # 1-based position within the trajectory
    decision: int
    traj_return: float
    future_cloud: int


@dataclass
class GroupIndex:
    task_id: str
    groups: dict[bytes, list[Occurrence]]
    features: dict[bytes, np.ndarray]


@dataclass
class GroupStats:
    group_key: bytes
    n0: int
    n1: int
    r_hat: tuple[float | None, float | None]
    c_hat: tuple[float | None, float | None]
    label: int | None = None
    skip_reason: str | None = None


@dataclass
class GroupingReport:
    labeled: int = 0
    skipped_arm0: int = 0
    skipped_arm1: int = 0

    def merge(self, other: "GroupingReport") -> None:
        self.labeled += other.labeled
        self.skipped_arm0 += other.skipped_arm0
        self.skipped_arm1 += other.skipped_arm1

    @property
    def skipped(self) -> int:
        return self.skipped_arm0 + self.skipped_arm1


@dataclass
class RLConfig:
    n_rollouts: int = 8
    gamma: float = 1.3
    epsilon: float = 0.05
    beta: float = 0.1
    lr: float = 1e-5
    batch_size: int = 256
    iterations: int = 15
    steps_per_iteration: int = 8000
    eval_every: int = 1000
    weight_decay: float = 0.0


@dataclass
class TrainMetrics:
    step: int
    loss: float
    label_agreement: float
    anchor_distance: float


@dataclass
class IterationReport:
    """Per-iteration dynamics.

    mean_success / mean_cloud_calls come from a fixed greedy probe (how the
    router would behave deployed right now); exploration_* are the same
    statistics over the temperature-sampled rollouts the update trained on.
    """

    iteration: int
    mean_success: float
    mean_cloud_calls: float
    exploration_success: float
    exploration_cloud_calls: float
    labeled_groups: int
    skipped_groups: int
    anchor_distance: float


# ---------------------------------------------------------------------------
# Grouping and decision-conditioned estimates
# ---------------------------------------------------------------------------


def build_group_index(trajectories: list[Trajectory], task_id: str) -> GroupIndex:
    """Pool every (trajectory, step) visit by canonical state key.

    Occurrences are enumerated in (trajectory index, step position) order so
    downstream averages have a deterministic summation order.
    """
    groups: dict[bytes, list[Occurrence]] = {}
    features: dict[bytes, np.ndarray] = {}
    for i, traj in enumerate(trajectories):
        if traj.task_id != task_id:
            raise UsageError(
                f"trajectory for {traj.task_id!r} mixed into group for {task_id!r}"
            )
        for pos, rec in enumerate(traj.steps, start=1):
            occ = Occurrence(
                traj_index=i,
                step_pos=pos,
                decision=rec.decision,
                traj_return=traj.ret,
                future_cloud=future_cloud_count(traj, pos),
            )
            groups.setdefault(rec.canonical_key, []).append(occ)
            features.setdefault(rec.canonical_key, rec.feature_vector)
    return GroupIndex(task_id=task_id, groups=groups, features=features)


def group_estimates(key: bytes, occurrences: list[Occurrence]) -> GroupStats:
    """Decision-conditioned means over the occurrence list (in list order)."""
    if not occurrences:
        raise UsageError("empty occurrence list")
    n = [0, 0]
    r_sum = [0.0, 0.0]
    c_sum = [0.0, 0.0]
    for occ in occurrences:
        d = occ.decision
        n[d] += 1
        r_sum[d] += occ.traj_return
        c_sum[d] += occ.future_cloud
    r_hat = tuple(r_sum[d] / n[d] if n[d] else None for d in (0, 1))
    c_hat = tuple(c_sum[d] / n[d] if n[d] else None for d in (0, 1))
    return GroupStats(key, n[0], n[1], r_hat, c_hat)


def preference_label(stats: GroupStats, epsilon: float) -> GroupStats:
    """Apply the margin rule; returns the stats with label or skip reason set."""
    if epsilon <= 0:
        raise ConfigError(f"epsilon must be > 0, got {epsilon}")
    if stats.n0 == 0:
        stats.skip_reason = SKIP_ARM0
        return stats
    if stats.n1 == 0:
        stats.skip_reason = SKIP_ARM1
        return stats
    r0, r1 = stats.r_hat
    c0, c1 = stats.c_hat
    if r1 - r0 > epsilon:
        stats.label = 1
    elif r0 - r1 > epsilon:
        stats.label = 0
    else:
        stats.label = 0 if c0 <= c1 else 1  # C_hat tie resolves to device
    return stats


def group_task_dataset(
    trajectories: list[Trajectory], task_id: str, epsilon: float
) -> tuple[list[LabeledStep], list[GroupStats], GroupingReport]:
    """Group, estimate, and label one task's rollout set."""
    index = build_group_index(trajectories, task_id)
    dataset: list[LabeledStep] = []
    stats_list: list[GroupStats] = []
    report = GroupingReport()
    for key, occs in index.groups.items():
        stats = preference_label(group_estimates(key, occs), epsilon)
        stats_list.append(stats)
        if stats.skip_reason == SKIP_ARM0:
            report.skipped_arm0 += 1
            continue
        if stats.skip_reason == SKIP_ARM1:
            report.skipped_arm1 += 1
            continue
        report.labeled += 1
        dataset.append(
            LabeledStep(
                task_id=task_id,
                canonical_key=key,
                feature_vector=index.features[key],
                label=stats.label,
                stage="RL",
                provenance=f"{task_id}/group/{key.decode('ascii')}",
            )
        )
    return dataset, stats_list, report


def build_rl_dataset(
    trajectories_by_task: dict[str, list[Trajectory]], epsilon: float
) -> tuple[list[LabeledStep], GroupingReport]:
    """Label every group across tasks; error out if nothing is labelable."""
    dataset: list[LabeledStep] = []
    report = GroupingReport()
    for task_id, trajs in trajectories_by_task.items():
        task_data, _, task_report = group_task_dataset(trajs, task_id, epsilon)
        dataset.extend(task_data)
        report.merge(task_report)
    if not dataset:
        raise TrainingError(
            "no labeled groups: every group had an unvisited decision arm "
            f"(skipped {report.skipped_arm0} device-arm, {report.skipped_arm1} "
            "cloud-arm); increase gamma or the rollout count so both decisions "
            "get sampled"
        )
    return dataset, report


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def train_rl(
    dataset: list[LabeledStep],
    params: RouterParams,
    anchor: AnchorParams,
    cfg: RLConfig,
    master_seed: int,
    steps: int | None = None,
) -> tuple[RouterParams, list[TrainMetrics]]:
    """Minibatch training on the anchored loss."""
    if not dataset:
        raise TrainingError("empty refinement dataset")
    if anchor.values.shape != params.values.shape:
        raise UsageError("anchor is not shape-compatible with live parameters")
    X = np.stack([ex.feature_vector for ex in dataset])
    y = np.array([ex.label for ex in dataset], dtype=float)
    params = params.copy()
    opt = init_optimizer(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = derive_rng(master_seed, "rl-train")
    n_steps = cfg.steps_per_iteration if steps is None else steps
    history: list[TrainMetrics] = []
    for it in range(1, n_steps + 1):
        batch = rng.integers(0, len(y), size=min(cfg.batch_size, len(y)))
        loss, grad = anchored_loss_and_grad(params, anchor, X[batch], y[batch], cfg.beta)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite refinement loss at step {it}")
        params, opt = optimizer_step(params, opt, grad)
        if it % cfg.eval_every == 0 or it == n_steps:
            preds = (logits(params, X) >= 0.0).astype(float)
            history.append(
                TrainMetrics(
                    step=it,
                    loss=loss,
                    label_agreement=float((preds == y).mean()),
                    anchor_distance=anchor_distance(params, anchor),
                )
            )
    return params, history


def anchor_distance(params: RouterParams, anchor: AnchorParams) -> float:
    return float(np.linalg.norm(params.values - anchor.values))


# ---------------------------------------------------------------------------
# Iteration loop (collect -> group -> label -> train)
# ---------------------------------------------------------------------------


def rl_iteration(
    tasks: list[TaskSpec],
    device: ScriptedPolicy,
    cloud: ScriptedPolicy,
    params: RouterParams,
    anchor: AnchorParams,
    cfg: RLConfig,
    master_seed: int,
    iteration: int,
) -> tuple[RouterParams, IterationReport, list[LabeledStep]]:
    """One on-policy refinement cycle over the task set."""
    if not tasks:
        raise UsageError("empty task set")
    mode = RoutingMode.router(params, gamma=cfg.gamma, sample=True)
    trajs_by_task: dict[str, list[Trajectory]] = {}
    for task in tasks:
        trajs_by_task[task.task_id] = collect_group(
            task, device, cloud, mode, cfg.n_rollouts, master_seed,
            stage=f"rl-{iteration}",
        )
    dataset, report = build_rl_dataset(trajs_by_task, cfg.epsilon)
    params, _ = train_rl(dataset, params, anchor, cfg, master_seed + iteration)

    all_trajs = [t for trajs in trajs_by_task.values() for t in trajs]
    probe_success, probe_calls = greedy_probe(tasks, device, cloud, params, cfg, master_seed)
    iteration_report = IterationReport(
        iteration=iteration,
        mean_success=probe_success,
        mean_cloud_calls=probe_calls,
        exploration_success=float(
            np.mean([t.terminal_status == "success" for t in all_trajs])
        ),
        exploration_cloud_calls=float(np.mean([t.cloud_calls for t in all_trajs])),
        labeled_groups=report.labeled,
        skipped_groups=report.skipped,
        anchor_distance=anchor_distance(params, anchor),
    )
    return params, iteration_report, dataset


def greedy_probe(
    tasks: list[TaskSpec],
    device: ScriptedPolicy,
    cloud: ScriptedPolicy,
    params: RouterParams,
    cfg: RLConfig,
    master_seed: int,
) -> tuple[float, float]:
    """Deployment-mode measurement: one greedy episode per task on fixed
    iteration-independent streams, so the probe is a stable instrument."""
    mode = RoutingMode.router(params, gamma=cfg.gamma, sample=False)
    trajs = [
        collect_group(task, device, cloud, mode, 1, master_seed, stage="rl-probe")[0]
        for task in tasks
    ]
    return (
        float(np.mean([t.terminal_status == "success" for t in trajs])),
        float(np.mean([t.cloud_calls for t in trajs])),
    )


def run_rl(
    tasks: list[TaskSpec],
    device: ScriptedPolicy,
    cloud: ScriptedPolicy,
    params: RouterParams,
    anchor: AnchorParams,
    cfg: RLConfig,
    master_seed: int,
    log=None,
) -> tuple[RouterParams, list[IterationReport], list[LabeledStep]]:
    """Full stage II: cfg.iterations cycles, parameters carried across.

    Returns the final parameters, per-iteration reports, and the last
    iteration's labeled dataset (each iteration rebuilds its own)."""
    reports = []
    last_dataset: list[LabeledStep] = []
    for iteration in range(1, cfg.iterations + 1):
        params, report, last_dataset = rl_iteration(
            tasks, device, cloud, params, anchor, cfg, master_seed, iteration
        )
        reports.append(report)
        if log is not None:
            log(
                f"[rl] iter {report.iteration:>3} "
                f"greedy success={report.mean_success:.3f} "
                f"calls={report.mean_cloud_calls:.2f} "
                f"(explore {report.exploration_success:.3f}/"
                f"{report.exploration_cloud_calls:.2f}) "
                f"labeled={report.labeled_groups} skipped={report.skipped_groups} "
                f"anchor_dist={report.anchor_distance:.3f}"
            )
    return params, reports, last_dataset
