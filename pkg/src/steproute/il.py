"""Stage I: supervised cold start from replay consistency.

Tasks with a pronounced cloud-over-device return gap are selected, the
device policy is replayed on each selected task's stored cloud trajectory,
and every visited state is labeled 1 when the device action disagrees with
the recorded cloud action (route to cloud) and 0 otherwise. The router is
then trained as a plain binary classifier on those labels.

Task selection compares mean returns over ``rollouts_per_task`` rollouts per
tier (single-rollout selection is the rollouts_per_task=1 special case).
The gap test is strict: a gap exactly equal to delta is not selected.

Training tracks held-out accuracy on a task-level split and, by default,
returns the earliest checkpoint that attains the best held-out accuracy.
The usable router typically appears long before the loss bottoms out, and
the moderate logits of an early checkpoint leave the refinement stage room
to move within its anchor budget.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rollout as rollout_mod
from .env import ScriptedPolicy, TaskSpec
from .errors import DataError, TrainingError, UsageError
from .rollout import RoutingMode, Trajectory, collect_group, replay_device_on
from .router import (
    AnchorParams,
    RouterParams,
    bce_loss_and_grad,
    init_optimizer,
    logits,
    optimizer_step,
)
from .seeding import derive_rng

DATASET_SCHEMA_VERSION = 1

STAGE_DEVICE = "rollout-device"
STAGE_CLOUD = "rollout-cloud"


@dataclass
class LabeledStep:
    task_id: str
    canonical_key: bytes
    feature_vector: np.ndarray
    label: int
    stage: str  # "IL" | "RL"
    provenance: str  # "<task>/<traj>/<step>" or "<task>/group/<key>"


@dataclass
class DiffTaskReport:
    task_id: str
    r_device: float
    r_cloud: float
    selected: bool


@dataclass
class ILTrainConfig:
    lr: float = 4e-5
    batch_size: int = 64
    iterations: int = 120_000
    eval_every: int = 500
    holdout_fraction: float = 0.1
    pos_weight: float = 1.0  # optional positive-class reweighting, off by default
    select_best: bool = True
    weight_decay: float = 0.0


@dataclass
class IterationMetrics:
    iteration: int
    train_loss: float
    holdout_accuracy: float


# ---------------------------------------------------------------------------
# Difficulty-gap task selection
# ---------------------------------------------------------------------------


def collect_selection_rollouts(
    tasks: list[TaskSpec],
    device: ScriptedPolicy,
    cloud: ScriptedPolicy,
    rollouts_per_task: int,
    master_seed: int,
) -> tuple[dict[str, list[Trajectory]], dict[str, list[Trajectory]]]:
    """Device-only and cloud-only rollouts used for selection and replay."""
    device_trajs, cloud_trajs = {}, {}
    for task in tasks:
        device_trajs[task.task_id] = collect_group(
            task, device, cloud, RoutingMode.device_only(),
            rollouts_per_task, master_seed, stage=STAGE_DEVICE,
        )
        cloud_trajs[task.task_id] = collect_group(
            task, device, cloud, RoutingMode.cloud_only(),
            rollouts_per_task, master_seed, stage=STAGE_CLOUD,
        )
    return device_trajs, cloud_trajs


def select_by_gap(
    task_ids: list[str],
    device_returns: dict[str, float],
    cloud_returns: dict[str, float],
    delta: float,
) -> tuple[list[str], list[DiffTaskReport]]:
    """Strict-inequality gap rule on (mean) returns."""
    if delta < 0:
        raise UsageError(f"delta must be >= 0, got {delta}")
    selected, reports = [], []
    for task_id in task_ids:
        r_d = device_returns[task_id]
        r_c = cloud_returns[task_id]
        keep = (r_c - r_d) > delta
        reports.append(DiffTaskReport(task_id, r_d, r_c, keep))
        if keep:
            selected.append(task_id)
    return selected, reports


def select_diff_tasks(
    tasks: list[TaskSpec],
    device: ScriptedPolicy,
    cloud: ScriptedPolicy,
    delta: float,
    rollouts_per_task: int,
    master_seed: int,
) -> tuple[list[str], list[DiffTaskReport]]:
    """Run fresh selection rollouts and apply the gap rule."""
    if not tasks:
        raise UsageError("empty task set")
    if rollouts_per_task < 1:
        raise UsageError("rollouts_per_task must be >= 1")
    device_trajs, cloud_trajs = collect_selection_rollouts(
        tasks, device, cloud, rollouts_per_task, master_seed
    )
    return select_by_gap(
        [t.task_id for t in tasks],
        {tid: mean_return(trajs) for tid, trajs in device_trajs.items()},
        {tid: mean_return(trajs) for tid, trajs in cloud_trajs.items()},
        delta,
    )


def mean_return(trajs: list[Trajectory]) -> float:
    return float(np.mean([t.ret for t in trajs]))


# ---------------------------------------------------------------------------
# Dataset construction
# ---------------------------------------------------------------------------


def consistency_label(device_action: int, cloud_action: int) -> int:
    """1 when the device disagrees with the cloud action (route to cloud)."""
    return int(device_action != cloud_action)


def build_il_dataset(
    x_diff: list[str],
    cloud_trajs: dict[str, list[Trajectory]],
    tasks: dict[str, TaskSpec],
    device: ScriptedPolicy,
    sampling_mode: str,
    master_seed: int,
    dedupe: bool = False,
) -> list[LabeledStep]:
    """One labeled example per cloud-trajectory step of each selected task.

    Replay labels come from the first stored cloud trajectory of the task.
    ``dedupe`` optionally keeps only the first example per canonical state;
    the default keeps duplicates so frequent states weigh more.
    """
    dataset: list[LabeledStep] = []
    seen: set[tuple[str, bytes]] = set()
    for task_id in x_diff:
        if task_id not in cloud_trajs or not cloud_trajs[task_id]:
            raise DataError(f"no stored cloud trajectory for selected task {task_id}")
        task = tasks[task_id]
        traj = cloud_trajs[task_id][0]
        rng = derive_rng(master_seed, "il-replay", task_id)
        replayed = replay_device_on(traj, task, device, sampling_mode, rng)
        for rec, rep in zip(traj.steps, replayed):
            if dedupe and (task_id, rec.canonical_key) in seen:
                continue
            seen.add((task_id, rec.canonical_key))
            dataset.append(
                LabeledStep(
                    task_id=task_id,
                    canonical_key=rec.canonical_key,
                    feature_vector=rec.feature_vector,
                    label=consistency_label(rep.device_action, rep.cloud_action),
                    stage="IL",
                    provenance=f"{task_id}/0/{rec.step_index}",
                )
            )
    return dataset


def dataset_arrays(dataset: list[LabeledStep]) -> tuple[np.ndarray, np.ndarray]:
    X = np.stack([ex.feature_vector for ex in dataset])
    y = np.array([ex.label for ex in dataset], dtype=float)
    return X, y


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def holdout_split(
    dataset: list[LabeledStep], holdout_fraction: float, master_seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Task-level split: indices of (train, holdout) examples."""
    task_ids = sorted({ex.task_id for ex in dataset})
    if len(task_ids) < 2 or holdout_fraction <= 0:
        return np.arange(len(dataset)), np.arange(0)
    rng = derive_rng(master_seed, "il-holdout")
    n_hold = max(1, round(holdout_fraction * len(task_ids)))
    held = set(rng.permutation(task_ids)[:n_hold].tolist())
    idx = np.arange(len(dataset))
    mask = np.array([ex.task_id in held for ex in dataset])
    return idx[~mask], idx[mask]


def train_il(
    dataset: list[LabeledStep],
    params: RouterParams,
    cfg: ILTrainConfig,
    master_seed: int,
) -> tuple[RouterParams, AnchorParams, list[IterationMetrics]]:
    """Minibatch BCE training; freezes the result as the anchor."""
    if not dataset:
        raise TrainingError("empty cold-start dataset (no selected tasks?)")
    train_idx, hold_idx = holdout_split(dataset, cfg.holdout_fraction, master_seed)
    X, y = dataset_arrays(dataset)
    X_train, y_train = X[train_idx], y[train_idx]
    X_hold, y_hold = X[hold_idx], y[hold_idx]

    params = params.copy()
    opt = init_optimizer(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = derive_rng(master_seed, "il-train")
    history: list[IterationMetrics] = []
    best_acc, best_values = -1.0, None
    loss = float("nan")
    for it in range(1, cfg.iterations + 1):
        batch = rng.integers(0, len(train_idx), size=min(cfg.batch_size, len(train_idx)))
        loss, grad = bce_loss_and_grad(params, X_train[batch], y_train[batch], cfg.pos_weight)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite training loss at iteration {it}")
        params, opt = optimizer_step(params, opt, grad)
        if it % cfg.eval_every == 0 or it == cfg.iterations:
            acc = holdout_accuracy(params, X_hold, y_hold)
            history.append(IterationMetrics(it, loss, acc))
            if acc > best_acc:
                best_acc, best_values = acc, params.values.copy()

    if cfg.select_best and best_values is not None and len(hold_idx) > 0:
        params = RouterParams(params.arch, best_values, params.version)
    return params, AnchorParams.freeze(params), history


def holdout_accuracy(params: RouterParams, X: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        return float("nan")
    preds = (logits(params, X) >= 0.0).astype(float)
    return float((preds == y).mean())
