"""Command-line operator surface.

Subcommands chain the pipeline stages (rollout -> cold start -> refinement
-> evaluation) over the persistence layer; `pipeline` runs them end to end
into one run directory with a manifest. Identical config + seed reproduces
every artifact byte for byte.

Exit codes: 0 success, 2 configuration/usage error, 3 data error,
4 training error.
"""

from __future__ import annotations

import argparse
import sys
from functools import partial
from pathlib import Path

import numpy as np

from . import env, store
from .config import Config, bundled_config_path, load_config
from .errors import ConfigError, DataError, TrainingError, UsageError
from .evaluation import (
    EvalReport,
    ParetoPoint,
    analyze_steps,
    entropy_threshold_baseline,
    evaluate,
    pareto_sweep,
)
from .il import (
    ILTrainConfig,
    build_il_dataset,
    mean_return,
    select_by_gap,
    train_il,
)
from .rl import run_rl
from .rollout import RoutingMode, Trajectory, collect_group
from .router import init_params
from .seeding import stable_hash


EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRAINING = 4


def log(message: str) -> None:
    print(message, flush=True)


# ---------------------------------------------------------------------------
# Shared stage helpers
# ---------------------------------------------------------------------------


def make_tasks(config: Config, split: str) -> list[env.TaskSpec]:
    counts = config.raw["tasks"]
    count = counts["train_count"] if split == "train" else counts["eval_count"]
    seed = stable_hash(config.master_seed, f"tasks-{split}")
    return env.make_task_set(config.env_config(), count, seed)


def _rollout_one(task, device, cloud, mode, n, master_seed, stage):
    return collect_group(task, device, cloud, mode, n, master_seed, stage=stage)


def pmap(fn, items, jobs):
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    import multiprocessing as mp

    with mp.get_context("fork").Pool(min(jobs, len(items))) as pool:
        return pool.map(fn, items)


def stage_rollout(
    config: Config, mode_name: str, split: str, n: int, out_dir: Path, p: float = 0.5
) -> Path:
    """Collect trajectories for every task of the split and persist them."""
    tasks = make_tasks(config, split)
    device = config.policy("device")
    cloud = config.policy("cloud")
    if mode_name == "device_only":
        mode = RoutingMode.device_only()
    elif mode_name == "cloud_only":
        mode = RoutingMode.cloud_only()
    elif mode_name == "random":
        mode = RoutingMode.random(p)
    else:
        raise ConfigError(f"rollout mode must be device_only/cloud_only/random, got {mode_name!r}")
    stage = f"rollout-{mode_name.replace('_only', '')}"
    worker = partial(
        _rollout_one, device=device, cloud=cloud, mode=mode, n=n,
        master_seed=config.master_seed, stage=stage,
    )
    groups = pmap(worker, tasks, config.jobs)
    trajectories = [traj for group in groups for traj in group]
    path = out_dir / "trajectories" / f"{mode_name}_{split}.jsonl"
    store.save_trajectories(path, trajectories)
    log(f"[rollout] wrote {len(trajectories)} trajectories to {path}")
    return path


def group_by_task(trajectories: list[Trajectory]) -> dict[str, list[Trajectory]]:
    by_task: dict[str, list[Trajectory]] = {}
    for traj in trajectories:
        by_task.setdefault(traj.task_id, []).append(traj)
    return by_task


def stage_train_il(config: Config, trajectories_dir: Path, out_dir: Path) -> Path:
    """Select gap tasks from stored rollouts, build labels, train, checkpoint."""
    device_path = trajectories_dir / "device_only_train.jsonl"
    cloud_path = trajectories_dir / "cloud_only_train.jsonl"
    device_trajs = group_by_task(store.load_trajectories(device_path))
    cloud_trajs = group_by_task(store.load_trajectories(cloud_path))

    tasks = make_tasks(config, "train")
    task_map = {t.task_id: t for t in tasks}
    missing = [t.task_id for t in tasks if t.task_id not in cloud_trajs]
    if missing:
        raise DataError(f"stored rollouts missing tasks: {missing[:3]}...")

    il_section = config.raw["il"]
    x_diff, reports = select_by_gap(
        [t.task_id for t in tasks],
        {tid: mean_return(v) for tid, v in device_trajs.items()},
        {tid: mean_return(v) for tid, v in cloud_trajs.items()},
        il_section["delta"],
    )
    log(f"[il] selected {len(x_diff)}/{len(tasks)} difficulty-gap tasks")

    dataset = build_il_dataset(
        x_diff, cloud_trajs, task_map, config.policy("device"),
        il_section["replay_mode"], config.master_seed, dedupe=il_section["dedupe"],
    )
    log(f"[il] cold-start dataset: {len(dataset)} labeled steps")

    input_dim = env.feature_length(tasks[0])
    params0 = init_params(config.architecture(input_dim), config.raw["router"]["init_seed"])
    params, anchor, history = train_il(
        dataset, params0, config.il_train_config(), config.master_seed
    )
    best = max((m.holdout_accuracy for m in history), default=float("nan"))
    log(f"[il] trained {len(history)} eval points, best holdout accuracy {best:.4f}")

    store.save_dataset(out_dir / "datasets" / "d_il.jsonl", dataset)
    write_csv(
        out_dir / "reports" / "il_metrics.csv",
        ["iteration", "train_loss", "holdout_accuracy"],
        [[m.iteration, m.train_loss, m.holdout_accuracy] for m in history],
    )
    write_csv(
        out_dir / "reports" / "diff_tasks.csv",
        ["task_id", "r_device", "r_cloud", "selected"],
        [[r.task_id, r.r_device, r.r_cloud, int(r.selected)] for r in reports],
    )
    ckpt_path = out_dir / "checkpoints" / "il.ckpt"
    store.save_checkpoint(ckpt_path, params, anchor, stage="IL", config_hash=config.hash())
    log(f"[il] checkpoint written to {ckpt_path}")
    return ckpt_path


def stage_train_rl(config: Config, il_checkpoint: Path, out_dir: Path) -> Path:
    """Refine the cold-start router on-policy; checkpoint the result."""
    ck = store.load_checkpoint(il_checkpoint)
    if ck.anchor is None:
        raise DataError(f"{il_checkpoint}: missing anchor parameters (not a stage-I checkpoint?)")
    tasks = make_tasks(config, "train")
    params, reports, last_dataset = run_rl(
        tasks, config.policy("device"), config.policy("cloud"),
        ck.params, ck.anchor, config.rl_config(), config.master_seed, log=log,
    )
    write_csv(
        out_dir / "reports" / "rl_iterations.csv",
        ["iteration", "mean_success", "mean_cloud_calls", "labeled_groups",
         "skipped_groups", "param_distance_to_anchor", "exploration_success",
         "exploration_cloud_calls"],
        [[r.iteration, r.mean_success, r.mean_cloud_calls, r.labeled_groups,
          r.skipped_groups, r.anchor_distance, r.exploration_success,
          r.exploration_cloud_calls] for r in reports],
    )
    store.save_dataset(out_dir / "datasets" / "d_rl_last.jsonl", last_dataset)
    ckpt_path = out_dir / "checkpoints" / "rl.ckpt"
    store.save_checkpoint(ckpt_path, params, ck.anchor, stage="RL", config_hash=config.hash())
    log(f"[rl] checkpoint written to {ckpt_path}")
    return ckpt_path


def _evaluate_one(spec, tasks, device, cloud, seeds, cost_model, threshold):
    name, mode = spec
    return evaluate(name, mode, tasks, device, cloud, seeds, cost_model, threshold)


def stage_eval(
    config: Config,
    out_dir: Path,
    rl_checkpoint: Path | None,
    il_checkpoint: Path | None,
) -> list[EvalReport]:
    """Evaluate baselines plus any given checkpoints on the eval split."""
    specs: list[tuple[str, RoutingMode]] = [
        ("device_only", RoutingMode.device_only()),
        ("cloud_only", RoutingMode.cloud_only()),
    ]
    ev = config.raw["eval"]
    for p in ev["random_grid"]:
        specs.append((f"random({p:g})", RoutingMode.random(p)))
    if ev["include_entropy_baseline"]:
        for thr in ev["entropy_grid"]:
            specs.append((f"entropy({thr:g})", RoutingMode.entropy_gate(thr)))
    gamma = config.raw["rl"]["gamma"]
    # checkpoints are loaded before anything is written; a missing file
    # aborts with a data error and no partial outputs
    if il_checkpoint is not None:
        ck = store.load_checkpoint(il_checkpoint)
        specs.append(("router_il", RoutingMode.router(ck.params, gamma=gamma, sample=False)))
    if rl_checkpoint is not None:
        ck = store.load_checkpoint(rl_checkpoint)
        specs.append(("router_rl", RoutingMode.router(ck.params, gamma=gamma, sample=False)))

    tasks = make_tasks(config, "eval")
    worker = partial(
        _evaluate_one,
        tasks=tasks,
        device=config.policy("device"),
        cloud=config.policy("cloud"),
        seeds=ev["seeds"],
        cost_model=config.cost_model(),
        threshold=ev["success_threshold"],
    )
    reports = pmap(worker, specs, config.jobs)
    write_csv(
        out_dir / "reports" / "eval_report.csv",
        ["method", "n_tasks", "seeds", "success_threshold", "success_rate",
         "success_std", "mean_cloud_calls", "cloud_step_fraction",
         "mean_api_cost", "mean_latency"],
        [
            [r.method, r.n_tasks, ";".join(map(str, r.seeds)), r.success_threshold,
             r.success_rate, r.success_std, r.mean_cloud_calls, r.cloud_step_fraction,
             r.mean_api_cost, r.mean_latency]
            for r in reports
        ],
    )
    write_csv(
        out_dir / "reports" / "eval_rows.csv",
        ["method", "seed", "task_id", "return", "success", "steps", "cloud_calls",
         "api_cost", "latency"],
        [
            [r.method, row.seed, row.task_id, row.ret, int(row.success), row.steps,
             row.cloud_calls, row.api_cost, row.latency]
            for r in reports
            for row in r.rows
        ],
    )
    for r in reports:
        log(
            f"[eval] {r.method:<16} success={r.success_rate:.3f}±{r.success_std:.3f} "
            f"cloud_calls={r.mean_cloud_calls:.2f} cost={r.mean_api_cost:.4f} "
            f"latency={r.mean_latency:.2f}"
        )
    return reports


def stage_analyze(config: Config, trajectories_path: Path, out_dir: Path) -> None:
    trajs = group_by_task(store.load_trajectories(trajectories_path))
    task_map = {
        t.task_id: t
        for split in ("train", "eval")
        for t in make_tasks(config, split)
    }
    unknown = [tid for tid in trajs if tid not in task_map]
    if unknown:
        raise DataError(f"trajectories reference unknown tasks: {unknown[:3]}")
    analysis = analyze_steps(
        trajs, task_map, config.policy("device"),
        config.raw["il"]["replay_mode"], config.master_seed,
    )
    write_csv(
        out_dir / "reports" / "step_analysis_summary.csv",
        ["metric", "matched", "mismatched"],
        [
            ["match_rate_overall", analysis.match_rate_overall, ""],
            ["entropy_mean", analysis.entropy_matched.mean, analysis.entropy_mismatched.mean],
            ["entropy_std", analysis.entropy_matched.std, analysis.entropy_mismatched.std],
            ["length_mean", analysis.length_matched.mean, analysis.length_mismatched.mean],
            ["length_std", analysis.length_matched.std, analysis.length_mismatched.std],
            ["count", analysis.entropy_matched.count, analysis.entropy_mismatched.count],
        ],
    )
    write_csv(
        out_dir / "reports" / "match_by_position.csv",
        ["position", "match_rate", "count"],
        list(zip(analysis.positions, analysis.match_rate_by_position,
                 analysis.counts_by_position)),
    )
    write_csv(
        out_dir / "reports" / "match_cdf.csv",
        ["match_fraction", "cumulative_probability"],
        analysis.cdf_points,
    )
    log(f"[analyze] overall match rate {analysis.match_rate_overall:.4f}")


def stage_sweep(
    config: Config, out_dir: Path, rl_checkpoint: Path | None, plot: bool
) -> list[ParetoPoint]:
    tasks = make_tasks(config, "eval")
    ev = config.raw["eval"]
    entries = [("random", list(ev["random_grid"]), RoutingMode.random)]
    if rl_checkpoint is not None:
        ck = store.load_checkpoint(rl_checkpoint)
        gamma = config.raw["rl"]["gamma"]
        entries.append(
            (
                "router_rl",
                list(ev["threshold_grid"]),
                lambda thr: RoutingMode.router(ck.params, gamma=gamma, sample=False,
                                               threshold=thr),
            )
        )
    points = pareto_sweep(
        entries, tasks, config.policy("device"), config.policy("cloud"),
        ev["seeds"], config.cost_model(), ev["success_threshold"],
    )
    write_csv(
        out_dir / "reports" / "pareto.csv",
        ["method", "knob", "mean_cloud_calls", "success_rate", "success_std"],
        [[p.method, p.knob, p.mean_cloud_calls, p.success_rate, p.success_std]
         for p in points],
    )
    if plot:
        render_pareto_plot(points, out_dir / "reports" / "pareto.png")
    log(f"[sweep] wrote {len(points)} trade-off points")
    return points


def render_pareto_plot(points: list[ParetoPoint], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for method in sorted({p.method for p in points}):
        series = sorted(
            (p for p in points if p.method == method), key=lambda p: p.mean_cloud_calls
        )
        ax.plot(
            [p.mean_cloud_calls for p in series],
            [p.success_rate for p in series],
            marker="o",
            label=method,
        )
    ax.set_xlabel("mean cloud calls per trajectory")
    ax.set_ylabel("success rate")
    ax.legend()
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_csv(path: Path, header: list[str], rows: list) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_csv_cell(cell) for cell in row))
    store.atomic_write_text(path, "\n".join(lines) + "\n")


def _csv_cell(cell) -> str:
    if isinstance(cell, float):
        return repr(cell)
    return str(cell)


def finalize_manifest(config: Config, out_dir: Path, stage: str) -> None:
    manifest = store.manifest_for_dir(
        out_dir,
        run_id=f"{stage}-{config.hash()[:12]}-s{config.master_seed}",
        stage=stage,
        config_hash=config.hash(),
        seeds=[config.master_seed] + list(config.raw["eval"]["seeds"]),
    )
    store.write_manifest(out_dir, manifest)


def write_effective_config(config: Config, out_dir: Path) -> None:
    store.atomic_write_text(out_dir / "config.json", config.dumps())


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_rollout(args) -> int:
    config = load_args_config(args)
    out_dir = Path(args.out)
    n = args.n if args.n is not None else config.raw["il"]["rollouts_per_task"]
    stage_rollout(config, args.mode, args.split, n, out_dir, p=args.p)
    write_effective_config(config, out_dir)
    finalize_manifest(config, out_dir, "rollout")
    return 0


def cmd_train_il(args) -> int:
    config = load_args_config(args)
    out_dir = Path(args.out)
    stage_train_il(config, Path(args.trajectories), out_dir)
    write_effective_config(config, out_dir)
    finalize_manifest(config, out_dir, "IL")
    return 0


def cmd_train_rl(args) -> int:
    config = load_args_config(args)
    out_dir = Path(args.out)
    stage_train_rl(config, Path(args.checkpoint), out_dir)
    write_effective_config(config, out_dir)
    finalize_manifest(config, out_dir, "RL")
    return 0


def cmd_eval(args) -> int:
    config = load_args_config(args)
    out_dir = Path(args.out)
    rl_ckpt = Path(args.checkpoint) if args.checkpoint else None
    il_ckpt = Path(args.il_checkpoint) if args.il_checkpoint else None
    stage_eval(config, out_dir, rl_ckpt, il_ckpt)
    write_effective_config(config, out_dir)
    finalize_manifest(config, out_dir, "eval")
    return 0


def cmd_analyze(args) -> int:
    config = load_args_config(args)
    out_dir = Path(args.out)
    stage_analyze(config, Path(args.trajectories), out_dir)
    write_effective_config(config, out_dir)
    finalize_manifest(config, out_dir, "analyze")
    return 0


def cmd_sweep(args) -> int:
    config = load_args_config(args)
    out_dir = Path(args.out)
    stage_sweep(config, out_dir, Path(args.checkpoint) if args.checkpoint else None,
                plot=args.plot)
    write_effective_config(config, out_dir)
    finalize_manifest(config, out_dir, "sweep")
    return 0


def cmd_pipeline(args) -> int:
    config = load_args_config(args)
    out_dir = Path(args.out)
    n = config.raw["il"]["rollouts_per_task"]
    stage_rollout(config, "device_only", "train", n, out_dir)
    stage_rollout(config, "cloud_only", "train", n, out_dir)
    il_ckpt = stage_train_il(config, out_dir / "trajectories", out_dir)
    rl_ckpt = stage_train_rl(config, il_ckpt, out_dir)
    stage_eval(config, out_dir, rl_ckpt, il_ckpt)
    write_effective_config(config, out_dir)
    finalize_manifest(config, out_dir, "pipeline")
    log(f"[pipeline] run complete; artifacts in {out_dir}")
    return 0


def load_args_config(args) -> Config:
    path = Path(args.config)
    if not path.exists() and not path.suffix:
        path = bundled_config_path(args.config)
    config = load_config(path)
    if args.jobs is not None:
        config.raw["jobs"] = args.jobs
    if args.seed is not None:
        config.raw["master_seed"] = args.seed
    return config


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="steproute",
        description="Step-level device/cloud routing: simulate, train, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default="reference",
                       help="config file path or bundled config name (default: reference)")
        p.add_argument("--out", required=True, help="run directory")
        p.add_argument("--jobs", type=int, default=None, help="parallel worker cap")
        p.add_argument("--seed", type=int, default=None, help="override master seed")

    p = sub.add_parser("rollout", help="collect trajectories for one routing mode")
    common(p)
    p.add_argument("--mode", required=True,
                   choices=["device_only", "cloud_only", "random"])
    p.add_argument("--split", default="train", choices=["train", "eval"])
    p.add_argument("--n", type=int, default=None, help="rollouts per task")
    p.add_argument("--p", type=float, default=0.5, help="random-mode cloud probability")
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("train-il", help="stage I: supervised cold start")
    common(p)
    p.add_argument("--trajectories", required=True,
                   help="directory with device_only_train.jsonl and cloud_only_train.jsonl")
    p.set_defaults(func=cmd_train_il)

    p = sub.add_parser("train-rl", help="stage II: cost-aware refinement")
    common(p)
    p.add_argument("--checkpoint", required=True, help="stage-I checkpoint")
    p.set_defaults(func=cmd_train_rl)

    p = sub.add_parser("eval", help="evaluate baselines and checkpoints")
    common(p)
    p.add_argument("--checkpoint", default=None, help="refined checkpoint")
    p.add_argument("--il-checkpoint", default=None, help="cold-start checkpoint")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="step-level replay analysis of cloud trajectories")
    common(p)
    p.add_argument("--trajectories", required=True, help="cloud-only trajectory JSONL")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sweep", help="success/cost trade-off sweep")
    common(p)
    p.add_argument("--checkpoint", default=None, help="refined checkpoint")
    p.add_argument("--plot", action="store_true", help="also render pareto.png")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("pipeline", help="rollout -> IL -> RL -> eval, one manifest")
    common(p)
    p.set_defaults(func=cmd_pipeline)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
