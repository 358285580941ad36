import math

import numpy as np
import pytest

from steproute import env, evaluation
from steproute.errors import ConfigError, UsageError
from steproute.evaluation import (
    EvalReport,
    analyze_steps,
    entropy_threshold_baseline,
    evaluate,
    interpolate_success_at_calls,
    pareto_sweep,
    recompute_aggregates,
)
from steproute.rollout import CostModel, RoutingMode, collect_group

COST = CostModel()


def make_tasks(count=6, **kw):
    base = dict(horizon=10, action_count=4, critical_steps=(3, 7), fork_count=0)
    base.update(kw)
    return env.make_task_set(env.EnvConfig(**base), count=count, seed=51)


DEV = env.ScriptedPolicy("device", 0.9, 0.3)
CLOUD = env.ScriptedPolicy("cloud", 0.95, 0.9)
SEEDS = [1, 2, 3]


def test_perfect_cloud_only_success_is_one():
    tasks = make_tasks()
    report = evaluate(
        "cloud_only", RoutingMode.cloud_only(), tasks, DEV,
        env.ScriptedPolicy("cloud", 1.0, 1.0), SEEDS, COST,
    )
    assert report.success_rate == 1.0
    assert report.success_std == 0.0
    assert report.mean_cloud_calls == 10.0
    assert report.cloud_step_fraction == 1.0


def test_hopeless_device_only_success_is_zero():
    tasks = make_tasks()
    report = evaluate(
        "device_only", RoutingMode.device_only(), tasks,
        env.ScriptedPolicy("device", 0.9, 0.0), CLOUD, SEEDS, COST,
    )
    assert report.success_rate == 0.0
    assert report.mean_cloud_calls == 0.0
    assert report.mean_api_cost == 0.0


def test_random_half_sits_between_pure_modes():
    tasks = make_tasks(count=30)
    dev_rep = evaluate("device_only", RoutingMode.device_only(), tasks, DEV, CLOUD, SEEDS, COST)
    cloud_rep = evaluate("cloud_only", RoutingMode.cloud_only(), tasks, DEV, CLOUD, SEEDS, COST)
    rand_rep = evaluate("random(0.5)", RoutingMode.random(0.5), tasks, DEV, CLOUD, SEEDS, COST)
    assert dev_rep.success_rate <= rand_rep.success_rate <= cloud_rep.success_rate
    assert dev_rep.mean_cloud_calls < rand_rep.mean_cloud_calls < cloud_rep.mean_cloud_calls


def test_aggregates_equal_row_recomputation():
    tasks = make_tasks()
    report = evaluate("random(0.4)", RoutingMode.random(0.4), tasks, DEV, CLOUD, SEEDS, COST)
    again = recompute_aggregates(report.rows, report.seeds)
    assert report.success_rate == again["success_rate"]
    assert report.success_std == again["success_std"]
    assert report.mean_cloud_calls == again["mean_cloud_calls"]
    assert report.cloud_step_fraction == again["cloud_step_fraction"]
    assert report.mean_api_cost == again["mean_api_cost"]
    assert report.mean_latency == again["mean_latency"]


def test_reports_identical_across_reruns():
    tasks = make_tasks()
    a = evaluate("m", RoutingMode.random(0.5), tasks, DEV, CLOUD, SEEDS, COST)
    b = evaluate("m", RoutingMode.random(0.5), tasks, DEV, CLOUD, SEEDS, COST)
    assert a == b


def test_empty_inputs_rejected():
    tasks = make_tasks()
    with pytest.raises(UsageError):
        evaluate("m", RoutingMode.device_only(), [], DEV, CLOUD, SEEDS, COST)
    with pytest.raises(UsageError):
        evaluate("m", RoutingMode.device_only(), tasks, DEV, CLOUD, [], COST)


def test_pareto_endpoints_match_pure_modes():
    tasks = make_tasks()
    points = pareto_sweep(
        [("random", [0.0, 1.0], RoutingMode.random)], tasks, DEV, CLOUD, SEEDS, COST
    )
    dev_rep = evaluate("device_only", RoutingMode.device_only(), tasks, DEV, CLOUD, SEEDS, COST)
    cloud_rep = evaluate("cloud_only", RoutingMode.cloud_only(), tasks, DEV, CLOUD, SEEDS, COST)
    by_knob = {p.knob: p for p in points}
    assert by_knob[0.0].success_rate == dev_rep.success_rate
    assert by_knob[0.0].mean_cloud_calls == dev_rep.mean_cloud_calls
    assert by_knob[1.0].success_rate == cloud_rep.success_rate
    assert by_knob[1.0].mean_cloud_calls == cloud_rep.mean_cloud_calls


def test_random_knob_monotone_in_cloud_calls():
    tasks = make_tasks(count=20)
    grid = [0.0, 0.25, 0.5, 0.75, 1.0]
    points = pareto_sweep(
        [("random", grid, RoutingMode.random)], tasks, DEV, CLOUD, SEEDS, COST
    )
    calls = [p.mean_cloud_calls for p in sorted(points, key=lambda p: p.knob)]
    assert all(a <= b for a, b in zip(calls, calls[1:]))


def test_pareto_rejects_empty_grid():
    with pytest.raises(UsageError):
        pareto_sweep([("random", [], RoutingMode.random)], make_tasks(), DEV, CLOUD,
                     SEEDS, COST)


def test_interpolation_between_grid_points():
    from steproute.evaluation import ParetoPoint

    pts = [
        ParetoPoint("random", 0.0, 0.0, 0.0, 0.0),
        ParetoPoint("random", 0.5, 4.0, 0.4, 0.0),
        ParetoPoint("random", 1.0, 8.0, 0.8, 0.0),
    ]
    assert interpolate_success_at_calls(pts, 2.0) == pytest.approx(0.2)
    assert interpolate_success_at_calls(pts, 6.0) == pytest.approx(0.6)
    assert interpolate_success_at_calls(pts, -1.0) == 0.0
    assert interpolate_success_at_calls(pts, 99.0) == 0.8


def cloud_trajectory_fixture(tasks, cloud, n_per_task=40, seed=61):
    return {
        t.task_id: collect_group(t, DEV, cloud, RoutingMode.cloud_only(), n_per_task, seed)
        for t in tasks
    }


def test_analyze_identity_case():
    tasks = make_tasks(count=2)
    onehot_dev = env.ScriptedPolicy("device", 1.0, 1.0)
    onehot_cloud = env.ScriptedPolicy("cloud", 1.0, 1.0)
    trajs = {
        t.task_id: collect_group(t, onehot_dev, onehot_cloud, RoutingMode.cloud_only(), 3, 5)
        for t in tasks
    }
    analysis = analyze_steps(trajs, {t.task_id: t for t in tasks}, onehot_dev,
                             "greedy", master_seed=5)
    assert analysis.match_rate_overall == 1.0
    assert analysis.entropy_mismatched.count == 0
    assert math.isnan(analysis.entropy_mismatched.mean)
    assert analysis.cdf_points[-1] == (1.0, 1.0)


def test_analyze_dips_exactly_at_critical_positions():
    tasks = make_tasks(count=8)
    trajs = cloud_trajectory_fixture(tasks, CLOUD)
    analysis = analyze_steps(trajs, {t.task_id: t for t in tasks}, DEV, "sample",
                             master_seed=7)
    # analytic per-position match rates: routine 0.8556, critical 0.2933
    routine = 0.9 * 0.95 + 3 * (0.1 / 3) * (0.05 / 3)
    crit = 0.3 * 0.9 + 3 * (0.7 / 3) * (0.1 / 3)
    midpoint = (routine + crit) / 2
    dips = {
        t
        for t, rate in zip(analysis.positions, analysis.match_rate_by_position)
        if rate < midpoint
    }
    assert dips == {3, 7}


def test_analyze_overall_is_count_weighted_position_mean():
    tasks = make_tasks(count=4)
    trajs = cloud_trajectory_fixture(tasks, CLOUD, n_per_task=10)
    analysis = analyze_steps(trajs, {t.task_id: t for t in tasks}, DEV, "sample",
                             master_seed=9)
    weighted = sum(
        r * c for r, c in zip(analysis.match_rate_by_position, analysis.counts_by_position)
    ) / sum(analysis.counts_by_position)
    assert analysis.match_rate_overall == pytest.approx(weighted, abs=1e-12)


def test_analyze_entropy_separation_matches_analytic_direction():
    # device critical-step distribution is much flatter than routine
    tasks = make_tasks(count=6)
    trajs = cloud_trajectory_fixture(tasks, CLOUD, n_per_task=30)
    analysis = analyze_steps(trajs, {t.task_id: t for t in tasks}, DEV, "sample",
                             master_seed=11)

    def h(probs):
        return -sum(p * math.log(p) for p in probs if p > 0)

    h_routine = h([0.9] + [0.1 / 3] * 3)
    h_crit = h([0.3] + [0.7 / 3] * 3)
    assert h_crit > h_routine
    assert analysis.entropy_mismatched.mean > analysis.entropy_matched.mean
    # every recorded entropy is one of the two analytic values
    assert analysis.entropy_matched.mean >= h_routine - 1e-9
    assert analysis.entropy_mismatched.mean <= h_crit + 1e-9


def test_analyze_length_separation():
    tasks = make_tasks(count=6, routine_reasoning_mean=8.0, critical_reasoning_mean=40.0)
    trajs = cloud_trajectory_fixture(tasks, CLOUD, n_per_task=30)
    analysis = analyze_steps(trajs, {t.task_id: t for t in tasks}, DEV, "sample",
                             master_seed=13)
    assert analysis.length_mismatched.mean > analysis.length_matched.mean


def test_entropy_threshold_extremes():
    tasks = make_tasks(count=5)
    # stochastic device: entropy > 0 at every step, so threshold 0 acts cloud-only
    results = entropy_threshold_baseline(tasks, DEV, CLOUD, [0.0], SEEDS, COST)
    cloud_rep = evaluate("cloud_only", RoutingMode.cloud_only(), tasks, DEV, CLOUD,
                         SEEDS, COST)
    thr, rep = results[0]
    assert rep.success_rate == cloud_rep.success_rate
    assert rep.mean_cloud_calls == cloud_rep.mean_cloud_calls

    # threshold at the entropy ceiling acts device-only (all entropies below it)
    top = math.log(tasks[0].action_count)
    results = entropy_threshold_baseline(tasks, DEV, CLOUD, [top], SEEDS, COST)
    dev_rep = evaluate("device_only", RoutingMode.device_only(), tasks, DEV, CLOUD,
                       SEEDS, COST)
    _, rep = results[0]
    assert rep.success_rate == dev_rep.success_rate
    assert rep.mean_cloud_calls == dev_rep.mean_cloud_calls


def test_entropy_threshold_mid_grid_is_intermediate():
    tasks = make_tasks(count=10)
    # critical steps are exactly the high-entropy ones for the device policy
    routine_h = -(0.9 * math.log(0.9) + 0.1 * math.log(0.1 / 3))
    results = entropy_threshold_baseline(tasks, DEV, CLOUD, [routine_h + 0.05],
                                         SEEDS, COST)
    _, rep = results[0]
    assert 0.0 < rep.mean_cloud_calls < 10.0


def test_entropy_threshold_out_of_range_rejected():
    tasks = make_tasks(count=2)
    with pytest.raises(ConfigError):
        entropy_threshold_baseline(tasks, DEV, CLOUD, [10.0], SEEDS, COST)
    with pytest.raises(ConfigError):
        entropy_threshold_baseline(tasks, DEV, CLOUD, [-0.1], SEEDS, COST)
