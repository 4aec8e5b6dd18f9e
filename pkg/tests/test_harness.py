from dataclasses import replace

import numpy as np
import pytest

from advla.attack import AttackConfig
from advla.harness import (BENCH_HEADER, METRICS_HEADER, Blob, Condition, MetricsTable,
                           SceneSpec, TaskConfig, bench_iteration_time, episode_specs,
                           evaluate_suite, fit_policy, fit_ridge, fr_monotonicity,
                           optimal_action, render_scene, run_episode, sample_scene,
                           summarize, table2_conditions, table3_conditions, training_scenes)

TASK = TaskConfig(max_steps=6, train_scenes=200, agent_radius=3, goal_radius=3)


@pytest.fixture(scope="module")
def policy(tiny_enc):
    return fit_policy(tiny_enc, training_scenes(TASK, 0), TASK.ridge)


def scene(**kw):
    base = dict(agent=(0.3, 0.3), goal=(0.7, 0.6), agent_radius=6, goal_radius=8)
    base.update(kw)
    return SceneSpec(**base)


def test_render_range_and_colors():
    img = render_scene(scene())
    assert img.shape == (3, 64, 64) and 0 <= img.min() and img.max() <= 1
    np.testing.assert_allclose(img[:, int(0.3 * 64), int(0.3 * 64)], (1.0, 0.15, 0.1))
    np.testing.assert_allclose(img[:, 0, 63], 0.45)


def test_moving_agent_changes_only_its_boxes():
    a = render_scene(scene(agent=(0.3, 0.3)))
    b = render_scene(scene(agent=(0.45, 0.25)))
    changed = np.any(a != b, axis=0)
    allowed = np.zeros((64, 64), dtype=bool)
    for x, y in ((0.3, 0.3), (0.45, 0.25)):
        cx, cy, r = x * 64, y * 64, 6 + 1
        allowed[max(0, int(np.floor(cy - r - 1))):int(np.ceil(cy + r + 1)) + 1,
                max(0, int(np.floor(cx - r - 1))):int(np.ceil(cx + r + 1)) + 1] = True
    assert changed.any() and not np.any(changed & ~allowed)


def test_distractors_drawn_under_agent():
    d = Blob(0.3, 0.3, 4, (0.0, 1.0, 0.0))
    img = render_scene(scene(distractors=(d,)))
    np.testing.assert_allclose(img[:, int(0.3 * 64), int(0.3 * 64)], (1.0, 0.15, 0.1))


@pytest.mark.parametrize("kw", [dict(agent=(1.2, 0.5)), dict(goal=(0.5, -0.1)),
                                dict(agent_radius=1.5), dict(background=2.0)])
def test_scene_validation(kw):
    with pytest.raises(ValueError):
        render_scene(scene(**kw))


def test_sample_scene_respects_margin_and_distance(rng):
    task = TaskConfig(num_distractors=2)
    for _ in range(50):
        s = sample_scene(rng, task)
        for x in (*s.agent, *s.goal):
            assert task.margin <= x <= 1 - task.margin
        assert np.hypot(*np.subtract(s.agent, s.goal)) >= task.min_start_distance
        assert len(s.distractors) == 2


def test_fixed_goal(rng):
    s = sample_scene(rng, TaskConfig(goal=(0.5, 0.5)))
    assert s.goal == (0.5, 0.5)


def test_optimal_action_is_displacement():
    np.testing.assert_allclose(optimal_action(scene()), (0.4, 0.3))


def test_ridge_recovers_linear_map(rng):
    X = rng.standard_normal((300, 5))
    W = rng.standard_normal((5, 2))
    head = fit_ridge(X, X @ W + [0.5, -1.0], 1e-12)
    np.testing.assert_allclose(head.weights, W, atol=1e-8)
    np.testing.assert_allclose(head.bias, [0.5, -1.0], atol=1e-8)


def test_ridge_closed_form_oracle(rng):
    X, Y = rng.standard_normal((50, 4)), rng.standard_normal((50, 2))
    lam = 0.3
    head = fit_ridge(X, Y, lam)
    Xc, Yc = X - X.mean(0), Y - Y.mean(0)
    W = np.linalg.inv(Xc.T @ Xc + 50 * lam * np.eye(4)) @ Xc.T @ Yc
    np.testing.assert_allclose(head.weights, W, rtol=1e-10)


def test_ridge_limit_and_duplication(rng):
    X, Y = rng.standard_normal((40, 3)), rng.standard_normal((40, 2))
    assert np.abs(fit_ridge(X, Y, 1e12).weights).max() < 1e-10
    a = fit_ridge(X, Y, 0.1)
    b = fit_ridge(np.vstack([X, X]), np.vstack([Y, Y]), 0.1)
    np.testing.assert_allclose(a.weights, b.weights, rtol=1e-10)
    with pytest.raises(ValueError):
        fit_ridge(X, Y, 0.0)


def test_fit_policy_needs_enough_scenes(tiny_enc):
    with pytest.raises(ValueError):
        fit_policy(tiny_enc, training_scenes(replace(TASK, train_scenes=200), 0)[:10])


def test_start_inside_goal_succeeds_at_step_zero(tiny_enc, policy):
    s = SceneSpec(agent=(0.5, 0.5), goal=(0.52, 0.5), agent_radius=3, goal_radius=3)
    rec = run_episode(tiny_enc, policy, s, Condition("CLEAN"), TASK)
    assert rec.success and rec.steps == 0


def test_episode_steps_bounded(tiny_enc, policy):
    s = episode_specs(TASK, 1, 0)[0]
    rec = run_episode(tiny_enc, policy, s, Condition("CLEAN"), TASK)
    assert rec.steps <= TASK.max_steps and len(rec.trajectory) == rec.steps + 1
    steps = np.diff(np.array(rec.trajectory), axis=0)
    assert np.all(np.hypot(*steps.T) <= TASK.step_size + 1e-12)


def test_condition_validation():
    with pytest.raises(ValueError):
        Condition("FGSM")
    c = Condition("TKM", epsilon=2 / 255, alpha=1 / 255, iters=4, ratio=0.2)
    a = c.attack_config(AttackConfig(), seed=3)
    assert (a.strategy.value, a.iterations, a.topk_ratio, a.seed) == ("TKM", 4, 0.2, 3)
    # alpha never exceeds the budget
    assert Condition("ADVLA", epsilon=0.5 / 255).attack_config(AttackConfig(), 0).alpha == 0.5 / 255


def test_suite_is_paired_and_deterministic(tiny_enc, policy):
    conds = [Condition("CLEAN"), Condition("TKM", epsilon=8 / 255, iters=2, ratio=0.2)]
    a = evaluate_suite(tiny_enc, policy, conds, 3, TASK)
    b = evaluate_suite(tiny_enc, policy, conds, 3, TASK)
    assert a.to_csv().splitlines()[1] == b.to_csv().splitlines()[1]
    for ea, eb in zip(a.episodes[0], b.episodes[0]):
        assert ea.trajectory == eb.trajectory
    # every trial starts from the same scene in every condition
    assert [e.trajectory[0] for e in a.episodes[0]] == [e.trajectory[0] for e in a.episodes[1]]
    tkm = a.find("TKM")
    # K = ceil(0.2 * 16) = 4 patches, so at most 4/16 of the patches change
    assert tkm.mean_patch_fraction <= 4 / 16 and tkm.iters == 2


def test_worker_count_does_not_change_results(tiny_enc, policy):
    conds = [Condition("ADVLA", epsilon=4 / 255, iters=1), Condition("RANDOM", epsilon=4 / 255)]
    a = evaluate_suite(tiny_enc, policy, conds, 3, TASK, workers=1)
    b = evaluate_suite(tiny_enc, policy, conds, 3, TASK, workers=2)
    for ci in range(2):
        assert [e.trajectory for e in a.episodes[ci]] == [e.trajectory for e in b.episodes[ci]]
        assert [e.losses for e in a.episodes[ci]] == [e.losses for e in b.episodes[ci]]


def test_metrics_csv_schema(tiny_enc, policy):
    t = evaluate_suite(tiny_enc, policy, [Condition("CLEAN")], 2, TASK)
    text = t.to_csv()
    assert "\r" not in text
    lines = text.split("\n")
    assert lines[0] == ",".join(METRICS_HEADER)
    assert METRICS_HEADER == ("condition", "epsilon", "alpha", "iters", "ratio", "trials", "sr",
                              "fr", "mean_loss", "mean_iter_seconds", "mean_patch_fraction")
    assert len(lines) == 3 and lines[2] == ""
    with pytest.raises(KeyError):
        t.find("TKL")


def test_summarize_counts():
    from advla.harness import EpisodeRecord
    eps = [EpisodeRecord("ADVLA", 3, True, losses=[0.1, 0.3]),
           EpisodeRecord("ADVLA", 9, False, losses=[0.2])]
    r = summarize(Condition("ADVLA", epsilon=4 / 255, iters=6), eps)
    assert (r.sr, r.fr, r.trials, r.ratio) == (0.5, 0.5, 2, 1.0)
    assert r.mean_loss == pytest.approx(0.2)


def test_condition_grids():
    t2 = table2_conditions()
    assert [c.name for c in t2[:6]] == ["CLEAN", "RANDOM", "ADVLA", "AW", "TKM", "TKL"]
    assert len(t2) == 1 + 3 * 5
    t3 = table3_conditions()
    assert sorted({c.iters for c in t3}) == [4, 5, 6]
    assert all(abs(c.epsilon - 4 / 255) < 1e-15 for c in t3)


def test_fr_monotonicity_messages():
    from advla.harness import MetricsRow
    rows = [MetricsRow("ADVLA", e / 255, 1 / 255, 6, 1.0, 10, 1 - fr, fr, 0, 0, 1)
            for e, fr in ((2, 0.2), (4, 0.5), (8, 0.4))]
    msgs = fr_monotonicity(MetricsTable(rows))
    assert len(msgs) == 1 and "0.500" in msgs[0]
    assert fr_monotonicity(MetricsTable(rows), tolerance=0.1) == []


def test_bench_rows(tiny_enc):
    rep = bench_iteration_time(tiny_enc, AttackConfig(iterations=2), repeats=10)
    assert len(rep.rows) == 10 and len(rep.iteration_seconds) == 20
    lines = rep.to_csv().strip().split("\n")
    assert lines[0] == ",".join(BENCH_HEADER) and len(lines) == 11
    assert rep.mean > 0 and rep.median > 0 and rep.stdev >= 0
    with pytest.raises(ValueError):
        bench_iteration_time(tiny_enc, AttackConfig(), repeats=9)


def test_bench_larger_image_is_slower():
    from advla.encoder import EncoderConfig, init_encoder
    small = init_encoder(EncoderConfig(image_h=32, image_w=32, patch_size=8, embed_dim=32,
                                       num_blocks=2, num_heads=2, proj_dim=16))
    big = init_encoder(EncoderConfig(image_h=64, image_w=64, patch_size=8, embed_dim=32,
                                     num_blocks=2, num_heads=2, proj_dim=16))
    cfg = AttackConfig(iterations=3)
    t_small = bench_iteration_time(small, cfg, repeats=10).median
    t_big = bench_iteration_time(big, cfg, repeats=10).median
    assert t_big > t_small
