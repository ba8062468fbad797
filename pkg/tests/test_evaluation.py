"""Metrics, baselines, randomized evaluation, and the horizon sweep."""

import dataclasses
import math

import numpy as np
import pytest
import torch

from flatgrasp import evaluation, planner, sim
from flatgrasp.rollout import EpisodeResult


def result_with(final, goal, outcome="timeout", scenario="basic"):
    return EpisodeResult(
        scenario=scenario, planner_name="scripted-vlm", outcome=outcome,
        steps=10, sampling_calls=5, steps_per_call=[2] * 5,
        final_pose=final, goal_pose=goal, plan_sentence=None, seed=0,
    )


# ---------------------------------------------------------------------------
# metrics


def test_success_rate_extremes():
    fail = result_with((0, 0, 0), (1, 0, 0))
    win = result_with((0, 0, 0), (0, 0, 0), outcome="success")
    assert evaluation.success_rate([fail] * 10) == 0.0
    assert evaluation.success_rate([win] * 35) == 1.0
    assert evaluation.success_rate([win] + [fail] * 4) == pytest.approx(0.2)


def test_success_rate_empty_rejected():
    with pytest.raises(ValueError, match="no episodes"):
        evaluation.success_rate([])


def test_distance_error_zero_when_poses_match():
    d, score = evaluation.distance_error([result_with((0.4, 0.1, 0.3),
                                                      (0.4, 0.1, 0.3))])
    assert d == 0.0
    assert score == 0.0


def test_distance_error_hand_value():
    # 0.1 m translation and 0.05 rad rotation: 25*0.1 + 4*0.05
    d, score = evaluation.distance_error([result_with((0.1, 0.0, 0.05),
                                                      (0.0, 0.0, 0.0))])
    assert d == pytest.approx(2.7, abs=1e-12)
    assert score == pytest.approx(-2.7, abs=1e-12)


def test_distance_error_is_a_mean():
    a = result_with((0.0, 0.0, 0.5), (0.0, 0.0, 0.0))     # 4*0.5 = 2.0
    b = result_with((0.0, 0.0, 1.0), (0.0, 0.0, 0.0))     # 4*1.0 = 4.0
    d, _ = evaluation.distance_error([a, b])
    assert d == pytest.approx(3.0, abs=1e-12)


def test_distance_error_translation_invariant():
    rng = np.random.default_rng(0)
    final = (0.31, 0.12, 0.7)
    goal = (0.55, 0.02, -0.4)
    base, _ = evaluation.distance_error([result_with(final, goal)])
    for _ in range(100):
        tx, tz = rng.uniform(-5, 5, size=2)
        shifted = result_with((final[0] + tx, final[1] + tz, final[2]),
                              (goal[0] + tx, goal[1] + tz, goal[2]))
        d, _ = evaluation.distance_error([shifted])
        assert abs(d - base) < 1e-12


def test_distance_error_rotation_wraps():
    d, _ = evaluation.distance_error(
        [result_with((0.0, 0.0, math.pi - 0.01), (0.0, 0.0, -math.pi + 0.01))])
    assert d == pytest.approx(4 * 0.02, abs=1e-9)


def test_distance_error_nonnegative_and_score_mirrors():
    rng = np.random.default_rng(3)
    for _ in range(50):
        f = tuple(rng.uniform(-2, 2, size=3))
        g = tuple(rng.uniform(-2, 2, size=3))
        d, score = evaluation.distance_error([result_with(f, g)])
        assert d >= 0.0
        assert score == -d


def test_distance_error_needs_goal_poses():
    with pytest.raises(ValueError, match="goal"):
        evaluation.distance_error([result_with((0, 0, 0), None)])
    with pytest.raises(ValueError, match="goal"):
        evaluation.distance_error([])


# ---------------------------------------------------------------------------
# baseline constructors and training


def test_dp_drops_exactly_the_return_tokens():
    gcad = evaluation.build_method("gcad", seed=0)
    dp = evaluation.build_method("dp", seed=0)
    assert gcad.pos_embed.shape[1] - dp.pos_embed.shape[1] == gcad.obs_frames


def test_regressor_shapes():
    bc = evaluation.build_method("bc", seed=0)
    dt = evaluation.build_method("dt", seed=0)
    images = torch.rand(3, 2, 3, 64, 64)
    poses = torch.rand(3, 2, 4)
    rtg = torch.rand(3, 2)
    assert bc(images, poses, None).shape == (3, 2, 4)
    assert dt(images, poses, rtg).shape == (3, 1, 4)
    with pytest.raises(ValueError, match="rtg"):
        dt(images, poses, None)
    with pytest.raises(ValueError, match="unknown method"):
        evaluation.build_method("sac", seed=0)


def test_regressor_train_empty_rejected(small_manifest):
    model = evaluation.build_method("bc", seed=0)
    with pytest.raises(ValueError, match="empty"):
        evaluation.train_regressor(model, [], small_manifest, epochs=1)


def test_regressor_train_deterministic(small_episodes, small_manifest):
    curves = []
    for _ in range(2):
        model = evaluation.build_method("bc", seed=4)
        curves.append(evaluation.train_regressor(
            model, small_episodes, small_manifest, epochs=1, seed=4))
    assert curves[0] == curves[1]


@pytest.mark.parametrize("method", ["bc", "dt"])
def test_regressor_recovers_constant_actions(method, small_episodes,
                                             small_manifest):
    const = np.array([0.012, -0.006, 0.04, 0.5], dtype=np.float32)
    flat = [dataclasses.replace(ep, actions=np.tile(const, (ep.T, 1)))
            for ep in small_episodes]
    model = evaluation.build_method(method, seed=2)
    evaluation.train_regressor(model, flat, small_manifest, epochs=60, seed=2)
    model.eval()
    from flatgrasp import denoiser
    batch = denoiser.assemble_windows(
        flat, small_manifest, [(0, 3), (2, 8)],
        action_frames=model.out_frames)
    with torch.no_grad():
        pred = model(batch["images"], batch["poses"],
                     batch["rtg"] if model.use_rtg else None)
    want = denoiser.normalize_actions(torch.as_tensor(const))
    assert torch.all((pred - want).abs() < 0.05)


# ---------------------------------------------------------------------------
# randomized evaluation


def test_zero_width_randomization_reproduces_in_distribution(small_manifest,
                                                             default_schedule):
    model = evaluation.build_method("bc", seed=1)
    runs = []
    for rnd in (None, evaluation.Randomization()):
        report, results = evaluation.evaluate_method(
            "bc", model, small_manifest, default_schedule,
            scenarios=("surround",), episodes_per_scenario=3, root_seed=9,
            randomization=rnd)
        runs.append((report, results["surround"]))
    assert runs[0][0] == runs[1][0]
    for a, b in zip(runs[0][1], runs[1][1]):
        assert a == b


def test_paired_eval_seeds_share_scenes(small_manifest, default_schedule):
    goals = {}
    for method in ("bc", "dt"):
        model = evaluation.build_method(method, seed=3)
        _, results = evaluation.evaluate_method(
            method, model, small_manifest, default_schedule,
            scenarios=("surround",), episodes_per_scenario=3, root_seed=5)
        goals[method] = [(r.seed, r.goal_pose) for r in results["surround"]]
    assert goals["bc"] == goals["dt"]


def test_friction_randomization_samples_inside_range():
    base = sim.scenario_config("surround")
    rnd = evaluation.GENERALIZATION
    rng = np.random.default_rng(0)
    anchor = evaluation._push_anchor(base)
    for _ in range(50):
        cfg = evaluation._randomized_config(base, rnd, rng, anchor)
        assert 0.2 <= cfg.friction <= 0.8
        assert 0.75 * base.object_width <= cfg.object_width <= 1.25 * base.object_width


def test_oversized_objects_still_admit_goal_poses():
    # +50% size fuzz: planning and goal computation must not throw
    rnd = evaluation.Randomization(size=0.5)
    for scenario in ("basic", "surround"):
        base = sim.scenario_config(scenario)
        anchor = evaluation._push_anchor(base)
        rng = np.random.default_rng(1)
        for _ in range(100):
            cfg = evaluation._randomized_config(base, rnd, rng, anchor)
            plan = planner.scripted_vlm_plan(cfg)
            goal = sim.goal_grasp_pose(sim.reset(cfg, plan), plan)
            assert math.isfinite(goal.x) and math.isfinite(goal.theta)


# ---------------------------------------------------------------------------
# reporting


def fake_report(method, srs):
    per = {name: {"sr": sr, "d": 1.0, "score": -1.0, "n": 5}
           for name, sr in srs.items()}
    return evaluation.build_report(
        method, "scripted-vlm",
        {name: [result_with((0, 0, 0), (0.04, 0, 0),
                            outcome="success" if sr else "timeout")] * 5
         for name, sr in srs.items()},
        skipped=0)


def test_compare_table_layout():
    reports = {
        "gcad": fake_report("gcad", {"basic": 1.0, "empty": 1.0}),
        "bc": fake_report("bc", {"basic": 0.0}),
    }
    table = evaluation.compare_table(reports, scenarios=("basic", "empty"))
    lines = table.splitlines()
    assert len(lines) == 3
    assert lines[0].split() == ["method", "Basic", "Empty", "Average"]
    assert lines[1].startswith("gcad")
    assert "-" in lines[2]          # bc has no empty-scenario entry


def test_metric_report_flattens():
    rep = fake_report("gcad", {"basic": 1.0})
    flat = rep.to_dict()
    assert flat["method"] == "gcad"
    assert flat["basic_sr"] == 1.0
    assert "average_score" in flat


# ---------------------------------------------------------------------------
# horizon sweep


def test_sweep_rejects_off_menu_values(small_episodes, small_manifest,
                                       default_schedule):
    with pytest.raises(ValueError, match="horizon values"):
        evaluation.sweep_horizons(small_episodes, small_manifest,
                                  default_schedule, obs_values=(3,),
                                  action_values=(2,))


def test_sweep_single_cell(small_episodes, small_manifest, default_schedule):
    out = evaluation.sweep_horizons(
        small_episodes, small_manifest, default_schedule,
        obs_values=(2,), action_values=(2,), epochs=1,
        episodes_per_scenario=1, scenarios=("surround",))
    assert len(out["rows"]) == 1
    row = out["rows"][0]
    assert (row["obs_frames"], row["action_frames"]) == (2, 2)
    assert 0.0 <= row["success_rate"] <= 1.0
    assert out["best"] == (2, 2)
    assert out["default_is_best"] is True
