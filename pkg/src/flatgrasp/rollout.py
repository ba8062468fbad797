"""Receding-horizon execution of learned policies in the planar simulator.

Episodes run in lockstep batches: one batched policy call produces an action
chunk per live episode, each environment consumes the chunk, and finished
episodes drop out. Per-episode RTG starts at the bucket's best recorded
return and is decremented by realized rewards, floored at the bucket's worst
return. Policies see the same quantized images the training set stored.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import datagen, planner, sim
from .denoiser import denormalize_actions
from .plans import PlanError, PlanTuple


@dataclass
class EpisodeResult:
    scenario: str
    planner_name: str
    outcome: str                 # success | fallen | timeout | failed_plan
    steps: int
    sampling_calls: int
    steps_per_call: list[int]
    final_pose: tuple[float, float, float]
    goal_pose: tuple[float, float, float] | None
    plan_sentence: str | None
    seed: int
    failure_reason: str | None = None

    @property
    def success(self) -> bool:
        return self.outcome == "success"


@dataclass
class _Live:
    index: int
    state: sim.SimState
    spec: planner.RewardSpec
    plan: PlanTuple
    rtg: float
    floor: float
    norm: float
    images: list[np.ndarray] = field(default_factory=list)   # quantized u8
    poses: list[np.ndarray] = field(default_factory=list)
    rtg_trace: list[float] = field(default_factory=list)
    steps_per_call: list[int] = field(default_factory=list)
    steps: int = 0


def _observe_into(live: _Live, frames_sink=None) -> None:
    obs = sim.observe(live.state)
    img = sim.quantize_image(obs.image)
    live.images.append(img)
    live.poses.append(np.asarray(obs.gripper_pose_vec, dtype=np.float32))
    live.rtg_trace.append(live.rtg)
    if frames_sink is not None:
        frames_sink(live.index, img)


def _window_arrays(live: _Live, obs_frames: int):
    # newest entry last; short histories repeat the first observation
    idx = [max(0, len(live.images) - obs_frames + j) for j in range(obs_frames)]
    imgs = np.stack([live.images[i] for i in idx])
    poses = np.stack([live.poses[i] for i in idx])
    rtgs = np.asarray([live.rtg_trace[i] for i in idx], dtype=np.float32)
    return imgs, poses, rtgs / live.norm


def _failed_result(cfg: sim.SceneConfig, plan: PlanTuple | None,
                   planner_name: str, seed: int, reason: str) -> EpisodeResult:
    goal = None
    if plan is not None:
        try:
            st0 = sim.reset(cfg)
            g = sim.goal_grasp_pose(st0, plan)
            goal = (float(g.x), float(g.z), float(g.theta))
        except (sim.SceneConfigError, PlanError):
            goal = None
    return EpisodeResult(
        scenario=cfg.scenario, planner_name=planner_name, outcome="failed_plan",
        steps=0, sampling_calls=0, steps_per_call=[],
        final_pose=(cfg.gripper_x, cfg.gripper_z, cfg.gripper_pitch),
        goal_pose=goal,
        plan_sentence=planner.render_plan(plan) if plan is not None else None,
        seed=seed, failure_reason=reason,
    )


def run_batch(
    cfgs: list[sim.SceneConfig],
    plans: list,
    driver,
    manifest: dict,
    planner_name: str,
    seeds: list[int] | None = None,
    frames_sink=None,
) -> list[EpisodeResult]:
    """Roll every episode to termination; returns results in input order.

    `plans[i]` is a PlanTuple or an error string (planning already failed).
    `driver` exposes `n_actions` and `obs_frames` and maps batched windows
    to normalized action chunks: driver(images, poses, rtg, active_ids).
    """
    seeds = seeds if seeds is not None else [0] * len(cfgs)
    results: dict[int, EpisodeResult] = {}
    live: list[_Live] = []
    for i, (cfg, plan) in enumerate(zip(cfgs, plans)):
        if not isinstance(plan, PlanTuple):
            results[i] = _failed_result(cfg, None, planner_name, seeds[i],
                                        str(plan) if plan else "no plan")
            continue
        try:
            spec = planner.make_reward_spec(plan, cfg)
        except PlanError as e:
            results[i] = _failed_result(cfg, plan, planner_name, seeds[i], str(e))
            continue
        state = sim.reset(cfg, plan)
        ep = _Live(
            index=i, state=state, spec=spec, plan=plan,
            rtg=datagen.target_return(manifest, cfg.scenario, plan),
            floor=datagen.rtg_floor(manifest, cfg.scenario, plan),
            norm=datagen.bucket_rtg_norm(manifest, cfg.scenario, plan),
        )
        _observe_into(ep, frames_sink)
        live.append(ep)

    obs_frames = driver.obs_frames
    while live:
        imgs, poses, rtgs = zip(*(_window_arrays(ep, obs_frames) for ep in live))
        images = torch.as_tensor(np.stack(imgs), dtype=torch.float32)
        images = images.permute(0, 1, 4, 2, 3).contiguous() / 255.0
        batch_poses = torch.as_tensor(np.stack(poses), dtype=torch.float32)
        batch_rtg = torch.as_tensor(np.stack(rtgs), dtype=torch.float32)
        active_ids = [ep.index for ep in live]
        chunks = driver(images, batch_poses, batch_rtg, active_ids)
        acts = denormalize_actions(chunks.detach()).cpu().numpy()

        still = []
        for b, ep in enumerate(live):
            executed = 0
            for j in range(acts.shape[1]):
                if ep.state.terminal is not None:
                    break
                action = sim.Action(*acts[b, j]).clipped()
                nxt, sparse, _ = sim.step(ep.state, action)
                reward = planner.step_reward(ep.spec, ep.state, nxt, sparse)
                ep.rtg = max(ep.rtg - reward, ep.floor)
                ep.state = nxt
                ep.steps += 1
                executed += 1
                _observe_into(ep, frames_sink)
            ep.steps_per_call.append(executed)
            if ep.state.terminal is None:
                still.append(ep)
            else:
                goal = sim.goal_grasp_pose(ep.state, ep.plan)
                results[ep.index] = EpisodeResult(
                    scenario=ep.state.scene.scenario,
                    planner_name=planner_name,
                    outcome=ep.state.terminal,
                    steps=ep.steps,
                    sampling_calls=len(ep.steps_per_call),
                    steps_per_call=ep.steps_per_call,
                    final_pose=(ep.state.gripper_x, ep.state.gripper_z,
                                ep.state.gripper_pitch),
                    goal_pose=(float(goal.x), float(goal.z), float(goal.theta)),
                    plan_sentence=planner.render_plan(ep.plan),
                    seed=seeds[ep.index],
                )
        live = still
    return [results[i] for i in range(len(cfgs))]


def rollout_episode(
    cfg: sim.SceneConfig,
    plan,
    driver,
    manifest: dict,
    planner_name: str = "scripted-vlm",
    seed: int = 0,
    collect_frames: bool = False,
):
    """Single-episode wrapper; optionally returns every rendered frame."""
    frames: list[np.ndarray] = []
    sink = (lambda _i, img: frames.append(img)) if collect_frames else None
    result = run_batch([cfg], [plan], driver, manifest, planner_name,
                       seeds=[seed], frames_sink=sink)[0]
    return (result, frames) if collect_frames else result
