"""Benchmark harness: metrics, baseline policies, randomized evaluation.

All methods consume the same dataset files and the same per-episode
environment seeds, so comparisons are paired. Baselines:

    bc   windowed behavior cloning, regresses the expert action chunk
    dp   the diffusion policy with return tokens removed (ablation)
    dt   single-step regression conditioned on observations and returns

Scores follow the convention that distance error D is nonnegative and
reported as score = -D, so larger (less negative) is better.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch import nn

from . import datagen, denoiser, planner, rollout, schedule as sched, sim
from .denoiser import ObsTokenizer, assemble_windows, build_window_index
from .plans import PlanError
from .rollout import EpisodeResult
from .utils import derive_seed, wrap_angle

METHODS = ("gcad", "bc", "dp", "dt")
EVAL_EPISODES = 35
DIST_WEIGHT_T = 25.0
DIST_WEIGHT_R = 4.0


# ---------------------------------------------------------------------------
# metrics


def success_rate(results: list[EpisodeResult]) -> float:
    if not results:
        raise ValueError("no episodes to score")
    return sum(r.success for r in results) / len(results)


def distance_error(
    results: list[EpisodeResult],
    a1: float = DIST_WEIGHT_T,
    a2: float = DIST_WEIGHT_R,
) -> tuple[float, float]:
    """Weighted final-pose error (D, score=-D) over results with goals."""
    usable = [r for r in results if r.goal_pose is not None]
    if not usable:
        raise ValueError("no episodes carry goal poses")
    total = 0.0
    for r in usable:
        ex, ez, et = r.final_pose
        gx, gz, gt = r.goal_pose
        dt = math.hypot(ex - gx, ez - gz)
        dr = abs(wrap_angle(et - gt))
        total += a1 * dt + a2 * dr
    d = total / len(usable)
    return d, -d


@dataclass
class MetricReport:
    method: str
    planner_name: str
    episodes: int
    skipped: int
    per_scenario: dict[str, dict]
    average_sr: float
    average_d: float
    average_score: float

    def to_dict(self) -> dict:
        flat = {
            "method": self.method,
            "planner": self.planner_name,
            "episodes": self.episodes,
            "skipped": self.skipped,
            "average_sr": self.average_sr,
            "average_d": self.average_d,
            "average_score": self.average_score,
        }
        for name, row in self.per_scenario.items():
            for key, val in row.items():
                flat[f"{name}_{key}"] = val
        return flat


def build_report(method: str, planner_name: str,
                 results_by_scenario: dict[str, list[EpisodeResult]],
                 skipped: int) -> MetricReport:
    per = {}
    for name, results in results_by_scenario.items():
        d, score = distance_error(results)
        per[name] = {
            "sr": success_rate(results),
            "d": d,
            "score": score,
            "n": len(results),
        }
    avg_sr = float(np.mean([row["sr"] for row in per.values()]))
    avg_d = float(np.mean([row["d"] for row in per.values()]))
    return MetricReport(
        method=method, planner_name=planner_name,
        episodes=sum(row["n"] for row in per.values()), skipped=skipped,
        per_scenario=per, average_sr=avg_sr, average_d=avg_d,
        average_score=-avg_d,
    )


# ---------------------------------------------------------------------------
# baseline models


class ChunkRegressor(nn.Module):
    """Deterministic window-to-actions regressor on the shared trunk."""

    def __init__(self, obs_frames: int = 2, out_frames: int = 2,
                 action_dim: int = 4, width: int = 128, hidden: int = 256,
                 img_size: int = sim.IMG_SIZE, use_rtg: bool = False):
        super().__init__()
        self.obs_frames = obs_frames
        self.out_frames = out_frames
        self.action_dim = action_dim
        self.width = width
        self.hidden = hidden
        self.img_size = img_size
        self.use_rtg = use_rtg
        self.obs_tokenizer = ObsTokenizer(width, img_size=img_size)
        if use_rtg:
            self.rtg_proj = nn.Linear(1, width)
        in_dim = obs_frames * width * (2 if use_rtg else 1)
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, hidden), nn.SiLU(),
            nn.Linear(hidden, hidden), nn.SiLU(),
            nn.Linear(hidden, out_frames * action_dim),
        )

    def hyperparams(self) -> dict:
        return {
            "obs_frames": self.obs_frames,
            "out_frames": self.out_frames,
            "action_dim": self.action_dim,
            "width": self.width,
            "hidden": self.hidden,
            "img_size": self.img_size,
            "use_rtg": self.use_rtg,
        }

    def forward(self, images: torch.Tensor, poses: torch.Tensor,
                rtg: torch.Tensor | None) -> torch.Tensor:
        feats = self.obs_tokenizer(images, poses)
        b = feats.shape[0]
        parts = [feats.reshape(b, -1)]
        if self.use_rtg:
            if rtg is None:
                raise ValueError("model conditions on returns but rtg is None")
            parts.append(self.rtg_proj(rtg[..., None]).reshape(b, -1))
        out = self.mlp(torch.cat(parts, dim=-1))
        return out.reshape(b, self.out_frames, self.action_dim)


def build_regressor(seed: int, **hyper) -> ChunkRegressor:
    torch.manual_seed(seed)
    return ChunkRegressor(**hyper)


def train_regressor(
    model: ChunkRegressor,
    episodes: list[datagen.Episode],
    manifest: dict,
    epochs: int,
    batch_size: int = 64,
    lr: float = 1e-4,
    seed: int = 0,
    csv_path=None,
) -> list[tuple[int, float]]:
    """MSE regression onto normalized expert actions; seed-deterministic."""
    if not episodes:
        raise ValueError("empty dataset")
    torch.set_num_threads(1)
    gen = torch.Generator().manual_seed(seed)
    index = build_window_index(episodes)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    records: list[tuple[int, float]] = []
    step = 0
    for _ in range(epochs):
        order = torch.randperm(len(index), generator=gen).tolist()
        for lo in range(0, len(order), batch_size):
            picks = [index[i] for i in order[lo:lo + batch_size]]
            batch = assemble_windows(
                episodes, manifest, picks,
                obs_frames=model.obs_frames, action_frames=model.out_frames,
            )
            pred = model(batch["images"], batch["poses"],
                         batch["rtg"] if model.use_rtg else None)
            value = torch.mean((pred - batch["actions"]) ** 2)
            opt.zero_grad()
            value.backward()
            opt.step()
            records.append((step, float(value.detach())))
            step += 1
    if csv_path is not None:
        import csv as csvmod
        with open(csv_path, "w", newline="") as fh:
            writer = csvmod.writer(fh)
            writer.writerow(["step", "loss"])
            writer.writerows(records)
    return records


def build_method(method: str, seed: int, obs_frames: int = 2,
                 action_frames: int = 2):
    """Fresh, reproducibly initialized model for a method name."""
    if method == "gcad":
        return denoiser.build_denoiser(
            seed, obs_frames=obs_frames, action_frames=action_frames)
    if method == "dp":
        return denoiser.build_denoiser(
            seed, obs_frames=obs_frames, action_frames=action_frames,
            use_rtg=False)
    if method == "bc":
        return build_regressor(
            seed, obs_frames=obs_frames, out_frames=action_frames,
            use_rtg=False)
    if method == "dt":
        return build_regressor(
            seed, obs_frames=obs_frames, out_frames=1, use_rtg=True)
    raise ValueError(f"unknown method {method!r}")


def train_method(method: str, model, episodes, manifest,
                 schedule: sched.NoiseSchedule, epochs: int,
                 batch_size: int = 64, lr: float = 1e-4, seed: int = 0,
                 csv_path=None) -> list[tuple[int, float]]:
    if method in ("gcad", "dp"):
        return denoiser.train(model, episodes, manifest, schedule, epochs,
                              batch_size=batch_size, lr=lr, seed=seed,
                              csv_path=csv_path)
    return train_regressor(model, episodes, manifest, epochs,
                           batch_size=batch_size, lr=lr, seed=seed,
                           csv_path=csv_path)


# ---------------------------------------------------------------------------
# batched policy drivers


class DiffusionDriver:
    """Samples action chunks with one persistent noise stream per episode."""

    def __init__(self, model, schedule: sched.NoiseSchedule, root_seed: int,
                 scenario: str):
        self.model = model
        self.schedule = schedule
        self.root_seed = root_seed
        self.scenario = scenario
        self.n_actions = model.action_frames
        self.obs_frames = model.obs_frames
        self._gens: dict[int, torch.Generator] = {}

    def _gen(self, index: int) -> torch.Generator:
        if index not in self._gens:
            seed = derive_seed(self.root_seed, "noise", self.scenario, index)
            self._gens[index] = torch.Generator().manual_seed(seed)
        return self._gens[index]

    def __call__(self, images, poses, rtg, active_ids):
        gens = [self._gen(i) for i in active_ids]
        shape = (self.n_actions, self.model.action_dim)
        init = torch.stack([torch.randn(shape, generator=g) for g in gens])

        def noise_fn(_k, full_shape):
            return torch.stack(
                [torch.randn(full_shape[1:], generator=g) for g in gens]
            )

        return denoiser.sample_actions(
            self.model, self.schedule, images, poses,
            rtg if self.model.use_rtg else None,
            init=init, noise_fn=noise_fn,
        )


class RegressorDriver:
    """Deterministic driver for the regression baselines."""

    def __init__(self, model):
        self.model = model
        self.n_actions = model.out_frames
        self.obs_frames = model.obs_frames

    def __call__(self, images, poses, rtg, active_ids):
        with torch.no_grad():
            return self.model(images, poses,
                              rtg if self.model.use_rtg else None)


def make_driver(method: str, model, schedule: sched.NoiseSchedule,
                root_seed: int, scenario: str):
    if method in ("gcad", "dp"):
        return DiffusionDriver(model, schedule, root_seed, scenario)
    return RegressorDriver(model)


# ---------------------------------------------------------------------------
# randomized evaluation


@dataclass(frozen=True)
class Randomization:
    """Uniform attribute randomization; zero widths reproduce training."""
    position: float = 0.0                       # push-distance scale +-
    size: float = 0.0                           # object width scale +-
    friction: tuple[float, float] | None = None


GENERALIZATION = Randomization(position=0.2, size=0.25, friction=(0.2, 0.8))

_PLANNERS = {
    "scripted-vlm": planner.scripted_vlm_plan,
    "heuristic": planner.heuristic_plan,
}


def _push_anchor(base: sim.SceneConfig) -> float:
    """Final object-center target used to scale push distances."""
    try:
        plan = planner.scripted_vlm_plan(base)
        spec = planner.make_reward_spec(plan, base)
        return spec.push_target_x
    except PlanError:
        return base.object_x


def _randomized_config(base: sim.SceneConfig, rnd: Randomization,
                       rng: np.random.Generator, anchor: float) -> sim.SceneConfig:
    # zero-width attributes stay bit-identical to the base scene
    cfg = base
    if rnd.position:
        obj_mult = rng.uniform(1.0 - rnd.position, 1.0 + rnd.position)
        grip_mult = rng.uniform(1.0 - rnd.position, 1.0 + rnd.position)
        object_x = anchor + (base.object_x - anchor) * obj_mult
        gripper_x = object_x + (base.gripper_x - base.object_x) * grip_mult
        cfg = replace(cfg, object_x=object_x, gripper_x=gripper_x)
    if rnd.size:
        size_mult = rng.uniform(1.0 - rnd.size, 1.0 + rnd.size)
        cfg = replace(cfg, object_width=base.object_width * size_mult)
    if rnd.friction is not None:
        cfg = replace(cfg, friction=rng.uniform(*rnd.friction))
    return cfg


def evaluate_method(
    method: str,
    model,
    manifest: dict,
    schedule: sched.NoiseSchedule,
    scenarios: tuple[str, ...] = sim.SCENARIOS,
    episodes_per_scenario: int = EVAL_EPISODES,
    root_seed: int = 0,
    planner_name: str = "scripted-vlm",
    randomization: Randomization | None = None,
) -> tuple[MetricReport, dict[str, list[EpisodeResult]]]:
    """Run the paired benchmark; returns the report and raw results."""
    if planner_name not in _PLANNERS:
        raise ValueError(f"unknown planner {planner_name!r}")
    plan_fn = _PLANNERS[planner_name]
    rnd = randomization or Randomization()
    results_by_scenario: dict[str, list[EpisodeResult]] = {}
    skipped = 0
    for scenario in scenarios:
        base = sim.scenario_config(scenario)
        anchor = _push_anchor(base)
        cfgs, plans, seeds = [], [], []
        for i in range(episodes_per_scenario):
            rnd_rng = np.random.default_rng(
                derive_seed(root_seed, "randomize", scenario, i))
            env_rng = np.random.default_rng(
                derive_seed(root_seed, "eval-env", scenario, i))
            cfg = _randomized_config(base, rnd, rnd_rng, anchor)
            cfg = datagen.jittered_config(cfg, env_rng)
            try:
                sim.reset(cfg)
            except sim.SceneConfigError:
                skipped += 1
                continue
            try:
                plan = plan_fn(cfg)
            except PlanError as e:
                plan = str(e)
            cfgs.append(cfg)
            plans.append(plan)
            seeds.append(i)
        driver = make_driver(method, model, schedule, root_seed, scenario)
        results_by_scenario[scenario] = rollout.run_batch(
            cfgs, plans, driver, manifest, planner_name, seeds)
    report = build_report(method, planner_name, results_by_scenario, skipped)
    return report, results_by_scenario


def generalization_suite(
    method: str,
    model,
    manifest: dict,
    schedule: sched.NoiseSchedule,
    randomization: Randomization = GENERALIZATION,
    episodes_per_scenario: int = EVAL_EPISODES,
    root_seed: int = 0,
    planner_name: str = "scripted-vlm",
) -> tuple[MetricReport, dict[str, list[EpisodeResult]]]:
    """Out-of-distribution robustness sweep; infeasible scenes are skipped."""
    return evaluate_method(
        method, model, manifest, schedule,
        episodes_per_scenario=episodes_per_scenario, root_seed=root_seed,
        planner_name=planner_name, randomization=randomization,
    )


# ---------------------------------------------------------------------------
# reporting


def compare_table(reports: dict[str, MetricReport],
                  scenarios: tuple[str, ...] = sim.SCENARIOS) -> str:
    """Aligned text table: methods x (scenario SR/score pairs + average)."""
    headers = ["method"] + [s.capitalize() for s in scenarios] + ["Average"]
    rows = []
    for method, rep in reports.items():
        cells = [method]
        for s in scenarios:
            row = rep.per_scenario.get(s)
            cells.append("-" if row is None
                         else f"{row['sr']:.2f} / {row['score']:+.2f}")
        cells.append(f"{rep.average_sr:.2f} / {rep.average_score:+.2f}")
        rows.append(cells)
    widths = [max(len(r[i]) for r in [headers] + rows)
              for i in range(len(headers))]
    lines = []
    for cells in [headers] + rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip())
    return "\n".join(lines)


def sweep_horizons(
    episodes: list[datagen.Episode],
    manifest: dict,
    schedule: sched.NoiseSchedule,
    obs_values: tuple[int, ...] = (1, 2, 4, 8),
    action_values: tuple[int, ...] = (1, 2, 4, 8),
    epochs: int = 1,
    episodes_per_scenario: int = 6,
    root_seed: int = 0,
    scenarios: tuple[str, ...] = sim.SCENARIOS,
) -> dict:
    """Train one small model per horizon pair and report eval SR (non-gating)."""
    allowed = {1, 2, 4, 8}
    if not set(obs_values) <= allowed or not set(action_values) <= allowed:
        raise ValueError("horizon values must come from {1, 2, 4, 8}")
    rows = []
    for to in obs_values:
        for ta in action_values:
            seed = derive_seed(root_seed, "sweep", to, ta)
            model = denoiser.build_denoiser(
                seed, obs_frames=to, action_frames=ta)
            denoiser.train(model, episodes, manifest, schedule, epochs,
                           seed=seed)
            report, _ = evaluate_method(
                "gcad", model, manifest, schedule, scenarios=scenarios,
                episodes_per_scenario=episodes_per_scenario,
                root_seed=root_seed)
            rows.append({
                "obs_frames": to,
                "action_frames": ta,
                "success_rate": report.average_sr,
            })
    best = max(rows, key=lambda r: r["success_rate"])
    return {
        "rows": rows,
        "best": (best["obs_frames"], best["action_frames"]),
        "default_is_best": (best["obs_frames"], best["action_frames"]) == (2, 2),
    }
