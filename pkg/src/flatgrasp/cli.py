"""Command-line front end wiring the full pipeline.

Subcommands: gen-data, train, eval, compare, rollout, parse-plan, render,
sweep-horizons, dump-schedule. Every run that writes outputs also writes a
config echo capturing the fully resolved options, so results are
reproducible from the echo file alone.

Exit codes: 0 success, 2 usage or configuration problem, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import config as cfgfmt
from . import datagen, denoiser, evaluation, planner, rollout, sim
from . import schedule as sched
from .planner import GrammarError
from .plans import PlanError

SEED_ENV = "FLATGRASP_SEED"
OUT_ENV = "FLATGRASP_OUT"


class UsageError(ValueError):
    """Bad flags, config, or input files; maps to exit code 2."""


def _resolve_seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}")
    return 0


def _resolve_out(args) -> Path:
    out = args.out or os.environ.get(OUT_ENV)
    if not out:
        raise UsageError("--out (or FLATGRASP_OUT) is required")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _echo_config(out_dir: Path, command: str, options: dict) -> None:
    cfgfmt.save_file(out_dir / f"{command}_echo.cfg", options)


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    try:
        return cfgfmt.load_file(p)
    except cfgfmt.ConfigError as e:
        raise UsageError(f"bad config file {p}: {e}")


def _load_dataset(path: str):
    p = Path(path)
    if not p.exists():
        raise UsageError(f"dataset not found: {p}")
    episodes = datagen.read_episodes(p)
    manifest = datagen.read_manifest(p)
    return episodes, manifest


def _load_model(path: str):
    p = Path(path)
    if not p.exists():
        raise UsageError(f"checkpoint not found: {p}")
    header, state = ckpt.load_checkpoint(p)
    return header, _model_from_checkpoint(header, state)


def _model_from_checkpoint(header: dict, state: dict):
    method = header.get("method")
    if method in ("gcad", "dp"):
        keys = ("obs_frames", "action_frames", "action_dim", "width",
                "heads", "layers", "img_size", "use_rtg")
        model = denoiser.ActionDenoiser(**{k: header[k] for k in keys})
    elif method in ("bc", "dt"):
        keys = ("obs_frames", "out_frames", "action_dim", "width",
                "hidden", "img_size", "use_rtg")
        model = evaluation.ChunkRegressor(**{k: header[k] for k in keys})
    else:
        raise UsageError(f"checkpoint has unknown method {method!r}")
    model.load_state_dict(state)
    model.eval()
    return model


def _schedule_from_header(header: dict) -> sched.NoiseSchedule:
    return sched.make_square_cosine(int(header.get("k_steps", sched.DEFAULT_K)))


def _write_frame(path: Path, image: np.ndarray, png: bool) -> None:
    if png:
        from PIL import Image
        Image.fromarray(image, mode="RGB").save(path.with_suffix(".png"))
        return
    h, w = image.shape[:2]
    with open(path.with_suffix(".ppm"), "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def _report_lines(report: evaluation.MetricReport) -> str:
    return cfgfmt.dumps(report.to_dict())


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    seed = _resolve_seed(args)
    out = _resolve_out(args)
    options = datagen.default_gen_config()
    options.update(_load_config_file(args.config))
    if args.seed is not None or os.environ.get(SEED_ENV):
        options["seed"] = seed
    if args.episodes is not None:
        options["episodes_per_scenario"] = args.episodes
    try:
        manifest = datagen.generate_dataset(options, out / "dataset.bin")
    except datagen.DatasetError as e:
        raise UsageError(str(e))
    _echo_config(out, "gen-data", options)
    frac = manifest["success"] / max(manifest["episodes"], 1)
    print(f"wrote {manifest['episodes']} episodes "
          f"({manifest['steps']} steps) to {out / 'dataset.bin'}")
    for name in sim.SCENARIOS:
        print(f"  {name}: {manifest[f'episodes_{name}']}")
    print(f"success fraction: {frac:.3f}")
    return 0


def cmd_train(args) -> int:
    seed = _resolve_seed(args)
    out = _resolve_out(args)
    overrides = _load_config_file(args.config)
    episodes, manifest = _load_dataset(args.data)
    epochs = args.epochs if args.epochs is not None else int(
        overrides.get("epochs", 8))
    batch_size = int(overrides.get("batch_size", 64))
    lr = float(overrides.get("lr", 1e-4))
    k_steps = int(overrides.get("k_steps", sched.DEFAULT_K))
    schedule = sched.make_square_cosine(k_steps)
    model = evaluation.build_method(args.method, seed)
    csv_path = out / f"{args.method}_loss.csv"
    records = evaluation.train_method(
        args.method, model, episodes, manifest, schedule, epochs,
        batch_size=batch_size, lr=lr, seed=seed, csv_path=csv_path)
    header = {
        "method": args.method, "seed": seed, "epochs": epochs,
        "batch_size": batch_size, "lr": lr, "k_steps": k_steps,
        "dataset_hash": manifest.get("config_hash", ""),
        **model.hyperparams(),
    }
    ckpt_path = out / f"{args.method}.ckpt"
    ckpt.save_checkpoint(ckpt_path, model.state_dict(), header)
    _echo_config(out, "train", {**header, "data": str(args.data)})
    if records:
        print(f"trained {args.method}: {len(records)} steps, "
              f"loss {records[0][1]:.4f} -> {records[-1][1]:.4f}")
    else:
        print(f"trained {args.method}: 0 steps (initialized parameters)")
    print(f"checkpoint: {ckpt_path}")
    return 0


def cmd_eval(args) -> int:
    seed = _resolve_seed(args)
    out = _resolve_out(args)
    _, manifest = _load_dataset(args.data)
    header, model = _load_model(args.ckpt)
    schedule = _schedule_from_header(header)
    scenarios = (args.scenario,) if args.scenario else sim.SCENARIOS
    randomization = evaluation.GENERALIZATION if args.randomize else None
    report, _ = evaluation.evaluate_method(
        header["method"], model, manifest, schedule, scenarios=scenarios,
        episodes_per_scenario=args.episodes, root_seed=seed,
        planner_name=args.planner, randomization=randomization)
    text = _report_lines(report)
    (out / f"eval_{header['method']}.cfg").write_text(text)
    _echo_config(out, "eval", {
        "ckpt": str(args.ckpt), "data": str(args.data), "seed": seed,
        "episodes": args.episodes, "planner": args.planner,
        "randomize": bool(args.randomize),
        "scenarios": ",".join(scenarios),
    })
    print(text)
    return 0


def cmd_compare(args) -> int:
    seed = _resolve_seed(args)
    out = _resolve_out(args)
    _, manifest = _load_dataset(args.data)
    reports = {}
    for path in args.ckpt:
        header, model = _load_model(path)
        schedule = _schedule_from_header(header)
        report, _ = evaluation.evaluate_method(
            header["method"], model, manifest, schedule,
            episodes_per_scenario=args.episodes, root_seed=seed,
            planner_name=args.planner)
        reports[header["method"]] = report
        (out / f"eval_{header['method']}.cfg").write_text(_report_lines(report))
    table = evaluation.compare_table(reports)
    (out / "compare.txt").write_text(table + "\n")
    _echo_config(out, "compare", {
        "data": str(args.data), "seed": seed, "episodes": args.episodes,
        "planner": args.planner,
        "checkpoints": ",".join(str(p) for p in args.ckpt),
    })
    print(table)
    return 0


def cmd_rollout(args) -> int:
    seed = _resolve_seed(args)
    out = _resolve_out(args)
    _, manifest = _load_dataset(args.data)
    header, model = _load_model(args.ckpt)
    schedule = _schedule_from_header(header)
    base = sim.scenario_config(args.scenario)
    rng = np.random.default_rng(seed)
    cfg = datagen.jittered_config(base, rng)
    try:
        plan = evaluation._PLANNERS[args.planner](cfg)
    except PlanError as e:
        plan = str(e)
    driver = evaluation.make_driver(
        header["method"], model, schedule, seed, args.scenario)
    result, frames = rollout.rollout_episode(
        cfg, plan, driver, manifest, planner_name=args.planner, seed=seed,
        collect_frames=True)
    if args.frames:
        frame_dir = Path(args.frames)
        frame_dir.mkdir(parents=True, exist_ok=True)
        for i, frame in enumerate(frames):
            _write_frame(frame_dir / f"frame_{i:04d}", frame, args.png)
        print(f"wrote {len(frames)} frames to {frame_dir}")
    summary = {
        "scenario": result.scenario, "planner": result.planner_name,
        "outcome": result.outcome, "steps": result.steps,
        "sampling_calls": result.sampling_calls,
        "plan": result.plan_sentence or "",
        "final_x": result.final_pose[0], "final_z": result.final_pose[1],
        "final_pitch": result.final_pose[2],
    }
    if result.goal_pose is not None:
        summary.update(goal_x=result.goal_pose[0], goal_z=result.goal_pose[1],
                       goal_theta=result.goal_pose[2])
    (out / "rollout.cfg").write_text(cfgfmt.dumps(summary))
    _echo_config(out, "rollout", {
        "ckpt": str(args.ckpt), "data": str(args.data), "seed": seed,
        "scenario": args.scenario, "planner": args.planner,
        "frames": str(args.frames or ""), "png": bool(args.png),
    })
    print(cfgfmt.dumps(summary))
    return 0


def cmd_parse_plan(args) -> int:
    try:
        plan = planner.parse_plan(args.sentence)
    except GrammarError as e:
        raise UsageError(f"parse error: {e}")
    print(f"({plan.skill}, {plan.object_name}, {plan.structure.value}, "
          f"{plan.push_direction.value}, {plan.grasp_direction.value})")
    return 0


def cmd_render(args) -> int:
    out = _resolve_out(args)
    if args.config:
        cfg = sim.config_from_dict(_load_config_file(args.config))
    else:
        cfg = sim.scenario_config(args.scenario)
    state = sim.reset(cfg)
    image = sim.quantize_image(sim.render(state))
    _write_frame(out / f"{cfg.scenario}", image, args.png)
    ext = "png" if args.png else "ppm"
    print(f"wrote {out / cfg.scenario}.{ext}")
    return 0


def cmd_sweep_horizons(args) -> int:
    seed = _resolve_seed(args)
    out = _resolve_out(args)
    episodes, manifest = _load_dataset(args.data)
    schedule = sched.make_square_cosine()
    values = tuple(int(v) for v in args.values.split(","))
    table = evaluation.sweep_horizons(
        episodes, manifest, schedule, obs_values=values,
        action_values=values, epochs=args.epochs,
        episodes_per_scenario=args.episodes, root_seed=seed)
    lines = ["obs_frames  action_frames  success_rate"]
    for row in table["rows"]:
        lines.append(f"{row['obs_frames']:>10d}  {row['action_frames']:>13d}"
                     f"  {row['success_rate']:.3f}")
    lines.append(f"best: {table['best']} "
                 f"(default (2, 2) best: {table['default_is_best']})")
    text = "\n".join(lines)
    (out / "sweep.txt").write_text(text + "\n")
    _echo_config(out, "sweep-horizons", {
        "data": str(args.data), "seed": seed, "values": args.values,
        "epochs": args.epochs, "episodes": args.episodes,
    })
    print(text)
    return 0


def cmd_dump_schedule(args) -> int:
    schedule = sched.make_square_cosine(args.k)
    print("k,beta,alpha_bar,sigma")
    for row in sched.schedule_table(schedule):
        print("{k},{beta:.8f},{alpha_bar:.8f},{sigma:.8f}".format(**row))
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flatgrasp",
        description="Plan-conditioned manipulation pipeline: data, training, "
                    "evaluation, and inspection tools.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--seed", type=int, default=None,
                       help=f"global seed (or {SEED_ENV})")
        p.add_argument("--out", default=None,
                       help=f"output directory (or {OUT_ENV})")

    p = sub.add_parser("gen-data", help="generate the scripted-expert dataset")
    common(p)
    p.add_argument("--config", default=None, help="generation config file")
    p.add_argument("--episodes", type=int, default=None,
                   help="episodes per scenario override")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a policy on a dataset")
    common(p)
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--method", choices=evaluation.METHODS, default="gcad")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--config", default=None, help="training config file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--episodes", type=int, default=evaluation.EVAL_EPISODES)
    p.add_argument("--planner", choices=("scripted-vlm", "heuristic"),
                   default="scripted-vlm")
    p.add_argument("--scenario", choices=sim.SCENARIOS, default=None)
    p.add_argument("--randomize", action="store_true",
                   help="apply the generalization randomization ranges")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="side-by-side method comparison")
    common(p)
    p.add_argument("--ckpt", action="append", required=True,
                   help="checkpoint path; repeat per method")
    p.add_argument("--data", required=True)
    p.add_argument("--episodes", type=int, default=evaluation.EVAL_EPISODES)
    p.add_argument("--planner", choices=("scripted-vlm", "heuristic"),
                   default="scripted-vlm")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("rollout", help="run and inspect a single episode")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--scenario", choices=sim.SCENARIOS, default="basic")
    p.add_argument("--planner", choices=("scripted-vlm", "heuristic"),
                   default="scripted-vlm")
    p.add_argument("--frames", default=None, help="directory for frame dumps")
    p.add_argument("--png", action="store_true", help="write PNG frames")
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("parse-plan", help="parse a plan sentence")
    p.add_argument("sentence")
    p.set_defaults(func=cmd_parse_plan)

    p = sub.add_parser("render", help="render a scenario's initial frame")
    common(p)
    p.add_argument("--scenario", choices=sim.SCENARIOS, default="basic")
    p.add_argument("--config", default=None, help="scene config file")
    p.add_argument("--png", action="store_true")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("sweep-horizons",
                       help="train and score horizon variants (non-gating)")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--values", default="1,2,4,8",
                   help="comma list drawn from {1,2,4,8}")
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--episodes", type=int, default=6)
    p.set_defaults(func=cmd_sweep_horizons)

    p = sub.add_parser("dump-schedule", help="print the noise schedule table")
    p.add_argument("--k", type=int, default=sched.DEFAULT_K)
    p.set_defaults(func=cmd_dump_schedule)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (cfgfmt.ConfigError, GrammarError, PlanError, datagen.DatasetError,
            ckpt.CheckpointError, sim.SceneConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
