"""Scripted demonstration experts and the episode dataset format.

Experts are deliberately imperfect: every action gets zero-mean noise whose
scale is sampled per episode, so the corpus mixes clean successes with
timeouts, dropped boards, and botched grasps.  Records keep the executed
(noisy, clipped) actions; nothing is relabeled afterward.

Dataset file layout (little-endian):

    magic b"FGTJ" | u32 version | u32 record count | u32 reserved
    per record:
      u32 body length | u32 adler32 of body | body
    body:
      u8 scenario, structure, push, grasp, terminal, pad
      u16 T | u64 seed
      u32 len + utf8 scene config text
      u32 len + utf8 plan sentence
      3 f32 final goal grasp pose (x, z, theta)
      T*64*64*3 u8 images
      T*4 f32 gripper pose vectors
      T*4 f32 actions
      T   f32 rewards
      T   f32 returns-to-go

A companion manifest (plain `key: value` text) stores per-bucket return
statistics; policies condition on the bucket's best recorded return.
"""

from __future__ import annotations

import hashlib
import io
import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import config as cfgfmt
from . import planner, sim
from .plans import Direction, PlanTuple, Structure
from .utils import derive_seed

MAGIC = b"FGTJ"
VERSION = 1

SCENARIO_IDS = {name: i for i, name in enumerate(sim.SCENARIOS)}
STRUCTURE_IDS = {Structure.TABLE_EDGE: 0, Structure.WALL: 1}
DIRECTION_IDS = {Direction.LEFT: 0, Direction.RIGHT: 1, Direction.TOP: 2}
TERMINAL_IDS = {"success": 0, "fallen": 1, "timeout": 2}

_ID_SCENARIOS = {v: k for k, v in SCENARIO_IDS.items()}
_ID_STRUCTURES = {v: k for k, v in STRUCTURE_IDS.items()}
_ID_DIRECTIONS = {v: k for k, v in DIRECTION_IDS.items()}
_ID_TERMINALS = {v: k for k, v in TERMINAL_IDS.items()}

# Per-episode action noise: (scale, probability).  Scales multiply the
# per-channel action limits.
NOISE_MIX = ((0.1, 0.65), (0.4, 0.2), (0.8, 0.15))

# Initial-pose jitter applied to every generated episode, meters.
JITTER = 0.012


class DatasetError(ValueError):
    pass


@dataclass
class Episode:
    scenario: str
    plan: PlanTuple
    seed: int
    terminal: str
    config_text: str
    sentence: str
    goal_pose_final: tuple[float, float, float]
    images: np.ndarray    # (T, 64, 64, 3) u8
    pose_vecs: np.ndarray  # (T, 4) f32
    actions: np.ndarray   # (T, 4) f32, executed (clipped) values
    rewards: np.ndarray   # (T,) f32
    rtg: np.ndarray       # (T,) f32

    @property
    def T(self) -> int:
        return int(self.images.shape[0])

    def bucket_key(self) -> str:
        return bucket_key(self.scenario, self.plan)


def bucket_key(scenario: str, plan: PlanTuple) -> str:
    """Buckets group episodes by scenario and plan tuple."""
    return f"{scenario}_{plan.bucket_key()}"


# ---------------------------------------------------------------------------
# scripted experts


def _toward(st: sim.SimState, tx: float, tz: float, pitch_to: float | None, grip: float):
    dx = max(-sim.MAX_DXZ, min(sim.MAX_DXZ, tx - st.gripper_x))
    dz = max(-sim.MAX_DXZ, min(sim.MAX_DXZ, tz - st.gripper_z))
    dp = 0.0
    if pitch_to is not None:
        dp = max(-sim.MAX_DPITCH, min(sim.MAX_DPITCH, pitch_to - st.gripper_pitch))
    return dx, dz, dp, grip


def _local(st: sim.SimState):
    pose = sim.object_pose(st)
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    dx, dz = st.gripper_x - pose.x, st.gripper_z - pose.z
    return c * dx + s * dz, -s * dx + c * dz


def _world(st: sim.SimState, qx: float, qz: float):
    pose = sim.object_pose(st)
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    return pose.x + c * qx - s * qz, pose.z + s * qx + c * qz


def _push_action(st: sim.SimState, spec: planner.RewardSpec, sign: int):
    """Aim through the pushed face at mid-height and let contact do the rest.

    The target x is where the face will sit when the board reaches its push
    target, so approach, push and the final partial push are one behavior.
    Noise-tolerant: no exact-position gates.
    """
    w, h = st.scene.object_width, st.scene.object_height
    face_final = spec.push_target_x - sign * w / 2.0
    return _toward(st, face_final, h / 2.0, None, -1.0)


def make_edge_expert(spec: planner.RewardSpec, cfg: sim.SceneConfig):
    """Stage-timed demonstrator for the over-the-edge maneuver."""
    sign = spec.plan.push_direction.sign
    w, h = cfg.object_width, cfg.object_height
    s1, s2, _ = spec.stages

    def policy(st: sim.SimState):
        goal = sim.goal_grasp_pose(st, spec.plan)
        if st.t < s1:
            return _push_action(st, spec, sign)
        if st.t < s1 + s2:
            wx, wz = spec.waypoint
            before_face = (st.gripper_x - (goal.x + sign * 0.002)) * sign < 0
            if before_face and st.gripper_z < wz - 0.004:
                return _toward(st, st.gripper_x, wz, None, -1.0)  # rise first
            return _toward(st, wx, wz, None, -1.0)
        tx, tz = goal.x + sign * 0.003, goal.z
        near = abs(st.gripper_x - tx) < 0.006 and abs(st.gripper_z - tz) < 0.006
        aligned = abs(st.gripper_pitch - goal.theta) < 0.05
        grip = 1.0 if near and aligned else -1.0
        return _toward(st, tx, tz, goal.theta, grip)

    return policy


def make_wall_expert(spec: planner.RewardSpec, cfg: sim.SceneConfig):
    """Event-driven demonstrator for the wall-pivot maneuver.

    Phases only advance: push flush, mount the far top face, drag toward the
    wall until the lean is stable, swing around the raised end, close on the
    freed face.
    """
    sp = spec.plan.push_direction.sign
    w, h = cfg.object_width, cfg.object_height
    phase = [0]

    def policy(st: sim.SimState):
        goal = sim.goal_grasp_pose(st, spec.plan)
        qx, qz = _local(st)
        end = qx * (-sp)  # local coordinate toward the free end
        i = phase[0]
        if i == 0 and abs(st.object_x - spec.push_target_x) <= 1e-3 and st.lift <= 0.0:
            i = 1
        on_top = abs(qz - h / 2.0) <= 0.0015 and abs(qx) <= w / 2.0 - 0.004
        if i == 1 and (st.lift > 0.0 or (on_top and end > 0.02)):
            i = 2
        if i == 2 and st.lift >= 0.70:
            i = 3
        if i == 3 and end >= w / 2.0 + 0.045:
            i = 4
        phase[0] = i

        if i == 0:
            return _push_action(st, spec, sp)
        if i == 1:
            # Clear the corner before settling, otherwise the finger jams
            # against the side face and never reaches the top.
            mx = (-sp) * 0.055
            if abs(qx) >= w / 2.0 - 0.0035 and qz < h / 2.0 + 0.0035:
                tx, tz = _world(st, qx, h / 2.0 + 0.006)
            elif qz >= h / 2.0 + 0.0035 and abs(qx - mx) > 0.003:
                tx, tz = _world(st, mx, h / 2.0 + 0.006)
            else:
                tx, tz = _world(st, mx, h / 2.0 + 0.001)
            return _toward(st, tx, tz, None, -1.0)
        if i == 2:
            # Track the tilting grasp pitch already while dragging; the
            # rotation budget is what makes wall routes tight.
            tx, tz = _world(st, qx + sp * 0.012, h / 2.0 - 0.004)
            return _toward(st, tx, tz, goal.theta, -1.0)
        if i == 3:
            tx, tz = _world(st, (-sp) * (w / 2.0 + 0.05), h / 2.0 + 0.03)
            return _toward(st, tx, tz, goal.theta, -1.0)
        nx, nz = (-sp) * math.cos(goal.theta), (-sp) * math.sin(goal.theta)
        tx, tz = goal.x + 0.005 * nx, goal.z + 0.005 * nz
        near = math.hypot(st.gripper_x - tx, st.gripper_z - tz) < 0.004
        aligned = abs(st.gripper_pitch - goal.theta) < 0.05
        return _toward(st, tx, tz, goal.theta, 1.0 if near and aligned else -1.0)

    return policy


def make_expert(spec: planner.RewardSpec, cfg: sim.SceneConfig):
    if spec.mode == "edge_staged":
        return make_edge_expert(spec, cfg)
    return make_wall_expert(spec, cfg)


def jittered_config(cfg: sim.SceneConfig, rng: np.random.Generator) -> sim.SceneConfig:
    """Randomize initial board and gripper placement within safe bounds."""
    from dataclasses import replace
    for _ in range(20):
        trial = replace(
            cfg,
            object_x=cfg.object_x + rng.uniform(-JITTER, JITTER),
            gripper_x=cfg.gripper_x + rng.uniform(-JITTER, JITTER),
            gripper_z=cfg.gripper_z + rng.uniform(-JITTER, JITTER),
        )
        try:
            sim.reset(trial)
            return trial
        except sim.SceneConfigError:
            continue
    return cfg


def run_expert_episode(
    cfg: sim.SceneConfig,
    plan: PlanTuple,
    seed: int,
    noise: float,
) -> Episode:
    """Roll one noisy expert episode and package it as a record."""
    rng = np.random.default_rng(seed)
    spec = planner.make_reward_spec(plan, cfg)
    policy = make_expert(spec, cfg)
    st = sim.reset(cfg, plan)
    images, poses, actions, rewards = [], [], [], []
    while st.terminal is None:
        obs = sim.observe(st)
        cmd = np.asarray(policy(st), dtype=np.float64)
        cmd[0] += rng.normal(0.0, noise * sim.MAX_DXZ)
        cmd[1] += rng.normal(0.0, noise * sim.MAX_DXZ)
        cmd[2] += rng.normal(0.0, noise * sim.MAX_DPITCH)
        cmd[3] += rng.normal(0.0, noise)
        act = sim.Action(*cmd).clipped()
        nxt, sparse, _ = sim.step(st, act)
        images.append(sim.quantize_image(obs.image))
        poses.append(obs.gripper_pose_vec)
        actions.append(act.as_array())
        rewards.append(planner.step_reward(spec, st, nxt, sparse))
        st = nxt
    rtg = planner.compute_rtg(rewards)
    goal = sim.goal_grasp_pose(st, plan)
    return Episode(
        scenario=cfg.scenario,
        plan=plan,
        seed=seed,
        terminal=st.terminal,
        config_text=cfgfmt.dumps(sim.config_to_dict(cfg)),
        sentence=planner.render_plan(plan),
        goal_pose_final=(float(goal.x), float(goal.z), float(goal.theta)),
        images=np.stack(images),
        pose_vecs=np.stack(poses).astype(np.float32),
        actions=np.stack(actions).astype(np.float32),
        rewards=np.asarray(rewards, dtype=np.float32),
        rtg=np.asarray(rtg, dtype=np.float32),
    )


def generate_episodes(
    root_seed: int,
    episodes_per_scenario: int,
    scenarios: tuple[str, ...] = sim.SCENARIOS,
    noise_mix: tuple[tuple[float, float], ...] = NOISE_MIX,
) -> list[Episode]:
    scales = np.array([m[0] for m in noise_mix])
    probs = np.array([m[1] for m in noise_mix])
    probs = probs / probs.sum()
    out = []
    for name in scenarios:
        base = sim.scenario_config(name)
        for i in range(episodes_per_scenario):
            ep_seed = derive_seed(root_seed, "datagen", name, i)
            rng = np.random.default_rng(ep_seed)
            cfg = jittered_config(base, rng)
            plan = planner.scripted_vlm_plan(cfg)
            noise = float(rng.choice(scales, p=probs))
            out.append(run_expert_episode(cfg, plan, ep_seed, noise))
    return out


def default_gen_config() -> dict:
    """Desk-scale generation defaults: 100 episodes per scenario."""
    return {
        "seed": 0,
        "episodes_per_scenario": 100,
        "scenarios": ",".join(sim.SCENARIOS),
        "noise_scales": ",".join(str(m[0]) for m in NOISE_MIX),
        "noise_probs": ",".join(str(m[1]) for m in NOISE_MIX),
    }


def _parse_gen_config(cfg: dict) -> tuple[int, int, tuple, tuple]:
    merged = default_gen_config()
    for key in cfg:
        if key not in merged:
            raise DatasetError(f"unknown generation option {key!r}")
    merged.update(cfg)
    try:
        seed = int(merged["seed"])
        count = int(merged["episodes_per_scenario"])
        scenarios = tuple(
            s.strip() for s in str(merged["scenarios"]).split(",") if s.strip()
        )
        scales = [float(v) for v in str(merged["noise_scales"]).split(",")]
        probs = [float(v) for v in str(merged["noise_probs"]).split(",")]
    except ValueError as e:
        raise DatasetError(f"bad generation option: {e}") from e
    if count < 0:
        raise DatasetError("episodes_per_scenario must be >= 0")
    for s in scenarios:
        if s not in sim.SCENARIOS:
            raise DatasetError(f"unknown scenario {s!r}")
    if len(scales) != len(probs) or not scales:
        raise DatasetError("noise_scales and noise_probs must pair up")
    mix = tuple(zip(scales, probs))
    return seed, count, scenarios, mix


def generate_dataset(cfg: dict, out_path: str | Path) -> dict:
    """Generate episodes per config, write records + manifest."""
    seed, count, scenarios, mix = _parse_gen_config(cfg)
    episodes = generate_episodes(seed, count, scenarios, mix)
    merged = default_gen_config()
    merged.update(cfg)
    return write_dataset(out_path, episodes, merged)


# ---------------------------------------------------------------------------
# binary IO


def _pack_episode(ep: Episode) -> bytes:
    buf = io.BytesIO()
    cfg_b = ep.config_text.encode("utf-8")
    sen_b = ep.sentence.encode("utf-8")
    buf.write(struct.pack(
        "<6BHQ",
        SCENARIO_IDS[ep.scenario],
        STRUCTURE_IDS[ep.plan.structure],
        DIRECTION_IDS[ep.plan.push_direction],
        DIRECTION_IDS[ep.plan.grasp_direction],
        TERMINAL_IDS[ep.terminal],
        0,
        ep.T,
        ep.seed & (2**64 - 1),
    ))
    buf.write(struct.pack("<I", len(cfg_b)))
    buf.write(cfg_b)
    buf.write(struct.pack("<I", len(sen_b)))
    buf.write(sen_b)
    buf.write(struct.pack("<3f", *ep.goal_pose_final))
    buf.write(np.ascontiguousarray(ep.images, dtype=np.uint8).tobytes())
    buf.write(np.ascontiguousarray(ep.pose_vecs, dtype="<f4").tobytes())
    buf.write(np.ascontiguousarray(ep.actions, dtype="<f4").tobytes())
    buf.write(np.ascontiguousarray(ep.rewards, dtype="<f4").tobytes())
    buf.write(np.ascontiguousarray(ep.rtg, dtype="<f4").tobytes())
    return buf.getvalue()


def _unpack_episode(body: bytes, index: int) -> Episode:
    def fail(why: str):
        raise DatasetError(f"record {index} corrupt: {why}")

    try:
        head = struct.unpack_from("<6BHQ", body, 0)
    except struct.error:
        fail("truncated header")
    scen_id, struct_id, push_id, grasp_id, term_id, pad, T, seed = head
    for val, table, what in (
        (scen_id, _ID_SCENARIOS, "scenario"),
        (struct_id, _ID_STRUCTURES, "structure"),
        (push_id, _ID_DIRECTIONS, "push direction"),
        (grasp_id, _ID_DIRECTIONS, "grasp direction"),
        (term_id, _ID_TERMINALS, "terminal"),
    ):
        if val not in table:
            fail(f"bad {what} id {val}")
    if pad != 0:
        fail("nonzero pad byte")
    off = struct.calcsize("<6BHQ")

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(body):
            fail(f"truncated {what}")
        chunk = body[off:off + n]
        off += n
        return chunk

    (cfg_len,) = struct.unpack("<I", take(4, "config length"))
    config_text = take(cfg_len, "config text").decode("utf-8")
    (sen_len,) = struct.unpack("<I", take(4, "sentence length"))
    sentence = take(sen_len, "sentence").decode("utf-8")
    goal_pose = struct.unpack("<3f", take(12, "goal pose"))
    n_img = T * sim.IMG_SIZE * sim.IMG_SIZE * 3
    images = np.frombuffer(take(n_img, "images"), dtype=np.uint8).reshape(
        T, sim.IMG_SIZE, sim.IMG_SIZE, 3).copy()
    poses = np.frombuffer(take(T * 16, "pose vectors"), dtype="<f4").reshape(T, 4).copy()
    actions = np.frombuffer(take(T * 16, "actions"), dtype="<f4").reshape(T, 4).copy()
    rewards = np.frombuffer(take(T * 4, "rewards"), dtype="<f4").copy()
    rtg = np.frombuffer(take(T * 4, "returns"), dtype="<f4").copy()
    if off != len(body):
        fail(f"{len(body) - off} trailing bytes")
    plan = PlanTuple(
        skill="push",
        object_name=cfgfmt.loads(config_text).get("object_name", "box"),
        structure=_ID_STRUCTURES[struct_id],
        push_direction=_ID_DIRECTIONS[push_id],
        grasp_direction=_ID_DIRECTIONS[grasp_id],
    )
    return Episode(
        scenario=_ID_SCENARIOS[scen_id], plan=plan, seed=seed,
        terminal=_ID_TERMINALS[term_id], config_text=config_text,
        sentence=sentence, goal_pose_final=goal_pose,
        images=images, pose_vecs=poses,
        actions=actions, rewards=rewards, rtg=rtg,
    )


def write_episodes(path: str | Path, episodes: list[Episode]) -> None:
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<III", VERSION, len(episodes), 0))
        for ep in episodes:
            body = _pack_episode(ep)
            f.write(struct.pack("<II", len(body), zlib.adler32(body)))
            f.write(body)


def read_episodes(path: str | Path) -> list[Episode]:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise DatasetError(f"{path.name}: bad magic {data[:4]!r}")
    version, count, _ = struct.unpack_from("<III", data, 4)
    if version != VERSION:
        raise DatasetError(f"{path.name}: unsupported version {version}")
    off = 16
    out = []
    for i in range(count):
        if off + 8 > len(data):
            raise DatasetError(f"record {i} corrupt: truncated record frame")
        length, checksum = struct.unpack_from("<II", data, off)
        off += 8
        if off + length > len(data):
            raise DatasetError(f"record {i} corrupt: body extends past end of file")
        body = data[off:off + length]
        off += length
        if zlib.adler32(body) != checksum:
            raise DatasetError(f"record {i} corrupt: checksum mismatch")
        out.append(_unpack_episode(body, i))
    if off != len(data):
        raise DatasetError(f"{len(data) - off} trailing bytes after record {count - 1}")
    return out


# ---------------------------------------------------------------------------
# manifest


def manifest_path(dataset_path: str | Path) -> Path:
    p = Path(dataset_path)
    return p.with_name(p.name + ".manifest")


def build_manifest(episodes: list[Episode], gen_config: dict | None = None) -> dict:
    buckets: dict[str, dict] = {}
    for ep in episodes:
        b = buckets.setdefault(ep.bucket_key(), {
            "count": 0, "success": 0,
            "rtg_max": float("-inf"), "rtg_min": float("inf"),
        })
        r0 = float(ep.rtg[0])
        b["count"] += 1
        b["success"] += int(ep.terminal == "success")
        b["rtg_max"] = max(b["rtg_max"], r0)
        b["rtg_min"] = min(b["rtg_min"], r0)
    cfg_text = cfgfmt.dumps(gen_config or {})
    flat = {
        "version": VERSION,
        "episodes": len(episodes),
        "success": sum(ep.terminal == "success" for ep in episodes),
        "steps": int(sum(ep.T for ep in episodes)),
        "config_hash": hashlib.sha256(cfg_text.encode("utf-8")).hexdigest()[:16],
        "bucket_count": len(buckets),
    }
    for name in sim.SCENARIOS:
        flat[f"episodes_{name}"] = sum(ep.scenario == name for ep in episodes)
    for i, key in enumerate(sorted(buckets)):
        b = buckets[key]
        norm = max(abs(b["rtg_max"]), abs(b["rtg_min"]))
        flat[f"bucket{i}_key"] = key
        flat[f"bucket{i}_count"] = b["count"]
        flat[f"bucket{i}_success"] = b["success"]
        flat[f"bucket{i}_rtg_max"] = b["rtg_max"]
        flat[f"bucket{i}_rtg_min"] = b["rtg_min"]
        flat[f"bucket{i}_rtg_norm"] = norm if norm > 0 else 1.0
    return flat


def bucket_stats(manifest: dict) -> dict[str, dict]:
    out = {}
    for i in range(int(manifest.get("bucket_count", 0))):
        try:
            key = manifest[f"bucket{i}_key"]
            out[str(key)] = {
                "count": int(manifest[f"bucket{i}_count"]),
                "success": int(manifest[f"bucket{i}_success"]),
                "rtg_max": float(manifest[f"bucket{i}_rtg_max"]),
                "rtg_min": float(manifest[f"bucket{i}_rtg_min"]),
                "rtg_norm": float(manifest[f"bucket{i}_rtg_norm"]),
            }
        except KeyError as e:
            raise DatasetError(f"manifest missing {e.args[0]!r}") from e
    return out


def _bucket_entry(manifest: dict, scenario: str, plan: PlanTuple) -> dict:
    key = bucket_key(scenario, plan)
    stats = bucket_stats(manifest)
    if key not in stats:
        raise DatasetError(
            f"no recorded episodes for bucket {key!r}; "
            "cannot pick a return target"
        )
    return stats[key]


def target_return(manifest: dict, scenario: str, plan: PlanTuple) -> float:
    """Best recorded return for the bucket; the conditioning target."""
    return _bucket_entry(manifest, scenario, plan)["rtg_max"]


def rtg_floor(manifest: dict, scenario: str, plan: PlanTuple) -> float:
    return _bucket_entry(manifest, scenario, plan)["rtg_min"]


def bucket_rtg_norm(manifest: dict, scenario: str, plan: PlanTuple) -> float:
    """Scale used to bring the bucket's returns-to-go into roughly [-1, 1]."""
    return _bucket_entry(manifest, scenario, plan)["rtg_norm"]


def write_dataset(
    path: str | Path,
    episodes: list[Episode],
    gen_config: dict | None = None,
) -> dict:
    """Write records plus manifest; returns the manifest dict."""
    write_episodes(path, episodes)
    manifest = build_manifest(episodes, gen_config)
    cfgfmt.save_file(manifest_path(path), manifest)
    return manifest


def read_manifest(path: str | Path) -> dict:
    """Load the manifest for a dataset; accepts either file's path."""
    p = Path(path)
    mp = p if p.name.endswith(".manifest") else manifest_path(p)
    if not mp.exists():
        raise DatasetError(f"missing manifest {mp.name} next to {p.name}")
    return cfgfmt.load_file(mp)
