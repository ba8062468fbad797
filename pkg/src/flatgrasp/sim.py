"""2D quasi-static tabletop simulator for flat-object pushing and regrasping.

Side view, x horizontal, z up, table top at z = 0.  A flat board rests on the
table; a point gripper (with pitch and an open/close bit) pushes it around.
Two maneuvers lead to a graspable pose:

* push the board over a table edge until the far face overhangs free air;
* push it against a wall, then press the far half of its top face and drag
  toward the wall so it pivots up and leans against the wall.

Step rules are applied in a fixed order (move gripper, push, pivot, tipping
check, grasp check, timeout) so every transition is hand-verifiable.  States
are immutable; `step` is a pure function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .plans import Direction, PlanError, PlanTuple, Structure
from .utils import wrap_angle

# Action limits (per step): translation in meters, pitch in radians.
MAX_DXZ = 0.02
MAX_DPITCH = 0.1

# Grasp success tolerances.
GRASP_TOL_T = 0.01     # m, Euclidean gripper-to-goal distance
GRASP_TOL_R = 0.1      # rad, absolute pitch error
OCCLUSION_TOL = 0.05   # max blocked fraction of the finger envelope

# Finger envelope used for the occlusion test, centered on a grasp pose.
# Must be thinner than the table slab so a buried pose reads fully blocked.
FOOT_W = 0.032
FOOT_H = 0.06

# Wall-pivot mechanics.
FRICTION_GATE = 0.3    # below this the press slips and nothing lifts
LIFT_GAIN = 20.0       # rad of lift per meter of tangential drag (1 rad / 0.05 m)
LEAN_STABLE = 0.55     # rad; lifted at least this far, the board leans on its own
LIFT_CAP = 1.45        # rad; jammed nearly vertical against the wall

CONTACT_EPS = 2e-3

# Camera: every scenario renders a 1.28 m x 0.64 m window at 64 x 64 px.
IMG_SIZE = 64
WINDOW_W = 1.28
WINDOW_Z0 = -0.32
WINDOW_H = 0.64

COLOR_BG = (0.0, 0.0, 0.0)
COLOR_TABLE = (0.5, 0.5, 0.5)
COLOR_WALL = (0.2, 0.35, 0.9)
COLOR_OBJECT = (0.9, 0.15, 0.1)
COLOR_GRIPPER = (0.1, 0.85, 0.2)

SCENARIOS = ("basic", "empty", "broad", "surround")


class SceneConfigError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class Action:
    dx: float
    dz: float
    dpitch: float
    grip: float  # >= 0 closes the gripper, < 0 opens it

    def clipped(self) -> "Action":
        return Action(
            dx=min(MAX_DXZ, max(-MAX_DXZ, self.dx)),
            dz=min(MAX_DXZ, max(-MAX_DXZ, self.dz)),
            dpitch=min(MAX_DPITCH, max(-MAX_DPITCH, self.dpitch)),
            grip=min(1.0, max(-1.0, self.grip)),
        )

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dz, self.dpitch, self.grip], dtype=np.float32)


@dataclass(frozen=True, slots=True)
class Pose2:
    x: float
    z: float
    theta: float

    def distance(self, other: "Pose2") -> tuple[float, float]:
        """(translation meters, absolute wrapped rotation radians)."""
        dt = math.hypot(self.x - other.x, self.z - other.z)
        dr = abs(wrap_angle(self.theta - other.theta))
        return dt, dr


@dataclass(frozen=True, slots=True)
class Wall:
    x0: float
    x1: float
    height: float


@dataclass(frozen=True, slots=True)
class SceneConfig:
    scenario: str
    table_length: float
    table_thickness: float
    walls: tuple[Wall, ...]
    object_name: str
    object_width: float
    object_height: float
    object_x: float          # initial center
    friction: float          # gripper-object friction coefficient
    gripper_x: float
    gripper_z: float
    gripper_pitch: float
    horizon: int
    window_x0: float         # camera window left edge

    def solids(self) -> list[tuple[float, float, float, float]]:
        """Axis-aligned (x0, x1, z0, z1) rectangles of table slab and walls."""
        rects = [(0.0, self.table_length, -self.table_thickness, 0.0)]
        for w in self.walls:
            rects.append((w.x0, w.x1, 0.0, w.height))
        return rects


@dataclass(frozen=True, slots=True)
class SimState:
    scene: SceneConfig
    plan: PlanTuple | None
    t: int
    object_x: float          # board center x while flat; pivot-derived when leaning
    lift: float              # lean angle, 0 when flat
    lean_dir: int            # -1 leaning on a wall to its left, +1 to its right, 0 flat
    lean_face_x: float       # inner face x of the wall it leans on
    gripper_x: float
    gripper_z: float
    gripper_pitch: float
    gripper_closed: bool
    terminal: str | None     # None | "success" | "fallen" | "timeout"
    contacts: frozenset[str]
    overhang_fraction: float


@dataclass(frozen=True, slots=True)
class ContactReport:
    contacts: frozenset[str]
    pushed: float            # signed object translation caused by the gripper
    lift_delta: float
    flush: bool              # gripper motion was stopped at an object face


@dataclass(frozen=True, slots=True)
class Observation:
    image: np.ndarray            # (64, 64, 3) float32 in [0, 1]
    gripper_pose_vec: np.ndarray  # (4,) float32: window-normalized x, z, sin pitch, cos pitch


# ---------------------------------------------------------------------------
# scenario presets


def scenario_config(name: str) -> SceneConfig:
    """Canonical scene for one of the four scenarios.

    basic:    wall far left, edge close on the right; edge strategy.
    empty:    no walls at all; edge strategy.
    broad:    long table running out of frame, divider wall mid-table; the
              board sits nearer the edge than the wall but the trained
              strategy is the wall.
    surround: short table with walls at both ends; wall strategy.
    """
    name = name.lower()
    if name == "basic":
        return SceneConfig(
            scenario="basic", table_length=1.0, table_thickness=0.08,
            walls=(Wall(0.0, 0.04, 0.30),),
            object_name="toolbox", object_width=0.16, object_height=0.04,
            object_x=0.88, friction=0.55,
            gripper_x=0.75, gripper_z=0.045, gripper_pitch=0.0,
            horizon=70, window_x0=-0.14,
        )
    if name == "empty":
        return SceneConfig(
            scenario="empty", table_length=1.0, table_thickness=0.08,
            walls=(),
            object_name="box", object_width=0.16, object_height=0.04,
            object_x=0.87, friction=0.55,
            gripper_x=0.74, gripper_z=0.05, gripper_pitch=0.0,
            horizon=70, window_x0=-0.14,
        )
    if name == "broad":
        return SceneConfig(
            scenario="broad", table_length=2.0, table_thickness=0.08,
            walls=(Wall(1.30, 1.34, 0.30),),
            object_name="box", object_width=0.16, object_height=0.04,
            object_x=1.70, friction=0.55,
            gripper_x=1.84, gripper_z=0.05, gripper_pitch=0.0,
            horizon=50, window_x0=0.92,
        )
    if name == "surround":
        return SceneConfig(
            scenario="surround", table_length=0.8, table_thickness=0.08,
            walls=(Wall(0.0, 0.04, 0.30), Wall(0.76, 0.80, 0.30)),
            object_name="box", object_width=0.16, object_height=0.04,
            object_x=0.30, friction=0.55,
            gripper_x=0.46, gripper_z=0.05, gripper_pitch=0.0,
            horizon=45, window_x0=-0.24,
        )
    raise SceneConfigError(f"unknown scenario {name!r}; expected one of {SCENARIOS}")


def mirrored_config(cfg: SceneConfig) -> SceneConfig:
    """Reflect a scene about the table midline (for mirrored test cases)."""
    L = cfg.table_length
    walls = tuple(Wall(L - w.x1, L - w.x0, w.height) for w in reversed(cfg.walls))
    return replace(
        cfg,
        walls=walls,
        object_x=L - cfg.object_x,
        gripper_x=L - cfg.gripper_x,
        window_x0=L - (cfg.window_x0 + WINDOW_W),
    )


def config_to_dict(cfg: SceneConfig) -> dict:
    d = {
        "scenario": cfg.scenario,
        "table_length": cfg.table_length,
        "table_thickness": cfg.table_thickness,
        "object_name": cfg.object_name,
        "object_width": cfg.object_width,
        "object_height": cfg.object_height,
        "object_x": cfg.object_x,
        "friction": cfg.friction,
        "gripper_x": cfg.gripper_x,
        "gripper_z": cfg.gripper_z,
        "gripper_pitch": cfg.gripper_pitch,
        "horizon": cfg.horizon,
        "window_x0": cfg.window_x0,
        "wall_count": len(cfg.walls),
    }
    for i, w in enumerate(cfg.walls):
        d[f"wall{i}_x0"] = w.x0
        d[f"wall{i}_x1"] = w.x1
        d[f"wall{i}_height"] = w.height
    return d


def config_from_dict(d: dict) -> SceneConfig:
    try:
        walls = tuple(
            Wall(float(d[f"wall{i}_x0"]), float(d[f"wall{i}_x1"]), float(d[f"wall{i}_height"]))
            for i in range(int(d.get("wall_count", 0)))
        )
        return SceneConfig(
            scenario=str(d["scenario"]),
            table_length=float(d["table_length"]),
            table_thickness=float(d["table_thickness"]),
            walls=walls,
            object_name=str(d.get("object_name", "box")),
            object_width=float(d["object_width"]),
            object_height=float(d["object_height"]),
            object_x=float(d["object_x"]),
            friction=float(d["friction"]),
            gripper_x=float(d["gripper_x"]),
            gripper_z=float(d["gripper_z"]),
            gripper_pitch=float(d["gripper_pitch"]),
            horizon=int(d["horizon"]),
            window_x0=float(d["window_x0"]),
        )
    except KeyError as e:
        raise SceneConfigError(f"scene config missing key {e.args[0]!r}") from e


# ---------------------------------------------------------------------------
# object pose helpers


def object_pose(state: SimState) -> Pose2:
    """Center pose of the board."""
    cfg = state.scene
    w, h = cfg.object_width, cfg.object_height
    if state.lift <= 0.0:
        return Pose2(state.object_x, h / 2.0, 0.0)
    s = state.lean_dir
    phi = state.lift
    # Pivot is the bottom corner on the wall side, shifted so the top wall-side
    # corner stays exactly on the wall face: the board leans, never penetrates.
    px = state.lean_face_x - s * h * math.sin(phi)
    theta = -s * phi
    cx = px + math.cos(theta) * (-s * w / 2.0) - math.sin(theta) * (h / 2.0)
    cz = math.sin(theta) * (-s * w / 2.0) + math.cos(theta) * (h / 2.0)
    return Pose2(cx, cz, theta)


def object_corners(state: SimState) -> np.ndarray:
    """(4, 2) world corner positions, counterclockwise from bottom-left."""
    cfg = state.scene
    w, h = cfg.object_width, cfg.object_height
    pose = object_pose(state)
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    out = np.empty((4, 2))
    for i, (lx, lz) in enumerate(((-w / 2, -h / 2), (w / 2, -h / 2), (w / 2, h / 2), (-w / 2, h / 2))):
        out[i, 0] = pose.x + c * lx - s * lz
        out[i, 1] = pose.z + s * lx + c * lz
    return out


def _world_to_object(state: SimState, x: float, z: float) -> tuple[float, float]:
    pose = object_pose(state)
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    dx, dz = x - pose.x, z - pose.z
    return c * dx + s * dz, -s * dx + c * dz


def _object_to_world(state: SimState, lx: float, lz: float) -> tuple[float, float]:
    pose = object_pose(state)
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    return pose.x + c * lx - s * lz, pose.z + s * lx + c * lz


def goal_grasp_pose(state: SimState, plan: PlanTuple) -> Pose2:
    """Side-grasp pose on the face named by the plan, tracking the live object.

    The grasp center is the face midpoint; grasp pitch equals the board's
    current rotation, so a lifted board is approached along its tilted normal.
    """
    if plan.grasp_direction is Direction.TOP:
        raise PlanError("no top grasp pose exists for a flat object")
    w = state.scene.object_width
    lx = plan.grasp_direction.sign * w / 2.0
    gx, gz = _object_to_world(state, lx, 0.0)
    return Pose2(gx, gz, object_pose(state).theta)


def occlusion(state: SimState, pose: Pose2) -> float:
    """Fraction of the finger envelope at `pose` blocked by table or walls.

    Deterministic 24x24 grid sample of a FOOT_W x FOOT_H rectangle centered on
    the pose and rotated with it.  Free space gives 0; a pose buried in the
    table slab gives 1.
    """
    n = 24
    u = (np.arange(n) + 0.5) / n - 0.5
    fx, fz = np.meshgrid(u * FOOT_W, u * FOOT_H)
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    wx = pose.x + c * fx.ravel() - s * fz.ravel()
    wz = pose.z + s * fx.ravel() + c * fz.ravel()
    blocked = np.zeros(wx.shape, dtype=bool)
    for (x0, x1, z0, z1) in state.scene.solids():
        blocked |= (wx >= x0) & (wx <= x1) & (wz >= z0) & (wz <= z1)
    return float(blocked.mean())


# ---------------------------------------------------------------------------
# reset / step


def reset(cfg: SceneConfig, plan: PlanTuple | None = None) -> SimState:
    """Initial state; validates that the scene is geometrically sane."""
    if cfg.table_length <= 0 or cfg.object_width <= 0 or cfg.object_height <= 0:
        raise SceneConfigError("table and object dimensions must be positive")
    if cfg.object_width >= cfg.table_length:
        raise SceneConfigError("object wider than the table")
    if cfg.horizon < 1:
        raise SceneConfigError("horizon must be at least 1")
    left = cfg.object_x - cfg.object_width / 2.0
    right = cfg.object_x + cfg.object_width / 2.0
    if left < 0.0 or right > cfg.table_length:
        raise SceneConfigError("object must start fully on the table")
    for w in cfg.walls:
        if not (w.x1 <= left or w.x0 >= right):
            raise SceneConfigError("object overlaps a wall")
        if w.x0 < 0 or w.x1 > cfg.table_length or w.x1 <= w.x0:
            raise SceneConfigError("wall outside the table or inverted")
    for (x0, x1, z0, z1) in cfg.solids():
        if x0 < cfg.gripper_x < x1 and z0 < cfg.gripper_z < z1:
            raise SceneConfigError("gripper starts inside a solid")
    state = SimState(
        scene=cfg, plan=plan, t=0,
        object_x=cfg.object_x, lift=0.0, lean_dir=0, lean_face_x=0.0,
        gripper_x=cfg.gripper_x, gripper_z=cfg.gripper_z,
        gripper_pitch=cfg.gripper_pitch, gripper_closed=False,
        terminal=None, contacts=frozenset(), overhang_fraction=0.0,
    )
    return replace(state, contacts=_compute_contacts(state))


def _resolve_point_solids(cfg: SceneConfig, x: float, z: float) -> tuple[float, float]:
    """Project the gripper point out of table/wall rectangles (minimal axis)."""
    for (x0, x1, z0, z1) in cfg.solids():
        if x0 < x < x1 and z0 < z < z1:
            moves = [(x0 - x, 0.0), (x1 - x, 0.0), (0.0, z0 - z), (0.0, z1 - z)]
            dx, dz = min(moves, key=lambda m: abs(m[0]) + abs(m[1]))
            x, z = x + dx, z + dz
    return x, z


def _wall_contact(state: SimState) -> tuple[int, float] | None:
    """(side, inner face x) of a wall the flat board touches, else None."""
    cfg = state.scene
    left = state.object_x - cfg.object_width / 2.0
    right = state.object_x + cfg.object_width / 2.0
    for w in cfg.walls:
        if w.x1 <= left + CONTACT_EPS and left - w.x1 <= CONTACT_EPS:
            return -1, w.x1
        if w.x0 >= right - CONTACT_EPS and w.x0 - right <= CONTACT_EPS:
            return 1, w.x0
    return None


def _clamp_object_x(cfg: SceneConfig, x: float, width: float) -> float:
    """Clamp a proposed board center so it never enters a wall."""
    for w in cfg.walls:
        # Blocked from the left side of the wall:
        if x + width / 2.0 > w.x0 and x - width / 2.0 < w.x1:
            # Decide which side it came from by proximity.
            if x < (w.x0 + w.x1) / 2.0:
                x = w.x0 - width / 2.0
            else:
                x = w.x1 + width / 2.0
    return x


# A gripper left flush on a face sits exactly on the boundary up to roundoff;
# the outside-tests below must tolerate that or the next push misses the face.
FACE_EPS = 1e-6


def _segment_entry_face(q0, q1, hw, hh):
    """Which face of an axis-aligned box (half sizes hw, hh) a segment enters.

    Returns 'left' | 'right' | 'top' | 'bottom' | 'inside' | None (q1 outside).
    Coordinates are in the box frame, origin at its center.
    """
    if not (-hw < q1[0] < hw and -hh < q1[1] < hh):
        return None
    dx, dz = q1[0] - q0[0], q1[1] - q0[1]
    best, best_t = None, -1.0
    if dx > 0 and q0[0] <= -hw + FACE_EPS:
        t = (-hw - q0[0]) / dx
        if t > best_t:
            best, best_t = "left", t
    if dx < 0 and q0[0] >= hw - FACE_EPS:
        t = (hw - q0[0]) / dx
        if t > best_t:
            best, best_t = "right", t
    if dz > 0 and q0[1] <= -hh + FACE_EPS:
        t = (-hh - q0[1]) / dz
        if t > best_t:
            best, best_t = "bottom", t
    if dz < 0 and q0[1] >= hh - FACE_EPS:
        t = (hh - q0[1]) / dz
        if t > best_t:
            best, best_t = "top", t
    return best or "inside"


def _compute_contacts(state: SimState) -> frozenset[str]:
    out = set()
    qx, qz = _world_to_object(state, state.gripper_x, state.gripper_z)
    cfg = state.scene
    hw, hh = cfg.object_width / 2.0, cfg.object_height / 2.0
    if -hw - CONTACT_EPS <= qx <= hw + CONTACT_EPS and -hh - CONTACT_EPS <= qz <= hh + CONTACT_EPS:
        out.add("gripper_object")
    if state.lift > 0.0 or _wall_contact(state) is not None:
        out.add("object_wall")
    if state.overhang_fraction > 0.0:
        out.add("object_edge_overhang")
    return frozenset(out)


def _overhang_fraction(cfg: SceneConfig, object_x: float) -> float:
    w = cfg.object_width
    over_right = (object_x + w / 2.0) - cfg.table_length
    over_left = 0.0 - (object_x - w / 2.0)
    return max(0.0, over_right / w, over_left / w)


def step(state: SimState, action: Action) -> tuple[SimState, float, ContactReport]:
    """One quasi-static transition.  Rule order:

    1. move gripper by the clipped action, kept out of table/walls;
    2. a horizontal push into a board side face over the table translates the
       board by the normal component, stopped by walls (overhanging faces are
       straddled by the open fingers instead: no push, free crossing);
    3. wall pivot: pressing the far half of the top face and dragging toward
       the contacted wall lifts the board (friction gate, lean stability);
    4. tipping: center of mass past the edge without a holding grasp falls;
    5. grasp: closed gripper within pose tolerance of an unoccluded goal;
    6. timeout at the scenario horizon.

    Sparse reward: +1 success, -1 fallen/timeout, else 0.
    """
    if state.terminal is not None:
        raise ValueError(f"cannot step a terminal state ({state.terminal})")
    cfg = state.scene
    a = action.clipped()
    w, h = cfg.object_width, cfg.object_height
    hw, hh = w / 2.0, h / 2.0

    # -- rule 1: gripper motion
    gx0, gz0 = state.gripper_x, state.gripper_z
    gx1, gz1 = _resolve_point_solids(cfg, gx0 + a.dx, gz0 + a.dz)
    pitch = wrap_angle(state.gripper_pitch + a.dpitch)
    closed = a.grip >= 0.0

    pushed = 0.0
    lift_delta = 0.0
    flush = False
    object_x = state.object_x
    lift = state.lift
    lean_dir = state.lean_dir
    lean_face_x = state.lean_face_x
    top_contact_far = False

    if lift <= 0.0:
        # -- rule 2: flat board, side pushes translate it
        cx, cz = object_x, hh  # board center
        q0 = (gx0 - cx, gz0 - cz)
        q1 = (gx1 - cx, gz1 - cz)
        entry = _segment_entry_face(q0, q1, hw, hh)
        if entry == "right" or entry == "left":
            sign = 1 if entry == "right" else -1
            face_x = object_x + sign * hw
            beyond_edge = face_x > cfg.table_length or face_x < 0.0
            if not beyond_edge:
                want = gx1 - face_x  # signed penetration past the face plane
                new_x = _clamp_object_x(cfg, object_x + want, w)
                pushed = new_x - object_x
                object_x = new_x
                moved_face = object_x + sign * hw
                if (sign > 0 and gx1 < moved_face) or (sign < 0 and gx1 > moved_face):
                    gx1 = moved_face
                    flush = True
            # else: the face hangs in free air; open fingers straddle it.
        elif entry == "top":
            gz1 = h
            flush = True
        elif entry == "bottom":
            gz1 = 0.0
            flush = True
        elif entry == "inside":
            # Numerical corner case: project out along the cheapest axis.
            qx, qz = q1
            cands = [(-hw - qx, 0.0), (hw - qx, 0.0), (0.0, -hh - qz), (0.0, hh - qz)]
            mx, mz = min(cands, key=lambda m: abs(m[0]) + abs(m[1]))
            gx1, gz1 = cx + qx + mx, cz + qz + mz
            flush = True

        # -- rule 3 (engage): wall contact + far-half top press + drag toward wall
        wall = _wall_contact(replace(state, object_x=object_x))
        if wall is not None:
            side, face = wall
            on_top = abs(gz1 - h) <= CONTACT_EPS
            far_half = (gx1 - object_x) * (-side) > 0  # away from the wall
            toward_wall = (gx1 - gx0) * side  # positive when dragging into the wall
            if on_top and far_half and toward_wall > 0 and cfg.friction >= FRICTION_GATE:
                lift_delta = min(LIFT_CAP, LIFT_GAIN * toward_wall)
                lift = lift_delta
                lean_dir = side
                lean_face_x = face
                top_contact_far = True
    else:
        # Leaning board: it cannot translate; the gripper is kept outside it
        # (a push into any face just lands flush on that face).
        q0 = _world_to_object(state, gx0, gz0)
        q1 = _world_to_object(state, gx1, gz1)
        entry = _segment_entry_face(q0, q1, hw, hh)
        if entry in ("left", "right", "top", "bottom", "inside"):
            qx, qz = q1
            if entry == "left":
                qx = -hw
            elif entry == "right":
                qx = hw
            elif entry == "top":
                qz = hh
            elif entry == "bottom":
                qz = -hh
            else:  # started inside (numerical corner); push out along min axis
                cands = [(-hw - qx, 0.0), (hw - qx, 0.0), (0.0, -hh - qz), (0.0, hh - qz)]
                mx, mz = min(cands, key=lambda m: abs(m[0]) + abs(m[1]))
                qx, qz = qx + mx, qz + mz
            gx1, gz1 = _object_to_world(state, qx, qz)
            flush = True

        # -- rule 3 (continue): riding the tilted top face, still dragging
        qx, qz = _world_to_object(state, gx1, gz1)
        on_top = abs(qz - hh) <= CONTACT_EPS and -hw <= qx <= hw
        far_half = qx * (-lean_dir) > 0
        toward_wall = (gx1 - gx0) * lean_dir
        if on_top and far_half and toward_wall > 0 and cfg.friction >= FRICTION_GATE:
            lift_delta = min(LIFT_CAP - lift, LIFT_GAIN * toward_wall)
            lift = lift + lift_delta
            top_contact_far = True
        # Lean stability: an unsupported shallow lean falls back flat.
        if lift < LEAN_STABLE and not top_contact_far:
            lift_delta -= lift
            lift = 0.0
            object_x = lean_face_x - lean_dir * hw
            lean_dir = 0
            lean_face_x = 0.0

    new = replace(
        state,
        t=state.t + 1,
        object_x=object_x, lift=lift, lean_dir=lean_dir, lean_face_x=lean_face_x,
        gripper_x=gx1, gripper_z=gz1, gripper_pitch=pitch, gripper_closed=closed,
        overhang_fraction=_overhang_fraction(cfg, object_x) if lift <= 0.0 else 0.0,
    )
    # The finger that lifted the board stays in contact with the face it is
    # pressing: re-project it onto the rotated top face, keeping its local x.
    if lift_delta > 0.0:
        qx, qz = _world_to_object(new, new.gripper_x, new.gripper_z)
        qx = min(hw, max(-hw, qx))
        gx1, gz1 = _object_to_world(new, qx, hh)
        new = replace(new, gripper_x=gx1, gripper_z=gz1)

    reward = 0.0
    terminal = None

    # -- rule 4: tipping over the edge
    goal = goal_grasp_pose(new, new.plan) if new.plan is not None else None
    if new.lift <= 0.0 and new.overhang_fraction > 0.5:
        held = False
        if goal is not None and new.gripper_closed:
            dt, _ = Pose2(new.gripper_x, new.gripper_z, new.gripper_pitch).distance(goal)
            held = dt < 3.0 * GRASP_TOL_T
        if not held:
            terminal = "fallen"
            reward = -1.0

    # -- rule 5: grasp success
    if terminal is None and goal is not None and new.gripper_closed:
        dt, dr = Pose2(new.gripper_x, new.gripper_z, new.gripper_pitch).distance(goal)
        if dt < GRASP_TOL_T and dr < GRASP_TOL_R and occlusion(new, goal) < OCCLUSION_TOL:
            terminal = "success"
            reward = 1.0

    # -- rule 6: timeout
    if terminal is None and new.t >= cfg.horizon:
        terminal = "timeout"
        reward = -1.0

    new = replace(new, terminal=terminal)
    new = replace(new, contacts=_compute_contacts(new))
    report = ContactReport(contacts=new.contacts, pushed=pushed, lift_delta=lift_delta, flush=flush)
    return new, reward, report


# ---------------------------------------------------------------------------
# rendering


def _axis_coverage(lo: float, hi: float, w0: float, scale: float, n: int) -> np.ndarray:
    """Per-cell overlap fraction of [lo, hi] with n cells starting at w0."""
    edges = w0 + scale * np.arange(n + 1)
    overlap = np.minimum(edges[1:], hi) - np.maximum(edges[:-1], lo)
    return np.clip(overlap / scale, 0.0, 1.0)


def _paint_rect(img, cfg, x0, x1, z0, z1, color):
    """Alpha-composite an axis-aligned rect with exact area coverage."""
    sx = WINDOW_W / IMG_SIZE
    sz = WINDOW_H / IMG_SIZE
    cov_x = _axis_coverage(x0, x1, cfg.window_x0, sx, IMG_SIZE)
    # Row 0 is the top of the window.
    cov_z = _axis_coverage(z0, z1, WINDOW_Z0, sz, IMG_SIZE)[::-1]
    alpha = np.outer(cov_z, cov_x)
    img *= (1.0 - alpha)[..., None]
    img += alpha[..., None] * np.asarray(color, dtype=np.float32)


def _paint_obb(img, cfg, center, half_w, half_h, theta, color, ss=4):
    """Supersampled coverage for a rotated rectangle."""
    sx = WINDOW_W / IMG_SIZE
    sz = WINDOW_H / IMG_SIZE
    u = (np.arange(IMG_SIZE * ss) + 0.5) / ss
    wx = cfg.window_x0 + sx * u
    wz = WINDOW_Z0 + WINDOW_H - sz * u  # row-major from the top
    gx, gz = np.meshgrid(wx, wz)
    c, s = math.cos(theta), math.sin(theta)
    lx = c * (gx - center[0]) + s * (gz - center[1])
    lz = -s * (gx - center[0]) + c * (gz - center[1])
    inside = (np.abs(lx) <= half_w) & (np.abs(lz) <= half_h)
    alpha = inside.reshape(IMG_SIZE, ss, IMG_SIZE, ss).mean(axis=(1, 3)).astype(np.float32)
    img *= (1.0 - alpha)[..., None]
    img += alpha[..., None] * np.asarray(color, dtype=np.float32)


def render(state: SimState) -> np.ndarray:
    """Pure function of the state: 64x64x3 float32 image in [0, 1].

    Painter order: background, table, walls, board, gripper.  Axis-aligned
    solids use exact area coverage, so boundary pixels encode sub-pixel
    positions; the rotated board is 4x supersampled.
    """
    cfg = state.scene
    img = np.zeros((IMG_SIZE, IMG_SIZE, 3), dtype=np.float32)
    img[:] = COLOR_BG
    _paint_rect(img, cfg, 0.0, cfg.table_length, -cfg.table_thickness, 0.0, COLOR_TABLE)
    for wall in cfg.walls:
        _paint_rect(img, cfg, wall.x0, wall.x1, 0.0, wall.height, COLOR_WALL)
    pose = object_pose(state)
    if abs(pose.theta) < 1e-12:
        _paint_rect(
            img, cfg,
            pose.x - cfg.object_width / 2, pose.x + cfg.object_width / 2,
            pose.z - cfg.object_height / 2, pose.z + cfg.object_height / 2,
            COLOR_OBJECT,
        )
    else:
        _paint_obb(img, cfg, (pose.x, pose.z), cfg.object_width / 2,
                   cfg.object_height / 2, pose.theta, COLOR_OBJECT)
    # Gripper: body square plus a finger tick along the pitch direction.
    _paint_rect(img, cfg,
                state.gripper_x - 0.014, state.gripper_x + 0.014,
                state.gripper_z - 0.014, state.gripper_z + 0.014, COLOR_GRIPPER)
    _paint_obb(img, cfg, (state.gripper_x, state.gripper_z), 0.024, 0.004,
               state.gripper_pitch, COLOR_GRIPPER)
    return img


def observe(state: SimState) -> Observation:
    """Image plus window-normalized gripper pose (same frame as the image)."""
    vec = np.array(
        [
            (state.gripper_x - state.scene.window_x0) / WINDOW_W,
            (state.gripper_z - WINDOW_Z0) / WINDOW_H,
            math.sin(state.gripper_pitch),
            math.cos(state.gripper_pitch),
        ],
        dtype=np.float32,
    )
    return Observation(image=render(state), gripper_pose_vec=vec)


def quantize_image(img: np.ndarray) -> np.ndarray:
    """Float [0,1] image to u8, the storage and policy-input format."""
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
