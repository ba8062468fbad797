"""Plan sentences, plan selection, and reward definitions.

A plan is one English sentence, e.g.

    Push the toolbox to the right to the edge of the table, and grasp it
    from the right.

`parse_plan` turns a sentence into a PlanTuple and reports the 1-indexed
token where parsing failed; semantic checks live in PlanTuple.validate so a
grammatically fine but unusable sentence (say, a top grasp) still parses.

Two plan sources exist for the same scene:

* `scripted_vlm_plan` mimics the context-aware planner the system is built
  around.  It refuses to use a table edge when the table is too broad for
  the camera window and falls back to a wall.
* `heuristic_plan` is the nearest-structure baseline: whichever usable
  structure is closest wins, ties go to the edge.

Rewards are potential-based: each dense term is the per-step difference of
a state quantity, so returns telescope and cannot be farmed by cycling.
Successful episodes end +1 sparse, failures -1, which keeps the two return
modes separated by about 2 regardless of the dense partial sums.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from . import sim
from .plans import Direction, PlanError, PlanTuple, Structure

# Edge-route stage lengths (steps): push to overhang, travel over the edge,
# descend and grasp.  Their sum must equal the scenario horizon.
EDGE_STAGES = (10, 20, 40)

# Target overhang past the table edge, meters.  Enough to free the finger
# envelope (needs > ~0.011) while staying far from the 50% tipping point.
OVERHANG_TARGET = 0.055

# Stage-2 waypoint offsets from the grasp target: out beyond the free face
# and up over the board.
WAYPOINT_OUT = 0.05
WAYPOINT_Z = 0.13

# Dense-reward weights.
W_PUSH = 2.0    # edge stage 1: board progress toward the overhang target
W_REACH = 1.0   # gripper distance to the active target (waypoint or grasp)
W_OCCL = 0.5    # wall route: freeing the grasp pose from occlusion
W_DRIFT = 0.5   # edge stage 1: vertical gripper wander penalty
W_LIFT = 2.0    # wall route: lean-angle progress

# A table longer than this cannot be worked by its edges under the fixed
# camera window; the context-aware planner switches to walls.
VLM_BROAD_TABLE = 1.5


class GrammarError(ValueError):
    """Unparseable plan sentence; `token_index` is 1-based."""

    def __init__(self, message: str, token_index: int):
        super().__init__(f"{message} (token {token_index})")
        self.token_index = token_index


def _expect(tokens: list[str], i: int, word: str) -> int:
    if i >= len(tokens):
        raise GrammarError(f"sentence ended early, expected {word!r}", len(tokens) + 1)
    if tokens[i].lower() != word:
        raise GrammarError(f"expected {word!r}, got {tokens[i]!r}", i + 1)
    return i + 1


def _direction(tokens: list[str], i: int, allow_top: bool) -> tuple[Direction, int]:
    if i >= len(tokens):
        raise GrammarError("sentence ended early, expected a direction", len(tokens) + 1)
    word = tokens[i].lower()
    table = {"left": Direction.LEFT, "right": Direction.RIGHT}
    if allow_top:
        table["top"] = Direction.TOP
    if word not in table:
        raise GrammarError(f"unknown direction {tokens[i]!r}", i + 1)
    return table[word], i + 1


def parse_plan(sentence: str) -> PlanTuple:
    """Sentence -> PlanTuple.  Grammar only; call .validate() for semantics."""
    raw = sentence.strip()
    if not raw.endswith("."):
        raise GrammarError("sentence must end with '.'", max(1, len(raw.split())))
    tokens = raw[:-1].split()
    if not tokens:
        raise GrammarError("empty sentence", 1)

    i = _expect(tokens, 0, "push")
    i = _expect(tokens, i, "the")
    obj_words = []
    while i < len(tokens) and tokens[i].lower() != "to":
        obj_words.append(tokens[i])
        i += 1
    if not obj_words:
        raise GrammarError("expected an object name", i + 1)
    object_name = " ".join(w.lower() for w in obj_words)

    i = _expect(tokens, i, "to")
    i = _expect(tokens, i, "the")
    push_dir, i = _direction(tokens, i, allow_top=False)

    if i >= len(tokens):
        raise GrammarError("sentence ended early, expected a structure clause",
                           len(tokens) + 1)
    word = tokens[i].lower()
    if word == "to":
        i = _expect(tokens, i, "to")
        i = _expect(tokens, i, "the")
        i = _expect(tokens, i, "edge")
        i = _expect(tokens, i, "of")
        i = _expect(tokens, i, "the")
        i = _expect(tokens, i, "table,")  # comma attaches to the last word
        structure = Structure.TABLE_EDGE
    elif word == "against":
        i = _expect(tokens, i, "against")
        i = _expect(tokens, i, "the")
        i = _expect(tokens, i, "wall,")
        structure = Structure.WALL
    else:
        raise GrammarError(f"unknown structure clause {tokens[i]!r}", i + 1)

    i = _expect(tokens, i, "and")
    i = _expect(tokens, i, "grasp")
    i = _expect(tokens, i, "it")
    i = _expect(tokens, i, "from")
    i = _expect(tokens, i, "the")
    grasp_dir, i = _direction(tokens, i, allow_top=True)
    if i != len(tokens):
        raise GrammarError(f"unexpected trailing token {tokens[i]!r}", i + 1)
    return PlanTuple(
        skill="push", object_name=object_name, structure=structure,
        push_direction=push_dir, grasp_direction=grasp_dir,
    )


def render_plan(plan: PlanTuple) -> str:
    """Canonical sentence for a plan; parse_plan(render_plan(p)) == p."""
    if plan.structure is Structure.TABLE_EDGE:
        clause = "to the edge of the table"
    else:
        clause = "against the wall"
    return "Push the {} to the {} {}, and grasp it from the {}.".format(
        plan.object_name, plan.push_direction.value, clause,
        plan.grasp_direction.value
    )


# ---------------------------------------------------------------------------
# plan selection


def _usable_edges(cfg: sim.SceneConfig) -> list[tuple[float, Direction]]:
    """(distance from board face, push direction) for ends not walled off."""
    out = []
    left_face = cfg.object_x - cfg.object_width / 2.0
    right_face = cfg.object_x + cfg.object_width / 2.0
    left_blocked = any(w.x0 <= 0.02 for w in cfg.walls)
    right_blocked = any(w.x1 >= cfg.table_length - 0.02 for w in cfg.walls)
    if not left_blocked:
        out.append((left_face, Direction.LEFT))
    if not right_blocked:
        out.append((cfg.table_length - right_face, Direction.RIGHT))
    return out


def _nearest_wall(cfg: sim.SceneConfig) -> tuple[float, Direction, float] | None:
    """(distance, push direction, wall face x) of the closest flankable wall."""
    left_face = cfg.object_x - cfg.object_width / 2.0
    right_face = cfg.object_x + cfg.object_width / 2.0
    best = None
    for w in cfg.walls:
        if w.x1 <= left_face:
            cand = (left_face - w.x1, Direction.LEFT, w.x1)
        elif w.x0 >= right_face:
            cand = (w.x0 - right_face, Direction.RIGHT, w.x0)
        else:
            continue
        if best is None or cand[0] < best[0]:
            best = cand
    return best


def _edge_plan(cfg: sim.SceneConfig, direction: Direction) -> PlanTuple:
    return PlanTuple(
        skill="push", object_name=cfg.object_name, structure=Structure.TABLE_EDGE,
        push_direction=direction, grasp_direction=direction,
    ).validate()


def _wall_plan(cfg: sim.SceneConfig, direction: Direction) -> PlanTuple:
    grasp = Direction.RIGHT if direction is Direction.LEFT else Direction.LEFT
    return PlanTuple(
        skill="push", object_name=cfg.object_name, structure=Structure.WALL,
        push_direction=direction, grasp_direction=grasp,
    ).validate()


def scripted_vlm_plan(cfg: sim.SceneConfig) -> PlanTuple:
    """Context-aware plan: like the upstream language planner, it reads the
    scene as a whole rather than measuring distances.

    On a broad table (longer than the camera window can cover) the edges are
    treated as unavailable and a wall is required; otherwise the nearest
    usable edge wins, with walls as the fallback.
    """
    edges = _usable_edges(cfg)
    wall = _nearest_wall(cfg)
    if cfg.table_length > VLM_BROAD_TABLE:
        if wall is None:
            raise PlanError(
                "no feasible plan: table too broad for edge work and no wall present"
            )
        return _wall_plan(cfg, wall[1])
    if edges:
        edges.sort(key=lambda e: e[0])
        return _edge_plan(cfg, edges[0][1])
    if wall is not None:
        return _wall_plan(cfg, wall[1])
    raise PlanError("no feasible plan: no usable edge and no wall present")


def heuristic_plan(cfg: sim.SceneConfig) -> PlanTuple:
    """Nearest-structure baseline; ties prefer the table edge."""
    edges = _usable_edges(cfg)
    wall = _nearest_wall(cfg)
    best_edge = min(edges, key=lambda e: e[0]) if edges else None
    if best_edge is not None and (wall is None or best_edge[0] <= wall[0]):
        return _edge_plan(cfg, best_edge[1])
    if wall is not None:
        return _wall_plan(cfg, wall[1])
    raise PlanError("no feasible plan: no usable edge and no wall present")


# ---------------------------------------------------------------------------
# rewards


@dataclass(frozen=True)
class RewardSpec:
    mode: str                     # "edge_staged" | "wall_dense"
    plan: PlanTuple
    stages: tuple[int, int, int] | None
    push_target_x: float          # board-center target for the push phase
    waypoint: tuple[float, float] | None


def make_reward_spec(plan: PlanTuple, cfg: sim.SceneConfig) -> RewardSpec:
    """Bind a validated plan to a scene; raises PlanError on incompatibility."""
    plan.validate()
    if plan.structure is Structure.TABLE_EDGE:
        if sum(EDGE_STAGES) != cfg.horizon:
            raise PlanError(
                "incompatible plan: edge maneuver needs a horizon of "
                f"{sum(EDGE_STAGES)} steps, scenario allows {cfg.horizon}"
            )
        sign = plan.push_direction.sign
        if sign > 0:
            target = cfg.table_length - cfg.object_width / 2.0 + OVERHANG_TARGET
        else:
            target = cfg.object_width / 2.0 - OVERHANG_TARGET
        goal_x = target + sign * cfg.object_width / 2.0
        waypoint = (goal_x + sign * WAYPOINT_OUT, WAYPOINT_Z)
        return RewardSpec(mode="edge_staged", plan=plan, stages=EDGE_STAGES,
                          push_target_x=target, waypoint=waypoint)
    wall = _nearest_wall(cfg)
    if wall is None or wall[1] is not plan.push_direction:
        allowed = None if wall is None else wall[1].value
        raise PlanError(
            f"incompatible plan: no wall to the {plan.push_direction.value} "
            f"of the object" + (f" (nearest is {allowed})" if allowed else "")
        )
    sign = plan.push_direction.sign
    target = wall[2] - sign * cfg.object_width / 2.0
    return RewardSpec(mode="wall_dense", plan=plan, stages=None,
                      push_target_x=target, waypoint=None)


def _edge_stage(spec: RewardSpec, t: int) -> int:
    s1, s2, _ = spec.stages
    if t < s1:
        return 0
    if t < s1 + s2:
        return 1
    return 2


def _grip_goal_distance(state: sim.SimState, plan: PlanTuple) -> float:
    goal = sim.goal_grasp_pose(state, plan)
    return math.hypot(state.gripper_x - goal.x, state.gripper_z - goal.z)


def _edge_potential(spec: RewardSpec, state: sim.SimState, stage: int) -> float:
    if stage == 0:
        return -W_PUSH * abs(state.object_x - spec.push_target_x)
    if stage == 1:
        wx, wz = spec.waypoint
        return -W_REACH * math.hypot(state.gripper_x - wx, state.gripper_z - wz)
    return -W_REACH * _grip_goal_distance(state, spec.plan)


def _wall_potential(state: sim.SimState, spec: RewardSpec) -> float:
    # object_x freezes at the flush position while the board leans, so the
    # push term is exactly zero from lift engagement onward.
    goal = sim.goal_grasp_pose(state, spec.plan)
    reach = math.hypot(state.gripper_x - goal.x, state.gripper_z - goal.z)
    return (
        W_LIFT * state.lift
        - W_REACH * reach
        - W_OCCL * sim.occlusion(state, goal)
        - W_PUSH * abs(state.object_x - spec.push_target_x)
    )


def step_reward(
    spec: RewardSpec,
    before: sim.SimState,
    after: sim.SimState,
    sparse: float,
) -> float:
    """Dense potential difference for one transition plus the sparse bonus."""
    if spec.mode == "edge_staged":
        stage = _edge_stage(spec, before.t)
        dense = _edge_potential(spec, after, stage) - _edge_potential(spec, before, stage)
        if stage == 0:
            dense -= W_DRIFT * abs(after.gripper_z - before.gripper_z)
        return dense + sparse
    dense = _wall_potential(after, spec) - _wall_potential(before, spec)
    return dense + sparse


def compute_rtg(rewards: list[float]) -> list[float]:
    """Suffix sums: rtg[i] = sum(rewards[i:])."""
    out = [0.0] * len(rewards)
    acc = 0.0
    for i in range(len(rewards) - 1, -1, -1):
        acc += rewards[i]
        out[i] = acc
    return out
