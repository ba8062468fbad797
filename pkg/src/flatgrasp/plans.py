"""Plan tuple shared by the simulator, planner, and data generator.

A plan names the manipulation strategy for one episode: which structure to
exploit (a supporting wall or the table edge), which way to push, and which
object face to grasp once it is freed.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum


class Structure(Enum):
    WALL = "wall"
    TABLE_EDGE = "table_edge"


class Direction(Enum):
    LEFT = "left"
    RIGHT = "right"
    TOP = "top"  # only grammatically valid for grasps; rejected for flat objects

    @property
    def sign(self) -> int:
        if self is Direction.LEFT:
            return -1
        if self is Direction.RIGHT:
            return 1
        raise PlanError("direction 'top' has no horizontal sign")


class PlanError(ValueError):
    """Semantically unusable plan (distinct from grammar parse errors)."""


@dataclass(frozen=True, slots=True)
class PlanTuple:
    """(skill, object, structure, push_direction, grasp_direction).

    Syntax-level container: any enum combination can be constructed so that
    sentences round-trip verbatim through the grammar.  `validate()` enforces
    the physical side conditions before a plan is executed.
    """

    skill: str
    object_name: str
    structure: Structure
    push_direction: Direction
    grasp_direction: Direction

    def validate(self) -> "PlanTuple":
        if self.skill != "push":
            raise PlanError(f"unknown skill {self.skill!r}")
        if self.push_direction is Direction.TOP:
            raise PlanError("cannot push toward 'top'")
        if self.grasp_direction is Direction.TOP:
            # Flat objects present no graspable top face; that is the premise.
            raise PlanError("grasp direction 'top' is incompatible with a flat object")
        if self.structure is Structure.WALL and self.grasp_direction is self.push_direction:
            # The wall maneuver frees the face opposite the wall; grasping the
            # wall side is geometrically blocked.
            raise PlanError("wall plans must grasp from the side opposite the push")
        return self

    def bucket_key(self) -> str:
        return "{}_{}_{}".format(
            self.structure.value, self.push_direction.value, self.grasp_direction.value
        )
