"""Desk-scale benchmark for grasping flat objects that a gripper cannot pick
up directly: push them to a table edge or tilt them against a wall, then grasp
the freed face.  Ships a 2D quasi-static simulator, scripted demonstrators, a
return-conditioned action-diffusion policy with baselines, a small language
planner, and a seeded evaluation harness.
"""

__version__ = "0.1.0"
