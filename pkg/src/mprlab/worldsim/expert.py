"""Scripted waypoint experts and failure modes."""
from __future__ import annotations

import numpy as np

from mprlab.worldsim.envs import CornerFold, EnvState, HingedDoor, Task

CLOSE_RADIUS = 0.005


def _toward(delta: np.ndarray, step: float) -> np.ndarray:
    """Translation command (action units) that covers ``delta`` or one full step."""
    dist = float(np.linalg.norm(delta))
    if dist < 1e-12:
        return np.zeros(2)
    cmd = delta / step
    scale = max(1.0, float(np.abs(cmd).max()))
    return cmd / scale


def expert_action(env: Task, s: EnvState, rng: np.random.Generator | None = None,
                  noise_std: float = 0.0) -> np.ndarray:
    """Closed-loop waypoint policy: approach, grasp, carry, release.

    ``noise_std`` is Gaussian noise in action units on the translation.
    """
    grasp = env.grasp_point(s)
    if s.attached:
        move, grip = _carry_direction(env, s), 1.0
    elif s.grip_closed:
        move, grip = np.zeros(2), -1.0
    else:
        delta = grasp - s.gripper
        if np.linalg.norm(delta) <= CLOSE_RADIUS:
            move, grip = np.zeros(2), 1.0
        else:
            move, grip = _toward(delta, env.a_max), -1.0
    if isinstance(env, CornerFold) and s.attached and \
            np.linalg.norm(s.corner - env.FIXED) <= CLOSE_RADIUS:
        move, grip = np.zeros(2), -1.0
    if noise_std > 0 and rng is not None:
        move = move + rng.normal(0.0, noise_std, size=2)
    return np.clip(np.array([move[0], move[1], grip]), -1.0, 1.0)


def _carry_direction(env: Task, s: EnvState) -> np.ndarray:
    if isinstance(env, HingedDoor):
        return env.tangent(s.door_angle) / np.abs(env.tangent(s.door_angle)).max()
    return _toward(env.FIXED - s.corner, env.a_max)


def hold_action(s: EnvState) -> np.ndarray:
    """Freeze in place, keeping the current grip."""
    return np.array([0.0, 0.0, 1.0 if s.grip_closed else -1.0])


class MissHandleExpert:
    """Aims below the grasp point, closes on nothing, then replays the carry motion."""

    def __init__(self, env: Task, offset: float = 0.05):
        self.env = env
        self.offset = np.array([0.0, -offset])
        self.phase = "approach"
        self.virtual_angle = 0.0

    def __call__(self, s: EnvState) -> np.ndarray:
        env = self.env
        if self.phase == "approach":
            delta = env.grasp_point(s) + self.offset - s.gripper
            if np.linalg.norm(delta) <= CLOSE_RADIUS:
                self.phase = "carry"
                self.virtual_angle = s.door_angle
                return np.array([0.0, 0.0, 1.0])
            return np.array([*_toward(delta, env.a_max), -1.0])
        if self.phase == "carry":
            if isinstance(env, HingedDoor):
                if self.virtual_angle >= env.SUCCESS_ANGLE:
                    self.phase = "done"
                    return hold_action(s)
                tan = env.tangent(self.virtual_angle)
                move = tan / np.abs(tan).max()
                self.virtual_angle = env.arc_step(self.virtual_angle, move * env.a_max, env.a_max)
                return np.array([move[0], move[1], 1.0])
            goal = env.FIXED + self.offset
            delta = goal - s.gripper
            if np.linalg.norm(delta) <= CLOSE_RADIUS:
                self.phase = "done"
                return np.array([0.0, 0.0, -1.0])
            return np.array([*_toward(delta, env.a_max), 1.0])
        return hold_action(s)


class StallExpert:
    """Approaches the grasp point, then freezes for the rest of the episode."""

    def __init__(self, env: Task, stop_distance: float = 0.05):
        self.env = env
        self.stop_distance = stop_distance
        self.frozen = False

    def __call__(self, s: EnvState) -> np.ndarray:
        delta = self.env.grasp_point(s) - s.gripper
        if self.frozen or np.linalg.norm(delta) <= self.stop_distance:
            self.frozen = True
            return np.array([0.0, 0.0, -1.0])
        return np.array([*_toward(delta, self.env.a_max), -1.0])
