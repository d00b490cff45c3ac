"""Kinematic 2D manipulation tasks with ground-truth point rendering."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from mprlab.errors import ConfigError
from mprlab.tracks import AGENT, BACKGROUND, OBJECT, TrackFrame

A_MAX = 0.02
HORIZON = 100
R_GRAB = 0.02
OCCLUSION_RADIUS = 0.015
N_OBJECT_POINTS = 32
AGENT_OFFSETS = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
EMBODIMENTS = {
    # (translation scale per step, agent cluster spacing)
    "robot": (A_MAX, 0.02),
    "human": (1.5 * A_MAX, 0.04),
}


def _background_grid() -> np.ndarray:
    xs = np.linspace(0.05, 0.95, 10)
    ys = np.linspace(0.08, 0.92, 6)
    return np.array([(x, y) for y in ys for x in xs])


BACKGROUND_POINTS = _background_grid()
N_POINTS = N_OBJECT_POINTS + len(BACKGROUND_POINTS) + len(AGENT_OFFSETS)
POINT_LABELS = np.array([OBJECT] * N_OBJECT_POINTS
                        + [BACKGROUND] * len(BACKGROUND_POINTS)
                        + [AGENT] * len(AGENT_OFFSETS), dtype=np.int8)


@dataclass
class EnvState:
    gripper: np.ndarray
    grip_closed: bool = False
    attached: bool = False
    t: int = 0
    horizon: int = HORIZON
    success: bool = False
    door_angle: float = 0.0
    corner: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def copy(self) -> "EnvState":
        return replace(self, gripper=self.gripper.copy(), corner=self.corner.copy())

    def to_json(self) -> dict:
        return {
            "gripper": [float(v) for v in self.gripper],
            "grip_closed": self.grip_closed, "attached": self.attached, "t": self.t,
            "horizon": self.horizon, "success": self.success,
            "door_angle": float(self.door_angle), "corner": [float(v) for v in self.corner],
        }

    @classmethod
    def from_json(cls, d: dict) -> "EnvState":
        return cls(np.asarray(d["gripper"], dtype=float), d["grip_closed"], d["attached"],
                   d["t"], d["horizon"], d["success"], d["door_angle"],
                   np.asarray(d["corner"], dtype=float))


def clip_action(action) -> np.ndarray:
    a = np.asarray(action, dtype=np.float64).reshape(3)
    return np.clip(a, -1.0, 1.0)


class Task:
    """Shared stepping/rendering; subclasses define the object."""

    env_id = ""

    def __init__(self, embodiment: str = "robot", horizon: int = HORIZON):
        if embodiment not in EMBODIMENTS:
            raise ConfigError(f"unknown embodiment '{embodiment}'")
        self.embodiment = embodiment
        self.a_max, self.agent_spacing = EMBODIMENTS[embodiment]
        self.horizon = horizon

    # subclass hooks
    def reset(self, rng: np.random.Generator) -> EnvState:
        raise NotImplementedError

    def grasp_point(self, s: EnvState) -> np.ndarray:
        raise NotImplementedError

    def object_points(self, s: EnvState) -> np.ndarray:
        raise NotImplementedError

    def object_feature(self, s: EnvState) -> np.ndarray:
        raise NotImplementedError

    def _move_attached(self, s: EnvState, d: np.ndarray) -> None:
        raise NotImplementedError

    def is_success(self, s: EnvState) -> bool:
        raise NotImplementedError

    def step(self, state: EnvState, action) -> tuple[EnvState, bool, dict]:
        """Advance one step; actions are clipped, never rejected."""
        a = clip_action(action)
        s = state.copy()
        d = a[:2] * self.a_max
        close = bool(a[2] > 0)
        if s.attached and close:
            self._move_attached(s, d)
        else:
            s.attached = False
            s.gripper = np.clip(s.gripper + d, 0.0, 1.0)
            if close and not s.grip_closed:
                # grasping only happens on the closing transition
                s.attached = bool(np.linalg.norm(s.gripper - self.grasp_point(s)) <= R_GRAB)
        s.grip_closed = close
        s.t += 1
        s.success = bool(s.success or self.is_success(s))
        done = s.success or s.t >= s.horizon
        return s, done, {"success": s.success, "attached": s.attached}

    def agent_points(self, s: EnvState) -> np.ndarray:
        return s.gripper + self.agent_spacing * AGENT_OFFSETS

    def render_tracks(self, s: EnvState, offset: np.ndarray | None = None) -> TrackFrame:
        """Ground-truth tracks; ``offset`` is a global camera translation."""
        obj = self.object_points(s)
        agent = self.agent_points(s)
        pts = np.concatenate([obj, BACKGROUND_POINTS, agent])
        visible = np.ones(N_POINTS, dtype=bool)
        inside = np.all((obj >= 0.0) & (obj <= 1.0), axis=1)
        gap = np.linalg.norm(obj[:, None, :] - agent[None, :, :], axis=2).min(axis=1)
        visible[:N_OBJECT_POINTS] = inside & (gap > OCCLUSION_RADIUS)
        if offset is not None:
            pts = pts + np.asarray(offset)
        return TrackFrame(pts, visible, POINT_LABELS, s.t)


class HingedDoor(Task):
    """Door on a pivot; the handle sits at the free end."""

    env_id = "hinged_door"
    PIVOT = np.array([0.7, 0.5])
    LENGTH = 0.25
    MAX_ANGLE = np.pi / 2
    SUCCESS_ANGLE = 1.40
    _FRACTIONS = np.arange(1, N_OBJECT_POINTS + 1) / N_OBJECT_POINTS

    def reset(self, rng: np.random.Generator) -> EnvState:
        angle = rng.uniform(0.0, 0.25)
        s = EnvState(np.zeros(2), horizon=self.horizon, door_angle=angle)
        dist = rng.uniform(0.05, 0.12)
        phi = -np.pi / 2 + rng.uniform(-0.6, 0.6)
        s.gripper = np.clip(self.handle(angle) + dist * np.array([np.cos(phi), np.sin(phi)]), 0, 1)
        return s

    def handle(self, angle: float) -> np.ndarray:
        return self.PIVOT + self.LENGTH * np.array([np.cos(angle), np.sin(angle)])

    @staticmethod
    def tangent(angle: float) -> np.ndarray:
        """Unit direction of increasing door angle at the handle."""
        return np.array([-np.sin(angle), np.cos(angle)])

    def grasp_point(self, s: EnvState) -> np.ndarray:
        return self.handle(s.door_angle)

    def object_points(self, s: EnvState) -> np.ndarray:
        u = np.array([np.cos(s.door_angle), np.sin(s.door_angle)])
        return self.PIVOT + np.outer(self.LENGTH * self._FRACTIONS, u)

    def object_feature(self, s: EnvState) -> np.ndarray:
        return np.array([s.door_angle])

    def arc_step(self, angle: float, d: np.ndarray, max_travel: float | None = None) -> float:
        """New angle after projecting displacement ``d`` onto the handle arc.

        ``max_travel`` caps the tangential travel (the embodiment speed limit).
        """
        travel = float(d @ self.tangent(angle))
        if max_travel is not None:
            travel = float(np.clip(travel, -max_travel, max_travel))
        new = angle + travel / self.LENGTH
        return float(np.clip(new, 0.0, self.MAX_ANGLE))

    def _move_attached(self, s: EnvState, d: np.ndarray) -> None:
        s.door_angle = self.arc_step(s.door_angle, d, self.a_max)
        s.gripper = self.handle(s.door_angle)

    def is_success(self, s: EnvState) -> bool:
        return s.door_angle >= self.SUCCESS_ANGLE


class CornerFold(Task):
    """Square cloth folded corner-to-corner onto the fixed corner."""

    env_id = "corner_fold"
    FIXED = np.array([0.8, 0.2])
    START = np.array([0.4, 0.6])
    SUCCESS_DIST = 0.03

    def __init__(self, embodiment: str = "robot", horizon: int = HORIZON):
        super().__init__(embodiment, horizon)
        self._base, self._weights = self._cloth_half()

    @classmethod
    def _cloth_half(cls) -> tuple[np.ndarray, np.ndarray]:
        """Points on the moving half and their fraction toward the moving corner."""
        centre = (cls.START + cls.FIXED) / 2
        half = cls.START - centre
        d1, d2 = centre + np.array([-half[1], half[0]]), centre + np.array([half[1], -half[0]])
        pts, w = [], []
        levels, per_level = 4, N_OBJECT_POINTS // 4
        for i in range(levels):
            frac = (i + 0.5) / levels
            for j in range(per_level):
                edge = d1 + (j + 0.5) / per_level * (d2 - d1)
                pts.append(edge + frac * (cls.START - edge))
                w.append(frac)
        return np.array(pts), np.array(w)

    def reset(self, rng: np.random.Generator) -> EnvState:
        s = EnvState(np.zeros(2), horizon=self.horizon, corner=self.START.copy())
        dist = rng.uniform(0.05, 0.12)
        phi = rng.uniform(0, 2 * np.pi)
        s.gripper = np.clip(self.START + dist * np.array([np.cos(phi), np.sin(phi)]), 0, 1)
        return s

    def grasp_point(self, s: EnvState) -> np.ndarray:
        return s.corner

    def object_points(self, s: EnvState) -> np.ndarray:
        return self._base + np.outer(self._weights, s.corner - self.START)

    def object_feature(self, s: EnvState) -> np.ndarray:
        return s.corner.copy()

    def _move_attached(self, s: EnvState, d: np.ndarray) -> None:
        s.gripper = np.clip(s.gripper + d, 0.0, 1.0)
        s.corner = s.gripper.copy()

    def is_success(self, s: EnvState) -> bool:
        return (not s.grip_closed) and np.linalg.norm(s.corner - self.FIXED) <= self.SUCCESS_DIST


ENVS = {HingedDoor.env_id: HingedDoor, CornerFold.env_id: CornerFold}


def make_env(env_id: str, embodiment: str = "robot", horizon: int = HORIZON) -> Task:
    try:
        return ENVS[env_id](embodiment, horizon)
    except KeyError:
        raise ConfigError(f"unknown env '{env_id}'") from None
