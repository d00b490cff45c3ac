"""RL observation vectors built from simulator state."""
from __future__ import annotations

import numpy as np

from mprlab.worldsim.envs import EnvState, Task

ACTION_DIM = 3


def obs_dim(env: Task) -> int:
    s = env.reset(np.random.default_rng(0))
    return len(observe(env, s))


def observe(env: Task, s: EnvState, base_action: np.ndarray | None = None) -> np.ndarray:
    """[gripper(2), grip_closed, object feature, object points (64), base action (3)]."""
    base = np.zeros(ACTION_DIM) if base_action is None else np.asarray(base_action, float)
    return np.concatenate([
        s.gripper, [float(s.grip_closed)], env.object_feature(s),
        env.object_points(s).reshape(-1), base,
    ])


def with_base_action(obs: np.ndarray, base_action: np.ndarray) -> np.ndarray:
    out = np.array(obs, dtype=float, copy=True)
    out[..., -ACTION_DIM:] = base_action
    return out


def without_base_action(obs: np.ndarray) -> np.ndarray:
    return with_base_action(obs, 0.0)
