"""Replay storage and symmetric offline/online batch sampling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Batch:
    obs: np.ndarray
    act: np.ndarray
    rew: np.ndarray
    next_obs: np.ndarray
    done: np.ndarray
    n_offline: int = 0
    n_online: int = 0

    def __len__(self) -> int:
        return len(self.rew)


class ReplayBuffer:
    """Append-only transition store (desk-scale runs never need eviction)."""

    def __init__(self, obs_dim: int, act_dim: int = 3, source: str = "online"):
        self.source = source
        self._obs = np.zeros((0, obs_dim))
        self._act = np.zeros((0, act_dim))
        self._rew = np.zeros(0)
        self._next = np.zeros((0, obs_dim))
        self._done = np.zeros(0)

    def __len__(self) -> int:
        return len(self._rew)

    @property
    def obs_dim(self) -> int:
        return self._obs.shape[1]

    def add(self, obs, act, rew, next_obs, done) -> None:
        self._obs = np.concatenate([self._obs, np.atleast_2d(obs)])
        self._act = np.concatenate([self._act, np.atleast_2d(act)])
        self._rew = np.concatenate([self._rew, np.atleast_1d(np.asarray(rew, float))])
        self._next = np.concatenate([self._next, np.atleast_2d(next_obs)])
        self._done = np.concatenate([self._done, np.atleast_1d(np.asarray(done, float))])

    def take(self, idx: np.ndarray) -> Batch:
        return Batch(self._obs[idx], self._act[idx], self._rew[idx], self._next[idx],
                     self._done[idx])

    def sample(self, n: int, rng: np.random.Generator) -> Batch:
        return self.take(rng.integers(0, len(self), size=n))

    @property
    def rewards(self) -> np.ndarray:
        return self._rew

    @property
    def actions(self) -> np.ndarray:
        return self._act


def concat_batches(a: Batch, b: Batch) -> Batch:
    return Batch(np.concatenate([a.obs, b.obs]), np.concatenate([a.act, b.act]),
                 np.concatenate([a.rew, b.rew]), np.concatenate([a.next_obs, b.next_obs]),
                 np.concatenate([a.done, b.done]))


def sample_batch(offline: ReplayBuffer, online: ReplayBuffer, batch: int,
                 rng: np.random.Generator, offline_ratio: float = 0.5) -> Batch | None:
    """Half offline, half online, uniform with replacement inside each buffer.

    Returns None when either buffer is empty, so the caller skips the update.
    """
    if len(offline) == 0 or len(online) == 0:
        return None
    n_off = int(round(batch * offline_ratio))
    out = concat_batches(offline.sample(n_off, rng), online.sample(batch - n_off, rng))
    out.n_offline, out.n_online = n_off, batch - n_off
    return out
