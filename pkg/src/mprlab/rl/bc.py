"""Behavior-cloned base policy."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from mprlab import numcore as nc
from mprlab.errors import ConfigError
from mprlab.mlp_estimator import MLPRegressor
from mprlab.rl.observation import observe, without_base_action
from mprlab.worldsim.corpus import EpisodeRecord
from mprlab.worldsim.envs import make_env


def bc_dataset(demos: Sequence[EpisodeRecord]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Observations (base slot zeroed), actions and episode groups."""
    X, Y, G = [], [], []
    for ep in demos:
        if ep.states is None or ep.actions is None:
            raise ConfigError(f"demo {ep.episode_id} lacks states/actions")
        env = make_env(ep.env_id)
        for s, a in zip(ep.states, ep.actions):
            X.append(observe(env, s))
            Y.append(a)
            G.append(ep.episode_id)
    if not X:
        raise ConfigError("behavior cloning needs at least one transition")
    return np.array(X), np.array(Y), np.array(G)


class BCPolicy(MLPRegressor):
    """Deterministic tanh-squashed regression policy; frozen after ``fit``."""

    def __init__(self, hidden=(256, 256, 256), activation="relu", output="tanh",
                 epochs=300, batch_size=64, lr=1e-3, weight_decay=0.0, val_ratio=0.0, seed=0):
        super().__init__(hidden, activation, output, epochs, batch_size, lr, weight_decay,
                         val_ratio, seed)

    def fit_demos(self, demos: Sequence[EpisodeRecord], n_demos: int | None = None) -> "BCPolicy":
        if n_demos is not None:
            if n_demos > len(demos):
                raise ConfigError(f"requested {n_demos} demos but only {len(demos)} available")
            demos = list(demos)[:n_demos]
        X, Y, G = bc_dataset(demos)
        return self.fit(X, Y, groups=G)

    def act(self, obs: np.ndarray) -> np.ndarray:
        """Base action for one observation or a batch; the base slot is ignored."""
        obs = np.asarray(obs, dtype=float)
        single = obs.ndim == 1
        out = self.predict(without_base_action(np.atleast_2d(obs)))
        return out[0] if single else out

    @property
    def frozen(self) -> bool:
        return all(not p.requires_grad for p in self.net_.parameters())

    def save(self, path):
        path = nc.save_checkpoint(path, self.state())
        params = {k: list(v) if isinstance(v, tuple) else v for k, v in self.get_params().items()}
        nc.write_sidecar(path, {"kind": "bc_policy", "params": params})
        return path

    @classmethod
    def load(cls, path) -> "BCPolicy":
        meta = nc.read_sidecar(path)
        params = {k: tuple(v) if k == "hidden" else v for k, v in meta["params"].items()}
        return cls(**params).load_state(nc.load_checkpoint(path), 3, False)
