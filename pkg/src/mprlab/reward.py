"""Per-transition rewards: MPR and the three comparison providers."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from mprlab import numcore as nc
from mprlab.errors import ConfigError
from mprlab.mlp_estimator import MLPRegressor
from mprlab.predictor import MotionPredictor, inference_items
from mprlab.tracks import AGENT, OBJECT, TrackFrame
from mprlab.worldsim.corpus import EpisodeRecord
from mprlab.worldsim.envs import HORIZON, CornerFold, HingedDoor, make_env

EPS_MOTION = 1e-4
STEP_COST = 0.01
PROVIDER_KINDS = ("mpr", "temporal_distance", "sparse", "privileged_dense")


# --- reward --------------------------------------------------------------------------

@dataclass
class MPRResult:
    reward: float
    raw: float
    degenerate: bool
    n_contributing: int


def mpr_reward(predicted: np.ndarray, tracked: np.ndarray, labels: np.ndarray | None = None,
               use_masks: bool = True, pad_mask: np.ndarray | None = None,
               eps_motion: float = EPS_MOTION) -> MPRResult:
    """Mean clamped cosine between predicted and tracked deltas, minus one.

    Contributing slots are non-pad slots, restricted to object slots when
    ``use_masks``.  A slot whose either delta is shorter than ``eps_motion``
    contributes 0.  The transition is degenerate when no slot contributes or
    no slot clears the motion threshold; its reward is then -1.
    """
    raw, degenerate, n = mpr_raw_batch(np.asarray(predicted, float)[None],
                                       np.asarray(tracked, float)[None],
                                       _contributing(labels, use_masks, pad_mask, len(predicted))[None],
                                       eps_motion)
    return MPRResult(float(raw[0] - 1.0), float(raw[0]), bool(degenerate[0]), int(n[0]))


def _contributing(labels, use_masks: bool, pad_mask, n: int) -> np.ndarray:
    mask = np.ones(n, dtype=bool)
    if pad_mask is not None:
        mask &= ~np.asarray(pad_mask, dtype=bool)
    if use_masks:
        if labels is None:
            raise ConfigError("use_masks=True needs per-slot labels")
        mask &= np.asarray(labels) == OBJECT
    return mask


def mpr_raw_batch(predicted: np.ndarray, tracked: np.ndarray, contributing: np.ndarray,
                  eps_motion: float = EPS_MOTION) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized raw (pre-shift) scores for stacked transitions.

    Shapes: deltas (N, S, 2), ``contributing`` (N, S).  Returns raw scores,
    degenerate flags and contributing counts, each of length N.
    """
    npred = np.linalg.norm(predicted, axis=-1)
    ntrack = np.linalg.norm(tracked, axis=-1)
    moving = contributing & (npred >= eps_motion) & (ntrack >= eps_motion)
    denom = np.where(moving, npred * ntrack, 1.0)
    cos = np.where(moving, (predicted * tracked).sum(-1) / denom, 0.0)
    cos = np.clip(cos, 0.0, 1.0)
    n = contributing.sum(axis=1)
    raw = np.where(n > 0, cos.sum(axis=1) / np.maximum(n, 1), 0.0)
    degenerate = (n == 0) | ~moving.any(axis=1)
    return np.where(degenerate, 0.0, raw), degenerate, n


# --- labels and providers ----------------------------------------------------------

@dataclass
class RewardLabels:
    kind: str
    rewards: np.ndarray
    degenerate: np.ndarray = field(default=None)
    raw: np.ndarray | None = None

    def __post_init__(self):
        self.rewards = np.asarray(self.rewards, dtype=float)
        if self.degenerate is None:
            self.degenerate = np.zeros(len(self.rewards), dtype=bool)

    def __len__(self) -> int:
        return len(self.rewards)


class RewardProvider:
    kind = ""
    env_id: str | None = None

    def label(self, episode: EpisodeRecord) -> RewardLabels:
        raise NotImplementedError


class MPRProvider(RewardProvider):
    """Scores observed object motion against the predictor's expectation."""

    kind = "mpr"

    def __init__(self, predictor: MotionPredictor, env_id: str | None = None,
                 use_masks: bool = True, eps_motion: float = EPS_MOTION,
                 horizon: int = HORIZON, seed: int = 0):
        self.predictor = predictor
        self.env_id = env_id
        self.use_masks = use_masks
        self.eps_motion = eps_motion
        self.horizon = horizon
        self.seed = seed

    def label(self, episode: EpisodeRecord) -> RewardLabels:
        seq = episode.tracks
        T = seq.horizon
        rewards = -np.ones(T)
        raw = np.zeros(T)
        degenerate = np.ones(T, dtype=bool)
        items = inference_items(seq, self.horizon, self.use_masks, self.seed, episode.episode_id)
        usable = [(t, it) for t, it in enumerate(items) if it is not None]
        if not usable:
            return RewardLabels(self.kind, rewards, degenerate, raw)
        preds = self.predictor.predict_raw([it for _, it in usable])
        width = max(it.n_raw for _, it in usable)
        P = np.zeros((len(usable), width, 2))
        D = np.zeros_like(P)
        C = np.zeros((len(usable), width), dtype=bool)
        for k, ((t, it), p) in enumerate(zip(usable, preds)):
            n = it.n_raw
            P[k, :n] = p - it.raw_current
            D[k, :n] = it.raw_target - it.raw_current
            C[k, :n] = (it.raw_labels == OBJECT) if self.use_masks else True
        r, deg, _ = mpr_raw_batch(P, D, C, self.eps_motion)
        idx = np.array([t for t, _ in usable])
        raw[idx], degenerate[idx] = r, deg
        rewards[idx] = r - 1.0
        return RewardLabels(self.kind, rewards, degenerate, raw)


class SparseProvider(RewardProvider):
    kind = "sparse"

    def __init__(self, env_id: str | None = None):
        self.env_id = env_id

    def label(self, episode: EpisodeRecord) -> RewardLabels:
        states = _states(episode)
        r = np.array([float(b.success and not a.success) for a, b in zip(states, states[1:])])
        return RewardLabels(self.kind, r)


class PrivilegedDenseProvider(RewardProvider):
    """Progress toward the goal from simulator state, a step cost and a success bonus."""

    kind = "privileged_dense"

    def __init__(self, env_id: str | None = None, step_cost: float = STEP_COST):
        self.env_id = env_id
        self.step_cost = step_cost

    def reward(self, env_id: str, s, s_next) -> float:
        if env_id == HingedDoor.env_id:
            goal = HingedDoor.SUCCESS_ANGLE
            progress = (min(s_next.door_angle, goal) - min(s.door_angle, goal)) / goal
        elif env_id == CornerFold.env_id:
            span = float(np.linalg.norm(CornerFold.START - CornerFold.FIXED))
            progress = (np.linalg.norm(s.corner - CornerFold.FIXED)
                        - np.linalg.norm(s_next.corner - CornerFold.FIXED)) / span
        else:
            raise ConfigError(f"no dense reward for env '{env_id}'")
        bonus = 1.0 if (s_next.success and not s.success) else 0.0
        return float(progress) - self.step_cost + bonus

    def label(self, episode: EpisodeRecord) -> RewardLabels:
        states = _states(episode)
        return RewardLabels(self.kind, [self.reward(episode.env_id, a, b)
                                        for a, b in zip(states, states[1:])])


def _states(episode: EpisodeRecord):
    if episode.states is None:
        raise ConfigError(f"episode {episode.episode_id} has no simulator states")
    return episode.states


# --- temporal-distance baseline ---------------------------------------------------------

def value_features(frame: TrackFrame) -> np.ndarray:
    """Flattened object-point coordinates plus the mean agent position."""
    obj = frame.points[frame.labels == OBJECT].reshape(-1)
    agent = frame.points[frame.labels == AGENT]
    return np.concatenate([obj, agent.mean(axis=0) if len(agent) else np.zeros(2)])


def value_targets(n_frames: int) -> np.ndarray:
    """Normalized frames-to-go: -(T - t)/T for t = 0..T."""
    T = n_frames - 1
    if T <= 0:
        return np.zeros(n_frames)
    return -(T - np.arange(n_frames)) / T


def value_dataset(episodes: Sequence[EpisodeRecord]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Features, targets and episode groups for every frame of successful episodes."""
    X, y, g = [], [], []
    for ep in episodes:
        if not ep.success:
            continue
        frames = ep.tracks.frames
        X.extend(value_features(f) for f in frames)
        y.extend(value_targets(len(frames)))
        g.extend([ep.episode_id] * len(frames))
    if not X:
        raise ConfigError("temporal value training needs at least one successful episode")
    return np.array(X), np.array(y), np.array(g)


class TemporalValueRegressor(MLPRegressor):
    """V(o) trained to predict normalized frames-to-go along successful demos."""

    def __init__(self, hidden=(256, 256, 256), activation="relu", output="linear",
                 epochs=60, batch_size=256, lr=1e-3, weight_decay=0.0, val_ratio=0.1, seed=0):
        super().__init__(hidden, activation, output, epochs, batch_size, lr, weight_decay,
                         val_ratio, seed)

    def fit_episodes(self, episodes: Sequence[EpisodeRecord]) -> "TemporalValueRegressor":
        X, y, g = value_dataset(episodes)
        return self.fit(X, y, groups=g)

    def values(self, frames: Sequence[TrackFrame]) -> np.ndarray:
        return self.predict(np.array([value_features(f) for f in frames]))

    def save(self, path) -> Path:
        path = nc.save_checkpoint(path, self.state())
        nc.write_sidecar(path, {"kind": "temporal_value", "params": _jsonable(self.get_params())})
        return path

    @classmethod
    def load(cls, path) -> "TemporalValueRegressor":
        meta = nc.read_sidecar(path)
        model = cls(**{k: tuple(v) if k == "hidden" else v for k, v in meta["params"].items()})
        return model.load_state(nc.load_checkpoint(path), 1, True)


def _jsonable(params: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in params.items()}


def temporal_reward(net: TemporalValueRegressor, o_t: TrackFrame, o_next: TrackFrame) -> float:
    v = net.values([o_t, o_next])
    return float(v[1] - v[0])


class TemporalDistanceProvider(RewardProvider):
    """Potential difference V(o_{t+1}) - V(o_t) of the frames-to-go regressor."""

    kind = "temporal_distance"

    def __init__(self, net: TemporalValueRegressor, env_id: str | None = None):
        self.net = net
        self.env_id = env_id

    def label(self, episode: EpisodeRecord) -> RewardLabels:
        if episode.tracks.horizon == 0:
            return RewardLabels(self.kind, np.zeros(0))
        v = self.net.values(episode.tracks.frames)
        return RewardLabels(self.kind, np.diff(v))


def make_provider(kind: str, env_id: str, predictor: MotionPredictor | None = None,
                  value_net: TemporalValueRegressor | None = None, use_masks: bool = True,
                  horizon: int = HORIZON) -> RewardProvider:
    make_env(env_id)  # validates the id
    if kind == "mpr":
        if predictor is None:
            raise ConfigError("mpr provider needs a trained predictor")
        return MPRProvider(predictor, env_id, use_masks=use_masks, horizon=horizon)
    if kind == "temporal_distance":
        if value_net is None:
            raise ConfigError("temporal_distance provider needs a trained value net")
        return TemporalDistanceProvider(value_net, env_id)
    if kind == "sparse":
        return SparseProvider(env_id)
    if kind == "privileged_dense":
        return PrivilegedDenseProvider(env_id)
    raise ConfigError(f"unknown reward provider '{kind}'")


def label_episode(provider: RewardProvider, episode: EpisodeRecord) -> RewardLabels:
    """Rewards aligned to transitions (s_t, a_t) -> s_{t+1}; length T."""
    if provider.env_id is not None and provider.env_id != episode.env_id:
        raise ConfigError(f"provider built for '{provider.env_id}' cannot label "
                          f"'{episode.env_id}' episode {episode.episode_id}")
    if episode.tracks.horizon == 0:
        return RewardLabels(provider.kind, np.zeros(0))
    labels = provider.label(episode)
    if len(labels) != episode.tracks.horizon:
        raise ConfigError("provider returned a reward count different from T")
    return labels


def write_reward_csv(path, labels: RewardLabels) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "reward", "degenerate_flag", "provider_kind"])
        for t, (r, d) in enumerate(zip(labels.rewards, labels.degenerate)):
            w.writerow([t, f"{r:.9g}", int(d), labels.kind])
    return path
