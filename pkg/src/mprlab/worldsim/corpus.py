"""Episode records, demonstration corpora and scripted failures."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from mprlab.errors import ConfigError
from mprlab.tracks import (
    TrackSequence,
    detect_resample_events,
    read_jsonl,
    record_to_sequence,
    sequence_to_record,
    write_jsonl,
)
from mprlab.worldsim.envs import A_MAX, EnvState, Task, make_env
from mprlab.worldsim.expert import MissHandleExpert, StallExpert, expert_action, hold_action


@dataclass
class CorpusSpec:
    env_id: str = "hinged_door"
    n_episodes: int = 200
    hesitation_prob: float = 0.05
    pause_min: int = 5
    pause_max: int = 20
    camera_jitter_std: float = 0.004
    expert_noise_std: float = 0.1
    embodiment: str = "human"
    seed: int = 0
    horizon: int = 100

    def __post_init__(self):
        if not 0.0 <= self.hesitation_prob <= 1.0:
            raise ConfigError("hesitation_prob must lie in [0, 1]")
        if self.camera_jitter_std < 0 or self.expert_noise_std < 0:
            raise ConfigError("noise standard deviations must be >= 0")
        if not 0 <= self.pause_min <= self.pause_max:
            raise ConfigError("pause range must satisfy 0 <= min <= max")
        if self.n_episodes < 0:
            raise ConfigError("n_episodes must be >= 0")


@dataclass
class EpisodeRecord:
    episode_id: str
    env_id: str
    tracks: TrackSequence
    success: bool
    states: list[EnvState] | None = None
    actions: np.ndarray | None = None
    pauses: list[tuple[int, int]] = field(default_factory=list)

    @property
    def length(self) -> int:
        return self.tracks.horizon

    def to_record(self) -> dict:
        extra = {"env_id": self.env_id}
        if self.states is not None:
            extra["states"] = [s.to_json() for s in self.states]
        if self.actions is not None:
            extra["actions"] = [[float(f"{v:.9g}") for v in a] for a in self.actions]
        if self.pauses:
            extra["pauses"] = [list(p) for p in self.pauses]
        return sequence_to_record(self.episode_id, self.tracks, self.success, **extra)

    @classmethod
    def from_record(cls, rec: dict) -> "EpisodeRecord":
        states = [EnvState.from_json(d) for d in rec["states"]] if "states" in rec else None
        actions = np.asarray(rec["actions"], dtype=float).reshape(-1, 3) if "actions" in rec else None
        return cls(rec["episode_id"], rec.get("env_id", "hinged_door"), record_to_sequence(rec),
                   rec["success"], states, actions, [tuple(p) for p in rec.get("pauses", [])])


def rollout(env: Task, policy: Callable[[EnvState], np.ndarray], rng_reset: np.random.Generator,
            episode_id: str = "", jitter_rng: np.random.Generator | None = None,
            jitter_std: float = 0.0, source: str = "robot_rollout",
            keep_states: bool = True, initial_state: EnvState | None = None) -> EpisodeRecord:
    """Run one episode and render its tracks."""
    s = env.reset(rng_reset) if initial_state is None else initial_state.copy()

    def offset():
        if jitter_std > 0 and jitter_rng is not None:
            return jitter_rng.normal(0.0, jitter_std, size=2)
        return None

    states, actions, frames = [s], [], [env.render_tracks(s, offset())]
    done = False
    while not done:
        a = np.clip(np.asarray(policy(s), dtype=float), -1.0, 1.0)
        s, done, _ = env.step(s, a)
        states.append(s)
        actions.append(a)
        frames.append(env.render_tracks(s, offset()))
    tracks = TrackSequence(frames, detect_resample_events(frames), source)
    return EpisodeRecord(episode_id, env.env_id, tracks, s.success,
                         states if keep_states else None,
                         np.array(actions).reshape(-1, 3) if keep_states else None)


def episode_streams(seed: int, index: int) -> dict[str, np.random.Generator]:
    """Independent generators per concern so pausing never shifts other noise."""
    children = np.random.SeedSequence([seed, index]).spawn(4)
    return {name: np.random.default_rng(c)
            for name, c in zip(("reset", "expert", "pause", "jitter"), children)}


def generate_episode(spec: CorpusSpec, index: int) -> EpisodeRecord:
    """One expert episode with hesitation pauses and camera jitter."""
    env = make_env(spec.env_id, spec.embodiment, spec.horizon)
    streams = episode_streams(spec.seed, index)
    pause_left = 0
    pauses: list[tuple[int, int]] = []

    def policy(s: EnvState) -> np.ndarray:
        nonlocal pause_left
        if pause_left == 0 and spec.hesitation_prob > 0 \
                and streams["pause"].random() < spec.hesitation_prob:
            pause_left = int(streams["pause"].integers(spec.pause_min, spec.pause_max + 1))
            if pause_left:
                pauses.append((s.t, pause_left))
        if pause_left > 0:
            pause_left -= 1
            return hold_action(s)
        return expert_action(env, s, streams["expert"], spec.expert_noise_std)

    human = spec.embodiment == "human"
    rec = rollout(env, policy, streams["reset"], f"{spec.env_id}-{spec.seed}-{index:05d}",
                  streams["jitter"], spec.camera_jitter_std if human else 0.0,
                  "human_corpus" if human else "robot_rollout", keep_states=not human)
    rec.pauses = pauses
    return rec


def generate_corpus(spec: CorpusSpec, max_failure_rate: float = 0.9) -> tuple[list[EpisodeRecord], dict]:
    """``n_episodes`` records; human corpora keep successes only.

    Returns the records and a stats dict (``n_generated``, ``n_success``).
    """
    records, generated, successes = [], 0, 0
    keep_failures = spec.embodiment != "human"
    while len(records) < spec.n_episodes:
        rec = generate_episode(spec, generated)
        generated += 1
        successes += rec.success
        if rec.success or keep_failures:
            records.append(rec)
        if generated >= 20 and 1.0 - successes / generated > max_failure_rate:
            raise ConfigError(
                f"expert failed {generated - successes}/{generated} episodes; task unreachable")
    return records, {"n_generated": generated, "n_success": successes}


def scripted_failure(env_id: str, mode: str, rng: np.random.Generator,
                     episode_id: str = "", horizon: int = 100) -> EpisodeRecord:
    """Robot episode that goes through the motions without succeeding."""
    env = make_env(env_id, "robot", horizon)
    if mode == "miss_handle":
        policy = MissHandleExpert(env)
    elif mode == "stall":
        policy = StallExpert(env)
    else:
        raise ConfigError(f"unknown failure mode '{mode}'")
    return rollout(env, policy, rng, episode_id or f"{env_id}-{mode}")


def scripted_success(env_id: str, rng: np.random.Generator, episode_id: str = "",
                     noise_std: float = 0.0, horizon: int = 100) -> EpisodeRecord:
    env = make_env(env_id, "robot", horizon)
    return rollout(env, lambda s: expert_action(env, s, rng, noise_std), rng,
                   episode_id or f"{env_id}-success")


def save_corpus(path, records: Sequence[EpisodeRecord], spec: CorpusSpec | None = None,
                stats: dict | None = None) -> Path:
    """JSON-lines corpus plus a ``.manifest.json`` sidecar."""
    path = write_jsonl(path, (r.to_record() for r in records))
    if spec is not None:
        manifest = {"spec": asdict(spec), "seed": spec.seed,
                    "n_success": int(sum(r.success for r in records)),
                    "n_generated": (stats or {}).get("n_generated", len(records))}
        Path(str(path) + ".manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_corpus(path) -> list[EpisodeRecord]:
    return [EpisodeRecord.from_record(r) for r in read_jsonl(path)]


__all__ = [
    "A_MAX", "CorpusSpec", "EpisodeRecord", "episode_streams", "generate_corpus",
    "generate_episode", "load_corpus", "rollout", "save_corpus", "scripted_failure",
    "scripted_success",
]
