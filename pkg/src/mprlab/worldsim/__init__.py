"""Kinematic tasks, scripted experts and demonstration corpora."""
from mprlab.worldsim.corpus import (
    CorpusSpec,
    EpisodeRecord,
    episode_streams,
    generate_corpus,
    generate_episode,
    load_corpus,
    rollout,
    save_corpus,
    scripted_failure,
    scripted_success,
)
from mprlab.worldsim.envs import (
    A_MAX,
    ENVS,
    HORIZON,
    N_POINTS,
    CornerFold,
    EnvState,
    HingedDoor,
    Task,
    make_env,
)
from mprlab.worldsim.expert import expert_action, hold_action

__all__ = [
    "A_MAX", "ENVS", "HORIZON", "N_POINTS", "CornerFold", "CorpusSpec", "EnvState",
    "EpisodeRecord", "HingedDoor", "Task", "episode_streams", "expert_action",
    "generate_corpus", "generate_episode", "hold_action", "load_corpus", "make_env",
    "rollout", "save_corpus", "scripted_failure", "scripted_success",
]
