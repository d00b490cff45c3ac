"""Behavior-cloned base policy and residual soft actor-critic."""
from mprlab.rl.bc import BCPolicy, bc_dataset
from mprlab.rl.buffer import Batch, ReplayBuffer, sample_batch
from mprlab.rl.loop import (
    OnlineResult, act, combine, evaluate, pretrain_critic, relabel_offline, residual_target,
    run_episode, train_online, write_metrics,
)
from mprlab.rl.observation import obs_dim, observe
from mprlab.rl.sac import SACAgent, SACConfig, critic_target

__all__ = [
    "BCPolicy", "Batch", "OnlineResult", "ReplayBuffer", "SACAgent", "SACConfig", "act",
    "bc_dataset", "combine", "critic_target", "evaluate", "obs_dim", "observe",
    "pretrain_critic", "relabel_offline", "residual_target", "run_episode", "sample_batch",
    "train_online", "write_metrics",
]
