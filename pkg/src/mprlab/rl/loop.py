"""Residual RL loop: offline relabeling, acting, critic pretraining, online training."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from mprlab.errors import ConfigError
from mprlab.reward import RewardProvider, label_episode
from mprlab.rl.bc import BCPolicy
from mprlab.rl.buffer import ReplayBuffer, sample_batch
from mprlab.rl.observation import observe, with_base_action
from mprlab.rl.sac import SACAgent
from mprlab.worldsim.corpus import EpisodeRecord, rollout
from mprlab.worldsim.envs import Task

METRIC_FIELDS = ["episode", "env_steps", "eval_success_rate", "running20_success",
                 "actor_loss", "critic_loss", "alpha_ent", "mean_reward"]


def residual_target(a_demo: np.ndarray, a_base: np.ndarray, alpha: float) -> np.ndarray:
    """clip((a_demo - base(s)) / alpha, -1, 1)."""
    return np.clip((np.asarray(a_demo) - np.asarray(a_base)) / alpha, -1.0, 1.0)


def combine(a_base: np.ndarray, residual: np.ndarray, alpha: float) -> np.ndarray:
    """Executed action: clip(base + alpha * residual, -1, 1)."""
    return np.clip(np.asarray(a_base) + alpha * np.asarray(residual), -1.0, 1.0)


def episode_observations(env: Task, states, base: BCPolicy) -> np.ndarray:
    """Observations for every state with the base action slot filled."""
    raw = np.array([observe(env, s) for s in states])
    return with_base_action(raw, base.act(raw))


def transitions_from_episode(env: Task, episode: EpisodeRecord, base: BCPolicy, alpha: float,
                             rewards: np.ndarray, residuals: np.ndarray | None = None):
    """(obs, residual, reward, next_obs, done) arrays for one labeled episode.

    ``residuals`` defaults to the relabeled demo residuals.
    """
    obs = episode_observations(env, episode.states, base)
    base_actions = obs[:-1, -3:]
    if residuals is None:
        residuals = residual_target(episode.actions, base_actions, alpha)
    done = np.array([float(s.success) for s in episode.states[1:]])
    return obs[:-1], residuals, np.asarray(rewards, float), obs[1:], done


def relabel_offline(demos: Sequence[EpisodeRecord], env: Task, base: BCPolicy, alpha: float,
                    provider: RewardProvider) -> ReplayBuffer:
    buf = None
    for ep in demos:
        labels = label_episode(provider, ep)
        o, a, r, o2, d = transitions_from_episode(env, ep, base, alpha, labels.rewards)
        if buf is None:
            buf = ReplayBuffer(o.shape[1], source="offline")
        buf.add(o, a, r, o2, d)
    if buf is None:
        raise ConfigError("no demonstrations to relabel")
    return buf


def act(agent: SACAgent, base: BCPolicy, obs_raw: np.ndarray, mode: str) -> tuple:
    """Combined action; returns (env action, residual, full observation)."""
    if mode not in ("train", "eval"):
        raise ConfigError(f"unknown act mode '{mode}'")
    a_base = base.act(obs_raw)
    obs = with_base_action(obs_raw, a_base)
    residual = agent.residual(obs, deterministic=mode == "eval")
    return combine(a_base, residual, agent.cfg.residual_scale), residual, obs


def run_episode(env: Task, policy: Callable[[np.ndarray], tuple], rng: np.random.Generator,
                episode_id: str = "") -> tuple[EpisodeRecord, np.ndarray]:
    """Roll out ``policy(obs_raw) -> (action, residual, obs)``; returns record + residuals."""
    residuals = []

    def on_state(s):
        a, res, _ = policy(observe(env, s))
        residuals.append(res)
        return a

    rec = rollout(env, on_state, rng, episode_id)
    return rec, np.array(residuals).reshape(-1, 3)


def evaluate(env: Task, policy_fn: Callable[[np.ndarray], np.ndarray], n_episodes: int = 20,
             seed: int = 0) -> float:
    """Success rate over fixed reset seeds (identical for every policy evaluated)."""
    wins = 0
    for i in range(n_episodes):
        s = env.reset(np.random.default_rng([seed, i]))
        done = False
        while not done:
            s, done, _ = env.step(s, policy_fn(observe(env, s)))
        wins += s.success
    return wins / n_episodes if n_episodes else 0.0


def pretrain_critic(agent: SACAgent, offline: ReplayBuffer, steps: int = 10000,
                    rng: np.random.Generator | None = None) -> list[float]:
    """Critic-only updates on offline batches; actor and temperature untouched."""
    rng = rng or np.random.default_rng(0)
    losses = []
    for _ in range(steps):
        losses.append(agent.update_critics(offline.sample(agent.cfg.batch_size, rng)))
        agent.soft_update()
    return losses


@dataclass
class OnlineResult:
    rows: list[dict] = field(default_factory=list)
    base_success: float = 0.0
    final_success: float = 0.0
    best_success: float = 0.0
    updates_per_episode: list[int] = field(default_factory=list)
    batch_counts: list[tuple[int, int]] = field(default_factory=list)
    skipped_updates: int = 0


def train_online(env: Task, agent: SACAgent, base: BCPolicy, provider: RewardProvider,
                 offline: ReplayBuffer, n_episodes: int, rng: np.random.Generator,
                 eval_interval: int = 10, eval_episodes: int = 20, eval_seed: int = 10_000,
                 on_eval: Callable[[int, float], None] | None = None,
                 record_batches: bool = False) -> OnlineResult:
    """Collect one episode, label it, then run len(episode) * utd updates."""
    cfg = agent.cfg
    online = ReplayBuffer(offline.obs_dim)
    result = OnlineResult()

    def eval_policy(obs_raw):
        return act(agent, base, obs_raw, "eval")[0]

    result.base_success = evaluate(env, base.act, eval_episodes, eval_seed)
    result.rows.append(_row(0, 0, result.base_success, None, {}, None))
    result.final_success = result.best_success = result.base_success
    successes: list[bool] = []
    env_steps = 0
    for ep in range(1, n_episodes + 1):
        rec, residuals = run_episode(env, lambda o: act(agent, base, o, "train"), rng,
                                     f"online-{ep:04d}")
        labels = label_episode(provider, rec)
        o, a, r, o2, d = transitions_from_episode(env, rec, base, cfg.residual_scale,
                                                  labels.rewards, residuals)
        online.add(o, a, r, o2, d)
        env_steps += rec.length
        successes.append(rec.success)
        losses: dict = {}
        n_up = 0
        if len(online) >= cfg.learning_starts:
            for _ in range(rec.length * cfg.utd):
                batch = sample_batch(offline, online, cfg.batch_size, rng, cfg.offline_ratio)
                if batch is None:
                    result.skipped_updates += 1
                    continue
                if record_batches:
                    result.batch_counts.append((batch.n_offline, batch.n_online))
                losses = agent.update(batch)
                n_up += 1
        result.updates_per_episode.append(n_up)
        eval_rate = None
        if eval_interval and ep % eval_interval == 0 or ep == n_episodes:
            eval_rate = evaluate(env, eval_policy, eval_episodes, eval_seed)
            result.final_success = eval_rate
            result.best_success = max(result.best_success, eval_rate)
            if on_eval:
                on_eval(ep, eval_rate)
        running = float(np.mean(successes[-20:]))
        result.rows.append(_row(ep, env_steps, eval_rate, running, losses, float(r.mean())))
    return result


def _row(ep, steps, eval_rate, running, losses, mean_reward) -> dict:
    def f(v):
        return "" if v is None else f"{v:.9g}"
    return {"episode": ep, "env_steps": steps, "eval_success_rate": f(eval_rate),
            "running20_success": f(running), "actor_loss": f(losses.get("actor_loss")),
            "critic_loss": f(losses.get("critic_loss")), "alpha_ent": f(losses.get("alpha_ent")),
            "mean_reward": f(mean_reward)}


def write_metrics(path, rows: Sequence[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        w.writeheader()
        w.writerows(rows)
    return path
