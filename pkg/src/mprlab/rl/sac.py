"""Residual soft actor-critic with twin LayerNorm critics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mprlab import numcore as nc
from mprlab.errors import NumericError
from mprlab.numcore import MLP, EnsembleMLP, Linear, Module, Tape, Tensor
from mprlab.rl.buffer import Batch

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)
TANH_EPS = 1e-6


@dataclass
class SACConfig:
    hidden: tuple = (256, 256, 256)
    gamma: float = 0.99
    polyak: float = 0.005
    lr: float = 1e-4
    batch_size: int = 64
    learning_starts: int = 1024
    utd: int = 4
    residual_scale: float = 0.2
    target_entropy: float = -3.0
    init_alpha: float = 0.1
    offline_ratio: float = 0.5


class Actor(Module):
    """Squashed Gaussian: separate mean and log-std heads on a shared trunk."""

    def __init__(self, obs_dim: int, act_dim: int, hidden, rng: np.random.Generator):
        self.trunk = MLP([obs_dim, *hidden], rng, init="orthogonal", gain=np.sqrt(2.0))
        self.mu = Linear(hidden[-1], act_dim, rng, init="orthogonal", gain=0.01)
        self.log_std = Linear(hidden[-1], act_dim, rng, init="orthogonal", gain=0.01)

    def heads(self, obs: Tensor) -> tuple[Tensor, Tensor]:
        # the trunk is an MLP whose last layer is hidden, so apply its activation too
        h = nc.relu(self.trunk(obs))
        mu = self.mu(h)
        # tanh-bounded log std mapped onto [LOG_STD_MIN, LOG_STD_MAX]
        squashed = nc.tanh(self.log_std(h))
        half = 0.5 * (LOG_STD_MAX - LOG_STD_MIN)
        log_std = nc.add(nc.mul(squashed, half), LOG_STD_MIN + half)
        return mu, log_std

    def sample(self, obs: Tensor, eps: np.ndarray) -> tuple[Tensor, Tensor]:
        """Reparameterized action in [-1, 1] and its log-probability (B,)."""
        mu, log_std = self.heads(obs)
        u = nc.add(mu, nc.mul(nc.exp(log_std), Tensor(eps)))
        a = nc.tanh(u)
        gauss = nc.add(nc.mul(log_std, -1.0), Tensor(-0.5 * eps * eps - HALF_LOG_2PI))
        squash = nc.log(nc.add(nc.mul(nc.mul(a, a), -1.0), 1.0 + TANH_EPS))
        logp = nc.sum(nc.add(gauss, nc.mul(squash, -1.0)), axis=-1)
        return a, logp

    def mean_action(self, obs: np.ndarray) -> np.ndarray:
        mu, _ = self.heads(Tensor(obs))
        return np.tanh(mu.data)


class TwinCritic(Module):
    """Two LayerNorm Q networks stored as one stacked ensemble; outputs (2, B, 1)."""

    def __init__(self, obs_dim: int, act_dim: int, hidden, rng: np.random.Generator):
        self.net = EnsembleMLP(2, [obs_dim + act_dim, *hidden, 1], rng, layernorm=True)

    def __call__(self, obs: Tensor, act: Tensor) -> Tensor:
        return self.net(nc.concat([obs, act], axis=-1))


def _q(critic: TwinCritic, obs: np.ndarray, act: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    q = critic(Tensor(obs), Tensor(act)).data[:, :, 0]
    return q[0], q[1]


def critic_target(rew: np.ndarray, done: np.ndarray, q1_next: np.ndarray, q2_next: np.ndarray,
                  logp_next: np.ndarray, gamma: float, alpha: float) -> np.ndarray:
    """r + gamma * (1 - done) * (min(Q1', Q2') - alpha * log pi)."""
    return rew + gamma * (1.0 - done) * (np.minimum(q1_next, q2_next) - alpha * logp_next)


class SACAgent:
    """Actor, twin critics, target critics and an auto-tuned temperature."""

    def __init__(self, obs_dim: int, act_dim: int = 3, config: SACConfig | None = None,
                 seed: int = 0):
        self.cfg = config or SACConfig()
        self.obs_dim, self.act_dim = obs_dim, act_dim
        init_rng = np.random.default_rng([seed, 1])
        self.rng = np.random.default_rng([seed, 2])
        h = tuple(self.cfg.hidden)
        self.actor = Actor(obs_dim, act_dim, h, init_rng)
        self.critic = TwinCritic(obs_dim, act_dim, h, init_rng)
        self.target = TwinCritic(obs_dim, act_dim, h, init_rng)
        self.target.load_state_dict(self.critic.state_dict())
        self.target.set_trainable(False)
        self._critic_params = self.critic.parameters()
        self._target_params = self.target.parameters()
        self._actor_params = self.actor.parameters()
        self.log_alpha = Tensor(np.array(np.log(self.cfg.init_alpha)), requires_grad=True)
        lr = self.cfg.lr
        self.actor_opt = nc.AdamW(self._actor_params, lr=lr)
        self.critic_opt = nc.AdamW(self._critic_params, lr=lr)
        self.alpha_opt = nc.AdamW([self.log_alpha], lr=lr)
        self.n_updates = 0
        self.n_critic_updates = 0
        self.n_actor_updates = 0

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha.data))

    # -- acting ---------------------------------------------------------
    def residual(self, obs: np.ndarray, deterministic: bool) -> np.ndarray:
        obs2 = np.atleast_2d(obs)
        if deterministic:
            a = self.actor.mean_action(obs2)
        else:
            a, _ = self.actor.sample(Tensor(obs2), self.rng.standard_normal((len(obs2), self.act_dim)))
            a = a.data
        return a[0] if np.ndim(obs) == 1 else a

    # -- learning -------------------------------------------------------
    def compute_target(self, batch: Batch) -> np.ndarray:
        eps = self.rng.standard_normal((len(batch), self.act_dim))
        a_next, logp_next = self.actor.sample(Tensor(batch.next_obs), eps)
        q1, q2 = _q(self.target, batch.next_obs, a_next.data)
        return critic_target(batch.rew, batch.done, q1, q2, logp_next.data,
                             self.cfg.gamma, self.alpha)

    def critic_loss(self, obs: np.ndarray, act: np.ndarray, y: np.ndarray) -> Tensor:
        """Sum of both critics' MSE to the fixed target ``y`` (B,)."""
        y2 = np.ascontiguousarray(np.broadcast_to(y[None, :, None], (2, len(y), 1)))
        q = self.critic(Tensor(obs), Tensor(act))
        # mean over both members times two equals the sum of the two MSEs
        return nc.mul(nc.mse(q, Tensor(y2)), 2.0)

    def actor_loss(self, obs: np.ndarray, eps: np.ndarray, alpha: float) -> tuple[Tensor, Tensor]:
        """mean(alpha * log pi - min(Q1, Q2)) with reparameterization noise ``eps``."""
        a, logp = self.actor.sample(Tensor(obs), eps)
        q = self.critic(Tensor(obs), a)  # (2, B, 1)
        first = (q.data[0] <= q.data[1]).astype(float)
        pick = np.stack([first, 1.0 - first])
        q_min = nc.sum(nc.sum(nc.mul(q, pick), axis=0), axis=-1)  # (B,)
        return nc.mean(nc.add(nc.mul(logp, alpha), nc.mul(q_min, -1.0))), logp

    def update_critics(self, batch: Batch) -> float:
        y = self.compute_target(batch)
        for p in self._critic_params:
            p.grad = None
        with Tape() as tape:
            loss = self.critic_loss(batch.obs, batch.act, y)
        _check(loss, "critic")
        tape.backward(loss)
        self.critic_opt.step()
        self.n_critic_updates += 1
        return loss.item()

    def update_actor_and_alpha(self, batch: Batch) -> tuple[float, float]:
        eps = self.rng.standard_normal((len(batch), self.act_dim))
        self.critic.set_trainable(False)
        for p in self._actor_params:
            p.grad = None
        try:
            with Tape() as tape:
                loss, logp = self.actor_loss(batch.obs, eps, self.alpha)
            _check(loss, "actor")
            tape.backward(loss)
        finally:
            self.critic.set_trainable(True)
        self.actor_opt.step()
        # temperature: minimize -log_alpha * (log pi + target entropy)
        gap = float((logp.data + self.cfg.target_entropy).mean())
        self.log_alpha.grad = np.array(-gap)
        self.alpha_opt.step()
        self.n_actor_updates += 1
        return loss.item(), self.alpha

    def soft_update(self) -> None:
        tau = self.cfg.polyak
        for pt, ps in zip(self._target_params, self._critic_params):
            pt.data *= 1.0 - tau
            pt.data += tau * ps.data

    def update(self, batch: Batch) -> dict:
        critic_loss = self.update_critics(batch)
        actor_loss, alpha = self.update_actor_and_alpha(batch)
        self.soft_update()
        self.n_updates += 1
        return {"critic_loss": critic_loss, "actor_loss": actor_loss, "alpha_ent": alpha}

    def q_values(self, obs: np.ndarray, act: np.ndarray) -> np.ndarray:
        return np.minimum(*_q(self.critic, obs, act))

    # -- persistence ----------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        st = {f"actor.{k}": v for k, v in self.actor.state_dict().items()}
        st.update({f"critic.{k}": v for k, v in self.critic.state_dict().items()})
        st.update({f"target.{k}": v for k, v in self.target.state_dict().items()})
        st["log_alpha"] = self.log_alpha.data.copy()
        return st

    def load_state_dict(self, st: dict[str, np.ndarray]) -> None:
        def part(prefix):
            return {k[len(prefix):]: v for k, v in st.items() if k.startswith(prefix)}
        self.actor.load_state_dict(part("actor."))
        self.critic.load_state_dict(part("critic."))
        self.target.load_state_dict(part("target."))
        self.log_alpha.data = np.array(st["log_alpha"], dtype=float).reshape(())


def _check(loss: Tensor, name: str) -> None:
    if not np.isfinite(loss.data).all():
        raise NumericError(f"{name} loss is not finite")
