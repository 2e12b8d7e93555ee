"""Soft actor-critic on the numpy autodiff: buffer, critics, losses, trainer."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError, Tensor
from .env import MazeEnv
from .nn import GaussianTanhHead, MlpParams, Optimizer, gaussian_tanh_sample, mlp_forward

log = logging.getLogger(__name__)

OBS_DIM = 2
ACT_DIM = 2


@dataclass
class SacHyper:
    gamma: float = 0.99
    alpha: float = 0.2
    tau: float = 0.005
    batch_size: int = 256
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    buffer_size: int = 100_000
    total_steps: int = 200_000
    warmup_steps: int = 1_000
    warmup_hold: tuple[int, int] = (5, 20)
    hidden: tuple[int, ...] = (64, 64)
    twin_critics: bool = True
    paper_literal_no_alpha: bool = False
    eval_interval: int = 2_000
    eval_episodes: int = 5
    converge_window: int = 20
    converge_tol: float = 0.05
    min_steps: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.warmup_hold = tuple(int(h) for h in self.warmup_hold)
        self.validate()

    def validate(self) -> None:
        checks = {
            "gamma": 0.0 <= self.gamma < 1.0,
            "alpha": self.alpha > 0.0,
            "tau": 0.0 <= self.tau <= 1.0,
            "batch_size": self.batch_size >= 1,
            "actor_lr": self.actor_lr > 0.0,
            "critic_lr": self.critic_lr > 0.0,
            "buffer_size": self.buffer_size >= self.batch_size,
            "total_steps": self.total_steps >= 1,
            "warmup_steps": self.warmup_steps >= 0,
            "hidden": len(self.hidden) >= 1 and all(h > 0 for h in self.hidden),
            "warmup_hold": len(self.warmup_hold) == 2 and 1 <= self.warmup_hold[0] <= self.warmup_hold[1],
            "eval_interval": self.eval_interval >= 1,
            "eval_episodes": self.eval_episodes >= 1,
            "converge_window": self.converge_window >= 1,
            "converge_tol": self.converge_tol >= 0.0,
        }
        bad = [k for k, ok in checks.items() if not ok]
        if bad:
            raise ValueError(f"invalid SAC hyperparameters: {', '.join(f'{k}={getattr(self, k)!r}' for k in bad)}")

    @property
    def entropy_weight(self) -> float:
        """Coefficient on log-pi terms; the literal form uses 1 in place of alpha."""
        return 1.0 if self.paper_literal_no_alpha else self.alpha

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["warmup_hold"] = list(self.warmup_hold)
        return d


# networks

@dataclass
class PolicyParams:
    """Actor MLP whose output is ``[mean, raw log_std]`` for a squashed Gaussian."""

    mlp: MlpParams
    act_dim: int = ACT_DIM

    @classmethod
    def init(cls, rng: np.random.Generator, obs_dim: int = OBS_DIM, act_dim: int = ACT_DIM, hidden=(64, 64)):
        return cls(MlpParams.init([obs_dim, *hidden, 2 * act_dim], rng), act_dim)

    def head(self, states, frozen: bool = False) -> GaussianTanhHead:
        out = mlp_forward(self.mlp, states, frozen=frozen)
        return GaussianTanhHead.from_output(out, self.act_dim)

    def greedy(self, states) -> np.ndarray:
        return self.head(np.atleast_2d(states), frozen=True).greedy()

    def parameters(self) -> list[Tensor]:
        return self.mlp.parameters()

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.mlp.copy(), self.act_dim)

    def to_dict(self) -> dict:
        return {"act_dim": self.act_dim, "mlp": self.mlp.to_dict()}

    @classmethod
    def from_dict(cls, doc: dict) -> "PolicyParams":
        return cls(MlpParams.from_dict(doc["mlp"]), int(doc["act_dim"]))


@dataclass
class CriticPair:
    q1: MlpParams
    q2: MlpParams | None
    q1_target: MlpParams
    q2_target: MlpParams | None

    @classmethod
    def init(cls, rng: np.random.Generator, obs_dim: int = OBS_DIM, act_dim: int = ACT_DIM, hidden=(64, 64), twin=True):
        sizes = [obs_dim + act_dim, *hidden, 1]
        q1 = MlpParams.init(sizes, rng)
        q2 = MlpParams.init(sizes, rng) if twin else None
        return cls(q1, q2, q1.copy(), q2.copy() if twin else None)

    @property
    def twin(self) -> bool:
        return self.q2 is not None

    def online(self) -> list[MlpParams]:
        return [self.q1] + ([self.q2] if self.twin else [])

    def targets(self) -> list[MlpParams]:
        return [self.q1_target] + ([self.q2_target] if self.twin else [])

    def parameters(self) -> list[Tensor]:
        return [p for q in self.online() for p in q.parameters()]

    def q_values(self, states, actions, frozen: bool = False) -> list:
        x = ad.concat([states, actions], axis=1)
        return [mlp_forward(q, x, frozen=frozen)[:, 0] for q in self.online()]

    def min_q(self, states, actions, frozen: bool = False):
        qs = self.q_values(states, actions, frozen=frozen)
        return qs[0] if len(qs) == 1 else ad.minimum(qs[0], qs[1])

    def min_target_q(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        x = np.concatenate([states, actions], axis=1)
        qs = [mlp_forward(q, x, frozen=True)[:, 0] for q in self.targets()]
        return qs[0] if len(qs) == 1 else np.minimum(qs[0], qs[1])

    def copy(self) -> "CriticPair":
        cp = lambda m: None if m is None else m.copy()  # noqa: E731
        return CriticPair(self.q1.copy(), cp(self.q2), self.q1_target.copy(), cp(self.q2_target))

    def to_dict(self) -> dict:
        dump = lambda m: None if m is None else m.to_dict()  # noqa: E731
        return {k: dump(getattr(self, k)) for k in ("q1", "q2", "q1_target", "q2_target")}

    @classmethod
    def from_dict(cls, doc: dict) -> "CriticPair":
        load = lambda d: None if d is None else MlpParams.from_dict(d)  # noqa: E731
        return cls(*(load(doc[k]) for k in ("q1", "q2", "q1_target", "q2_target")))


# data

class Batch(NamedTuple):
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray


class ReplayBuffer:
    """Fixed-capacity ring buffer of (s, a, r, s', done)."""

    def __init__(self, capacity: int, obs_dim: int = OBS_DIM, act_dim: int = ACT_DIM):
        self.capacity = capacity
        self.s = np.zeros((capacity, obs_dim))
        self.a = np.zeros((capacity, act_dim))
        self.r = np.zeros(capacity)
        self.s_next = np.zeros((capacity, obs_dim))
        self.done = np.zeros(capacity, dtype=bool)
        self.cursor = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, s, a, r: float, s_next, done: bool) -> None:
        if not math.isfinite(r):
            raise NumericError(f"non-finite reward {r}")
        i = self.cursor
        self.s[i], self.a[i], self.r[i], self.s_next[i], self.done[i] = s, a, r, s_next, done
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        idx = rng.integers(0, self.size, batch_size)
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s_next[idx], self.done[idx])

    def states(self) -> np.ndarray:
        return self.s[: self.size]


# losses

def sample_actions(actor: PolicyParams, states: np.ndarray, rng: np.random.Generator):
    """Fresh no-grad actions and their log densities for a batch of states."""
    noise = rng.standard_normal((states.shape[0], actor.act_dim))
    return gaussian_tanh_sample(actor.head(states, frozen=True), noise)


def soft_backup(batch: Batch, live: np.ndarray, next_actions, next_logp, critics: CriticPair, hyper: SacHyper):
    """``r + gamma * (minQ_target(s', a') - w * log pi(a'|s'))`` on live rows, ``r`` on done rows."""
    targets = batch.r.astype(np.float64).copy()
    if live.size:
        q_next = critics.min_target_q(batch.s_next[live], next_actions)
        targets[live] = batch.r[live] + hyper.gamma * (q_next - hyper.entropy_weight * next_logp)
    bad = np.flatnonzero(~np.isfinite(targets))
    if bad.size:
        raise NumericError(f"non-finite TD target at batch row {int(bad[0])}")
    return targets


def critic_td_target(batch: Batch, actor: PolicyParams, critics: CriticPair, hyper: SacHyper, rng) -> np.ndarray:
    # terminal rows never touch the s' networks
    live = np.flatnonzero(~batch.done)
    if live.size == 0:
        return soft_backup(batch, live, None, None, critics, hyper)
    a_next, logp = sample_actions(actor, batch.s_next[live], rng)
    return soft_backup(batch, live, a_next, logp, critics, hyper)


def critic_loss(batch: Batch, targets: np.ndarray, critics: CriticPair) -> Tensor:
    total = None
    for q in critics.q_values(batch.s, batch.a):
        diff = q - targets
        term = 0.5 * ad.mean(diff * diff)
        total = term if total is None else total + term
    return total


def actor_loss(batch: Batch, actor: PolicyParams, critics: CriticPair, hyper: SacHyper, rng) -> Tensor:
    """``mean(w * log pi(a|s) - minQ(s, a))`` with reparameterized ``a``; critics frozen."""
    noise = rng.standard_normal((batch.s.shape[0], actor.act_dim))
    a, logp = gaussian_tanh_sample(actor.head(batch.s), noise)
    q = critics.min_q(batch.s, a, frozen=True)
    return ad.mean(hyper.entropy_weight * logp - q)


def soft_update(critics: CriticPair, tau: float) -> CriticPair:
    for online, target in zip(critics.online(), critics.targets()):
        for p, tp in zip(online.parameters(), target.parameters()):
            tp.data *= 1.0 - tau
            tp.data += tau * p.data
    return critics


# training loop

@dataclass
class EpisodeRecord:
    env_step: int
    episode_return: float
    critic_loss: float
    actor_loss: float
    entropy: float
    mean_attempts: float = 1.0
    fallback_rate: float = 0.0

    HEADER = ("env_step", "episode_return", "critic_loss", "actor_loss", "entropy", "mean_attempts", "fallback_rate")

    def row(self) -> str:
        return "\t".join(
            [str(self.env_step)] + [repr(float(getattr(self, k))) for k in self.HEADER[1:]]
        )


@dataclass
class TrainingLog:
    episodes: list[EpisodeRecord] = field(default_factory=list)
    evals: list[tuple[int, float]] = field(default_factory=list)
    converged_at: int | None = None
    steps: int = 0
    attempts_total: int = 0
    fallback_total: int = 0
    actions_total: int = 0

    def to_tsv(self) -> str:
        lines = ["\t".join(EpisodeRecord.HEADER)] + [e.row() for e in self.episodes]
        return "\n".join(lines) + "\n"

    @property
    def mean_attempts(self) -> float:
        return self.attempts_total / self.actions_total if self.actions_total else 0.0

    @property
    def fallback_rate(self) -> float:
        return self.fallback_total / self.actions_total if self.actions_total else 0.0


def has_converged(returns: list[float], window: int, tol: float) -> bool:
    """Plateau test: the moving average of the last ``window`` evals sits within
    ``tol`` (relative) of the best eval seen so far, and that best is positive."""
    if len(returns) < window:
        return False
    best = max(returns)
    if best <= 0.0:
        return False
    return float(np.mean(returns[-window:])) >= (1.0 - tol) * best


# hooks: (actor, state_row, rng) -> (action, attempts, fallback)
ActionSelector = Callable[[PolicyParams, np.ndarray, np.random.Generator], tuple[np.ndarray, int, bool]]


def sac_select_action(actor: PolicyParams, s: np.ndarray, rng) -> tuple[np.ndarray, int, bool]:
    a, _ = sample_actions(actor, s[None, :], rng)
    return a[0], 1, False


class HeldRandomActions:
    """Warm-up behavior: a uniform random action held for a random number of steps.

    I.i.d. uniform actions diffuse too slowly to ever find the goal disc; held
    actions slide along corridor walls and reach it in a sizeable fraction of
    episodes.  ``admissible(s, a) -> margin`` (<= 0 means allowed) lets the
    constrained trainer redraw held actions that break a novelty constraint.
    """

    def __init__(self, hold: tuple[int, int] = (5, 20), admissible=None, max_attempts: int = 64):
        self.hold = hold
        self.admissible = admissible
        self.max_attempts = max_attempts
        self.action = np.zeros(ACT_DIM)
        self.remaining = 0

    def _draw(self, rng) -> None:
        self.action = rng.uniform(-1.0, 1.0, ACT_DIM)
        self.remaining = int(rng.integers(self.hold[0], self.hold[1] + 1))

    def __call__(self, s: np.ndarray, rng) -> tuple[np.ndarray, int, bool]:
        if self.remaining <= 0:
            self._draw(rng)
        if self.admissible is None:
            self.remaining -= 1
            return self.action, 1, False
        attempts, best, best_margin = 1, None, np.inf
        while True:
            margin = self.admissible(s, self.action)
            if margin <= 0.0:
                self.remaining -= 1
                return self.action, attempts, False
            if best is None or margin < best_margin:
                best, best_margin = self.action, margin
            if attempts >= self.max_attempts:
                self.remaining = 0
                return best, attempts, True
            self._draw(rng)
            attempts += 1


@dataclass
class TrainHooks:
    select_action: ActionSelector = sac_select_action
    warmup_action: Callable = field(default_factory=HeldRandomActions)
    td_target: Callable = critic_td_target
    actor_loss: Callable = actor_loss
    eval_action: Callable | None = None
    # called every env step with running fallback stats; may raise to abort
    monitor: Callable | None = None


@dataclass
class TrainResult:
    actor: PolicyParams
    critics: CriticPair
    log: TrainingLog
    buffer: ReplayBuffer


def entropy_estimate(actor: PolicyParams, buffer: ReplayBuffer, rng, n: int = 64) -> float:
    """Monte-Carlo ``-E[log pi]`` over a few stored states."""
    idx = rng.integers(0, len(buffer), n)
    _, logp = sample_actions(actor, buffer.s[idx], rng)
    return float(-np.mean(logp))


def greedy_eval_action(actor: PolicyParams, s: np.ndarray, rng) -> np.ndarray:
    return actor.greedy(s)[0]


def evaluate(env: MazeEnv, act: Callable, episodes: int, rng: np.random.Generator) -> list[float]:
    returns = []
    for _ in range(episodes):
        state = env.reset(int(rng.integers(2**31)))
        total, done = 0.0, False
        while not done:
            res = env.step(act(state.xy, rng))
            total += res.reward
            done = res.terminal
            state = res.next_state
        returns.append(total)
    return returns


def run_training(env: MazeEnv, hyper: SacHyper, seed: int, hooks: TrainHooks | None = None) -> TrainResult:
    """Env-step / gradient-step loop shared by plain and constrained SAC."""
    hooks = hooks or TrainHooks()
    if isinstance(hooks.warmup_action, HeldRandomActions):
        hooks.warmup_action.hold = hyper.warmup_hold
    rng = np.random.default_rng(seed)
    eval_rng = np.random.default_rng([seed, 1])
    eval_env = env.clone()
    actor = PolicyParams.init(rng, hidden=hyper.hidden)
    critics = CriticPair.init(rng, hidden=hyper.hidden, twin=hyper.twin_critics)
    actor_opt = Optimizer(actor.parameters(), lr=hyper.actor_lr)
    critic_opt = Optimizer(critics.parameters(), lr=hyper.critic_lr)
    buffer = ReplayBuffer(hyper.buffer_size)
    tlog = TrainingLog()
    eval_act = hooks.eval_action or greedy_eval_action

    state = env.reset(int(rng.integers(2**31)))
    aux_rng = np.random.default_rng([seed, 2])
    ep_return, c_losses, a_losses = 0.0, [], []
    ep_attempts, ep_fallbacks, ep_actions = 0, 0, 0
    for t in range(1, hyper.total_steps + 1):
        s = state.xy
        if t <= hyper.warmup_steps:
            a, attempts, fb = hooks.warmup_action(s, rng)
        else:
            a, attempts, fb = hooks.select_action(actor, s, rng)
        ep_attempts += attempts
        ep_fallbacks += int(fb)
        ep_actions += 1
        tlog.attempts_total += attempts
        tlog.fallback_total += int(fb)
        tlog.actions_total += 1
        if hooks.monitor is not None:
            hooks.monitor(t, fb)
        res = env.step(a)
        buffer.add(s, a, res.reward, res.next_state.xy, res.reached_goal)
        ep_return += res.reward
        state = res.next_state

        if t > hyper.warmup_steps and len(buffer) >= hyper.batch_size:
            batch = buffer.sample(hyper.batch_size, rng)
            targets = hooks.td_target(batch, actor, critics, hyper, rng)
            critic_opt.zero_grad()
            lc = critic_loss(batch, targets, critics)
            lc.backward()
            critic_opt.step()
            actor_opt.zero_grad()
            la = hooks.actor_loss(batch, actor, critics, hyper, rng)
            la.backward()
            actor_opt.step()
            soft_update(critics, hyper.tau)
            lc_v, la_v = float(lc.data), float(la.data)
            if not (math.isfinite(lc_v) and math.isfinite(la_v)):
                raise NumericError(f"training diverged at env step {t}: critic {lc_v}, actor {la_v}")
            c_losses.append(lc_v)
            a_losses.append(la_v)

        if res.terminal:
            tlog.episodes.append(
                EpisodeRecord(
                    t,
                    ep_return,
                    float(np.mean(c_losses)) if c_losses else 0.0,
                    float(np.mean(a_losses)) if a_losses else 0.0,
                    entropy_estimate(actor, buffer, aux_rng),
                    ep_attempts / ep_actions,
                    ep_fallbacks / ep_actions,
                )
            )
            state = env.reset(int(rng.integers(2**31)))
            ep_return, c_losses, a_losses = 0.0, [], []
            ep_attempts, ep_fallbacks, ep_actions = 0, 0, 0

        if t % hyper.eval_interval == 0 and t > hyper.warmup_steps:
            ret = float(np.mean(evaluate(eval_env, lambda x, r: eval_act(actor, x, r), hyper.eval_episodes, eval_rng)))
            tlog.evals.append((t, ret))
            log.debug("step %d eval return %.3f", t, ret)
            if t >= hyper.min_steps and has_converged([r for _, r in tlog.evals], hyper.converge_window, hyper.converge_tol):
                tlog.converged_at = t
                tlog.steps = t
                break
    else:
        tlog.steps = hyper.total_steps
    return TrainResult(actor, critics, tlog, buffer)


def train_sac(env: MazeEnv, hyper: SacHyper, seed: int) -> TrainResult:
    return run_training(env, hyper, seed)
