"""Novelty-constrained SAC.

Each new policy only executes actions whose density under every earlier
policy ``j`` is at most ``eps_j``.  The executed policy is the current actor
restricted to that set, realized by rejection sampling; the critic backs up
through the same restricted sampler, and the actor is trained with a
two-branch loss: the usual SAC objective on admissible samples and
``log pi_i - log pi_j`` on samples that land in a prior's high-density region.
"""
from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from functools import partial

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .env import MazeEnv
from .nn import GaussianTanhHead, gaussian_tanh_log_prob, gaussian_tanh_sample
from .sac import (
    Batch,
    CriticPair,
    HeldRandomActions,
    PolicyParams,
    SacHyper,
    TrainHooks,
    TrainResult,
    TrainingLog,
    run_training,
    soft_backup,
)

log = logging.getLogger(__name__)

LIBRARY_FORMAT = "novelsac.library"
LIBRARY_VERSION = 1
# hard stop for rejection sampling when the fallback is disabled
UNBOUNDED_ATTEMPTS = 100_000


class InfeasibleConstraints(RuntimeError):
    """The projected policy has (almost) no admissible actions."""


@dataclass
class NoveltyConfig:
    max_attempts: int = 64
    quantile: float = 0.5
    kappa: float = 0.1
    calibration_states: int = 1000
    fallback: bool = True
    infeasible_rate: float = 0.5
    infeasible_window: int = 10_000

    def __post_init__(self):
        bad = []
        if self.max_attempts < 1:
            bad.append("max_attempts")
        if not 0.0 < self.quantile < 1.0:
            bad.append("quantile")
        if self.kappa < 0.0:
            bad.append("kappa")
        if self.calibration_states < 1:
            bad.append("calibration_states")
        if not 0.0 < self.infeasible_rate <= 1.0:
            bad.append("infeasible_rate")
        if self.infeasible_window < 1:
            bad.append("infeasible_window")
        if bad:
            raise ValueError(f"invalid novelty settings: {', '.join(f'{k}={getattr(self, k)!r}' for k in bad)}")


class NoveltyConstraint:
    """A frozen prior policy and its density threshold."""

    def __init__(self, prior: PolicyParams, epsilon: float):
        if not epsilon >= 0.0:
            raise ValueError(f"epsilon must be non-negative, got {epsilon}")
        self._prior = prior.copy()
        for p in self._prior.parameters():
            p.requires_grad = False
        self.epsilon = float(epsilon)
        self.log_epsilon = math.log(self.epsilon) if self.epsilon > 0 else -math.inf

    @property
    def prior(self) -> PolicyParams:
        return self._prior

    def head(self, states: np.ndarray) -> GaussianTanhHead:
        return self._prior.head(states, frozen=True)


def _rows(head: GaussianTanhHead, idx) -> GaussianTanhHead:
    return GaussianTanhHead(head.mean[idx], head.log_std[idx])


def prior_log_densities(states, actions, constraints, heads=None) -> np.ndarray:
    """[n_constraints, batch] log densities of ``actions`` under each prior."""
    if not constraints:
        return np.zeros((0, len(actions)))
    heads = heads or [c.head(states) for c in constraints]
    return np.stack([gaussian_tanh_log_prob(h, actions) for h in heads])


def _margins(plogs: np.ndarray, constraints) -> np.ndarray:
    log_eps = np.array([c.log_epsilon for c in constraints])[:, None]
    return np.max(plogs - log_eps, axis=0)


def novelty_indicator(s, a, constraints) -> np.ndarray | int:
    """1 where ``a`` is admissible under every prior (product of indicators)."""
    single = np.ndim(s) == 1
    states, actions = np.atleast_2d(s), np.atleast_2d(a)
    if not constraints:
        out = np.ones(len(states), dtype=int)
    else:
        out = (_margins(prior_log_densities(states, actions, constraints), constraints) <= 0.0).astype(int)
    return int(out[0]) if single else out


@dataclass
class RejectionReport:
    attempts: int
    fallback: bool
    action: np.ndarray
    prior_log_densities: np.ndarray


@dataclass
class BatchRejection:
    actions: np.ndarray
    log_probs: np.ndarray  # unprojected log pi_i(a|s)
    attempts: np.ndarray
    fallback: np.ndarray
    prior_log_densities: np.ndarray  # [n_constraints, batch]


def rejection_sample_batch(
    policy: PolicyParams,
    states: np.ndarray,
    constraints,
    rng: np.random.Generator,
    max_attempts: int = 64,
    fallback: bool = True,
) -> BatchRejection:
    """Draw from the projected policy at each row of ``states``.

    Rejected rows are redrawn together.  When ``fallback`` is set and a row
    exhausts ``max_attempts``, it returns the candidate with the smallest
    worst-case margin ``max_j(log pi_j(a) - log eps_j)``.  Without fallback
    sampling continues until acceptance (or raises after a very large budget).
    """
    if max_attempts < 1:
        raise ValueError("max_attempts must be >= 1")
    n, d = len(states), policy.act_dim
    head = policy.head(states, frozen=True)
    if not constraints:
        noise = rng.standard_normal((n, d))
        a, lp = gaussian_tanh_sample(head, noise)
        return BatchRejection(a, lp, np.ones(n, dtype=int), np.zeros(n, dtype=bool), np.zeros((0, n)))

    prior_heads = [c.head(states) for c in constraints]
    log_eps = np.array([c.log_epsilon for c in constraints])[:, None]
    actions = np.empty((n, d))
    log_probs = np.empty(n)
    plogs_out = np.empty((len(constraints), n))
    attempts = np.zeros(n, dtype=int)
    fell_back = np.zeros(n, dtype=bool)
    best_margin = np.full(n, np.inf)
    best_a = np.empty((n, d))
    best_lp = np.empty(n)
    best_pl = np.empty((len(constraints), n))

    budget = max_attempts if fallback else UNBOUNDED_ATTEMPTS
    pending = np.arange(n)
    for _ in range(budget):
        noise = rng.standard_normal((len(pending), d))
        a, lp = gaussian_tanh_sample(_rows(head, pending), noise)
        pl = np.stack([gaussian_tanh_log_prob(_rows(h, pending), a) for h in prior_heads])
        margin = np.max(pl - log_eps, axis=0)
        attempts[pending] += 1
        ok = margin <= 0.0
        done_rows = pending[ok]
        actions[done_rows], log_probs[done_rows], plogs_out[:, done_rows] = a[ok], lp[ok], pl[:, ok]
        # the first draw always seeds the fallback, even at an infinite margin
        better = ~ok & ((margin < best_margin[pending]) | (attempts[pending] == 1))
        upd = pending[better]
        best_margin[upd], best_a[upd], best_lp[upd], best_pl[:, upd] = margin[better], a[better], lp[better], pl[:, better]
        pending = pending[~ok]
        if not pending.size:
            break
    if pending.size:
        if not fallback:
            raise InfeasibleConstraints(f"no admissible action after {budget} draws for {pending.size} state(s)")
        actions[pending], log_probs[pending], plogs_out[:, pending] = best_a[pending], best_lp[pending], best_pl[:, pending]
        fell_back[pending] = True
    return BatchRejection(actions, log_probs, attempts, fell_back, plogs_out)


def rejection_sample(policy, s, constraints, max_attempts: int, rng, fallback: bool = True):
    res = rejection_sample_batch(policy, np.atleast_2d(s), constraints, rng, max_attempts, fallback)
    report = RejectionReport(int(res.attempts[0]), bool(res.fallback[0]), res.actions[0], res.prior_log_densities[:, 0])
    return res.actions[0], report


def constraint_margin(s, a, constraints) -> float:
    """``max_j(log pi_j(a|s) - log eps_j)``; admissible iff <= 0."""
    return float(_margins(prior_log_densities(s[None, :], np.asarray(a)[None, :], constraints), constraints)[0])


def calibrate_epsilon(prior: PolicyParams, states, quantile: float = 0.5, kappa: float = 0.1) -> float:
    """``kappa`` times the ``quantile`` of the prior's density at its own mean action."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if states.size == 0 or len(states) == 0:
        raise ValueError("calibrate_epsilon needs at least one state")
    if not 0.0 < quantile < 1.0:
        raise ValueError(f"quantile must lie in (0, 1), got {quantile}")
    head = prior.head(states, frozen=True)
    mode_density = np.exp(gaussian_tanh_log_prob(head, head.greedy()))
    return float(kappa * np.quantile(mode_density, quantile))


# losses

def constrained_critic_target(
    batch: Batch,
    actor: PolicyParams,
    critics: CriticPair,
    constraints,
    hyper: SacHyper,
    rng,
    max_attempts: int = 64,
    fallback: bool = True,
) -> np.ndarray:
    """TD target with next actions drawn from the projected actor.

    The entropy term keeps the unprojected ``log pi_i(a'|s')``.
    """
    live = np.flatnonzero(~batch.done)
    if live.size == 0:
        return soft_backup(batch, live, None, None, critics, hyper)
    draw = rejection_sample_batch(actor, batch.s_next[live], constraints, rng, max_attempts, fallback)
    return soft_backup(batch, live, draw.actions, draw.log_probs, critics, hyper)


def actor_branch_losses(batch: Batch, actor: PolicyParams, critics: CriticPair, constraints, hyper: SacHyper, rng):
    """Return ``(sac_branch, kl_branch, admissible_mask)``.

    Both branch losses are batch means of the per-sample term multiplied by a
    constant gate, so their sum is the full constrained loss.
    """
    noise = rng.standard_normal((batch.s.shape[0], actor.act_dim))
    a, logp = gaussian_tanh_sample(actor.head(batch.s), noise)
    sac_term = hyper.entropy_weight * logp - critics.min_q(batch.s, a, frozen=True)
    prior_logs = [gaussian_tanh_log_prob(c.head(batch.s), a) for c in constraints]
    violated = np.stack([pl.data > c.log_epsilon for pl, c in zip(prior_logs, constraints)])
    admissible = ~violated.any(axis=0)
    n_violated = np.maximum(violated.sum(axis=0), 1)
    mixed_prior = None
    for pl, v in zip(prior_logs, violated):
        term = ad.gate(pl, v / n_violated)
        mixed_prior = term if mixed_prior is None else mixed_prior + term
    kl_term = logp - mixed_prior
    sac_branch = ad.mean(ad.gate(sac_term, admissible))
    kl_branch = ad.mean(ad.gate(kl_term, ~admissible))
    return sac_branch, kl_branch, admissible


def constrained_actor_loss(batch: Batch, actor: PolicyParams, critics: CriticPair, constraints, hyper: SacHyper, rng) -> Tensor:
    """SAC loss on admissible samples, mean ``log pi_i - log pi_j`` over violated priors otherwise."""
    if not constraints:
        # same expression as the plain SAC actor loss
        noise = rng.standard_normal((batch.s.shape[0], actor.act_dim))
        a, logp = gaussian_tanh_sample(actor.head(batch.s), noise)
        q = critics.min_q(batch.s, a, frozen=True)
        return ad.mean(hyper.entropy_weight * logp - q)
    sac_branch, kl_branch, _ = actor_branch_losses(batch, actor, critics, constraints, hyper, rng)
    return sac_branch + kl_branch


# orchestration

def projected_eval_action(constraints, cfg: NoveltyConfig):
    if not constraints:
        return None  # greedy mean action, as for plain SAC

    def act(actor, s, rng):
        a, _ = rejection_sample(actor, s, constraints, cfg.max_attempts, rng, fallback=cfg.fallback)
        return a

    return act


class FallbackMonitor:
    def __init__(self, rate: float, window: int):
        self.rate, self.window = rate, window
        self.flags: deque[int] = deque(maxlen=window)
        self.count = 0

    def __call__(self, t: int, fell_back: bool) -> None:
        if len(self.flags) == self.window:
            self.count -= self.flags[0]
        self.flags.append(int(fell_back))
        self.count += int(fell_back)
        if len(self.flags) == self.window and self.count > self.rate * self.window:
            raise InfeasibleConstraints(
                f"constraints infeasible: fallback rate {self.count / self.window:.2f} over the last "
                f"{self.window} env steps (step {t})"
            )


def make_hooks(constraints, cfg: NoveltyConfig) -> TrainHooks:
    if not constraints:
        return TrainHooks(monitor=FallbackMonitor(cfg.infeasible_rate, cfg.infeasible_window))

    def select(actor, s, rng):
        a, rep = rejection_sample(actor, s, constraints, cfg.max_attempts, rng, fallback=cfg.fallback)
        return a, rep.attempts, rep.fallback

    return TrainHooks(
        select_action=select,
        warmup_action=HeldRandomActions(admissible=partial(constraint_margin, constraints=constraints), max_attempts=cfg.max_attempts),
        td_target=partial(_target_hook, constraints=constraints, cfg=cfg),
        actor_loss=partial(_actor_hook, constraints=constraints),
        eval_action=projected_eval_action(constraints, cfg),
        monitor=FallbackMonitor(cfg.infeasible_rate, cfg.infeasible_window),
    )


def _target_hook(batch, actor, critics, hyper, rng, constraints, cfg):
    return constrained_critic_target(batch, actor, critics, constraints, hyper, rng, cfg.max_attempts, cfg.fallback)


def _actor_hook(batch, actor, critics, hyper, rng, constraints):
    return constrained_actor_loss(batch, actor, critics, constraints, hyper, rng)


@dataclass
class LibraryEntry:
    actor: PolicyParams
    critics: CriticPair
    epsilon: float
    provenance: dict = field(default_factory=dict)

    def constraint(self) -> NoveltyConstraint:
        return NoveltyConstraint(self.actor, self.epsilon)


@dataclass
class PolicyLibrary:
    entries: list[LibraryEntry] = field(default_factory=list)
    env_fingerprint: str = ""
    task: str = "maze-three-corridor"
    diagnostics: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def constraints(self, upto: int | None = None) -> list[NoveltyConstraint]:
        """Constraints from entries ``[0, upto)``; all entries by default."""
        upto = len(self.entries) if upto is None else upto
        return [e.constraint() for e in self.entries[:upto]]

    def to_dict(self) -> dict:
        return {
            "format": LIBRARY_FORMAT,
            "version": LIBRARY_VERSION,
            "task": self.task,
            "env_fingerprint": self.env_fingerprint,
            "meta": self.meta,
            "diagnostics": list(self.diagnostics),
            "entries": [
                {
                    "epsilon": float.hex(e.epsilon),
                    "provenance": e.provenance,
                    "actor": e.actor.to_dict(),
                    "critics": e.critics.to_dict(),
                }
                for e in self.entries
            ],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def from_dict(cls, doc: dict) -> "PolicyLibrary":
        if doc.get("format") != LIBRARY_FORMAT or doc.get("version") != LIBRARY_VERSION:
            raise ValueError(f"unsupported library document {doc.get('format')!r} v{doc.get('version')}")
        entries = [
            LibraryEntry(
                PolicyParams.from_dict(e["actor"]),
                CriticPair.from_dict(e["critics"]),
                float.fromhex(e["epsilon"]),
                e["provenance"],
            )
            for e in doc["entries"]
        ]
        return cls(entries, doc["env_fingerprint"], doc["task"], list(doc["diagnostics"]), doc.get("meta", {}))

    @classmethod
    def load(cls, path) -> "PolicyLibrary":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def train_constrained_policy(
    env: MazeEnv, library: PolicyLibrary, hyper: SacHyper, seed: int, cfg: NoveltyConfig | None = None
) -> TrainResult:
    """One iteration: SAC whose behavior, backups and actor loss respect all library entries."""
    cfg = cfg or NoveltyConfig()
    return run_training(env, hyper, seed, make_hooks(library.constraints(), cfg))


def entry_seed(seed: int, index: int) -> int:
    return seed + 1000 * index


def calibration_states(result: TrainResult, n: int) -> np.ndarray:
    states = result.buffer.states()
    if len(states) <= n:
        return states
    idx = np.linspace(0, len(states) - 1, n).round().astype(int)
    return states[idx]


def build_library(
    env: MazeEnv,
    n_policies: int,
    hyper: SacHyper,
    seed: int,
    cfg: NoveltyConfig | None = None,
    on_entry=None,
) -> PolicyLibrary:
    """Train ``n_policies`` entries in order, each constrained by all earlier ones.

    An entry that fails with :class:`InfeasibleConstraints` ends the build; the
    diagnostic is kept on the library instead of propagating.
    """
    if n_policies < 1:
        raise ValueError("n_policies must be >= 1")
    cfg = cfg or NoveltyConfig()
    library = PolicyLibrary(env_fingerprint=env.fingerprint(), meta={"hyper": hyper.to_dict(), "novelty": asdict(cfg), "seed": seed})
    for i in range(n_policies):
        s_i = entry_seed(seed, i)
        try:
            result = train_constrained_policy(env.clone(), library, hyper, s_i, cfg)
        except InfeasibleConstraints as exc:
            msg = f"entry {i + 1}: {exc}"
            log.warning(msg)
            library.diagnostics.append(msg)
            break
        eps = calibrate_epsilon(result.actor, calibration_states(result, cfg.calibration_states), cfg.quantile, cfg.kappa)
        tlog: TrainingLog = result.log
        entry = LibraryEntry(
            result.actor,
            result.critics,
            eps,
            {
                "index": i + 1,
                "seed": s_i,
                "constrained_by": list(range(1, i + 1)),
                "env_fingerprint": env.fingerprint(),
                "env_steps": tlog.steps,
                "converged_at": tlog.converged_at,
                "mean_attempts": tlog.mean_attempts,
                "fallback_rate": tlog.fallback_rate,
                "final_eval_return": tlog.evals[-1][1] if tlog.evals else None,
            },
        )
        library.entries.append(entry)
        if on_entry is not None:
            on_entry(i, result, entry)
    return library
