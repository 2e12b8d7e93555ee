"""Backtracking recovery with contingency policies.

The optimal policy is rolled out and checkpointed every ``k`` steps.  When the
agent stops moving (a run of small state changes), each contingency policy in
library order is run for ``m`` steps from the current origin, followed by the
optimal policy again.  If none of them gets through, the origin moves back to
the previous checkpoint and the round repeats.
"""
from __future__ import annotations

import io
from dataclasses import asdict, dataclass, field
from functools import partial

import numpy as np

from .env import MazeEnv
from .novelty import PolicyLibrary, rejection_sample
from .sac import PolicyParams, sample_actions

OPTIMAL = "optimal"
RANDOM = "random"
BACKTRACK = "backtrack"


class ConfigurationError(ValueError):
    pass


@dataclass
class RecoveryConfig:
    k: int = 10
    m: int = 30
    delta_stuck: float = 0.005
    window: int = 5
    max_rounds: int = 20
    step_cap: int = 3000
    # longest single stretch of the optimal policy after a contingency segment
    segment_cap: int = 300
    max_attempts: int = 64
    resume_greedy: bool = True

    def __post_init__(self):
        bad = []
        if self.k < 1:
            bad.append("k")
        if self.m < 0:
            bad.append("m")
        if not self.delta_stuck > 0:
            bad.append("delta_stuck")
        if self.window < 1:
            bad.append("window")
        if self.max_rounds < 1:
            bad.append("max_rounds")
        if self.step_cap < 1:
            bad.append("step_cap")
        if self.segment_cap < 1:
            bad.append("segment_cap")
        if self.max_attempts < 1:
            bad.append("max_attempts")
        if bad:
            raise ConfigurationError(f"invalid recovery settings: {', '.join(f'{k}={getattr(self, k)!r}' for k in bad)}")


@dataclass(frozen=True)
class Checkpoint:
    position: tuple[float, float]
    steps_elapsed: int
    index: int


@dataclass
class RecoveryTrace:
    positions: list[tuple[float, float]] = field(default_factory=list)
    controllers: list[str] = field(default_factory=list)
    rounds: list[int] = field(default_factory=list)
    success: bool = False
    rounds_used: int = 0
    reason: str = ""

    def record(self, position, controller: str, round_: int) -> None:
        self.positions.append((float(position[0]), float(position[1])))
        self.controllers.append(controller)
        self.rounds.append(round_)

    @property
    def env_steps(self) -> int:
        # the first row is the reset position, backtrack rows are jumps
        return sum(c != BACKTRACK for c in self.controllers[1:])

    def to_tsv(self, header: dict | None = None) -> str:
        buf = io.StringIO()
        for k, v in (header or {}).items():
            buf.write(f"# {k}: {v}\n")
        buf.write("step\tx\ty\tcontroller\tround\n")
        for i, ((x, y), c, r) in enumerate(zip(self.positions, self.controllers, self.rounds)):
            buf.write(f"{i}\t{x!r}\t{y!r}\t{c}\t{r}\n")
        return buf.getvalue()


def detect_contingency(recent_states, delta_stuck: float) -> bool:
    """True iff every consecutive displacement in the window is below ``delta_stuck``."""
    pts = np.asarray(recent_states, dtype=np.float64)
    if len(pts) < 2:
        return False
    steps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    return bool(np.all(steps < delta_stuck))


class _Run:
    """Mutable bookkeeping shared by the recovery loops."""

    def __init__(self, env: MazeEnv, config: RecoveryConfig, seed: int):
        self.env = env
        self.cfg = config
        self.trace = RecoveryTrace()
        self.state = env.reset(seed)
        self.trace.record(self.state.position, OPTIMAL, 0)
        self.steps = 0

    def capped(self) -> bool:
        return self.steps >= self.cfg.step_cap

    def step(self, action, controller: str, round_: int) -> bool:
        """Advance one env step; True when the goal is reached."""
        # the episode budget is step_cap here; the env's own cap flag is ignored
        res = self.env.step(action)
        self.state = res.next_state
        self.steps += 1
        self.trace.record(self.state.position, controller, round_)
        return res.reached_goal

    def jump(self, checkpoint: Checkpoint, round_: int) -> None:
        self.state = self.env.set_state(checkpoint.position, checkpoint.steps_elapsed)
        self.trace.record(self.state.position, BACKTRACK, round_)

    def run_until_stuck(self, act, controller: str, round_: int, limit: int, on_step=None) -> str:
        """Run ``act`` until goal ('goal'), detection ('stuck'), ``limit`` ('limit') or cap ('cap')."""
        window = [self.state.position]
        for i in range(limit):
            if self.capped():
                return "cap"
            if self.step(act(np.array(self.state.position)), controller, round_):
                return "goal"
            if on_step is not None:
                on_step(self.steps)
            window.append(self.state.position)
            if len(window) > self.cfg.window + 1:
                window.pop(0)
            if len(window) == self.cfg.window + 1 and detect_contingency(window, self.cfg.delta_stuck):
                return "stuck"
        return "limit"

    def run_fixed(self, act, controller: str, round_: int, n: int) -> str:
        for _ in range(n):
            if self.capped():
                return "cap"
            if self.step(act(np.array(self.state.position)), controller, round_):
                return "goal"
        return "ran"


def _greedy(policy: PolicyParams):
    return lambda s: policy.greedy(s)[0]


def _projected(library: PolicyLibrary, j: int, cfg: RecoveryConfig, rng):
    """Entry ``j`` (0-based) run as the projected policy it was trained as."""
    policy = library.entries[j].actor
    constraints = library.constraints(j)

    def act(s):
        a, _ = rejection_sample(policy, s, constraints, cfg.max_attempts, rng)
        return a

    return act


def _recover(env: MazeEnv, optimal: PolicyParams, contingencies, config: RecoveryConfig, seed: int) -> RecoveryTrace:
    """Shared loop; ``contingencies`` is a list of (label, action_fn)."""
    run = _Run(env, config, seed)
    trace = run.trace
    if config.resume_greedy:
        resume = _greedy(optimal)
    else:
        resume = partial(_sample, optimal, rng=np.random.default_rng([seed, 7]))

    checkpoints: list[Checkpoint] = [Checkpoint(run.state.position, 0, 0)]

    def mark(steps: int) -> None:
        if steps % config.k == 0:
            checkpoints.append(Checkpoint(run.state.position, run.state.steps_elapsed, steps))

    outcome = run.run_until_stuck(resume, OPTIMAL, 0, config.step_cap, on_step=mark)
    if outcome == "goal":
        trace.success, trace.reason = True, "goal"
        return trace
    if outcome != "stuck":
        trace.reason = outcome
        return trace

    origin = Checkpoint(run.state.position, run.state.steps_elapsed, run.steps)
    round_ = 0
    while True:
        round_ += 1
        trace.rounds_used = round_
        if round_ > config.max_rounds:
            trace.rounds_used = config.max_rounds
            trace.reason = "max_rounds"
            return trace
        for n, (label, act) in enumerate(contingencies):
            if n > 0:
                run.jump(origin, round_)
            res = run.run_fixed(act, label, round_, config.m)
            if res == "goal":
                trace.success, trace.reason = True, "goal"
                return trace
            if res == "cap":
                trace.reason = "cap"
                return trace
            res = run.run_until_stuck(resume, OPTIMAL, round_, config.segment_cap)
            if res == "goal":
                trace.success, trace.reason = True, "goal"
                return trace
            if res == "cap":
                trace.reason = "cap"
                return trace
        earlier = [c for c in checkpoints if c.index < origin.index]
        if not earlier:
            trace.reason = "checkpoints_exhausted"
            return trace
        origin = earlier[-1]
        run.jump(origin, round_ + 1)


def _sample(policy: PolicyParams, s, rng):
    a, _ = sample_actions(policy, np.asarray(s)[None, :], rng)
    return a[0]


def run_with_recovery(env_blocked: MazeEnv, library: PolicyLibrary, config: RecoveryConfig, seed: int) -> RecoveryTrace:
    if len(library) < 2:
        raise ConfigurationError("recovery needs a library with an optimal policy and at least one contingency policy")
    rng = np.random.default_rng([seed, 3])
    contingencies = [(f"contingency_{j + 1}", _projected(library, j, config, rng)) for j in range(1, len(library))]
    return _recover(env_blocked.clone(), library.entries[0].actor, contingencies, config, seed)


def run_with_random_recovery(env_blocked: MazeEnv, optimal: PolicyParams, config: RecoveryConfig, seed: int) -> RecoveryTrace:
    rng = np.random.default_rng([seed, 3])
    contingencies = [(RANDOM, lambda s: rng.uniform(-1.0, 1.0, 2))]
    return _recover(env_blocked.clone(), optimal, contingencies, config, seed)


def run_optimal_only(env_blocked: MazeEnv, optimal: PolicyParams, seed: int, step_cap: int | None = None) -> RecoveryTrace:
    """Greedy rollout with no recovery at all, capped at the env's episode length."""
    env = env_blocked.clone()
    run = _Run(env, RecoveryConfig(step_cap=step_cap or env.step_cap), seed)
    act = _greedy(optimal)
    while not run.capped():
        if run.step(act(np.array(run.state.position)), OPTIMAL, 0):
            run.trace.success, run.trace.reason = True, "goal"
            return run.trace
    run.trace.reason = "cap"
    return run.trace


def config_dict(config: RecoveryConfig) -> dict:
    return asdict(config)
