"""Evaluation rollouts, trajectory files and summary metrics."""
from __future__ import annotations

import io
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import binomtest

from .env import CORRIDORS, MazeEnv
from .novelty import PolicyLibrary, rejection_sample

TRAJECTORY_FORMAT = "novelsac.trajectory v1"
TRAJECTORY_COLUMNS = ("episode", "step", "x", "y", "action_x", "action_y", "reward", "controller")
TRACE_COLUMNS = ("step", "x", "y", "controller", "round")


class TrajectoryParseError(ValueError):
    pass


@dataclass
class Episode:
    positions: list = field(default_factory=list)  # includes the reset position
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    controllers: list = field(default_factory=list)
    success: bool = False
    attempts: list = field(default_factory=list)
    fallbacks: int = 0
    violations: int = 0

    @property
    def episode_return(self) -> float:
        return float(sum(self.rewards))


def majority_corridor(env: MazeEnv, positions) -> str | None:
    """Corridor holding most of the episode's in-corridor positions (ties: lower index)."""
    counts = Counter(c for c in (env.corridor_of(p) for p in positions) if c is not None)
    if not counts:
        return None
    return max(CORRIDORS, key=lambda c: (counts[c], -CORRIDORS.index(c)))


def entry_actor(library: PolicyLibrary, index: int, max_attempts: int, fallback: bool):
    """Action function for entry ``index`` (0-based): greedy for the first, projected otherwise.

    Returns ``act(s, rng) -> (action, attempts, fallback, violated)``.
    """
    if not 0 <= index < len(library):
        raise IndexError(f"policy index {index + 1} out of range 1..{len(library)}")
    actor = library.entries[index].actor
    constraints = library.constraints(index)
    if not constraints:
        return lambda s, rng: (actor.greedy(s)[0], 1, False, False)

    def act(s, rng):
        a, rep = rejection_sample(actor, s, constraints, max_attempts, rng, fallback=fallback)
        violated = bool(np.any(rep.prior_log_densities > np.array([c.log_epsilon for c in constraints])))
        return a, rep.attempts, rep.fallback, violated

    return act


def rollout(env: MazeEnv, act, reset_seed: int, rng, tag: str) -> Episode:
    ep = Episode()
    state = env.reset(reset_seed)
    ep.positions.append(state.position)
    while True:
        a, attempts, fb, violated = act(state.xy, rng)
        res = env.step(a)
        state = res.next_state
        ep.positions.append(state.position)
        ep.actions.append((float(a[0]), float(a[1])))
        ep.rewards.append(res.reward)
        ep.controllers.append(tag)
        ep.attempts.append(attempts)
        ep.fallbacks += int(fb)
        ep.violations += int(violated)
        if res.terminal:
            ep.success = res.reached_goal
            return ep


def evaluate_entry(env: MazeEnv, library: PolicyLibrary, index: int, episodes: int, seed: int,
                   max_attempts: int = 64, fallback: bool = False) -> list[Episode]:
    rng = np.random.default_rng([seed, 5, index])
    act = entry_actor(library, index, max_attempts, fallback)
    tag = f"policy_{index + 1}"
    return [rollout(env, act, int(rng.integers(2**31)), rng, tag) for _ in range(episodes)]


def summarize(env: MazeEnv, episodes: list[Episode], constrained: bool) -> dict:
    if not episodes:
        return {"episodes": 0}
    corridors = [majority_corridor(env, ep.positions) for ep in episodes]
    dist = Counter(c if c is not None else "none" for c in corridors)
    steps = sum(len(ep.actions) for ep in episodes)
    out = {
        "episodes": len(episodes),
        "mean_return": float(np.mean([ep.episode_return for ep in episodes])),
        "success_rate": sum(ep.success for ep in episodes) / len(episodes),
        "corridors": {k: dist[k] for k in (*CORRIDORS, "none")},
        "majority_corridor": max((*CORRIDORS, "none"), key=lambda c: (dist[c], c != "none")),
    }
    if constrained:
        out["rejection"] = {
            "actions": steps,
            "mean_attempts": float(np.mean([a for ep in episodes for a in ep.attempts])),
            "fallback_rate": sum(ep.fallbacks for ep in episodes) / steps,
            "violations": sum(ep.violations for ep in episodes),
            "constraint_satisfaction_rate": 1.0 - sum(ep.violations for ep in episodes) / steps,
        }
    return out


# trajectory files

def _header(buf, header: dict) -> None:
    buf.write(f"# format: {TRAJECTORY_FORMAT}\n")
    for k, v in header.items():
        buf.write(f"# {k}: {v}\n")


def trajectories_to_tsv(episodes: list[Episode], header: dict) -> str:
    """Row 0 of an episode is the reset position; row t holds the action taken at
    step t, its reward, and the position it led to."""
    buf = io.StringIO()
    _header(buf, header)
    buf.write("\t".join(TRAJECTORY_COLUMNS) + "\n")
    for e, ep in enumerate(episodes):
        x, y = ep.positions[0]
        buf.write(f"{e}\t0\t{x!r}\t{y!r}\t\t\t\treset\n")
        for t, ((x, y), (ax, ay), r, c) in enumerate(zip(ep.positions[1:], ep.actions, ep.rewards, ep.controllers), 1):
            buf.write(f"{e}\t{t}\t{x!r}\t{y!r}\t{ax!r}\t{ay!r}\t{r!r}\t{c}\n")
    return buf.getvalue()


@dataclass
class TrajectoryFile:
    header: dict
    columns: tuple
    rows: list  # dicts keyed by column

    def paths(self):
        """Yield ``(label, [(x, y), ...])`` polylines, split by episode and controller."""
        key = "episode" if "episode" in self.columns else None
        current, label, ep = [], None, None
        for row in self.rows:
            e = row.get(key) if key else 0
            c = row["controller"]
            if c in ("reset", "backtrack"):
                if len(current) > 1:
                    yield label, current
                current, label, ep = [(row["x"], row["y"])], None, e
                continue
            if e != ep:
                if len(current) > 1:
                    yield label, current
                current, ep = [], e
            if label is not None and c != label and len(current) > 1:
                yield label, current
                current = current[-1:]
            label = c
            current.append((row["x"], row["y"]))
        if len(current) > 1:
            yield label, current


_INT_COLS = {"episode", "step", "round"}
_FLOAT_COLS = {"x", "y", "action_x", "action_y", "reward"}


def parse_trajectory_text(text: str, source: str = "<text>") -> TrajectoryFile:
    header, columns, rows = {}, None, []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            key, sep, val = line[1:].partition(":")
            if not sep:
                raise TrajectoryParseError(f"{source}:{lineno}: malformed header line")
            header[key.strip()] = val.strip()
            continue
        fields = line.split("\t")
        if columns is None:
            columns = tuple(fields)
            if columns not in (TRAJECTORY_COLUMNS, TRACE_COLUMNS):
                raise TrajectoryParseError(f"{source}:{lineno}: unrecognized column header")
            continue
        if len(fields) != len(columns):
            raise TrajectoryParseError(f"{source}:{lineno}: expected {len(columns)} fields, got {len(fields)}")
        row = {}
        try:
            for col, val in zip(columns, fields):
                if col in _INT_COLS:
                    row[col] = int(val)
                elif col in _FLOAT_COLS:
                    row[col] = float(val) if val else math.nan
                else:
                    row[col] = val
        except ValueError as exc:
            raise TrajectoryParseError(f"{source}:{lineno}: {exc}") from exc
        rows.append(row)
    if columns is None:
        raise TrajectoryParseError(f"{source}: no column header")
    return TrajectoryFile(header, columns, rows)


def read_trajectory_file(path) -> TrajectoryFile:
    with open(path) as fh:
        return parse_trajectory_text(fh.read(), str(path))


def replay_matches(env: MazeEnv, traj: TrajectoryFile) -> bool:
    """Feed recorded actions back through ``env``; True iff rewards and positions match exactly."""
    state = None
    for row in traj.rows:
        if row["controller"] == "reset":
            state = env.set_state((row["x"], row["y"]), 0)
            continue
        res = env.step((row["action_x"], row["action_y"]))
        state = res.next_state
        if res.reward != row["reward"] or state.position != (row["x"], row["y"]):
            return False
    return True


# paired recovery statistics

def sign_test(better: list[bool], worse: list[bool]) -> dict:
    """One-sided exact sign test that arm ``better`` succeeds more often than ``worse``.

    Ties (both succeed or both fail) are dropped.
    """
    wins = sum(b and not w for b, w in zip(better, worse))
    losses = sum(w and not b for b, w in zip(better, worse))
    n = wins + losses
    p = binomtest(wins, n, 0.5, alternative="greater").pvalue if n else 1.0
    return {"wins": wins, "losses": losses, "ties": len(better) - n, "p_value": float(p)}
