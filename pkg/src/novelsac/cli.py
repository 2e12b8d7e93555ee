"""Command line: ``novelsac {train,eval,recover,plot} --config PATH --seed N --out DIR``.

Exit codes: 0 success, 1 configuration error, 2 numeric divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .autodiff import NumericError
from .config import ConfigError, RunConfig, load_config
from .env import CORRIDORS
from .evaluation import (
    TrajectoryParseError,
    evaluate_entry,
    read_trajectory_file,
    sign_test,
    summarize,
    trajectories_to_tsv,
)
from .novelty import InfeasibleConstraints, PolicyLibrary, build_library
from .plot import render_svg
from .recovery import ConfigurationError, run_optimal_only, run_with_random_recovery, run_with_recovery

log = logging.getLogger("novelsac")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _dump_json(path: Path, doc) -> None:
    _write(path, json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _header(cfg: RunConfig, seed: int, env, **extra) -> dict:
    return {"env_fingerprint": env.fingerprint(), "seed": seed, "config_hash": cfg.hash(), **extra}


def _log_tsv(cfg, seed, env, policy_id, tlog) -> str:
    head = "".join(f"# {k}: {v}\n" for k, v in _header(cfg, seed, env, policy=policy_id).items())
    evals = "".join(f"# eval {t}: {r!r}\n" for t, r in tlog.evals)
    return head + evals + tlog.to_tsv()


def _eval_entries(cfg: RunConfig, library: PolicyLibrary, indices, episodes: int, seed: int, out: Path, prefix: str) -> dict:
    env = cfg.make_env()
    summary = {}
    for i in indices:
        eps = evaluate_entry(env, library, i, episodes, seed, cfg.novelty.max_attempts, cfg.eval.fallback)
        pid = f"policy_{i + 1}"
        summary[pid] = summarize(env, eps, constrained=i > 0)
        header = _header(cfg, seed, env, policy=pid, executed="greedy" if i == 0 else "projected")
        _write(out / f"{prefix}_{pid}.tsv", trajectories_to_tsv(eps, header))
        log.info("%s: %s", pid, json.dumps(summary[pid], sort_keys=True))
    return summary


def cmd_train(cfg: RunConfig, seed: int, out: Path, progress=None) -> dict:
    """``progress(i, entry)`` is called after each library entry is trained."""
    env = cfg.make_env()

    def on_entry(i, result, entry):
        _write(out / f"train_log_policy_{i + 1}.tsv", _log_tsv(cfg, entry.provenance["seed"], env, f"policy_{i + 1}", result.log))
        log.info("trained policy_%d: %d env steps, eps %.4g", i + 1, result.log.steps, entry.epsilon)
        if progress is not None:
            progress(i, entry)

    library = build_library(env, cfg.train.n_policies, cfg.sac, seed, cfg.novelty, on_entry=on_entry)
    library.meta["config_hash"] = cfg.hash()
    library.save(out / "library.json")
    summary = {
        "config_hash": cfg.hash(),
        "seed": seed,
        "diagnostics": library.diagnostics,
        "policies": _eval_entries(cfg, library, range(len(library)), cfg.train.eval_episodes, seed, out, "eval"),
    }
    majors = [s.get("majority_corridor") for s in summary["policies"].values()]
    summary["majority_corridors"] = majors
    summary["pairwise_distinct"] = len(set(majors)) == len(majors) and "none" not in majors
    _dump_json(out / "train_summary.json", summary)
    return summary


def _load_library(path: Path) -> PolicyLibrary:
    if not path.exists():
        raise ConfigError(f"library file not found: {path}")
    try:
        return PolicyLibrary.load(path)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read library {path}: {exc}") from exc


def cmd_eval(cfg: RunConfig, seed: int, out: Path, library_path: Path, policy: int | None, episodes: int | None) -> dict:
    library = _load_library(library_path)
    if policy is not None and not 1 <= policy <= len(library):
        raise ConfigError(f"--policy {policy} out of range 1..{len(library)}")
    indices = range(len(library)) if policy is None else [policy - 1]
    n = cfg.eval.episodes if episodes is None else episodes
    summary = {
        "config_hash": cfg.hash(),
        "seed": seed,
        "policies": _eval_entries(cfg, library, indices, n, seed, out, "evaluation"),
    }
    _dump_json(out / "eval_summary.json", summary)
    return summary


TRACES_KEPT = 5


def cmd_recover(cfg: RunConfig, seed: int, out: Path, library_path: Path, blockade: list[str] | None) -> dict:
    library = _load_library(library_path)
    if len(library) < 2:
        raise ConfigurationError("recovery needs a library with an optimal policy and at least one contingency policy")
    blocks = cfg.recover.blockade if blockade is None else blockade
    env = cfg.make_env(blocks)
    optimal = library.entries[0].actor
    rows = ["seed\toptimal_only\trecovery\trecovery_rounds\trecovery_steps\trandom\trandom_rounds\trandom_steps"]
    arms = {"optimal_only": [], "recovery": [], "random": []}
    for e in range(cfg.recover.episodes):
        s = seed * 100_000 + e
        opt = run_optimal_only(env, optimal, s)
        rec = run_with_recovery(env, library, cfg.recovery, s)
        rnd = run_with_random_recovery(env, optimal, cfg.recovery, s)
        arms["optimal_only"].append(opt.success)
        arms["recovery"].append(rec.success)
        arms["random"].append(rnd.success)
        rows.append(f"{s}\t{int(opt.success)}\t{int(rec.success)}\t{rec.rounds_used}\t{rec.env_steps}\t{int(rnd.success)}\t{rnd.rounds_used}\t{rnd.env_steps}")
        if e < TRACES_KEPT:
            for name, tr in (("recovery", rec), ("random", rnd), ("optimal_only", opt)):
                _write(out / "traces" / f"{name}_{s}.tsv", tr.to_tsv(_header(cfg, s, env, arm=name, reason=tr.reason)))
    head = "".join(f"# {k}: {v}\n" for k, v in _header(cfg, seed, env, blockade=",".join(blocks) or "none").items())
    _write(out / "recovery_pairs.tsv", head + "\n".join(rows) + "\n")
    n = max(cfg.recover.episodes, 1)
    summary = {
        "config_hash": cfg.hash(),
        "seed": seed,
        "blockade": list(blocks),
        "episodes": cfg.recover.episodes,
        "success_rate": {k: sum(v) / n for k, v in arms.items()},
        "sign_test_recovery_vs_random": sign_test(arms["recovery"], arms["random"]),
    }
    _dump_json(out / "recovery_summary.json", summary)
    return summary


def cmd_plot(cfg: RunConfig, out: Path, inputs: list[Path], blockade: list[str], name: str, title: str | None) -> Path:
    trajs = [read_trajectory_file(p) for p in inputs]
    env = cfg.make_env()
    svg = render_svg(env.geometry.to_dict(), blockade, trajs, title)
    path = out / f"{name}.svg"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(svg)
    return path


def _blockades(values) -> list[str] | None:
    if values is None:
        return None
    names = [v for v in values if v != "none"]
    for v in names:
        if v not in CORRIDORS:
            raise ConfigError(f"unknown corridor {v!r} for --blockade; expected one of {CORRIDORS} or 'none'")
    return names


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="novelsac", description="Novelty-constrained SAC policy libraries on a three-corridor maze.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="JSON run config (defaults used when omitted)")
        p.add_argument("--seed", type=int, help="overrides the config's seed")
        p.add_argument("--out", type=Path, default=Path("out"), help="output directory")

    common(sub.add_parser("train", help="train a policy library"))
    p = sub.add_parser("eval", help="evaluate library entries")
    common(p)
    p.add_argument("--library", type=Path, help="library file (default: OUT/library.json)")
    p.add_argument("--policy", type=int, help="1-based entry index (default: all)")
    p.add_argument("--episodes", type=int, help="overrides eval.episodes")
    p = sub.add_parser("recover", help="paired recovery experiment on a blocked maze")
    common(p)
    p.add_argument("--library", type=Path, help="library file (default: OUT/library.json)")
    p.add_argument("--blockade", nargs="+", help="corridors to block, or 'none' (default: recover.blockade)")
    p = sub.add_parser("plot", help="render trajectory files as SVG")
    common(p)
    p.add_argument("inputs", nargs="*", type=Path, help="trajectory or recovery trace files")
    p.add_argument("--blockade", nargs="+", default=[], help="blockades to draw")
    p.add_argument("--name", default="plot", help="output file stem")
    p.add_argument("--title")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be non-negative")
            cfg.seed = args.seed
        seed, out = cfg.seed, args.out
        if args.command == "train":
            result = cmd_train(cfg, seed, out)
        elif args.command == "eval":
            if args.episodes is not None and args.episodes < 0:
                raise ConfigError("--episodes must be >= 0")
            result = cmd_eval(cfg, seed, out, args.library or out / "library.json", args.policy, args.episodes)
        elif args.command == "recover":
            result = cmd_recover(cfg, seed, out, args.library or out / "library.json", _blockades(args.blockade))
        else:
            result = {"svg": str(cmd_plot(cfg, out, args.inputs, _blockades(args.blockade), args.name, args.title))}
    except (ConfigError, ConfigurationError, TrajectoryParseError, FileNotFoundError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, InfeasibleConstraints) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps(result, indent=1, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
