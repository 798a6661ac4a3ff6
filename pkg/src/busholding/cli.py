"""Command-line entry point: ``busholding {gen-data,simulate,train,evaluate}``.

Exit codes: 0 success, 1 usage error, 2 input/output problem (including a
missing checkpoint), 3 training diverged.

Every option can also be supplied through an environment variable named
``BUSHOLDING_<OPTION>`` (upper case, dashes as underscores), e.g.
``BUSHOLDING_SEED=7``.  Command-line flags win over the environment.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analytics
from .corridor import ScenarioError, generate_synthetic_scenario, load_scenario, save_scenario
from .env import NoControl, RuleHolder
from .nn import GradientError
from .sac import METRICS_HEADER, SacAgent, SacConfig, train, vocab_sizes
from .sim import run_episode

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED = 0, 1, 2, 3
ENV_PREFIX = "BUSHOLDING_"
MANIFEST_NAME = "manifest.json"
CHECKPOINT_NAME = "checkpoint.npz"

log = logging.getLogger("busholding")


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


@dataclass
class RunManifest:
    command: str
    scenario: str | None = None
    seed: int | None = None
    controller: str | None = None
    checkpoint: str | None = None
    out_dir: str | None = None
    started_at: float = 0.0
    wall_clock_s: float = 0.0
    argv: list[str] = field(default_factory=list)
    artifacts: dict[str, str] = field(default_factory=dict)   # file name -> sha256
    result: dict = field(default_factory=dict)

    def write(self, out_dir: Path) -> Path:
        path = out_dir / MANIFEST_NAME
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(dataclasses.asdict(self), sort_keys=True) + "\n")
        tmp.replace(path)
        return path


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise InputError(f"cannot write to {out}: {exc}") from exc
    return out


def _scenario(path: str):
    try:
        return load_scenario(path)
    except (ScenarioError, OSError) as exc:
        raise InputError(f"cannot load scenario {path}: {exc}") from exc


def _agent(path: str | None, scenario, seed: int = 0) -> SacAgent:
    if not path:
        raise InputError("--checkpoint is required for the sac controller")
    if not Path(path).is_file():
        raise InputError(f"checkpoint not found: {path}")
    try:
        agent = SacAgent.load(path, seed)
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"cannot read checkpoint {path}: {exc}") from exc
    if agent.policy.vocab_sizes != vocab_sizes(scenario):
        raise InputError(f"checkpoint vocabularies {agent.policy.vocab_sizes} do not match the scenario "
                         f"{vocab_sizes(scenario)}")
    return agent


# --- commands ---------------------------------------------------------------

def cmd_gen_data(args, manifest: RunManifest) -> int:
    out = _out_dir(args.out)
    scenario = generate_synthetic_scenario(args.seed, args.active_fraction)
    for p in save_scenario(scenario, out):
        manifest.artifacts[p.name] = sha256_file(p)
    manifest.out_dir, manifest.seed = str(out), args.seed
    print(f"scenario written to {out}")
    return EXIT_OK


def cmd_simulate(args, manifest: RunManifest) -> int:
    scenario = _scenario(args.scenario)
    if args.controller == "sac":
        controller = _agent(args.checkpoint, scenario).controller(deterministic=True)
    elif args.controller == "rule":
        controller = RuleHolder(scenario.max_hold_secs, scenario.target_headway_secs)
    else:
        controller = NoControl()
    out = _out_dir(args.out)
    ep = run_episode(scenario, controller, args.seed)
    events = analytics.detect_bunching(ep, args.threshold)
    stats = analytics.bunching_stats(events)
    ep.to_csv(out / "episode_log.csv")
    paths = [out / "episode_log.csv",
             analytics.export_trajectories(ep, scenario, out / "trajectories.csv"),
             analytics.export_bunching(events, out / "bunching.csv"),
             analytics.export_bunching_by_stop(stats, out / "bunching_by_stop.csv"),
             analytics.export_bunching_by_hour(stats, out / "bunching_by_hour.csv")]
    for p in paths:
        manifest.artifacts[p.name] = sha256_file(p)
    summary = {"cum_reward": ep.cum_reward, "bunching_events": len(events), "decisions": ep.n_decisions,
               "trace_hash": ep.trace_hash()}
    manifest.result = summary
    print(f"controller={args.controller} seed={args.seed} cum_reward={ep.cum_reward:.3f} "
          f"bunching_events={len(events)} decisions={ep.n_decisions}")
    return EXIT_OK


def _sac_config(args) -> SacConfig:
    changes = {}
    for name in ("gamma", "tau", "lr", "batch_size", "target_entropy", "warmup_tuples", "alpha_init",
                 "reward_scale", "buffer_capacity", "updates_per_episode"):
        v = getattr(args, name)
        if v is not None:
            changes[name] = v
    try:
        return dataclasses.replace(SacConfig(), **changes)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(args, manifest: RunManifest) -> int:
    scenario = _scenario(args.scenario)
    config = _sac_config(args)
    out = _out_dir(args.out)
    ckpt = out / CHECKPOINT_NAME
    agent = SacAgent.create(vocab_sizes(scenario), scenario.max_hold_secs, config, args.seed)
    agent.save(ckpt)
    rows = []

    def on_episode(agent, m):
        agent.save(ckpt)
        rows.append(m)
        print(f"episode {m.episode} cum_reward={m.cum_reward:.1f} alpha={m.alpha:.4g}", flush=True)

    result = train(scenario, config, args.episodes, args.seed, agent=agent, callback=on_episode)
    metrics = result.metrics
    with open(out / "metrics.csv", "w") as f:
        f.write(",".join(METRICS_HEADER) + "\n")
        for m in metrics:
            f.write(",".join(repr(float(x)) if isinstance(x, float) else str(x) for x in
                             (m.episode, m.cum_reward, m.alpha, m.actor_loss, m.critic_loss, m.buffer_size)) + "\n")
    analytics.export_reward_curve([m.cum_reward for m in metrics], out / "reward_curve.csv")
    for name in (CHECKPOINT_NAME, "metrics.csv", "reward_curve.csv"):
        manifest.artifacts[name] = sha256_file(out / name)
    manifest.checkpoint, manifest.seed = str(ckpt), args.seed
    manifest.result = {"episodes": len(rows), "diverged": result.diverged, "config": dataclasses.asdict(config)}
    if metrics:
        tail = [m.cum_reward for m in metrics[-10:]]
        manifest.result["last10_mean_reward"] = float(np.mean(tail))
    if result.diverged:
        print(f"training diverged: {result.message}; last good checkpoint kept at {ckpt}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_evaluate(args, manifest: RunManifest) -> int:
    if args.rollouts < 1:
        raise UsageError("--rollouts must be >= 1")
    scenario = _scenario(args.scenario)
    agent = _agent(args.checkpoint, scenario)
    controller = agent.controller(deterministic=True)
    rewards = []
    for k in range(args.rollouts):
        r = run_episode(scenario, controller, args.seeds + k).cum_reward
        rewards.append(r)
        print(f"rollout {k} seed={args.seeds + k} cum_reward={r:.3f}")
    mean, std = float(np.mean(rewards)), float(np.std(rewards))
    print(f"mean={mean:.3f} std={std:.3f} rollouts={len(rewards)}")
    manifest.seed, manifest.checkpoint, manifest.controller = args.seeds, args.checkpoint, "sac"
    manifest.result = {"rewards": rewards, "mean": mean, "std": std}
    if args.out:
        out = _out_dir(args.out)
        p = out / "evaluation.csv"
        with open(p, "w") as f:
            f.write("rollout,seed,cum_reward\n")
            for k, r in enumerate(rewards):
                f.write(f"{k},{args.seeds + k},{r!r}\n")
        manifest.artifacts[p.name] = sha256_file(p)
    return EXIT_OK


# --- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="busholding", description="Bus holding control on a simulated corridor.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic scenario")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--active-fraction", type=float, default=0.2,
                   help="share of stop pairs with nonzero demand")

    s = sub.add_parser("simulate", help="run one day and export analytics")
    s.add_argument("--scenario", required=True)
    s.add_argument("--controller", choices=("none", "rule", "sac"), default="none")
    s.add_argument("--checkpoint")
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--out", required=True)
    s.add_argument("--threshold", type=float, default=analytics.BUNCHING_THRESHOLD,
                   help="bunching threshold in seconds")

    t = sub.add_parser("train", help="train the SAC holding agent")
    t.add_argument("--scenario", required=True)
    t.add_argument("--episodes", type=int, default=150)
    t.add_argument("--seed", type=int, default=7)
    t.add_argument("--out", required=True)
    for flag, typ in (("--gamma", float), ("--tau", float), ("--lr", float), ("--batch-size", int),
                      ("--target-entropy", float), ("--warmup-tuples", int), ("--alpha-init", float),
                      ("--reward-scale", float), ("--buffer-capacity", int), ("--updates-per-episode", int)):
        t.add_argument(flag, type=typ)

    e = sub.add_parser("evaluate", help="deterministic-policy rollouts over consecutive seeds")
    e.add_argument("--scenario", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--rollouts", type=int, default=15)
    e.add_argument("--seeds", type=int, default=1000, help="first seed; rollout k uses seeds + k")
    e.add_argument("--out")

    for sp in (g, s, t, e):
        _env_defaults(sp)
    return p


def _env_defaults(parser: argparse.ArgumentParser) -> None:
    for action in parser._actions:
        if not action.option_strings or action.dest == "help":
            continue
        raw = os.environ.get(ENV_PREFIX + action.dest.upper())
        if raw is None:
            continue
        try:
            value = action.type(raw) if action.type else raw
        except ValueError:
            raise UsageError(f"bad value for {ENV_PREFIX}{action.dest.upper()}: {raw!r}")
        if action.choices and value not in action.choices:
            raise UsageError(f"bad value for {ENV_PREFIX}{action.dest.upper()}: {raw!r}")
        action.default = value
        action.required = False


COMMANDS = {"gen-data": cmd_gen_data, "simulate": cmd_simulate, "train": cmd_train, "evaluate": cmd_evaluate}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:       # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    manifest = RunManifest(command=args.command, argv=argv, started_at=time.time(),
                           scenario=getattr(args, "scenario", None), seed=getattr(args, "seed", None),
                           controller=getattr(args, "controller", None),
                           out_dir=getattr(args, "out", None))
    t0 = time.perf_counter()
    try:
        code = COMMANDS[args.command](args, manifest)
    except UsageError as exc:
        print(f"busholding: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InputError as exc:
        print(f"busholding: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except GradientError as exc:
        print(f"busholding: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    manifest.wall_clock_s = time.perf_counter() - t0
    if manifest.out_dir:
        try:
            manifest.write(Path(manifest.out_dir))
        except OSError as exc:
            print(f"busholding: error: cannot write manifest: {exc}", file=sys.stderr)
            return EXIT_IO
    return code


if __name__ == "__main__":
    sys.exit(main())
