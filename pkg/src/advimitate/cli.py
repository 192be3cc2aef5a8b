"""Command line: ``advimitate {demos,train,eval,inspect,ablate}``.

Exit codes: 0 ok, 2 usage or configuration error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import autodiff as ad
from .autodiff import UsageError
from .config import ConfigError, TrainConfig, apply_override, from_dict, load_tree
from .demos import DEMO_MAGIC, expert_for, generate_demos, load_demos, save_demos
from .envs import make_env
from .trainer import TrainingAborted, evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_INTERRUPTED = 0, 2, 3, 130

ABLATION_EPSILONS = (0.05, 0.10, 0.15, 0.20, 0.25, 0.30)
ABLATION_LAMBDAS = (0.94, 0.95, 0.96, 0.97, 0.98, 0.99)


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="YAML config file (schema in README)")
    p.add_argument("--seed", type=int, help="seed for this command")
    p.add_argument("--out", help="output path (file or directory, per command)")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-path config override, e.g. ppo.epsilon=0.2 (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advimitate",
                                     description="Adversarial imitation learning with PPO.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("demos", help="generate expert demonstrations")
    _common(p)

    p = sub.add_parser("train", help="run the training loop")
    _common(p)

    p = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", help="checkpoint file (default: the config's output)")
    p.add_argument("--episodes", type=int, default=None, help="evaluation episodes")
    p.add_argument("--demos", help="demo file for the occupancy distance")

    p = sub.add_parser("inspect", help="summarise a config, checkpoint or demo file")
    p.add_argument("path", nargs="?", help="checkpoint, demo or config file")
    _common(p)

    p = sub.add_parser("ablate", help="sweep ppo.epsilon x gae.lambda_g, write a results table")
    _common(p)
    p.add_argument("--epsilons", type=float, nargs="+", default=list(ABLATION_EPSILONS))
    p.add_argument("--lambdas", type=float, nargs="+", default=list(ABLATION_LAMBDAS))
    p.add_argument("--episodes", type=int, default=None, help="evaluation episodes per cell")
    return parser


def resolve_config(args, seed_key: str | None = None) -> TrainConfig:
    tree = load_tree(args.config) if args.config else {}
    for spec in args.override:
        apply_override(tree, spec)
    if args.seed is not None and seed_key:
        apply_override(tree, f"{seed_key}={args.seed}")
    return from_dict(tree)


def _print_json(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_demos(args) -> int:
    cfg = resolve_config(args, "demos.seed")
    env = make_env(cfg.env.name, **cfg.env.params)
    out = args.out or cfg.demos.path
    demos = generate_demos(expert_for(env, cfg.demos.epsilon), env, cfg.demos.n_episodes,
                           cfg.demos.seed)
    parent = os.path.dirname(out)
    if parent:
        os.makedirs(parent, exist_ok=True)
    save_demos(demos, out)
    print(f"wrote {len(demos.trajectories)} demos to {out} (mean return {demos.mean_return:.4f})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args, "train.seed")
    if args.out:
        cfg.output.dir = args.out
    res = train(cfg)
    last = res.rows[-1]
    print(f"trained {last.iteration} iterations; final mean_episode_return "
          f"{last.mean_episode_return:.4f}; metrics {res.metrics}; checkpoint {res.checkpoint}")
    return EXIT_OK


def _eval_summary(result: dict) -> dict:
    return {k: v for k, v in result.items() if k != "trajectories"}


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    ckpt = args.checkpoint or os.path.join(cfg.output.dir, cfg.output.checkpoint)
    if not args.config:
        # fall back to the environment the checkpoint was trained on
        _, meta = ad.load_arrays(ckpt)
        cfg = from_dict(meta.get("config", {}))
    env = make_env(cfg.env.name, **cfg.env.params)
    demos = None
    demo_path = args.demos or (cfg.demos.path if os.path.exists(cfg.demos.path) else None)
    if demo_path:
        demos = load_demos(demo_path, env)
    n = args.episodes if args.episodes is not None else cfg.train.eval_episodes
    summary = _eval_summary(evaluate(ckpt, env, n, args.seed or 0, demos))
    summary["checkpoint"] = ckpt
    _print_json(summary)
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
    return EXIT_OK


def cmd_inspect(args) -> int:
    path = args.path
    if path is None:
        _print_json(resolve_config(args).to_dict())
        return EXIT_OK
    with open(path, "rb") as fh:
        head = fh.read(len(DEMO_MAGIC))
    if head.startswith(ad.CKPT_MAGIC):
        arrays, meta = ad.load_arrays(path)
        _print_json({"kind": "checkpoint", "meta": meta,
                     "arrays": {k: list(v.shape) for k, v in sorted(arrays.items())},
                     "n_parameters": int(sum(v.size for v in arrays.values()))})
    elif head == DEMO_MAGIC:
        d = load_demos(path)
        lengths = [len(t) for t in d.trajectories]
        _print_json({"kind": "demos", "env_fingerprint": d.env_fingerprint,
                     "n_trajectories": len(d.trajectories), "mean_return": d.mean_return,
                     "state_dim": d.state_dim, "n_actions": d.n_actions,
                     "mean_length": float(np.mean(lengths)),
                     "terminal": sum(t.terminal for t in d.trajectories)})
    else:
        args.config = path
        _print_json({"kind": "config", "config": resolve_config(args).to_dict()})
    return EXIT_OK


def ablation_table(results, epsilons, lambdas) -> str:
    """Markdown table: rows epsilon, columns lambda_g, cells 'mean ± std'."""
    lines = ["| epsilon \\ lambda_g | " + " | ".join(f"{lam:g}" for lam in lambdas) + " |",
             "|---|" + "---|" * len(lambdas)]
    for eps in epsilons:
        cells = [f"{results[(eps, lam)][0]:.3f} ± {results[(eps, lam)][1]:.3f}" for lam in lambdas]
        lines.append(f"| {eps:g} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def cmd_ablate(args) -> int:
    base = load_tree(args.config) if args.config else {}
    for spec in args.override:
        apply_override(base, spec)
    if args.seed is not None:
        apply_override(base, f"train.seed={args.seed}")
    cfg0 = from_dict(base)  # validate before producing anything
    out_dir = args.out or os.path.join(cfg0.output.dir, "ablation")
    env = make_env(cfg0.env.name, **cfg0.env.params)
    if os.path.exists(cfg0.demos.path):
        demos = load_demos(cfg0.demos.path, env)
    else:
        demos = generate_demos(expert_for(env, cfg0.demos.epsilon), env, cfg0.demos.n_episodes,
                               cfg0.demos.seed)
    n_eval = args.episodes if args.episodes is not None else cfg0.train.eval_episodes
    results = {}
    for eps in args.epsilons:
        for lam in args.lambdas:
            tree = json.loads(json.dumps(base))
            apply_override(tree, f"ppo.epsilon={eps}")
            apply_override(tree, f"gae.lambda_g={lam}")
            cfg = from_dict(tree)
            cell_dir = os.path.join(out_dir, f"eps{eps:g}_lam{lam:g}")
            res = train(cfg, demos=demos, out_dir=cell_dir)
            ev = evaluate(res.policy, env, n_eval, cfg.train.seed, demos)
            results[(eps, lam)] = (ev["mean_return"], ev["std_return"])
            print(f"epsilon={eps:g} lambda_g={lam:g}: {ev['mean_return']:.4f} ± "
                  f"{ev['std_return']:.4f}", flush=True)
    table = ablation_table(results, args.epsilons, args.lambdas)
    with open(os.path.join(out_dir, "ablation.md"), "w") as fh:
        fh.write(table)
    with open(os.path.join(out_dir, "ablation.csv"), "w") as fh:
        fh.write("epsilon,lambda_g,mean_return,std_return\n")
        for (eps, lam), (m, s) in results.items():
            fh.write(f"{eps!r},{lam!r},{m!r},{s!r}\n")
    print(table, end="")
    return EXIT_OK


COMMANDS = {"demos": cmd_demos, "train": cmd_train, "eval": cmd_eval, "inspect": cmd_inspect,
            "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except TrainingAborted as exc:
        print(f"advimitate: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ad.NumericalError as exc:
        print(f"advimitate: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, UsageError, ad.FormatError, ad.CompatibilityError, OSError) as exc:
        print(f"advimitate: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        print("advimitate: interrupted; checkpoint flushed", file=sys.stderr)
        return EXIT_INTERRUPTED


if __name__ == "__main__":
    sys.exit(main())
