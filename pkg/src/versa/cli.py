"""Command-line surface.

Subcommands: train, eval, toy, sweep, gradcheck, export-tasks.
Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .autodiff import check_registered_op_gradients
from .distributions import GaussianPrior
from .errors import ConfigError, ContractError, DomainError, OptimizationError
from .objectives import evaluate, nonamortized_vi_fit
from .rng import RandomStream
from .tasks import export_episodes_jsonl
from .training import (
    TrainConfig,
    episode_sampler,
    load_checkpoint,
    run_toy_experiment,
    run_versatility_sweep,
    train,
)


def _cmd_train(args) -> int:
    config = TrainConfig.from_json(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if overrides:
        config = replace(config, **overrides)
        config.validate()
    result = train(config)
    print(f"final checkpoint: {result.checkpoint_path}")
    if result.best_checkpoint_path:
        print(f"best checkpoint:  {result.best_checkpoint_path}")
    print(f"metrics:          {result.metrics_path}")
    if result.final_loss is not None:
        print(f"final loss:       {result.final_loss:.6f}")
    if result.best_val_nll is not None:
        print(f"best val NLL:     {result.best_val_nll:.6f}")
    return 0


def _interval(mean, half_width) -> str:
    if half_width is None:
        return f"{mean:.4f} (interval not available: single episode)"
    return f"{mean:.4f} +- {half_width:.4f}"


def _cmd_eval(args) -> int:
    config, model, params, strategy = load_checkpoint(args.checkpoint)
    way = args.way if args.way is not None else config.way
    shot = args.shot if args.shot is not None else config.shot
    sampler = episode_sampler(config, way=way, shot=shot)
    episodes = [
        sampler(RandomStream(args.seed, "eval", i), task_id=i) for i in range(args.episodes)
    ]
    if args.objective == "nonamortized-vi":
        prior = GaussianPrior(0.0, 1.0)

        def adapt(g, leaves, mdl, episode):
            fitted, _ = nonamortized_vi_fit(
                mdl,
                params,
                episode,
                prior,
                steps=args.fit_steps,
                step_size=args.fit_step_size,
                n_samples=config.l_train,
                stream=RandomStream(args.seed, "fit", episode.task_id),
            )
            return fitted.as_task_posterior(g)

    else:
        adapt = strategy.adapt if strategy is not None else None
    metrics = evaluate(
        model, params, episodes, config.l_test, RandomStream(args.seed, "eval-run"), adapt=adapt
    )
    print(f"episodes: {metrics['episodes']}")
    print(f"NLL:      {_interval(metrics['nll_mean'], metrics['nll_half_width'])}")
    if "accuracy_mean" in metrics:
        print(f"accuracy: {_interval(metrics['accuracy_mean'], metrics['accuracy_half_width'])}")
    if "mse_mean" in metrics:
        print(f"MSE:      {metrics['mse_mean']:.6f} (context-mean baseline {metrics['baseline_mse_mean']:.6f})")
    return 0


def _cmd_toy(args) -> int:
    config = TrainConfig(
        dataset="toy",
        objective="mlpip",
        shot=args.shots,
        targets_per_class=15,
        l_train=10,
        l_test=10,
        tasks_per_batch=16,
        iterations=args.iterations,
        learning_rate=args.learning_rate,
        seed=args.seed,
        out_dir=args.out,
    )
    csv_path = Path(args.out) / "toy_posteriors.csv"
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    result = run_toy_experiment(config, csv_path=csv_path)
    print(f"trained amortization on {args.shots}-shot scalar tasks")
    print(f"mean KL(true || q) over 100 fresh tasks: {result.mean_kl:.6f}")
    print(f"posterior pairs written to {result.csv_path}")
    return 0


def _cmd_sweep(args) -> int:
    ways = [int(w) for w in args.ways.split(",")]
    shots = [int(s) for s in args.shots.split(",")]
    rows = run_versatility_sweep(
        args.checkpoint, ways, shots, episodes_per_cell=args.episodes, seed=args.seed
    )
    print("way,shot,accuracy,nll,optimizer_steps,amortization_parameter_count")
    for row in rows:
        print(
            f"{row['way']},{row['shot']},{row['accuracy']:.4f},{row['nll']:.4f},"
            f"{row['optimizer_steps']},{row['amortization_parameter_count']}"
        )
    return 0


def _cmd_gradcheck(args) -> int:
    results = check_registered_op_gradients(RandomStream(args.seed, "gradcheck"), instances=10)
    worst = 0.0
    for name in sorted(results):
        print(f"{name:<24} max relative error {results[name]:.3e}")
        worst = max(worst, results[name])
    if worst >= 1e-4:
        print(f"FAIL: worst error {worst:.3e} >= 1e-4")
        return 3
    print(f"OK: worst error {worst:.3e} < 1e-4")
    return 0


def _cmd_export_tasks(args) -> int:
    config = TrainConfig(dataset=args.dataset, way=args.way, shot=args.shot)
    config.validate()
    sampler = episode_sampler(config)
    episodes = [
        sampler(RandomStream(args.seed, "export", i), task_id=i) for i in range(args.count)
    ]
    export_episodes_jsonl(episodes, args.out)
    print(f"wrote {len(episodes)} episodes to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="versa",
        description="Amortized task-posterior inference for few-shot learning",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on seeded episodes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--way", type=int, default=None)
    p.add_argument("--shot", type=int, default=None)
    p.add_argument("--episodes", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument(
        "--objective",
        default="checkpoint",
        choices=["checkpoint", "nonamortized-vi"],
        help="'nonamortized-vi' fits a per-task posterior at evaluation time",
    )
    p.add_argument("--fit-steps", type=int, default=500)
    p.add_argument("--fit-step-size", type=float, default=0.05)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("toy", help="scalar-task posterior recovery experiment")
    p.add_argument("--shots", type=int, default=5, choices=[5, 10])
    p.add_argument("--iterations", type=int, default=5000)
    p.add_argument("--learning-rate", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs/toy")
    p.set_defaults(fn=_cmd_toy)

    p = sub.add_parser("sweep", help="evaluate one checkpoint across way/shot cells")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ways", default="2,5,10,20")
    p.add_argument("--shots", default="1,5,10")
    p.add_argument("--episodes", type=int, default=200)
    p.add_argument("--seed", type=int, default=1234)
    p.set_defaults(fn=_cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("export-tasks", help="dump seeded episodes as JSON lines")
    p.add_argument("--dataset", required=True, choices=["toy", "cluster", "glyph", "views"])
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--way", type=int, default=5)
    p.add_argument("--shot", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="tasks.jsonl")
    p.set_defaults(fn=_cmd_export_tasks)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ContractError, FileNotFoundError, json.JSONDecodeError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return 2
    except (DomainError, OptimizationError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
