"""
Command-line entry point: scene generation, policy data collection and training, and the
evaluation subcommands built on the harness.
"""
import argparse
import json
import logging
import os
import sys
from typing import List, Optional

from agent import AgentConfig, collect_snapshots
from config import HYPERPARAMETERS, SEARCH_MODES, PERCEPTION_MODES, RoomShuffleError, apply_preset, \
    build_run_config, get_log_level, preset_names
from harness import SWEEP_AXES, ablation, load_rows, run_batch, simulator_config, sweep, write_analysis
from run_store import get_best_runs, get_recent_runs
from search_policy import MapSnapshotDataset, save_policy, train_policy, write_snapshot_dataset
from simulator import generate_episode, save_episode

logger = logging.getLogger(__name__)


def _add_batch_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--episodes", type=int, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--perception", choices=PERCEPTION_MODES, default=None)
    parser.add_argument("--search", choices=SEARCH_MODES, default=None)
    parser.add_argument("--checkpoint", type=str, default=None)
    parser.add_argument("--confidence", type=float, default=None)
    parser.add_argument("--max-goals", type=int, default=None)
    parser.add_argument("--room-size", type=float, default=None)
    parser.add_argument("--object-count", type=int, default=None)
    parser.add_argument("--shuffle-count", type=int, default=None)
    parser.add_argument("--openness-shuffles", action="store_const", const=True, default=None,
                        help="let furniture be shuffled by flipping its openness")
    parser.add_argument("--jobs", type=int, default=None)
    parser.add_argument("--out", type=str, default="results")


def _config_fields(args: argparse.Namespace) -> dict:
    return {
        'episodes': args.episodes, 'seed': args.seed, 'perception': args.perception,
        'search': args.search, 'checkpoint': args.checkpoint, 'confidence': args.confidence,
        'max_goals': args.max_goals, 'room_size': args.room_size, 'object_count': args.object_count,
        'shuffle_count': args.shuffle_count, 'openness_shuffles': args.openness_shuffles,
        'jobs': args.jobs,
    }


def _parse_values(text: str) -> List[float]:
    values = [float(v) for v in text.split(',') if v.strip()]
    return [int(v) if v.is_integer() else v for v in values]


def _print_aggregates(aggregates: dict) -> None:
    for metric, stats in aggregates.items():
        print(f"  {metric:<22} {stats['mean']:8.2f} ± {stats['se']:.2f}")


def cmd_generate_scenes(args: argparse.Namespace) -> int:
    config = build_run_config(**_config_fields(args))
    os.makedirs(args.out, exist_ok=True)
    for index in range(config.episodes):
        spec = generate_episode(config.seed + index, simulator_config(config))
        save_episode(spec, os.path.join(args.out, f"episode_{index:05d}.jsonl"))
    print(f"Wrote {config.episodes} scene files to {args.out}")
    return 0


def cmd_collect_maps(args: argparse.Namespace) -> int:
    config = build_run_config(**{**_config_fields(args), 'search': 'uniform', 'checkpoint': None})
    agent_config = AgentConfig.from_run_config(config)
    size = 0
    for index in range(config.episodes):
        spec = generate_episode(config.seed + index, simulator_config(config))
        pairs = []
        collect_snapshots(spec, agent_config, args.every, lambda m, e: pairs.append((m, e)))
        size = write_snapshot_dataset(args.out, pairs, start_index=size)
        logger.info("episode %d: %d snapshots (dataset size %d)", spec.seed, len(pairs), size)
        if size >= args.max_snapshots:
            break
    print(f"Dataset {args.out} holds {size} snapshots")
    return 0


def cmd_train_policy(args: argparse.Namespace) -> int:
    dataset = MapSnapshotDataset(args.dataset)
    policy, history = train_policy(dataset, lr=args.lr, batch_size=args.batch_size,
                                   epochs=args.epochs, seed=args.seed)
    save_policy(policy, args.out)
    print(f"Trained on {len(dataset)} snapshots: loss {history['initial_loss']:.4f} -> {history['final_loss']:.4f}")
    print(f"Checkpoint written to {args.out}")
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    fields = _config_fields(args)
    config = apply_preset(args.preset, **fields) if args.preset else build_run_config(**fields)
    report = run_batch(config, args.out)
    print(f"{len(report.rows)} episodes -> {args.out}")
    _print_aggregates(report.aggregates)
    print(f"  failures: {report.failures}")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    base = build_run_config(**_config_fields(args))
    _, table = sweep(args.axis, _parse_values(args.values), base, args.out)
    print(table.to_string(index=False))
    return 0


def cmd_ablation(args: argparse.Namespace) -> int:
    base = build_run_config(**{**_config_fields(args), 'search': 'uniform'})
    table = ablation(base, args.out, args.presets.split(',') if args.presets else None)
    print(table.to_string(index=False))
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    rows = load_rows(os.path.join(args.out, 'episodes.jsonl'))
    analysis = write_analysis(rows, args.out, args.bins)
    print(f"{len(rows)} episodes in {args.out}")
    _print_aggregates(analysis['aggregates'])
    print(f"  failures: {json.dumps(analysis['failures'])}")
    for entry in analysis['precision_recall']:
        precision = 'n/a' if entry['precision'] is None else f"{entry['precision']:.2f}"
        recall = 'n/a' if entry['recall'] is None else f"{entry['recall']:.2f}"
        print(f"  {entry['class']:<16} precision {precision:>5}  recall {recall:>5}")
    print("Recent runs:")
    for run in get_recent_runs(args.limit, out_dir=args.out):
        print(f"  #{run['id']} {run['timestamp']} {run['command']} episodes={run['episodes']} "
              f"fixed_strict={run['fixed_strict']}")
    best = get_best_runs('fixed_strict', 1, out_dir=args.out)
    if best:
        print(f"Best run: #{best[0]['id']} fixed_strict={best[0]['fixed_strict']:.2f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="roomshuffle", description="Two-phase visual room rearrangement")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-scenes", help="write seeded scene files")
    _add_batch_args(p)
    p.set_defaults(func=cmd_generate_scenes)

    p = sub.add_parser("collect-maps", help="collect map snapshots for policy training")
    _add_batch_args(p)
    p.add_argument("--every", type=int, default=HYPERPARAMETERS['snapshot_every'])
    p.add_argument("--max-snapshots", type=int, default=HYPERPARAMETERS['dataset_size'])
    p.set_defaults(func=cmd_collect_maps)

    p = sub.add_parser("train-policy", help="fit the search policy to collected snapshots")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_policy)

    p = sub.add_parser("run", help="run a batch of episodes")
    _add_batch_args(p)
    p.add_argument("--preset", choices=preset_names(), default=None)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="paired sweep over one axis")
    _add_batch_args(p)
    p.add_argument("--axis", choices=list(SWEEP_AXES), required=True)
    p.add_argument("--values", required=True, help="comma-separated axis values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablation", help="run every ablation preset on shared seeds")
    _add_batch_args(p)
    p.add_argument("--presets", default=None, help="comma-separated subset of presets")
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("report", help="summarize a finished batch directory")
    p.add_argument("--out", default="results")
    p.add_argument("--bins", type=int, default=4)
    p.add_argument("--limit", type=int, default=5)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=(args.log_level or get_log_level()).upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (RoomShuffleError, OSError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
