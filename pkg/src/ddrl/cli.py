"""Command line: ``ddrl run|eval|bench|inspect``.

Exit codes: 0 success, 1 other runtime failure, 2 configuration error, 3 worker crash.
"""
from __future__ import annotations

import argparse
import json
import sys

from .errors import ConfigInvalid, CorruptPayload, DDRLError, WorkerCrashed

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_CRASH = 0, 1, 2, 3


def _print_summary(summary: dict) -> None:
    width = max(len(k) for k in summary)
    for k in sorted(summary):
        v = summary[k]
        if isinstance(v, float):
            v = f"{v:.6g}"
        elif isinstance(v, dict):
            v = json.dumps(v, sort_keys=True)
        print(f"{k.ljust(width)}  {v}")


def _ratings_table(league) -> str:
    ratings = league.elo_ratings()
    lines = [f"{'player':<12} {'gen':>4} {'elo':>10}"]
    for (pid, gen), r in sorted(ratings.items(), key=lambda kv: -kv[1]):
        lines.append(f"{pid:<12} {gen:>4} {r:>10.2f}")
    return "\n".join(lines)


def cmd_run(args) -> int:
    from .runtime.config import load_config
    from .runtime.experiment import run_experiment

    cfg = load_config(args.config)
    result = run_experiment(cfg, args.out)
    _print_summary(result.summary)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .league import League

    league = League.load(args.league_file)
    league.evaluation_round(args.pairing, args.games, env_id=args.env, seed=args.seed)
    if not league.matches:
        print("no matches recorded")
        return EXIT_OK
    print(_ratings_table(league))
    if args.save:
        league.save(args.league_file)
    return EXIT_OK


def cmd_bench(args) -> int:
    from .runtime.bench import bench_topologies, format_table
    from .runtime.config import load_config_matrix

    rows = bench_topologies(load_config_matrix(args.matrix))
    print(format_table(rows))
    return EXIT_OK


def cmd_inspect(args) -> int:
    from .league import League

    league = League.load(args.league_file)
    for pid in sorted(league.players):
        rec = league.players[pid]
        live = rec.live.version if rec.live is not None else "-"
        print(f"player {pid} role={rec.role} generations={len(rec.generations)} live_version={live}")
    print(f"matches: {len(league.matches)}")
    rated = [m for m in league.matches if m.side_a[1] != 0 and m.side_b[1] != 0]
    if rated:
        print(_ratings_table(league))
        sides, mat = league.win_matrix()
        print("win matrix (row beats column):")
        labels = [f"{p}:{g}" for p, g in sides]
        print(" " * 10 + " ".join(f"{x:>8}" for x in labels))
        for lab, row in zip(labels, mat):
            print(f"{lab:>10}" + " ".join(f"{v:8.3f}" for v in row))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ddrl", description="distributed RL toolbox")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="train one configuration")
    r.add_argument("config")
    r.add_argument("--out", default=None, help="artifact directory (default: run.out_dir)")
    r.set_defaults(fn=cmd_run)
    e = sub.add_parser("eval", help="evaluation round over a saved league")
    e.add_argument("league_file")
    e.add_argument("--games", type=int, default=100)
    e.add_argument("--pairing", default="all_pairs", choices=["all_pairs"])
    e.add_argument("--env", default=None)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--save", action="store_true", help="write the new results back to the league file")
    e.set_defaults(fn=cmd_eval)
    b = sub.add_parser("bench", help="compare topologies from a config matrix")
    b.add_argument("matrix")
    b.set_defaults(fn=cmd_bench)
    i = sub.add_parser("inspect", help="print ratings and the win matrix of a league file")
    i.add_argument("league_file")
    i.set_defaults(fn=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except WorkerCrashed as exc:
        print(f"worker crashed: {exc}", file=sys.stderr)
        return EXIT_CRASH
    except (DDRLError, OSError, CorruptPayload) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
