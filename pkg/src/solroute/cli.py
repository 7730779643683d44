"""Command line entry point.

Exit codes: 0 success, 1 task validation failure, 2 operational error
(missing files, backend faults, replay misses), 64 bad usage.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Sequence

from .bench import ABLATABLE
from .config import EngineConfig, load_engine_config, resolve_config_path
from .core import load_task_spec, validate_task_spec
from .errors import ConfigError, EngineError, TaskInvalidError
from .pipeline import (
    run_ablate,
    run_bench,
    run_replay,
    run_report,
    run_route,
    run_trace,
)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_ENGINE = 2
EXIT_USAGE = 64


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad flags; the operator contract reserves 2 for
    engine errors, so usage problems are remapped to 64."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def _load_config(args: argparse.Namespace) -> EngineConfig:
    return load_engine_config(resolve_config_path(args.config))


def _print_pool_summary(result) -> None:
    print(f"run directory: {result.paths.root}")
    print(f"pool: {len(result.pool)} solution(s) -> {result.paths.pool}")
    for solution in result.pool.solutions:
        models = ", ".join(solution.declared_models) or "none"
        print(f"  {solution.id} (models: {models})")
    kinds: dict[str, int] = {}
    for outcome in result.outcomes:
        kinds[outcome.kind.value] = kinds.get(outcome.kind.value, 0) + 1
    print("sessions: " + ", ".join(f"{k}: {v}" for k, v in sorted(kinds.items())))


# ---------------------------------------------------------------------------
# subcommand handlers
# ---------------------------------------------------------------------------


def _cmd_validate(args: argparse.Namespace) -> int:
    task_path = Path(args.task)
    if not task_path.is_file():
        raise ConfigError(f"task file not found: {task_path}")
    task = load_task_spec(task_path)
    violations = validate_task_spec(task)
    if violations:
        for v in violations:
            where = f" [{v.instance_id}]" if v.instance_id else ""
            print(f"{v.code}{where}: {v.message}", file=sys.stderr)
        print(f"{len(violations)} violation(s) in {task_path}", file=sys.stderr)
        return EXIT_VALIDATION
    print(
        f"OK: task {task.task_id} "
        f"({len(task.instances)} instances, {task.example_count} examples)"
    )
    return EXIT_OK


def _cmd_route(args: argparse.Namespace) -> int:
    config = _load_config(args)
    result = run_route(
        config,
        args.task,
        out=args.out,
        budget=args.budget,
        ablate=tuple(args.ablate or ()),
    )
    _print_pool_summary(result)
    return EXIT_OK


def _cmd_replay(args: argparse.Namespace) -> int:
    config = _load_config(args)
    result = run_replay(
        config, args.task, args.transcript, out=args.out, budget=args.budget
    )
    _print_pool_summary(result)
    return EXIT_OK


def _cmd_bench(args: argparse.Namespace) -> int:
    config = _load_config(args)
    result = run_bench(
        config,
        args.task,
        args.pool,
        metric=args.metric,
        out=args.out,
        eval_count=args.eval_count,
        repeats=args.repeats,
        seed=args.seed,
    )
    suffix = " (fallback)" if result.choice.fallback else ""
    print(
        f"metric: {result.choice.metric_name} "
        f"chosen by {result.choice.chosen_by.value}{suffix}"
    )
    print(f"curve: {result.paths.curve_csv}")
    print(result.paths.curve_csv.read_text(encoding="utf-8"), end="")
    return EXIT_OK


def _cmd_ablate(args: argparse.Namespace) -> int:
    config = _load_config(args)
    result = run_ablate(
        config,
        args.task,
        toggles=tuple(args.toggles or ()),
        out=args.out,
        budget=args.budget,
        runs=args.runs,
        metric=args.metric,
    )
    print(f"ablation: {result.paths.ablation_csv}")
    print(result.paths.ablation_csv.read_text(encoding="utf-8"), end="")
    return EXIT_OK


def _cmd_trace(args: argparse.Namespace) -> int:
    config = _load_config(args)
    result = run_trace(config, args.task, args.runs_dir, metric=args.metric)
    print(f"trace: {result.trace_path}")
    for session_id, iteration, p in result.rows:
        print(f"  {session_id} iteration {iteration}: p={p:.6f}")
    return EXIT_OK


def _cmd_report(args: argparse.Namespace) -> int:
    print(run_report(args.run_dir), end="")
    return EXIT_OK


def _cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service import create_app

    config = _load_config(args)
    uvicorn.run(create_app(config), host=args.host, port=args.port)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser assembly
# ---------------------------------------------------------------------------


def _add_config_flag(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--config",
        default=None,
        help="engine config JSON (falls back to the ENGINE_CONFIG env var)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="solroute",
        description="Route tasks to reusable tool-using solutions and benchmark them.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("validate", help="check a task file against all invariants")
    p.add_argument("task")
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("route", help="generate a solution pool for a task")
    p.add_argument("task")
    p.add_argument("--budget", type=_positive_int, default=None)
    p.add_argument(
        "--ablate",
        action="append",
        choices=ABLATABLE,
        help="drop a committee role or toggle for this run (repeatable)",
    )
    p.add_argument("--out", default=None, help="run directory (default: timestamped)")
    _add_config_flag(p)
    p.set_defaults(func=_cmd_route)

    p = sub.add_parser("bench", help="score a solution pool and emit the cost curve")
    p.add_argument("task")
    p.add_argument("pool")
    p.add_argument("--metric", default=None)
    p.add_argument("--eval-count", type=_positive_int, default=None)
    p.add_argument("--repeats", type=_positive_int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    _add_config_flag(p)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("ablate", help="route under toggled-off roles and compare")
    p.add_argument("task")
    p.add_argument(
        "--toggles",
        nargs="*",
        choices=ABLATABLE,
        help="roles/toggles to knock out (default: all)",
    )
    p.add_argument("--budget", type=_positive_int, default=None)
    p.add_argument("--runs", type=_positive_int, default=1)
    p.add_argument("--metric", default=None)
    p.add_argument("--out", default=None)
    _add_config_flag(p)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("trace", help="re-score each iteration of a routed run")
    p.add_argument("task")
    p.add_argument("--runs-dir", required=True)
    p.add_argument("--metric", default=None)
    _add_config_flag(p)
    p.set_defaults(func=_cmd_trace)

    p = sub.add_parser("replay", help="route again from a recorded transcript")
    p.add_argument("task")
    p.add_argument("--transcript", required=True)
    p.add_argument("--budget", type=_positive_int, default=None)
    p.add_argument("--out", default=None)
    _add_config_flag(p)
    p.set_defaults(func=_cmd_replay)

    p = sub.add_parser("report", help="summarize a run directory")
    p.add_argument("run_dir")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    _add_config_flag(p)
    p.set_defaults(func=_cmd_serve)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TaskInvalidError as exc:
        for v in exc.violations:
            where = f" [{v.instance_id}]" if v.instance_id else ""
            print(f"{v.code}{where}: {v.message}", file=sys.stderr)
        print(f"error ({exc.code}): {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except EngineError as exc:
        print(f"error ({exc.code}): {exc}", file=sys.stderr)
        return EXIT_ENGINE
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
