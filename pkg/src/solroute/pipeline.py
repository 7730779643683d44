"""End-to-end pipelines behind the CLI and service verbs.

Each run gets its own directory under the configured runs root:

    runs/<task_id>/<timestamp>/
        pool.json                  admitted solutions
        transcripts/gateway.jsonl  every model exchange (replayable)
        sessions/<session_id>.json full per-session iteration records
        ledger.jsonl               token usage and cost, one entry per call
        curve.csv / curve.svg      bench output
        ablation.csv               ablate output
        iteration_trace.csv        trace output (written into the routed run)
        metric.json                which metric scored the run and who chose it

pool.json and the gateway transcript are deterministic for deterministic
backends; session records contain real wall times and are not.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

from pathlib import Path
from typing import Sequence

from .bench import (
    ABLATABLE,
    AblationRow,
    BenchConfig,
    CurvePoint,
    ablation_run,
    aggregate_curve,
    benchmark_pool,
    config_without,
    iteration_trace_report,
    sample_eval_instances,
    write_ablation_csv,
    write_curve_csv,
    write_curve_svg,
    write_trace_csv,
)
from .config import EngineConfig, RuntimeHandle
from .core import (
    SolutionPool,
    TaskSpec,
    load_pool,
    load_task_spec,
    save_pool,
    validate_task_spec,
)
from .engine import (
    IterationRecord,
    OutcomeKind,
    SessionConfig,
    SessionOutcome,
    generate_pool,
    outcome_to_dict,
)
from .errors import ConfigError, TaskInvalidError, TranscriptMissingError
from .gateway import Backend
from .metrics import MetricChoice, route_metric

__all__ = [
    "RunPaths",
    "RouteResult",
    "BenchResult",
    "AblateResult",
    "TraceResult",
    "run_route",
    "run_replay",
    "run_bench",
    "run_ablate",
    "run_trace",
    "run_report",
    "load_valid_task",
]


# ---------------------------------------------------------------------------
# run directory layout
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunPaths:
    root: Path

    @property
    def pool(self) -> Path:
        return self.root / "pool.json"

    @property
    def transcripts_dir(self) -> Path:
        return self.root / "transcripts"

    @property
    def transcript(self) -> Path:
        return self.transcripts_dir / "gateway.jsonl"

    @property
    def sessions_dir(self) -> Path:
        return self.root / "sessions"

    @property
    def ledger(self) -> Path:
        return self.root / "ledger.jsonl"

    @property
    def curve_csv(self) -> Path:
        return self.root / "curve.csv"

    @property
    def curve_svg(self) -> Path:
        return self.root / "curve.svg"

    @property
    def ablation_csv(self) -> Path:
        return self.root / "ablation.csv"

    @property
    def trace_csv(self) -> Path:
        return self.root / "iteration_trace.csv"

    @property
    def metric_file(self) -> Path:
        return self.root / "metric.json"

    def prepare(self) -> "RunPaths":
        self.root.mkdir(parents=True, exist_ok=True)
        self.transcripts_dir.mkdir(exist_ok=True)
        self.sessions_dir.mkdir(exist_ok=True)
        return self


def allocate_run_dir(
    runs_root: Path, task_id: str, out: str | Path | None = None
) -> Path:
    """Fresh run directory; an explicit ``out`` wins over the timestamp
    scheme. Same-second collisions get a numeric suffix."""
    if out is not None:
        return Path(out)
    stamp = time.strftime("%Y%m%dT%H%M%SZ", time.gmtime())
    candidate = runs_root / task_id / stamp
    bump = 1
    while candidate.exists():
        bump += 1
        candidate = runs_root / task_id / f"{stamp}-{bump}"
    return candidate


def load_valid_task(task_path: str | Path) -> TaskSpec:
    task_path = Path(task_path)
    if not task_path.is_file():
        raise ConfigError(f"task file not found: {task_path}")
    task = load_task_spec(task_path)
    violations = validate_task_spec(task)
    if violations:
        summary = "; ".join(f"{v.code}: {v.message}" for v in violations[:5])
        raise TaskInvalidError(
            f"task {task.task_id} failed validation ({len(violations)} violations): {summary}",
            violations=tuple(violations),
        )
    return task


def _session_config(config: EngineConfig, ablate: Sequence[str]) -> SessionConfig:
    unknown = [name for name in ablate if name not in ABLATABLE]
    if unknown:
        raise ConfigError(f"unknown ablation target(s): {', '.join(unknown)}")
    return config_without(ablate, config.session) if ablate else config.session


def _write_outcome(paths: RunPaths, outcome: SessionOutcome) -> None:
    record = outcome_to_dict(outcome)
    target = paths.sessions_dir / f"{outcome.session_id}.json"
    target.write_text(
        json.dumps(record, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )


# ---------------------------------------------------------------------------
# route / replay
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RouteResult:
    paths: RunPaths
    pool: SolutionPool
    outcomes: tuple[SessionOutcome, ...]


def run_route(
    config: EngineConfig,
    task_path: str | Path,
    out: str | Path | None = None,
    budget: int | None = None,
    ablate: Sequence[str] = (),
    backend_override: Backend | None = None,
) -> RouteResult:
    task = load_valid_task(task_path)
    budget = budget if budget is not None else config.budget
    session_cfg = _session_config(config, ablate)
    paths = RunPaths(allocate_run_dir(config.runs_root, task.task_id, out)).prepare()

    outcomes: list[SessionOutcome] = []

    def collect(outcome: SessionOutcome) -> None:
        outcomes.append(outcome)
        _write_outcome(paths, outcome)

    with RuntimeHandle(
        config, record_path=paths.transcript, backend_override=backend_override
    ) as handle:
        handle.gateway.write_meta(
            task_id=task.task_id, budget=budget, seed=config.seed
        )
        pool = generate_pool(
            task,
            handle.cards,
            handle.runtime,
            config=session_cfg,
            budget=budget,
            on_outcome=collect,
        )
        save_pool(pool, paths.pool)
        handle.ledger.write_jsonl(paths.ledger)

    return RouteResult(paths=paths, pool=pool, outcomes=tuple(outcomes))


def run_replay(
    config: EngineConfig,
    task_path: str | Path,
    transcript: str | Path,
    out: str | Path | None = None,
    budget: int | None = None,
) -> RouteResult:
    """Route again with every model exchange served from a recorded
    transcript. Novel requests are a hard error, so a green replay certifies
    the run is fully captured."""
    from .gateway import ReplayBackend

    transcript = Path(transcript)
    if not transcript.is_file():
        raise ConfigError(f"transcript not found: {transcript}")
    return run_route(
        config,
        task_path,
        out=out,
        budget=budget,
        backend_override=ReplayBackend(transcript),
    )


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BenchResult:
    paths: RunPaths
    points: tuple[CurvePoint, ...]
    choice: MetricChoice


def _bench_config(
    config: EngineConfig,
    eval_count: int | None,
    repeats: int | None,
    seed: int | None,
) -> BenchConfig:
    return BenchConfig(
        eval_count=eval_count if eval_count is not None else config.eval_count,
        repeats=repeats if repeats is not None else config.repeats,
        seed=seed if seed is not None else config.seed,
    )


def _choose_metric(
    task: TaskSpec, handle: RuntimeHandle, user_choice: str | None
) -> MetricChoice:
    return route_metric(
        task,
        handle.agents,
        handle.gateway,
        registry=handle.registry,
        user_choice=user_choice,
    )


def _write_metric_choice(paths: RunPaths, choice: MetricChoice) -> None:
    paths.metric_file.write_text(
        json.dumps(
            {
                "metric_name": choice.metric_name,
                "chosen_by": choice.chosen_by.value,
                "fallback": choice.fallback,
            },
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )


def run_bench(
    config: EngineConfig,
    task_path: str | Path,
    pool_path: str | Path,
    metric: str | None = None,
    out: str | Path | None = None,
    eval_count: int | None = None,
    repeats: int | None = None,
    seed: int | None = None,
) -> BenchResult:
    task = load_valid_task(task_path)
    pool_path = Path(pool_path)
    if not pool_path.is_file():
        raise ConfigError(f"pool file not found: {pool_path}")
    pool = load_pool(pool_path)
    bench_cfg = _bench_config(config, eval_count, repeats, seed)
    paths = RunPaths(allocate_run_dir(config.runs_root, task.task_id, out)).prepare()

    with RuntimeHandle(config, record_path=paths.transcript) as handle:
        handle.gateway.write_meta(
            task_id=task.task_id, seed=bench_cfg.seed, repeats=bench_cfg.repeats
        )
        choice = _choose_metric(task, handle, metric or config.metric)
        _write_metric_choice(paths, choice)
        records = benchmark_pool(
            task,
            pool,
            choice.metric_name,
            handle.executor,
            ledger=handle.ledger,
            registry=handle.registry,
            config=bench_cfg,
        )
        sampled = sample_eval_instances(task, bench_cfg.eval_count, bench_cfg.seed)
        points = aggregate_curve(records, len(sampled), bench_cfg.repeats)
        write_curve_csv(points, paths.curve_csv)
        write_curve_svg(points, paths.curve_svg)
        handle.ledger.write_jsonl(paths.ledger)

    return BenchResult(paths=paths, points=tuple(points), choice=choice)


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AblateResult:
    paths: RunPaths
    rows: tuple[AblationRow, ...]


def run_ablate(
    config: EngineConfig,
    task_path: str | Path,
    toggles: Sequence[str] = (),
    out: str | Path | None = None,
    budget: int | None = None,
    runs: int = 1,
    metric: str | None = None,
) -> AblateResult:
    task = load_valid_task(task_path)
    toggles = tuple(toggles) or ABLATABLE
    unknown = [name for name in toggles if name not in ABLATABLE]
    if unknown:
        raise ConfigError(f"unknown ablation target(s): {', '.join(unknown)}")
    paths = RunPaths(allocate_run_dir(config.runs_root, task.task_id, out)).prepare()

    variants: dict[str, SessionConfig] = {"full": config.session}
    for name in toggles:
        variants[f"no_{name}"] = config_without((name,), config.session)

    with RuntimeHandle(config, record_path=paths.transcript) as handle:
        handle.gateway.write_meta(
            task_id=task.task_id,
            budget=budget if budget is not None else config.budget,
            seed=config.seed,
        )
        choice = _choose_metric(task, handle, metric or config.metric)
        _write_metric_choice(paths, choice)
        rows = ablation_run(
            task,
            handle.cards,
            handle.runtime,
            choice.metric_name,
            variants,
            budget=budget if budget is not None else config.budget,
            bench_config=_bench_config(config, None, None, None),
            runs=runs,
            ledger=handle.ledger,
            registry=handle.registry,
        )
        write_ablation_csv(rows, paths.ablation_csv)
        handle.ledger.write_jsonl(paths.ledger)

    return AblateResult(paths=paths, rows=tuple(rows))


# ---------------------------------------------------------------------------
# trace
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TraceResult:
    trace_path: Path
    rows: tuple[tuple[str, int, float], ...]


def _outcome_from_dict(data: dict) -> SessionOutcome:
    iterations = tuple(
        IterationRecord(
            index=int(item["index"]),
            analysis=item.get("analysis", ""),
            thought=item.get("thought", ""),
            action_code=item.get("action_code", ""),
            malformed_header=item.get("malformed_header"),
            accepted=bool(item.get("accepted", False)),
        )
        for item in data.get("iterations", [])
    )
    return SessionOutcome(
        kind=OutcomeKind(data["kind"]),
        session_id=data["session_id"],
        duplicate_of=data.get("duplicate_of"),
        failure_cause=data.get("failure_cause"),
        iterations=iterations,
    )


def load_session_outcomes(runs_dir: str | Path) -> list[SessionOutcome]:
    """Rebuild the per-session iteration records a route run wrote. Only the
    fields the trace needs survive the round trip; execution reports do not."""
    sessions = Path(runs_dir) / "sessions"
    files = sorted(sessions.glob("*.json")) if sessions.is_dir() else []
    if not files:
        raise TranscriptMissingError(f"no session records under {sessions}")
    outcomes = []
    for path in files:
        with open(path, encoding="utf-8") as fh:
            outcomes.append(_outcome_from_dict(json.load(fh)))
    return outcomes


def run_trace(
    config: EngineConfig,
    task_path: str | Path,
    runs_dir: str | Path,
    metric: str | None = None,
) -> TraceResult:
    """Score every iteration's candidate code from a past route run; the
    trace lands next to that run's session records."""
    task = load_valid_task(task_path)
    runs_dir = Path(runs_dir)
    outcomes = load_session_outcomes(runs_dir)
    metric_name = metric or config.metric or "EXACT_MATCH"

    with RuntimeHandle(config) as handle:
        rows = iteration_trace_report(
            outcomes,
            task,
            metric_name,
            handle.executor,
            registry=handle.registry,
            config=_bench_config(config, None, None, None),
        )

    trace_path = RunPaths(runs_dir).trace_csv
    write_trace_csv(rows, trace_path)
    return TraceResult(trace_path=trace_path, rows=tuple(rows))


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def _read_meta(paths: RunPaths) -> dict:
    if not paths.transcript.is_file():
        return {}
    with open(paths.transcript, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            if record.get("kind") == "meta":
                return record
            break
    return {}


def run_report(run_dir: str | Path) -> str:
    """Human-readable digest of one run directory."""
    root = Path(run_dir)
    if not root.is_dir():
        raise ConfigError(f"run directory not found: {root}")
    paths = RunPaths(root)
    lines: list[str] = [f"run: {root}"]

    meta = _read_meta(paths)
    if meta:
        fields = ", ".join(f"{k}={v}" for k, v in meta.items() if k != "kind")
        lines.append(f"meta: {fields}")

    if paths.pool.is_file():
        pool = load_pool(paths.pool)
        lines.append(f"pool: {len(pool)} solution(s) for task {pool.task_id}")
        for sol in pool.solutions:
            models = ", ".join(sol.declared_models) or "none"
            lines.append(
                f"  {sol.id}: admitted at iteration "
                f"{sol.provenance.iteration_index} (models: {models})"
            )

    if paths.sessions_dir.is_dir():
        kinds: dict[str, int] = {}
        for path in sorted(paths.sessions_dir.glob("*.json")):
            with open(path, encoding="utf-8") as fh:
                kind = json.load(fh).get("kind", "?")
            kinds[kind] = kinds.get(kind, 0) + 1
        if kinds:
            summary = ", ".join(f"{k}: {v}" for k, v in sorted(kinds.items()))
            lines.append(f"sessions: {summary}")

    if paths.metric_file.is_file():
        with open(paths.metric_file, encoding="utf-8") as fh:
            metric = json.load(fh)
        suffix = " (fallback)" if metric.get("fallback") else ""
        lines.append(
            f"metric: {metric['metric_name']} chosen by {metric['chosen_by']}{suffix}"
        )

    for label, path in (("curve", paths.curve_csv), ("ablation", paths.ablation_csv)):
        if path.is_file():
            lines.append(f"{label}:")
            for row in path.read_text(encoding="utf-8").splitlines():
                lines.append(f"  {row}")

    if paths.ledger.is_file():
        total = 0.0
        calls = 0
        with open(paths.ledger, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    total += json.loads(line)["usd_cost"]
                    calls += 1
        lines.append(f"ledger: {calls} call(s), total ${total:.6f}")

    return "\n".join(lines) + "\n"
