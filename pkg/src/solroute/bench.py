"""Benchmarking admitted solutions: accuracy/cost measurement, the Pareto
front over (p, c_time, c_money), ablation sweeps, per-iteration traces, and
deterministic CSV/SVG emission.

Monetary cost is read back from the usage ledger by tag, so whatever a
solution spent through the tool bridge is attributed to it without the
executor having to know about pricing.
"""

from __future__ import annotations

import dataclasses
import logging
import random
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

from .core import Instance, ModelCard, SolutionPool, TaskSpec
from .engine import Executor, RouterRuntime, SessionConfig, SessionOutcome, generate_pool
from .errors import EmptyPoolError, TranscriptMissingError
from .gateway import UsageLedger
from .metrics import MetricRegistry, default_registry
from .sandbox import ExecStatus

logger = logging.getLogger(__name__)

DEFAULT_EVAL_CAP = 50


@dataclass(frozen=True)
class BenchConfig:
    eval_count: int | None = None
    repeats: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.repeats < 1:
            raise ValueError("repeats must be at least 1")


@dataclass(frozen=True)
class EvalRecord:
    solution_id: str
    run_index: int
    p: float
    error_rate: float
    wall_times: tuple[float, ...]
    money: float
    per_item: tuple[float, ...]


@dataclass(frozen=True)
class CurvePoint:
    solution_id: str
    p: float
    c_time: float
    c_time_var: float
    c_money: float
    error_rate: float
    pareto: bool = False


def sample_eval_instances(
    task: TaskSpec, eval_count: int | None = None, seed: int = 0
) -> tuple[Instance, ...]:
    """Seed-deterministic subset of the labeled instances, in original task
    order. Requests beyond the labeled count are clipped with a warning."""
    labeled = task.labeled_instances
    if not labeled:
        raise ValueError(f"task {task.task_id} has no labeled instances to score")
    m = min(DEFAULT_EVAL_CAP, len(labeled)) if eval_count is None else eval_count
    if m < 1:
        raise ValueError("eval_count must be at least 1")
    if m > len(labeled):
        logger.warning(
            "eval_count %d clipped to the %d labeled instances of task %s",
            m,
            len(labeled),
            task.task_id,
        )
        m = len(labeled)
    positions = sorted(random.Random(seed).sample(range(len(labeled)), m))
    return tuple(labeled[i] for i in positions)


# ---------------------------------------------------------------------------
# measurement
# ---------------------------------------------------------------------------


def benchmark_pool(
    task: TaskSpec,
    pool: SolutionPool,
    metric_name: str,
    executor: Executor,
    ledger: UsageLedger | None = None,
    registry: MetricRegistry | None = None,
    config: BenchConfig = BenchConfig(),
) -> list[EvalRecord]:
    """One EvalRecord per solution per repeat. Instances whose execution did
    not end OK score zero and count toward the error rate."""
    if not pool.solutions:
        raise EmptyPoolError(f"pool for task {task.task_id} is empty")
    registry = registry or default_registry()
    scorer = registry.scorer(metric_name)
    chosen = sample_eval_instances(task, config.eval_count, config.seed)

    records: list[EvalRecord] = []
    for solution in pool.solutions:
        for run in range(config.repeats):
            tag = f"bench:{run}:{solution.id}"
            before = ledger.total_for(tag) if ledger else 0.0
            reports = executor(solution.action_code, chosen, usage_tag=tag)
            money = (ledger.total_for(tag) - before) if ledger else 0.0
            scores: list[float] = []
            errors = 0
            for report, instance in zip(reports, chosen):
                if report.status is ExecStatus.OK:
                    scores.append(scorer(report.answer, instance))
                else:
                    scores.append(0.0)
                    errors += 1
            records.append(
                EvalRecord(
                    solution_id=solution.id,
                    run_index=run,
                    p=statistics.fmean(scores),
                    error_rate=errors / len(chosen),
                    wall_times=tuple(r.wall_time for r in reports),
                    money=money,
                    per_item=tuple(scores),
                )
            )
    return records


def aggregate_curve(
    records: Sequence[EvalRecord], eval_count: int, repeats: int
) -> list[CurvePoint]:
    """Collapse per-run records into one point per solution. Money is
    amortized per executed instance (m * repeats)."""
    by_solution: dict[str, list[EvalRecord]] = {}
    for record in records:
        by_solution.setdefault(record.solution_id, []).append(record)
    points = []
    for solution_id, group in by_solution.items():
        walls = [w for record in group for w in record.wall_times]
        points.append(
            CurvePoint(
                solution_id=solution_id,
                p=statistics.fmean(r.p for r in group),
                c_time=statistics.fmean(walls),
                c_time_var=statistics.pvariance(walls) if len(walls) > 1 else 0.0,
                c_money=sum(r.money for r in group) / (eval_count * repeats),
                error_rate=statistics.fmean(r.error_rate for r in group),
            )
        )
    return mark_pareto(sorted(points, key=lambda p: p.solution_id))


# ---------------------------------------------------------------------------
# pareto
# ---------------------------------------------------------------------------


def dominates(a: CurvePoint, b: CurvePoint) -> bool:
    """At least as good on accuracy and both costs, strictly better on one.
    Exact ties dominate in neither direction, so both points survive."""
    if a.p < b.p or a.c_time > b.c_time or a.c_money > b.c_money:
        return False
    return a.p > b.p or a.c_time < b.c_time or a.c_money < b.c_money


def mark_pareto(points: Sequence[CurvePoint]) -> list[CurvePoint]:
    marked = []
    for point in points:
        dominated = any(dominates(other, point) for other in points if other is not point)
        marked.append(dataclasses.replace(point, pareto=not dominated))
    return marked


def pareto_front(points: Sequence[CurvePoint]) -> list[CurvePoint]:
    return [p for p in mark_pareto(points) if p.pareto]


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

#: Feature-removal names accepted by config_without.
ABLATABLE = ("requirement_checker", "code_checker", "repetition_checker", "code_debugger")


def config_without(
    removed: Sequence[str], base: SessionConfig = SessionConfig()
) -> SessionConfig:
    removed_set = set(removed)
    unknown = removed_set.difference(ABLATABLE)
    if unknown:
        raise ValueError(f"unknown ablation toggles: {sorted(unknown)}")
    committee = tuple(
        role
        for role in base.committee
        if role.value.lower() not in removed_set
    )
    return dataclasses.replace(
        base,
        committee=committee,
        repetition_check_enabled=base.repetition_check_enabled
        and "repetition_checker" not in removed_set,
        debugger_enabled=base.debugger_enabled and "code_debugger" not in removed_set,
    )


@dataclass(frozen=True)
class AblationRow:
    config: str
    acc: float | None
    error_rate: float | None
    avg_num_solutions: float
    runs: int

    @property
    def failed(self) -> bool:
        return self.acc is None


def ablation_run(
    task: TaskSpec,
    cards: Sequence[ModelCard],
    runtime: RouterRuntime,
    metric_name: str,
    variants: Mapping[str, SessionConfig],
    budget: int = 3,
    bench_config: BenchConfig = BenchConfig(),
    runs: int = 1,
    ledger: UsageLedger | None = None,
    registry: MetricRegistry | None = None,
) -> list[AblationRow]:
    """For each named variant: build pools `runs` times, benchmark each, and
    report the mean pool-best accuracy. Variants whose every run produced an
    empty pool are marked failed."""
    rows = []
    for name, config in variants.items():
        best_ps: list[float] = []
        best_errors: list[float] = []
        sizes: list[int] = []
        for _ in range(runs):
            pool = generate_pool(task, cards, runtime, config=config, budget=budget)
            sizes.append(len(pool))
            if not pool.solutions:
                continue
            records = benchmark_pool(
                task,
                pool,
                metric_name,
                runtime.executor,
                ledger=ledger,
                registry=registry,
                config=bench_config,
            )
            eval_count = len(records[0].per_item)
            points = aggregate_curve(records, eval_count, bench_config.repeats)
            best = max(points, key=lambda point: point.p)
            best_ps.append(best.p)
            best_errors.append(best.error_rate)
        rows.append(
            AblationRow(
                config=name,
                acc=statistics.fmean(best_ps) if best_ps else None,
                error_rate=statistics.fmean(best_errors) if best_errors else None,
                avg_num_solutions=statistics.fmean(sizes) if sizes else 0.0,
                runs=runs,
            )
        )
    return rows


# ---------------------------------------------------------------------------
# iteration traces
# ---------------------------------------------------------------------------


def iteration_trace_report(
    outcomes: Sequence[SessionOutcome],
    task: TaskSpec,
    metric_name: str,
    executor: Executor,
    registry: MetricRegistry | None = None,
    config: BenchConfig = BenchConfig(),
) -> list[tuple[str, int, float]]:
    """(session_id, iteration, p) per parseable iteration: every iteration's
    candidate code re-run on the eval sample. Malformed iterations carry no
    code and are skipped."""
    if not outcomes:
        raise TranscriptMissingError("no session records to trace")
    registry = registry or default_registry()
    scorer = registry.scorer(metric_name)
    chosen = sample_eval_instances(task, config.eval_count, config.seed)
    rows: list[tuple[str, int, float]] = []
    for outcome in outcomes:
        for record in outcome.iterations:
            if not record.action_code:
                continue
            reports = executor(
                record.action_code,
                chosen,
                usage_tag=f"trace:{outcome.session_id}:it{record.index}",
            )
            scores = [
                scorer(r.answer, i) if r.status is ExecStatus.OK else 0.0
                for r, i in zip(reports, chosen)
            ]
            rows.append((outcome.session_id, record.index, statistics.fmean(scores)))
    return rows


# ---------------------------------------------------------------------------
# emission
# ---------------------------------------------------------------------------

CURVE_HEADER = "id,p,c_time,c_time_var,c_money,error_rate,pareto"
ABLATION_HEADER = "config,acc,error_rate,avg_num_solutions"
TRACE_HEADER = "session_id,iteration,p"


def _fmt(value: float) -> str:
    return f"{value:.6f}"


def write_curve_csv(points: Sequence[CurvePoint], path: str | Path) -> None:
    lines = [CURVE_HEADER]
    for point in sorted(points, key=lambda p: p.solution_id):
        lines.append(
            ",".join(
                (
                    point.solution_id,
                    _fmt(point.p),
                    _fmt(point.c_time),
                    _fmt(point.c_time_var),
                    _fmt(point.c_money),
                    _fmt(point.error_rate),
                    "true" if point.pareto else "false",
                )
            )
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_ablation_csv(rows: Sequence[AblationRow], path: str | Path) -> None:
    lines = [ABLATION_HEADER]
    for row in rows:
        lines.append(
            ",".join(
                (
                    row.config,
                    "FAILED" if row.acc is None else _fmt(row.acc),
                    "FAILED" if row.error_rate is None else _fmt(row.error_rate),
                    _fmt(row.avg_num_solutions),
                )
            )
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_trace_csv(rows: Sequence[tuple[str, int, float]], path: str | Path) -> None:
    lines = [TRACE_HEADER]
    for session_id, iteration, p in rows:
        lines.append(f"{session_id},{iteration},{_fmt(p)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


_SVG_W, _SVG_H = 640, 480
_MARGIN = 60


def _scale(value: float, lo: float, hi: float, out_lo: float, out_hi: float) -> float:
    if hi <= lo:
        return (out_lo + out_hi) / 2
    return out_lo + (value - lo) / (hi - lo) * (out_hi - out_lo)


def render_curve_svg(points: Sequence[CurvePoint]) -> str:
    """Hand-rolled scatter of accuracy against time cost; Pareto members are
    filled, dominated points hollow. Deterministic output for byte-level
    comparison across runs."""
    points = sorted(points, key=lambda p: p.solution_id)
    times = [p.c_time for p in points] or [0.0]
    lo_t, hi_t = min(times), max(times)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_W}" height="{_SVG_H}" '
        f'viewBox="0 0 {_SVG_W} {_SVG_H}">',
        f'<rect width="{_SVG_W}" height="{_SVG_H}" fill="white"/>',
        f'<line x1="{_MARGIN}" y1="{_SVG_H - _MARGIN}" x2="{_SVG_W - _MARGIN}" '
        f'y2="{_SVG_H - _MARGIN}" stroke="black"/>',
        f'<line x1="{_MARGIN}" y1="{_MARGIN}" x2="{_MARGIN}" '
        f'y2="{_SVG_H - _MARGIN}" stroke="black"/>',
        f'<text x="{_SVG_W // 2}" y="{_SVG_H - 20}" text-anchor="middle" '
        f'font-size="13">time cost per instance (s)</text>',
        f'<text x="18" y="{_SVG_H // 2}" text-anchor="middle" font-size="13" '
        f'transform="rotate(-90 18 {_SVG_H // 2})">accuracy p</text>',
    ]
    for point in points:
        x = _scale(point.c_time, lo_t, hi_t, _MARGIN + 20, _SVG_W - _MARGIN - 20)
        y = _scale(point.p, 0.0, 1.0, _SVG_H - _MARGIN, _MARGIN)
        fill = "#1f6f43" if point.pareto else "none"
        parts.append(
            f'<circle cx="{x:.2f}" cy="{y:.2f}" r="6" fill="{fill}" stroke="#1f6f43" '
            f'stroke-width="2"/>'
        )
        parts.append(
            f'<text x="{x:.2f}" y="{y - 10:.2f}" text-anchor="middle" font-size="11">'
            f"{point.solution_id}</text>"
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_curve_svg(points: Sequence[CurvePoint], path: str | Path) -> None:
    Path(path).write_text(render_curve_svg(points), encoding="utf-8")
