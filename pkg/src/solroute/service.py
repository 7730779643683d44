"""HTTP facade over the same pipelines the CLI drives.

Routing takes minutes per session, so mutating verbs return poll-based jobs
instead of holding the connection open. At most one route job may be active
per task; sessions must see a consistent pool view, so concurrent routing of
one task is refused with 409.

Task specs are registered over the wire; image paths inside them resolve
against the server's working directory unless absolute.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, PlainTextResponse

from .config import EngineConfig, load_engine_config
from .core import (
    TaskSpec,
    load_pool,
    pool_to_dict,
    task_spec_from_dict,
    validate_task_spec,
)
from .errors import EngineError
from .pipeline import run_bench, run_route

__all__ = ["create_app"]


@dataclass
class _TaskState:
    spec: TaskSpec
    pool_path: Path | None = None
    curve_path: Path | None = None


@dataclass
class _Job:
    job_id: str
    kind: str
    task_id: str
    status: str = "queued"
    error: str | None = None
    result: dict | None = None

    def to_dict(self) -> dict:
        return {
            "job_id": self.job_id,
            "kind": self.kind,
            "task_id": self.task_id,
            "status": self.status,
            "error": self.error,
            "result": self.result,
        }


class _State:
    def __init__(self, config: EngineConfig):
        self.config = config
        self.tasks: dict[str, _TaskState] = {}
        self.jobs: dict[str, _Job] = {}
        self.lock = threading.Lock()
        self._counter = 0

    def new_job(self, kind: str, task_id: str) -> _Job:
        self._counter += 1
        job = _Job(job_id=f"job-{self._counter:04d}", kind=kind, task_id=task_id)
        self.jobs[job.job_id] = job
        return job

    def active_job(self, task_id: str) -> _Job | None:
        for job in self.jobs.values():
            if job.task_id == task_id and job.status in ("queued", "running"):
                return job
        return None


def _error(status: int, message: str, **extra: Any) -> JSONResponse:
    return JSONResponse({"error": message, **extra}, status_code=status)


async def _json_body(request: Request) -> dict | None:
    """Parsed object body, or None when the body is not a JSON object.
    An empty body counts as an empty object."""
    raw = await request.body()
    if not raw:
        return {}
    try:
        data = json.loads(raw)
    except json.JSONDecodeError:
        return None
    return data if isinstance(data, dict) else None


def _spawn(state: _State, job: _Job, work) -> None:
    def runner() -> None:
        with state.lock:
            job.status = "running"
        try:
            result = work()
        except EngineError as exc:
            with state.lock:
                job.status = "error"
                job.error = f"{exc.code}: {exc}"
        except Exception as exc:  # surface, never hang the poller
            with state.lock:
                job.status = "error"
                job.error = f"{type(exc).__name__}: {exc}"
        else:
            with state.lock:
                job.status = "done"
                job.result = result

    threading.Thread(target=runner, name=job.job_id, daemon=True).start()


def create_app(config: EngineConfig | str | Path) -> FastAPI:
    if not isinstance(config, EngineConfig):
        config = load_engine_config(config)
    app = FastAPI(title="solroute", version="0.1.0")
    state = _State(config)
    app.state.engine = state

    @app.get("/healthz")
    async def healthz() -> dict:
        return {"ok": True}

    @app.post("/tasks")
    async def create_task(request: Request) -> JSONResponse:
        data = await _json_body(request)
        if not data:
            return _error(400, "body must be a task spec object")
        try:
            spec = task_spec_from_dict(data, base_dir=Path.cwd())
        except (KeyError, TypeError, ValueError) as exc:
            return _error(400, f"malformed task spec: {exc}")
        violations = validate_task_spec(spec)
        if violations:
            return _error(
                400,
                "task spec failed validation",
                violations=[
                    {
                        "code": v.code,
                        "message": v.message,
                        "instance_id": v.instance_id,
                        "field": v.field,
                    }
                    for v in violations
                ],
            )
        with state.lock:
            if spec.task_id in state.tasks:
                return _error(409, f"task {spec.task_id!r} already registered")
            state.tasks[spec.task_id] = _TaskState(spec=spec)
        return JSONResponse({"task_id": spec.task_id}, status_code=201)

    @app.post("/tasks/{task_id}/route")
    async def route_task(task_id: str, request: Request) -> JSONResponse:
        body = await _json_body(request)
        if body is None:
            return _error(400, "body must be a JSON object")
        budget = body.get("budget")
        if budget is not None and (not isinstance(budget, int) or budget < 1):
            return _error(400, "budget must be a positive integer")
        with state.lock:
            task = state.tasks.get(task_id)
            if task is None:
                return _error(404, f"unknown task {task_id!r}")
            if state.active_job(task_id) is not None:
                return _error(409, f"a job is already active for task {task_id!r}")
            job = state.new_job("route", task_id)

        task_file = _materialize_task(state, task_id)

        def work() -> dict:
            result = run_route(state.config, task_file, budget=budget)
            with state.lock:
                task.pool_path = result.paths.pool
            kinds: dict[str, int] = {}
            for outcome in result.outcomes:
                kinds[outcome.kind.value] = kinds.get(outcome.kind.value, 0) + 1
            return {
                "run_dir": str(result.paths.root),
                "pool_size": len(result.pool),
                "solution_ids": list(result.pool.ids()),
                "outcomes": kinds,
            }

        _spawn(state, job, work)
        return JSONResponse({"job_id": job.job_id}, status_code=202)

    @app.post("/tasks/{task_id}/bench")
    async def bench_task(task_id: str, request: Request) -> JSONResponse:
        body = await _json_body(request)
        if body is None:
            return _error(400, "body must be a JSON object")
        with state.lock:
            task = state.tasks.get(task_id)
            if task is None:
                return _error(404, f"unknown task {task_id!r}")
            if task.pool_path is None:
                return _error(409, f"task {task_id!r} has no solution pool; route first")
            if state.active_job(task_id) is not None:
                return _error(409, f"a job is already active for task {task_id!r}")
            job = state.new_job("bench", task_id)
            pool_path = task.pool_path

        task_file = _materialize_task(state, task_id)
        metric = body.get("metric")
        eval_count = body.get("eval_count")
        repeats = body.get("repeats")
        seed = body.get("seed")

        def work() -> dict:
            result = run_bench(
                state.config,
                task_file,
                pool_path,
                metric=metric,
                eval_count=eval_count,
                repeats=repeats,
                seed=seed,
            )
            with state.lock:
                task.curve_path = result.paths.curve_csv
            return {
                "run_dir": str(result.paths.root),
                "metric": result.choice.metric_name,
                "chosen_by": result.choice.chosen_by.value,
                "points": len(result.points),
            }

        _spawn(state, job, work)
        return JSONResponse({"job_id": job.job_id}, status_code=202)

    @app.get("/jobs/{job_id}")
    async def get_job(job_id: str) -> JSONResponse:
        with state.lock:
            job = state.jobs.get(job_id)
            if job is None:
                return _error(404, f"unknown job {job_id!r}")
            return JSONResponse(job.to_dict())

    @app.get("/tasks/{task_id}/solutions")
    async def get_solutions(task_id: str) -> JSONResponse:
        with state.lock:
            task = state.tasks.get(task_id)
            if task is None:
                return _error(404, f"unknown task {task_id!r}")
            pool_path = task.pool_path
        if pool_path is None:
            return JSONResponse({"task_id": task_id, "solutions": []})
        return JSONResponse(pool_to_dict(load_pool(pool_path)))

    @app.get("/tasks/{task_id}/curve")
    async def get_curve(task_id: str):
        with state.lock:
            task = state.tasks.get(task_id)
            if task is None:
                return _error(404, f"unknown task {task_id!r}")
            curve_path = task.curve_path
        if curve_path is None or not curve_path.is_file():
            return _error(404, f"no curve for task {task_id!r}; bench first")
        return PlainTextResponse(
            curve_path.read_text(encoding="utf-8"), media_type="text/csv"
        )

    return app


def _materialize_task(state: _State, task_id: str) -> Path:
    """Pipelines consume task files; registered specs are written once under
    the runs root with image paths already resolved."""
    from .core import task_spec_to_dict

    with state.lock:
        spec = state.tasks[task_id].spec
    target_dir = state.config.runs_root / task_id
    target_dir.mkdir(parents=True, exist_ok=True)
    target = target_dir / "task.json"
    target.write_text(
        json.dumps(task_spec_to_dict(spec), indent=2, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )
    return target
