"""Run configuration.

One JSON file names every external piece a run needs: the backend (live,
replay, or scripted), the agent/card/metric/price files, sandbox settings, and
session/bench defaults. Paths are resolved against the config file's own
directory so a config directory can be copied or mounted anywhere. All
referenced files are checked at load time; a missing file fails here, not
twenty minutes into a routing run.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .agents import AgentRegistry, AgentRole
from .core import ModelCard, load_model_cards
from .engine import Executor, RouterRuntime, SessionConfig, make_executor
from .errors import ConfigError
from .gateway import (
    Backend,
    Gateway,
    HttpBackend,
    PriceTable,
    ReplayBackend,
    ScriptedBackend,
    UsageLedger,
)
from .metrics import (
    MetricRegistry,
    load_metric_pool,
    score_exact_match,
    score_multiple_choice,
    score_numeric,
)
from .metrics import default_registry as _default_metric_registry
from .toolbridge import ToolBridge, stub_tools

ENGINE_CONFIG_ENV = "ENGINE_CONFIG"

BACKEND_MODES = ("live", "replay", "scripted")

# Wall time stamped on every execution report when deterministic timing is on.
# Exactly representable in binary so aggregated means are reproducible.
DETERMINISTIC_WALL_TIME = 0.125

_BUILTIN_SCORERS = {
    "EXACT_MATCH": score_exact_match,
    "MULTIPLE_CHOICE_ACCURACY": score_multiple_choice,
    "NUMERIC_TOLERANCE": score_numeric,
}


@dataclass(frozen=True)
class BackendConfig:
    """Which backend serves all agent roles, plus its mode-specific settings."""

    mode: str
    url: str = ""
    auth_env: str = "API_TOKEN"
    transcript_path: Path | None = None
    script_path: Path | None = None

    def __post_init__(self) -> None:
        if self.mode not in BACKEND_MODES:
            raise ConfigError(
                f"unknown backend mode {self.mode!r}; expected one of {BACKEND_MODES}"
            )
        if self.mode == "live" and not self.url:
            raise ConfigError("live backend requires a url")
        if self.mode == "replay" and self.transcript_path is None:
            raise ConfigError("replay backend requires a transcript_path")
        if self.mode == "scripted" and self.script_path is None:
            raise ConfigError("scripted backend requires a script_path")


@dataclass(frozen=True)
class EngineConfig:
    cards_path: Path
    agents_path: Path
    backend: BackendConfig
    metric_pool_path: Path | None = None
    prices_path: Path | None = None
    interpreter: tuple[str, ...] = ()
    sandbox_timeout: float = 30.0
    session: SessionConfig = SessionConfig()
    budget: int = 4
    metric: str | None = None
    eval_count: int | None = None
    seed: int = 0
    repeats: int = 1
    parallelism: int = 4
    runs_root: Path = Path("runs")
    deterministic_timing: bool = False

    def __post_init__(self) -> None:
        if self.budget < 1:
            raise ConfigError("budget must be at least 1")
        if self.repeats < 1:
            raise ConfigError("repeats must be at least 1")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be at least 1")
        if self.sandbox_timeout <= 0:
            raise ConfigError("sandbox_timeout must be positive")


def _resolve(base: Path, value: str) -> Path:
    path = Path(value)
    return path if path.is_absolute() else base / path


def _require_file(path: Path, what: str) -> Path:
    if not path.is_file():
        raise ConfigError(f"{what} not found: {path}")
    return path


def _session_from_dict(data: dict, exec_timeout: float) -> SessionConfig:
    committee_names = data.get("committee")
    if committee_names is None:
        committee = SessionConfig().committee
    else:
        try:
            committee = tuple(AgentRole[name.upper()] for name in committee_names)
        except KeyError as exc:
            raise ConfigError(f"unknown committee role {exc.args[0]!r}") from None
    return SessionConfig(
        max_iterations=int(data.get("max_iterations", 6)),
        committee=committee,
        repetition_check_enabled=bool(data.get("repetition_check_enabled", True)),
        debugger_enabled=bool(data.get("debugger_enabled", True)),
        exec_timeout=exec_timeout,
    )


def load_engine_config(path: str | Path) -> EngineConfig:
    """Parse and validate a config file. Every referenced file must exist."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    base = path.parent
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")

    for key in ("cards_path", "agents_path", "backend"):
        if key not in data:
            raise ConfigError(f"config is missing required key {key!r}")

    raw_backend = data["backend"]
    if not isinstance(raw_backend, dict) or "mode" not in raw_backend:
        raise ConfigError("backend section must be an object with a 'mode' key")
    transcript = raw_backend.get("transcript_path")
    script = raw_backend.get("script_path")
    backend = BackendConfig(
        mode=raw_backend["mode"],
        url=raw_backend.get("url", ""),
        auth_env=raw_backend.get("auth_env", "API_TOKEN"),
        transcript_path=_resolve(base, transcript) if transcript else None,
        script_path=_resolve(base, script) if script else None,
    )
    if backend.mode == "replay":
        _require_file(backend.transcript_path, "replay transcript")
    if backend.mode == "scripted":
        _require_file(backend.script_path, "backend script")

    cards_path = _require_file(_resolve(base, data["cards_path"]), "model cards file")
    agents_path = _require_file(_resolve(base, data["agents_path"]), "agent config")
    metric_pool = data.get("metric_pool_path")
    prices = data.get("prices_path")

    sandbox_timeout = float(data.get("sandbox_timeout", 30.0))
    bench = data.get("bench", {})
    if not isinstance(bench, dict):
        raise ConfigError("bench section must be an object")
    eval_count = bench.get("eval_count")

    return EngineConfig(
        cards_path=cards_path,
        agents_path=agents_path,
        backend=backend,
        metric_pool_path=(
            _require_file(_resolve(base, metric_pool), "metric pool file")
            if metric_pool
            else None
        ),
        prices_path=(
            _require_file(_resolve(base, prices), "price table") if prices else None
        ),
        interpreter=tuple(data.get("interpreter", ())),
        sandbox_timeout=sandbox_timeout,
        session=_session_from_dict(data.get("session", {}), sandbox_timeout),
        budget=int(data.get("budget", 4)),
        metric=data.get("metric"),
        eval_count=int(eval_count) if eval_count is not None else None,
        seed=int(bench.get("seed", 0)),
        repeats=int(bench.get("repeats", 1)),
        parallelism=int(bench.get("parallelism", 4)),
        runs_root=_resolve(base, data.get("runs_root", "runs")),
        deterministic_timing=bool(data.get("deterministic_timing", False)),
    )


def resolve_config_path(explicit: str | None) -> Path:
    """--config flag wins; the ENGINE_CONFIG env var is the fallback."""
    if explicit:
        return Path(explicit)
    from_env = os.environ.get(ENGINE_CONFIG_ENV, "")
    if from_env:
        return Path(from_env)
    raise ConfigError(
        f"no config given: pass --config or set {ENGINE_CONFIG_ENV}"
    )


def build_backend(config: BackendConfig) -> Backend:
    if config.mode == "live":
        return HttpBackend(config.url, auth_env=config.auth_env)
    if config.mode == "replay":
        return ReplayBackend(config.transcript_path)
    return ScriptedBackend.from_file(config.script_path)


def build_metric_registry(config: EngineConfig) -> MetricRegistry:
    """Default registry, or one rebuilt from the configured metric pool file.

    Pool files carry card text only; each card must name one of the built-in
    scoring functions.
    """
    if config.metric_pool_path is None:
        return _default_metric_registry()
    registry = MetricRegistry()
    for card in load_metric_pool(config.metric_pool_path):
        scorer = _BUILTIN_SCORERS.get(card.name.upper())
        if scorer is None:
            raise ConfigError(f"no scoring function for metric {card.name!r}")
        registry.register(card, scorer)
    return registry


def _deterministic_wall(executor: Executor) -> Executor:
    def wrapped(action_code, instances, *, usage_tag=""):
        reports = executor(action_code, instances, usage_tag=usage_tag)
        return [
            dataclasses.replace(r, wall_time=DETERMINISTIC_WALL_TIME) for r in reports
        ]

    return wrapped


class RuntimeHandle:
    """Everything a pipeline run needs, with the tool bridge's lifetime bound
    to a ``with`` block. The executor is only valid while the handle is open."""

    def __init__(
        self,
        config: EngineConfig,
        record_path: Path | None = None,
        backend_override: Backend | None = None,
    ):
        self.config = config
        prices = (
            PriceTable.from_file(config.prices_path)
            if config.prices_path
            else PriceTable()
        )
        self.ledger = UsageLedger(prices)
        self.backend = backend_override or build_backend(config.backend)
        self.gateway = Gateway(self.backend, ledger=self.ledger, record_path=record_path)
        self.agents = AgentRegistry.from_file(config.agents_path)
        self.cards: list[ModelCard] = load_model_cards(config.cards_path)
        self.registry = build_metric_registry(config)
        self._bridge = ToolBridge(stub_tools(), ledger=self.ledger)
        self.runtime: RouterRuntime | None = None

    def __enter__(self) -> "RuntimeHandle":
        self._bridge.__enter__()
        executor = make_executor(
            tools_url=self._bridge.url,
            timeout=self.config.sandbox_timeout,
            max_workers=self.config.parallelism,
            interpreter=self.config.interpreter or None,
        )
        if self.config.deterministic_timing:
            executor = _deterministic_wall(executor)
        self.runtime = RouterRuntime(
            gateway=self.gateway, agents=self.agents, executor=executor
        )
        return self

    def __exit__(self, *exc_info) -> None:
        self._bridge.__exit__(*exc_info)
        self.runtime = None

    @property
    def executor(self) -> Executor:
        if self.runtime is None:
            raise ConfigError("runtime handle is not open")
        return self.runtime.executor
