"""Config loading, run pipelines, and the CLI against a scripted backend."""

from __future__ import annotations

import json
from pathlib import Path

import pytest
from conftest import write_engine_fixture

from solroute.cli import main
from solroute.config import (
    DETERMINISTIC_WALL_TIME,
    ENGINE_CONFIG_ENV,
    RuntimeHandle,
    build_metric_registry,
    load_engine_config,
    resolve_config_path,
)
from solroute.core import load_task_spec
from solroute.engine import OutcomeKind
from solroute.errors import ConfigError, TaskInvalidError, TranscriptMissingError
from solroute.metrics import ChooserKind
from solroute.pipeline import (
    run_ablate,
    run_bench,
    run_replay,
    run_report,
    run_route,
    run_trace,
)


@pytest.fixture
def config_path(tmp_path: Path) -> Path:
    return write_engine_fixture(tmp_path / "fx")


def task_path(config_path: Path) -> Path:
    return config_path.parent / "task.json"


# ---------------------------------------------------------------------------
# config loading
# ---------------------------------------------------------------------------


def test_load_config_resolves_and_validates(config_path: Path):
    cfg = load_engine_config(config_path)
    assert cfg.cards_path.is_absolute() and cfg.cards_path.is_file()
    assert cfg.agents_path.is_file()
    assert cfg.backend.mode == "scripted"
    assert cfg.backend.script_path.is_file()
    assert cfg.budget == 2
    assert cfg.seed == 0
    assert cfg.session.max_iterations == 6
    assert cfg.deterministic_timing is False
    assert cfg.runs_root == config_path.parent / "runs"


@pytest.mark.parametrize("missing", ["cards.json", "agents.json", "scripted.json"])
def test_missing_referenced_file_fails_at_load(config_path: Path, missing: str):
    (config_path.parent / missing).unlink()
    with pytest.raises(ConfigError, match=missing):
        load_engine_config(config_path)


def test_config_file_not_found(tmp_path: Path):
    with pytest.raises(ConfigError, match="config file not found"):
        load_engine_config(tmp_path / "nope.json")


def test_config_rejects_invalid_json(tmp_path: Path):
    bad = tmp_path / "config.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_engine_config(bad)


def test_unknown_backend_mode(tmp_path: Path):
    config_path = write_engine_fixture(
        tmp_path / "fx", config_extra={"backend": {"mode": "psychic"}}
    )
    with pytest.raises(ConfigError, match="psychic"):
        load_engine_config(config_path)


def test_replay_mode_requires_transcript(tmp_path: Path):
    config_path = write_engine_fixture(
        tmp_path / "fx", config_extra={"backend": {"mode": "replay"}}
    )
    with pytest.raises(ConfigError, match="transcript"):
        load_engine_config(config_path)


def test_missing_required_key(tmp_path: Path):
    config_path = write_engine_fixture(tmp_path / "fx")
    data = json.loads(config_path.read_text())
    del data["backend"]
    config_path.write_text(json.dumps(data))
    with pytest.raises(ConfigError, match="backend"):
        load_engine_config(config_path)


def test_unknown_committee_role(tmp_path: Path):
    config_path = write_engine_fixture(
        tmp_path / "fx",
        config_extra={"session": {"committee": ["GRAND_INQUISITOR"]}},
    )
    with pytest.raises(ConfigError, match="GRAND_INQUISITOR"):
        load_engine_config(config_path)


def test_committee_subset_parses(tmp_path: Path):
    config_path = write_engine_fixture(
        tmp_path / "fx",
        config_extra={"session": {"committee": ["code_checker"], "max_iterations": 3}},
    )
    cfg = load_engine_config(config_path)
    assert len(cfg.session.committee) == 1
    assert cfg.session.max_iterations == 3


def test_nonpositive_budget_rejected(tmp_path: Path):
    config_path = write_engine_fixture(tmp_path / "fx", config_extra={"budget": 0})
    with pytest.raises(ConfigError, match="budget"):
        load_engine_config(config_path)


def test_resolve_config_path(monkeypatch, config_path: Path):
    assert resolve_config_path(str(config_path)) == config_path
    monkeypatch.setenv(ENGINE_CONFIG_ENV, str(config_path))
    assert resolve_config_path(None) == config_path
    monkeypatch.delenv(ENGINE_CONFIG_ENV)
    with pytest.raises(ConfigError, match=ENGINE_CONFIG_ENV):
        resolve_config_path(None)


def test_metric_pool_file_builds_registry(tmp_path: Path):
    pool_file = tmp_path / "fx" / "pool_cards.json"
    config_path = write_engine_fixture(
        tmp_path / "fx", config_extra={"metric_pool_path": "pool_cards.json"}
    )
    pool_file.write_text(
        json.dumps([{"name": "EXACT_MATCH", "description": "strict equality"}])
    )
    registry = build_metric_registry(load_engine_config(config_path))
    assert registry.names() == ("EXACT_MATCH",)

    pool_file.write_text(
        json.dumps([{"name": "VIBES_ONLY", "description": "no scorer exists"}])
    )
    with pytest.raises(ConfigError, match="VIBES_ONLY"):
        build_metric_registry(load_engine_config(config_path))


def test_default_registry_without_pool_file(config_path: Path):
    registry = build_metric_registry(load_engine_config(config_path))
    assert registry.names() == (
        "EXACT_MATCH",
        "MULTIPLE_CHOICE_ACCURACY",
        "NUMERIC_TOLERANCE",
    )


# ---------------------------------------------------------------------------
# runtime handle
# ---------------------------------------------------------------------------


def test_runtime_handle_requires_open(config_path: Path):
    handle = RuntimeHandle(load_engine_config(config_path))
    with pytest.raises(ConfigError, match="not open"):
        handle.executor


def test_deterministic_timing_stamps_walls(tmp_path: Path):
    config_path = write_engine_fixture(tmp_path / "fx", deterministic_timing=True)
    cfg = load_engine_config(config_path)
    task = load_task_spec(task_path(config_path))
    with RuntimeHandle(cfg) as handle:
        reports = handle.executor(
            "emit_answer('red')", list(task.instances[:2]), usage_tag="t"
        )
    assert [r.wall_time for r in reports] == [DETERMINISTIC_WALL_TIME] * 2


# ---------------------------------------------------------------------------
# route pipeline
# ---------------------------------------------------------------------------


def test_route_writes_full_layout(config_path: Path, tmp_path: Path):
    cfg = load_engine_config(config_path)
    result = run_route(cfg, task_path(config_path), out=tmp_path / "run")
    paths = result.paths

    assert len(result.pool) == 2
    assert result.pool.ids() == ("sol-000", "sol-001")
    assert [o.kind for o in result.outcomes] == [OutcomeKind.ADMITTED] * 2
    assert paths.pool.is_file()
    assert paths.ledger.is_file()
    session_files = sorted(p.name for p in paths.sessions_dir.glob("*.json"))
    assert session_files == ["colors-fixture-s000.json", "colors-fixture-s001.json"]

    first = json.loads(paths.transcript.read_text().splitlines()[0])
    assert first["kind"] == "meta"
    assert first["task_id"] == "colors-fixture"
    assert first["budget"] == 2
    assert first["seed"] == 0


def test_route_allocates_under_runs_root(config_path: Path):
    cfg = load_engine_config(config_path)
    result = run_route(cfg, task_path(config_path))
    assert result.paths.root.parent == cfg.runs_root / "colors-fixture"


def test_route_rejects_invalid_task(config_path: Path, tmp_path: Path):
    cfg = load_engine_config(config_path)
    broken = json.loads(task_path(config_path).read_text())
    broken["example_count"] = 0
    bad = tmp_path / "bad_task.json"
    bad.write_text(json.dumps(broken))
    with pytest.raises(TaskInvalidError) as exc_info:
        run_route(cfg, bad)
    assert exc_info.value.violations


def test_route_missing_task_file(config_path: Path, tmp_path: Path):
    cfg = load_engine_config(config_path)
    with pytest.raises(ConfigError, match="task file not found"):
        run_route(cfg, tmp_path / "ghost.json")


def test_route_unknown_ablation_target(config_path: Path):
    cfg = load_engine_config(config_path)
    with pytest.raises(ConfigError, match="propaganda_bureau"):
        run_route(cfg, task_path(config_path), ablate=("propaganda_bureau",))


# ---------------------------------------------------------------------------
# replay pipeline
# ---------------------------------------------------------------------------


def test_replay_runs_are_byte_identical(config_path: Path, tmp_path: Path):
    cfg = load_engine_config(config_path)
    recorded = run_route(cfg, task_path(config_path), out=tmp_path / "rec")
    transcript = recorded.paths.transcript

    first = run_replay(cfg, task_path(config_path), transcript, out=tmp_path / "r1")
    second = run_replay(cfg, task_path(config_path), transcript, out=tmp_path / "r2")

    assert first.paths.pool.read_bytes() == second.paths.pool.read_bytes()
    assert (
        first.paths.transcript.read_bytes() == second.paths.transcript.read_bytes()
    )
    assert first.pool.ids() == recorded.pool.ids()


def test_replay_missing_transcript(config_path: Path, tmp_path: Path):
    cfg = load_engine_config(config_path)
    with pytest.raises(ConfigError, match="transcript not found"):
        run_replay(cfg, task_path(config_path), tmp_path / "none.jsonl")


# ---------------------------------------------------------------------------
# bench pipeline
# ---------------------------------------------------------------------------


def _routed(config_path: Path, tmp_path: Path):
    cfg = load_engine_config(config_path)
    result = run_route(cfg, task_path(config_path), out=tmp_path / "routed")
    return cfg, result


def test_bench_outputs(config_path: Path, tmp_path: Path):
    cfg, routed = _routed(config_path, tmp_path)
    result = run_bench(
        cfg, task_path(config_path), routed.paths.pool, out=tmp_path / "bench"
    )
    assert result.choice.metric_name == "EXACT_MATCH"
    assert result.choice.chosen_by is ChooserKind.AGENT
    assert not result.choice.fallback
    assert [p.p for p in result.points] == [1.0, 1.0]
    assert result.paths.curve_csv.is_file()
    assert result.paths.curve_svg.read_text().startswith("<svg")
    metric = json.loads(result.paths.metric_file.read_text())
    assert metric == {
        "metric_name": "EXACT_MATCH",
        "chosen_by": "AGENT",
        "fallback": False,
    }


def test_bench_user_metric_bypasses_agent(config_path: Path, tmp_path: Path):
    cfg, routed = _routed(config_path, tmp_path)
    result = run_bench(
        cfg,
        task_path(config_path),
        routed.paths.pool,
        metric="exact_match",
        out=tmp_path / "bench",
    )
    assert result.choice.chosen_by is ChooserKind.USER
    assert result.choice.metric_name == "EXACT_MATCH"


def test_bench_missing_pool_names_path(config_path: Path, tmp_path: Path):
    cfg = load_engine_config(config_path)
    ghost = tmp_path / "ghost_pool.json"
    with pytest.raises(ConfigError, match="ghost_pool.json"):
        run_bench(cfg, task_path(config_path), ghost)


EXPECTED_DETERMINISTIC_CURVE = (
    "id,p,c_time,c_time_var,c_money,error_rate,pareto\n"
    "sol-000,1.000000,0.125000,0.000000,0.003200,0.000000,false\n"
    "sol-001,1.000000,0.125000,0.000000,0.000000,0.000000,true\n"
)


def test_bench_deterministic_curve_is_reproducible(tmp_path: Path):
    config_path = write_engine_fixture(tmp_path / "fx", deterministic_timing=True)
    cfg = load_engine_config(config_path)
    routed = run_route(cfg, task_path(config_path), out=tmp_path / "routed")

    first = run_bench(
        cfg, task_path(config_path), routed.paths.pool, out=tmp_path / "b1"
    )
    second = run_bench(
        cfg, task_path(config_path), routed.paths.pool, out=tmp_path / "b2"
    )
    text = first.paths.curve_csv.read_text()
    assert text == EXPECTED_DETERMINISTIC_CURVE
    assert text == second.paths.curve_csv.read_text()


# ---------------------------------------------------------------------------
# ablate pipeline
# ---------------------------------------------------------------------------


def test_ablate_writes_rows(config_path: Path, tmp_path: Path):
    cfg = load_engine_config(config_path)
    result = run_ablate(
        cfg,
        task_path(config_path),
        toggles=("repetition_checker",),
        out=tmp_path / "ablate",
    )
    lines = result.paths.ablation_csv.read_text().splitlines()
    assert lines[0] == "config,acc,error_rate,avg_num_solutions"
    names = [line.split(",")[0] for line in lines[1:]]
    assert names == ["full", "no_repetition_checker"]
    assert all(line.split(",")[1] == "1.000000" for line in lines[1:])


# ---------------------------------------------------------------------------
# trace pipeline
# ---------------------------------------------------------------------------


def test_trace_scores_each_iteration(config_path: Path, tmp_path: Path):
    cfg, routed = _routed(config_path, tmp_path)
    result = run_trace(cfg, task_path(config_path), routed.paths.root)
    assert result.rows == (
        ("colors-fixture-s000", 1, 1.0),
        ("colors-fixture-s001", 1, 1.0),
    )
    assert result.trace_path == routed.paths.root / "iteration_trace.csv"
    assert result.trace_path.read_text() == (
        "session_id,iteration,p\n"
        "colors-fixture-s000,1,1.000000\n"
        "colors-fixture-s001,1,1.000000\n"
    )


def test_trace_requires_session_records(config_path: Path, tmp_path: Path):
    cfg = load_engine_config(config_path)
    with pytest.raises(TranscriptMissingError):
        run_trace(cfg, task_path(config_path), tmp_path / "empty")


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def test_report_summarizes_run(config_path: Path, tmp_path: Path):
    cfg, routed = _routed(config_path, tmp_path)
    text = run_report(routed.paths.root)
    assert "pool: 2 solution(s) for task colors-fixture" in text
    assert "sessions: ADMITTED: 2" in text
    assert "ledger:" in text
    assert "meta: " in text


def test_report_missing_dir(tmp_path: Path):
    with pytest.raises(ConfigError, match="run directory not found"):
        run_report(tmp_path / "void")


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------


def test_cli_validate_ok(config_path: Path, capsys):
    assert main(["validate", str(task_path(config_path))]) == 0
    assert "OK: task colors-fixture" in capsys.readouterr().out


def test_cli_validate_reports_violations(config_path: Path, tmp_path: Path, capsys):
    broken = json.loads(task_path(config_path).read_text())
    broken["example_count"] = 0
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(broken))
    assert main(["validate", str(bad)]) == 1
    assert "violation" in capsys.readouterr().err


def test_cli_validate_missing_file(tmp_path: Path, capsys):
    assert main(["validate", str(tmp_path / "ghost.json")]) == 2
    assert "ghost.json" in capsys.readouterr().err


def test_cli_usage_errors_exit_64(config_path: Path):
    with pytest.raises(SystemExit) as exc_info:
        main(["route", str(task_path(config_path)), "--bogus-flag"])
    assert exc_info.value.code == 64
    with pytest.raises(SystemExit) as exc_info:
        main(["frobnicate"])
    assert exc_info.value.code == 64
    with pytest.raises(SystemExit) as exc_info:
        main(["route", str(task_path(config_path)), "--budget", "0"])
    assert exc_info.value.code == 64


def test_cli_route_bench_report_flow(config_path: Path, tmp_path: Path, capsys):
    run_dir = tmp_path / "run"
    code = main(
        [
            "route",
            str(task_path(config_path)),
            "--config",
            str(config_path),
            "--out",
            str(run_dir),
        ]
    )
    assert code == 0
    out = capsys.readouterr().out
    assert "pool: 2 solution(s)" in out

    bench_dir = tmp_path / "bench"
    code = main(
        [
            "bench",
            str(task_path(config_path)),
            str(run_dir / "pool.json"),
            "--config",
            str(config_path),
            "--out",
            str(bench_dir),
        ]
    )
    assert code == 0
    out = capsys.readouterr().out
    assert "metric: EXACT_MATCH chosen by AGENT" in out
    assert "id,p,c_time,c_time_var,c_money,error_rate,pareto" in out

    assert main(["report", str(bench_dir)]) == 0
    assert "metric: EXACT_MATCH" in capsys.readouterr().out


def test_cli_bench_missing_pool_exits_2(config_path: Path, tmp_path: Path, capsys):
    ghost = tmp_path / "ghost_pool.json"
    code = main(
        [
            "bench",
            str(task_path(config_path)),
            str(ghost),
            "--config",
            str(config_path),
        ]
    )
    assert code == 2
    assert "ghost_pool.json" in capsys.readouterr().err


def test_cli_config_from_env(config_path: Path, tmp_path: Path, monkeypatch, capsys):
    monkeypatch.setenv(ENGINE_CONFIG_ENV, str(config_path))
    code = main(
        ["route", str(task_path(config_path)), "--out", str(tmp_path / "run")]
    )
    assert code == 0
    capsys.readouterr()


def test_cli_without_any_config(config_path: Path, monkeypatch, capsys):
    monkeypatch.delenv(ENGINE_CONFIG_ENV, raising=False)
    code = main(["route", str(task_path(config_path))])
    assert code == 2
    assert ENGINE_CONFIG_ENV in capsys.readouterr().err


def test_cli_trace_flow(config_path: Path, tmp_path: Path, capsys):
    run_dir = tmp_path / "run"
    main(
        [
            "route",
            str(task_path(config_path)),
            "--config",
            str(config_path),
            "--out",
            str(run_dir),
        ]
    )
    capsys.readouterr()
    code = main(
        [
            "trace",
            str(task_path(config_path)),
            "--runs-dir",
            str(run_dir),
            "--config",
            str(config_path),
        ]
    )
    assert code == 0
    out = capsys.readouterr().out
    assert "colors-fixture-s000 iteration 1: p=1.000000" in out
    assert (run_dir / "iteration_trace.csv").is_file()


def test_cli_replay_flow(config_path: Path, tmp_path: Path, capsys):
    run_dir = tmp_path / "run"
    main(
        [
            "route",
            str(task_path(config_path)),
            "--config",
            str(config_path),
            "--out",
            str(run_dir),
        ]
    )
    capsys.readouterr()
    replay_dir = tmp_path / "replayed"
    code = main(
        [
            "replay",
            str(task_path(config_path)),
            "--transcript",
            str(run_dir / "transcripts" / "gateway.jsonl"),
            "--config",
            str(config_path),
            "--out",
            str(replay_dir),
        ]
    )
    assert code == 0
    assert (replay_dir / "pool.json").is_file()
    capsys.readouterr()


def test_cli_replay_missing_transcript_exits_2(
    config_path: Path, tmp_path: Path, capsys
):
    code = main(
        [
            "replay",
            str(task_path(config_path)),
            "--transcript",
            str(tmp_path / "none.jsonl"),
            "--config",
            str(config_path),
        ]
    )
    assert code == 2
    assert "none.jsonl" in capsys.readouterr().err
