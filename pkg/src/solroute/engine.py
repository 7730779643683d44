"""The routing session: proposer and engineer draft a candidate, the sandbox
runs it on the labeled examples, a checker committee votes, and survivors
pass a two-stage duplicate gate before joining the pool.

Committee calls run sequentially in a fixed role order and all rendered
context (execution reports included) is deterministic, so a recorded session
replays byte for byte.
"""

from __future__ import annotations

import builtins
import io
import json
import keyword
import logging
import re
import tokenize
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Sequence

from .agents import (
    AgentRegistry,
    AgentRole,
    CommitteeDecision,
    ProposalSections,
    Verdict,
    parse_decision,
    parse_repetition_verdict,
    parse_sections,
    render_proposal,
    run_agent,
)
from .core import (
    Instance,
    ModelCard,
    Provenance,
    Solution,
    SolutionPool,
    TaskSpec,
    admit,
    split_examples,
)
from .errors import EngineError, MalformedProposalError
from .gateway import Gateway, Message, text_message
from .prompts import PromptTemplates, assemble_router_prompt, build_bundle, render_solution_pool
from .sandbox import ExecutionReport, execute_over

logger = logging.getLogger(__name__)

Executor = Callable[..., "list[ExecutionReport]"]


class OutcomeKind(str, Enum):
    ADMITTED = "ADMITTED"
    ADMITTED_AT_CAP = "ADMITTED_AT_CAP"
    REJECTED_DUPLICATE = "REJECTED_DUPLICATE"
    FAILED = "FAILED"


@dataclass(frozen=True)
class SessionConfig:
    max_iterations: int = 6
    committee: tuple[AgentRole, ...] = (
        AgentRole.REQUIREMENT_CHECKER,
        AgentRole.CODE_CHECKER,
    )
    repetition_check_enabled: bool = True
    debugger_enabled: bool = True
    exec_timeout: float = 30.0

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")


@dataclass(frozen=True)
class IterationRecord:
    index: int
    analysis: str = ""
    thought: str = ""
    action_code: str = ""
    malformed_header: str | None = None
    reports: tuple[ExecutionReport, ...] = ()
    decisions: tuple[CommitteeDecision, ...] = ()
    accepted: bool = False


@dataclass(frozen=True)
class SessionOutcome:
    kind: OutcomeKind
    session_id: str
    solution: Solution | None = None
    duplicate_of: str | None = None
    failure_cause: str | None = None
    iterations: tuple[IterationRecord, ...] = ()

    @property
    def iterations_used(self) -> int:
        return len(self.iterations)


@dataclass
class RouterRuntime:
    """Everything a session needs injected: the model gateway, the per-role
    agent registry, and an executor with the execute_over calling shape."""

    gateway: Gateway
    agents: AgentRegistry
    executor: Executor
    templates: PromptTemplates | None = None


def make_executor(
    tools_url: str = "",
    timeout: float = 30.0,
    max_workers: int = 4,
    interpreter: Sequence[str] | None = None,
) -> Executor:
    def executor(
        action_code: str, instances: Sequence[Instance], *, usage_tag: str = ""
    ) -> list[ExecutionReport]:
        return execute_over(
            action_code,
            instances,
            timeout=timeout,
            tools_url=tools_url,
            usage_tag=usage_tag,
            max_workers=max_workers,
            interpreter=interpreter,
        )

    return executor


# ---------------------------------------------------------------------------
# code normalization (duplicate stage a)
# ---------------------------------------------------------------------------

_CANONICAL_NAMES = frozenset(dir(builtins)) | {
    "emit_answer",
    "emit_trace",
    "call_tool",
    "load_manifest",
}

_TOKEN_MARKERS = {
    tokenize.NEWLINE: "<nl>",
    tokenize.INDENT: "<in>",
    tokenize.DEDENT: "<out>",
}


def normalize_code(code: str) -> str:
    """Canonical form for exact-duplicate detection: comments and whitespace
    dropped, user identifiers renamed by first-appearance position, keywords,
    builtins, harness functions, and literals kept verbatim."""
    out: list[str] = []
    rename: dict[str, str] = {}
    try:
        tokens = tokenize.tokenize(io.BytesIO(code.encode("utf-8")).readline)
        for tok in tokens:
            if tok.type in (
                tokenize.COMMENT,
                tokenize.NL,
                tokenize.ENCODING,
                tokenize.ENDMARKER,
            ):
                continue
            if tok.type in _TOKEN_MARKERS:
                out.append(_TOKEN_MARKERS[tok.type])
            elif tok.type == tokenize.NAME:
                if keyword.iskeyword(tok.string) or tok.string in _CANONICAL_NAMES:
                    out.append(tok.string)
                else:
                    if tok.string not in rename:
                        rename[tok.string] = f"v{len(rename)}"
                    out.append(rename[tok.string])
            else:
                out.append(tok.string)
    except (tokenize.TokenError, SyntaxError, IndentationError):
        stripped = re.sub(r"#[^\n]*", "", code)
        return " ".join(stripped.split())
    return " ".join(out)


def check_repetition(
    action_code: str,
    pool: SolutionPool,
    runtime: RouterRuntime | None = None,
    session_id: str = "",
    repetition_check_enabled: bool = True,
) -> str | None:
    """Id of the pool member this code duplicates, or None.

    Stage (a) is normalized-text equality; stage (b) asks the repetition
    checker to judge structural equivalence past renames and reordering.
    Disabling the check (the ablation toggle) skips both stages.
    """
    if not repetition_check_enabled or not pool.solutions:
        return None
    candidate_norm = normalize_code(action_code)
    for member in pool.solutions:
        if normalize_code(member.action_code) == candidate_norm:
            return member.id
    if runtime is None or not runtime.agents.has(AgentRole.REPETITION_CHECKER):
        return None
    context = [
        text_message(
            "user",
            "SOLUTION POOL:\n"
            + render_solution_pool(pool)
            + "\n\nCANDIDATE:\n```python\n"
            + action_code
            + "\n```",
        )
    ]
    reply = run_agent(
        runtime.agents,
        runtime.gateway,
        AgentRole.REPETITION_CHECKER,
        context,
        session_id=session_id,
    )
    return parse_repetition_verdict(reply, pool.ids())


# ---------------------------------------------------------------------------
# session loop
# ---------------------------------------------------------------------------

_CALL_TOOL_NAME = re.compile(r"""call_tool\(\s*['"]([A-Za-z0-9_.-]+)['"]""")


def declared_models_in(action_code: str, cards: Sequence[ModelCard]) -> tuple[str, ...]:
    carded = {card.name for card in cards}
    found = {m.group(1) for m in _CALL_TOOL_NAME.finditer(action_code)}
    return tuple(sorted(found & carded))


def render_execution_report(
    reports: Sequence[ExecutionReport],
    examples: Sequence[Instance],
    include_traces: bool,
) -> str:
    """Deterministic text shown to the committee. Wall times are excluded on
    purpose: they vary run to run and would break transcript replay."""
    expected = {instance.id: instance.ground_truth for instance in examples}
    lines: list[str] = []
    for report in reports:
        lines.append(f"INSTANCE {report.instance_id}: status={report.status.value}")
        lines.append(f"  answer: {json.dumps(report.answer)}")
        if report.instance_id in expected:
            lines.append(f"  expected: {json.dumps(expected[report.instance_id])}")
        if include_traces and report.traces:
            lines.append(f"  traces: {json.dumps(list(report.traces))}")
        if report.stderr_tail:
            lines.append("  stderr: " + report.stderr_tail.strip().replace("\n", "\n    "))
    return "\n".join(lines)


def _assemble(proposer_text: str, engineer_text: str) -> ProposalSections:
    action = engineer_text.strip()
    if "ACTION:" not in action:
        action = "ACTION:\n" + action
    return parse_sections(proposer_text.strip() + "\n\n" + action)


def run_session(
    task: TaskSpec,
    cards: Sequence[ModelCard],
    pool: SolutionPool,
    runtime: RouterRuntime,
    config: SessionConfig = SessionConfig(),
    session_index: int = 0,
) -> SessionOutcome:
    session_id = f"{task.task_id}-s{session_index:03d}"
    examples, _ = split_examples(task)

    try:
        bundle = build_bundle(task, cards, pool, runtime.templates)
        system_msg, user_msg = assemble_router_prompt(bundle)
    except EngineError as exc:
        return SessionOutcome(
            kind=OutcomeKind.FAILED, session_id=session_id, failure_cause=exc.code
        )

    base: list[Message] = [system_msg, user_msg]
    dialogue: list[Message] = []
    values = {"task_id": task.task_id}
    records: list[IterationRecord] = []
    last_good: ProposalSections | None = None
    last_good_iteration = 0
    accepted = False

    try:
        for iteration in range(1, config.max_iterations + 1):
            proposer_text = run_agent(
                runtime.agents,
                runtime.gateway,
                AgentRole.SOLUTION_PROPOSER,
                base + dialogue,
                session_id=session_id,
                values=values,
            )
            engineer_text = run_agent(
                runtime.agents,
                runtime.gateway,
                AgentRole.SOLUTION_ENGINEER,
                base + dialogue + [text_message("user", "PROPOSAL:\n" + proposer_text)],
                session_id=session_id,
                values=values,
            )
            try:
                sections = _assemble(proposer_text, engineer_text)
            except MalformedProposalError as exc:
                records.append(
                    IterationRecord(index=iteration, malformed_header=exc.header)
                )
                dialogue.append(
                    text_message(
                        "assistant", proposer_text.strip() + "\n\n" + engineer_text.strip()
                    )
                )
                dialogue.append(
                    text_message(
                        "user",
                        f"COMMITTEE FEEDBACK (iteration {iteration}):\n{exc}",
                    )
                )
                continue

            last_good = sections
            last_good_iteration = iteration
            reports = runtime.executor(
                sections.action_code, examples, usage_tag=f"exec:{session_id}:it{iteration}"
            )
            report_text = render_execution_report(
                reports, examples, include_traces=config.debugger_enabled
            )
            proposal_text = render_proposal(sections)
            committee_context = base + [
                text_message(
                    "user",
                    "CANDIDATE SOLUTION:\n"
                    + proposal_text
                    + "\n\nEXECUTION REPORT:\n"
                    + report_text,
                )
            ]
            decisions: list[CommitteeDecision] = []
            for role in config.committee:
                reply = run_agent(
                    runtime.agents,
                    runtime.gateway,
                    role,
                    committee_context,
                    session_id=session_id,
                    values=values,
                )
                decisions.append(parse_decision(role, reply))
            accepted = all(d.verdict is Verdict.ACCEPT for d in decisions)
            records.append(
                IterationRecord(
                    index=iteration,
                    analysis=sections.analysis,
                    thought=sections.thought,
                    action_code=sections.action_code,
                    reports=tuple(reports),
                    decisions=tuple(decisions),
                    accepted=accepted,
                )
            )
            if accepted:
                break
            feedback = "\n".join(
                f"[{d.role.value}] {d.feedback}"
                for d in decisions
                if d.verdict is Verdict.REJECT
            )
            dialogue.append(text_message("assistant", proposal_text))
            dialogue.append(
                text_message(
                    "user", f"COMMITTEE FEEDBACK (iteration {iteration}):\n{feedback}"
                )
            )

        if last_good is None:
            return SessionOutcome(
                kind=OutcomeKind.FAILED,
                session_id=session_id,
                failure_cause="MALFORMED_PROPOSAL",
                iterations=tuple(records),
            )

        duplicate_of = check_repetition(
            last_good.action_code,
            pool,
            runtime,
            session_id=session_id,
            repetition_check_enabled=config.repetition_check_enabled,
        )
    except EngineError as exc:
        return SessionOutcome(
            kind=OutcomeKind.FAILED,
            session_id=session_id,
            failure_cause=exc.code,
            iterations=tuple(records),
        )

    if duplicate_of is not None:
        return SessionOutcome(
            kind=OutcomeKind.REJECTED_DUPLICATE,
            session_id=session_id,
            duplicate_of=duplicate_of,
            iterations=tuple(records),
        )

    solution = Solution(
        id=f"sol-{session_index:03d}",
        analysis=last_good.analysis,
        thought=last_good.thought,
        action_code=last_good.action_code,
        declared_models=declared_models_in(last_good.action_code, cards),
        provenance=Provenance(
            session_id=session_id,
            iteration_index=last_good_iteration,
            backend_id=runtime.gateway.backend.backend_id,
        ),
        created_at=runtime.gateway.now(),
    )
    return SessionOutcome(
        kind=OutcomeKind.ADMITTED if accepted else OutcomeKind.ADMITTED_AT_CAP,
        session_id=session_id,
        solution=solution,
        iterations=tuple(records),
    )


def generate_pool(
    task: TaskSpec,
    cards: Sequence[ModelCard],
    runtime: RouterRuntime,
    config: SessionConfig = SessionConfig(),
    budget: int = 4,
    on_outcome: Callable[[SessionOutcome], None] | None = None,
) -> SolutionPool:
    """Run ``budget`` sessions against a growing pool. Failed and duplicate
    sessions consume budget without adding members."""
    if budget < 1:
        raise ValueError("budget must be at least 1")
    pool = SolutionPool(task_id=task.task_id, solutions=())
    for session_index in range(budget):
        outcome = run_session(
            task, cards, pool, runtime, config=config, session_index=session_index
        )
        if outcome.solution is not None:
            pool = admit(pool, outcome.solution)
        if on_outcome is not None:
            on_outcome(outcome)
    if not pool.solutions:
        logger.warning(
            "EMPTY_POOL_RESULT: no session out of %d produced an admissible solution",
            budget,
        )
    return pool


# ---------------------------------------------------------------------------
# persistence of session records
# ---------------------------------------------------------------------------


def report_to_dict(report: ExecutionReport) -> dict:
    return {
        "instance_id": report.instance_id,
        "status": report.status.value,
        "answer": report.answer,
        "traces": [list(t) for t in report.traces],
        "wall_time": report.wall_time,
        "exit_code": report.exit_code,
        "stderr_tail": report.stderr_tail,
    }


def iteration_to_dict(record: IterationRecord) -> dict:
    return {
        "index": record.index,
        "analysis": record.analysis,
        "thought": record.thought,
        "action_code": record.action_code,
        "malformed_header": record.malformed_header,
        "reports": [report_to_dict(r) for r in record.reports],
        "decisions": [
            {"role": d.role.value, "verdict": d.verdict.value, "feedback": d.feedback}
            for d in record.decisions
        ],
        "accepted": record.accepted,
    }


def outcome_to_dict(outcome: SessionOutcome) -> dict:
    from .core import solution_to_dict

    return {
        "kind": outcome.kind.value,
        "session_id": outcome.session_id,
        "solution": solution_to_dict(outcome.solution) if outcome.solution else None,
        "duplicate_of": outcome.duplicate_of,
        "failure_cause": outcome.failure_cause,
        "iterations_used": outcome.iterations_used,
        "iterations": [iteration_to_dict(r) for r in outcome.iterations],
    }
