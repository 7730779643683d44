"""Parser and registry tests for the agent layer.

Expected values for the section splitter and decision parser were fixed by
hand from the grammar before the implementation existed.
"""

from __future__ import annotations

import json

import pytest
from hypothesis import given, strategies as st

from solroute.agents import (
    CONFIGURABLE_ROLES,
    AgentRegistry,
    AgentRole,
    AgentSpec,
    CommitteeDecision,
    ProposalSections,
    Verdict,
    default_agent_registry,
    parse_decision,
    parse_repetition_verdict,
    parse_sections,
    render_proposal,
    run_agent,
)
from solroute.errors import ConfigError, MalformedProposalError
from solroute.gateway import Gateway, ScriptedBackend, text_message

WELL_FORMED = """ANALYSIS:
The images show animals; counting is required.

THOUGHT:
Use the detector, then count boxes.

ACTION:
```python
result = call_tool("object_detector", image="inputs/img_0.png")
emit_answer(len(result["boxes"]))
```
"""


# ---------------------------------------------------------------------------
# parse_sections
# ---------------------------------------------------------------------------


def test_parse_sections_well_formed():
    sections = parse_sections(WELL_FORMED)
    assert sections.analysis == "The images show animals; counting is required."
    assert sections.thought == "Use the detector, then count boxes."
    assert sections.action_code.startswith('result = call_tool("object_detector"')
    assert sections.action_code.endswith('emit_answer(len(result["boxes"]))')


def test_parse_sections_missing_action():
    text = "ANALYSIS:\nstuff\n\nTHOUGHT:\nmore stuff\n"
    with pytest.raises(MalformedProposalError) as exc:
        parse_sections(text)
    assert exc.value.header == "ACTION"
    assert "ACTION" in str(exc.value)


def test_parse_sections_wrong_order_names_first_out_of_place_header():
    text = "THOUGHT:\nx\n\nANALYSIS:\ny\n\nACTION:\n```python\npass\n```"
    with pytest.raises(MalformedProposalError) as exc:
        parse_sections(text)
    assert exc.value.header == "ANALYSIS"


def test_parse_sections_empty_body_is_malformed():
    text = "ANALYSIS:\nok\n\nTHOUGHT:\n\nACTION:\n```python\npass\n```"
    with pytest.raises(MalformedProposalError) as exc:
        parse_sections(text)
    assert exc.value.header == "THOUGHT"


def test_parse_sections_unfenced_action_falls_back_to_raw_text():
    text = "ANALYSIS:\na\n\nTHOUGHT:\nb\n\nACTION:\nemit_answer(1)\n"
    assert parse_sections(text).action_code == "emit_answer(1)"


def test_parse_sections_ignores_fence_language_tag():
    text = "ANALYSIS:\na\n\nTHOUGHT:\nb\n\nACTION:\n```py\nemit_answer(2)\n```"
    assert parse_sections(text).action_code == "emit_answer(2)"


def test_parse_sections_empty_fence_is_malformed_action():
    text = "ANALYSIS:\na\n\nTHOUGHT:\nb\n\nACTION:\n```python\n\n```"
    with pytest.raises(MalformedProposalError) as exc:
        parse_sections(text)
    assert exc.value.header == "ACTION"


_body = st.text(
    alphabet=st.characters(blacklist_characters=":`", blacklist_categories=("Cs",)),
    min_size=1,
    max_size=80,
).map(str.strip).filter(lambda s: s and "ANALYSIS" not in s and "THOUGHT" not in s and "ACTION" not in s)


@given(analysis=_body, thought=_body, code=_body)
def test_render_parse_round_trip(analysis, thought, code):
    sections = ProposalSections(analysis=analysis, thought=thought, action_code=code)
    assert parse_sections(render_proposal(sections)) == sections


# ---------------------------------------------------------------------------
# parse_decision
# ---------------------------------------------------------------------------


def test_decision_accept_with_feedback():
    decision = parse_decision(AgentRole.CODE_CHECKER, "The code looks correct.\nDECISION: ACCEPT")
    assert decision.verdict is Verdict.ACCEPT
    assert decision.feedback == "The code looks correct."


def test_decision_reject_case_insensitive():
    decision = parse_decision(AgentRole.CODE_CHECKER, "DECISION: reject\nmissing bounds check")
    assert decision.verdict is Verdict.REJECT
    assert decision.feedback == "missing bounds check"


def test_decision_unparseable_is_fail_closed_reject():
    decision = parse_decision(AgentRole.REQUIREMENT_CHECKER, "great job")
    assert decision.verdict is Verdict.REJECT
    assert decision.feedback == "unparseable verdict"


def test_decision_bare_reject_gets_placeholder_feedback():
    decision = parse_decision(AgentRole.CODE_CHECKER, "DECISION: REJECT")
    assert decision.verdict is Verdict.REJECT
    assert decision.feedback == "(no feedback given)"


def test_decision_last_line_wins():
    text = "DECISION: ACCEPT\nwait, the loop is off by one\nDECISION: REJECT"
    decision = parse_decision(AgentRole.CODE_CHECKER, text)
    assert decision.verdict is Verdict.REJECT
    assert decision.feedback == "wait, the loop is off by one"


def test_decision_tolerates_trailing_period_and_whitespace():
    decision = parse_decision(AgentRole.CODE_CHECKER, "fine\n  DECISION: ACCEPT.  ")
    assert decision.verdict is Verdict.ACCEPT


def test_reject_decision_requires_feedback():
    with pytest.raises(ValueError):
        CommitteeDecision(role=AgentRole.CODE_CHECKER, verdict=Verdict.REJECT, feedback="  ")


@given(st.text(max_size=200))
def test_decision_parser_is_total(text):
    decision = parse_decision(AgentRole.CODE_CHECKER, text)
    assert decision.verdict in (Verdict.ACCEPT, Verdict.REJECT)
    if decision.verdict is Verdict.REJECT:
        assert decision.feedback.strip()


# ---------------------------------------------------------------------------
# parse_repetition_verdict
# ---------------------------------------------------------------------------

POOL_IDS = ("sol-000", "sol-001", "sol-002")


def test_verdict_line_duplicate():
    assert parse_repetition_verdict("VERDICT: sol-001", POOL_IDS) == "sol-001"


def test_verdict_line_unique():
    assert parse_repetition_verdict("Nothing matches.\nVERDICT: UNIQUE", POOL_IDS) is None


def test_verdict_last_line_wins():
    text = "VERDICT: sol-000\nOn reflection the loop differs.\nVERDICT: UNIQUE"
    assert parse_repetition_verdict(text, POOL_IDS) is None


def test_prose_unique_without_verdict_line():
    assert parse_repetition_verdict("This one is UNIQUE by structure.", POOL_IDS) is None


def test_prose_id_mention_without_verdict_line():
    text = "Same retrieval strategy as sol-002, only renamed."
    assert parse_repetition_verdict(text, POOL_IDS) == "sol-002"


def test_unparseable_verdict_fails_open(caplog):
    with caplog.at_level("WARNING"):
        assert parse_repetition_verdict("no idea", POOL_IDS) is None
    assert any("UNIQUE" in record.message for record in caplog.records)


def test_verdict_unknown_id_falls_back_to_scan():
    assert parse_repetition_verdict("VERDICT: sol-999\nresembles sol-001", POOL_IDS) == "sol-001"


# ---------------------------------------------------------------------------
# registry + run_agent
# ---------------------------------------------------------------------------


def test_default_registry_covers_all_model_backed_roles():
    registry = default_agent_registry()
    for role in CONFIGURABLE_ROLES:
        spec = registry.spec(role)
        assert spec.model == "default-model"
        assert spec.template
    assert not registry.has(AgentRole.CODE_DEBUGGER)


def test_default_temperatures():
    registry = default_agent_registry()
    assert registry.spec(AgentRole.SOLUTION_PROPOSER).temperature == pytest.approx(0.7)
    assert registry.spec(AgentRole.CODE_CHECKER).temperature == 0.0


def test_missing_role_raises_config_error():
    registry = AgentRegistry([])
    with pytest.raises(ConfigError):
        registry.spec(AgentRole.CODE_CHECKER)


def test_duplicate_role_rejected():
    spec = AgentSpec(role=AgentRole.CODE_CHECKER, model="m", template="t")
    with pytest.raises(ValueError):
        AgentRegistry([spec, spec])


def test_registry_from_file(tmp_path):
    template = tmp_path / "checker.tmpl"
    template.write_text("check {{task_id}} carefully", encoding="utf-8")
    config = {
        "CODE_CHECKER": {"model": "local-7b", "template_path": "checker.tmpl"},
        "SOLUTION_PROPOSER": {"model": "remote-x", "temperature": 0.9},
    }
    path = tmp_path / "agents.json"
    path.write_text(json.dumps(config), encoding="utf-8")

    registry = AgentRegistry.from_file(path)
    checker = registry.spec(AgentRole.CODE_CHECKER)
    assert checker.model == "local-7b"
    assert checker.template == "check {{task_id}} carefully"
    assert checker.temperature == 0.0
    proposer = registry.spec(AgentRole.SOLUTION_PROPOSER)
    assert proposer.temperature == pytest.approx(0.9)
    assert "ANALYSIS" in proposer.template


def test_run_agent_tags_and_orders_messages():
    captured = []

    def script(request):
        captured.append(request)
        return "DECISION: ACCEPT"

    gateway = Gateway(ScriptedBackend(script))
    registry = default_agent_registry()
    reply = run_agent(
        registry,
        gateway,
        AgentRole.CODE_CHECKER,
        [text_message("user", "please check this")],
        session_id="task-1-s000",
        values={"task_id": "task-1"},
    )
    assert reply == "DECISION: ACCEPT"
    (request,) = captured
    assert request.tag == "CODE_CHECKER:task-1-s000"
    assert request.messages[0].role == "system"
    assert request.messages[1].parts[0].text == "please check this"
    assert request.temperature == 0.0
