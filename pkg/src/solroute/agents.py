"""The seven agent roles, their prompt plumbing, and strict parsers for
structured agent output.

Parsing is deliberately asymmetric about failure:

* ``parse_decision`` is total and fail-closed: text without a recognizable
  DECISION line becomes a REJECT ("unparseable verdict"), because a committee
  that cannot be parsed must not silently accept.
* ``parse_repetition_verdict`` is fail-open (UNIQUE with a warning), because
  rejecting novel work hurts pool diversity more than admitting a duplicate.
* ``parse_sections`` raises ``MalformedProposalError`` naming the first header
  missing from its expected position; the engine feeds that back to the
  proposer instead of crashing.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

from .errors import ConfigError, MalformedProposalError
from .gateway import ChatRequest, Gateway, Message, text_message
from .prompts import default_template, render_template

logger = logging.getLogger(__name__)


class AgentRole(str, Enum):
    SOLUTION_PROPOSER = "SOLUTION_PROPOSER"
    SOLUTION_ENGINEER = "SOLUTION_ENGINEER"
    REQUIREMENT_CHECKER = "REQUIREMENT_CHECKER"
    CODE_CHECKER = "CODE_CHECKER"
    CODE_DEBUGGER = "CODE_DEBUGGER"
    REPETITION_CHECKER = "REPETITION_CHECKER"
    METRIC_ROUTER = "METRIC_ROUTER"


#: CODE_DEBUGGER is deterministic sandbox instrumentation, not a model call,
#: so it takes no backend configuration.
CONFIGURABLE_ROLES = tuple(r for r in AgentRole if r is not AgentRole.CODE_DEBUGGER)

_DEFAULT_TEMPERATURE = {
    AgentRole.SOLUTION_PROPOSER: 0.7,
    AgentRole.SOLUTION_ENGINEER: 0.7,
}


class Verdict(str, Enum):
    ACCEPT = "ACCEPT"
    REJECT = "REJECT"


@dataclass(frozen=True)
class ProposalSections:
    analysis: str
    thought: str
    action_code: str


@dataclass(frozen=True)
class CommitteeDecision:
    role: AgentRole
    verdict: Verdict
    feedback: str

    def __post_init__(self) -> None:
        if self.verdict is Verdict.REJECT and not self.feedback.strip():
            raise ValueError("REJECT decisions require feedback")


@dataclass(frozen=True)
class AgentSpec:
    role: AgentRole
    model: str
    template: str
    temperature: float = 0.0
    max_output_tokens: int = 2048


class AgentRegistry:
    """Binds each role to exactly one model + system-prompt template."""

    def __init__(self, specs: Sequence[AgentSpec]):
        self._specs: dict[AgentRole, AgentSpec] = {}
        for spec in specs:
            if spec.role in self._specs:
                raise ValueError(f"role {spec.role.value} configured twice")
            self._specs[spec.role] = spec

    def spec(self, role: AgentRole) -> AgentSpec:
        if role not in self._specs:
            raise ConfigError(f"agent role {role.value} is not configured")
        return self._specs[role]

    def has(self, role: AgentRole) -> bool:
        return role in self._specs

    @classmethod
    def from_file(cls, path: str | Path) -> "AgentRegistry":
        """JSON map role -> {model, template_path?, temperature?}. Relative
        template paths resolve against the config file; a missing
        template_path falls back to the packaged default for that role."""
        path = Path(path)
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        specs = []
        for role_name, entry in data.items():
            role = AgentRole(role_name)
            if "template_path" in entry:
                template_path = Path(entry["template_path"])
                if not template_path.is_absolute():
                    template_path = path.parent / template_path
                template = template_path.read_text(encoding="utf-8")
            else:
                template = default_template(role.value.lower())
            specs.append(
                AgentSpec(
                    role=role,
                    model=entry["model"],
                    template=template,
                    temperature=float(entry.get("temperature", _DEFAULT_TEMPERATURE.get(role, 0.0))),
                    max_output_tokens=int(entry.get("max_output_tokens", 2048)),
                )
            )
        return cls(specs)


def default_agent_registry(model: str = "default-model") -> AgentRegistry:
    return AgentRegistry(
        [
            AgentSpec(
                role=role,
                model=model,
                template=default_template(role.value.lower()),
                temperature=_DEFAULT_TEMPERATURE.get(role, 0.0),
            )
            for role in CONFIGURABLE_ROLES
        ]
    )


def run_agent(
    registry: AgentRegistry,
    gateway: Gateway,
    role: AgentRole,
    context: Sequence[Message],
    session_id: str,
    values: Mapping[str, object] | None = None,
) -> str:
    """One tagged model call: the role's rendered system prompt followed by
    the caller-supplied context messages."""
    spec = registry.spec(role)
    system = text_message("system", render_template(spec.template, values))
    request = ChatRequest(
        backend_model=spec.model,
        messages=(system, *context),
        temperature=spec.temperature,
        max_output_tokens=spec.max_output_tokens,
        tag=f"{role.value}:{session_id}",
    )
    return gateway.complete(request).text


# ---------------------------------------------------------------------------
# output parsing
# ---------------------------------------------------------------------------

_HEADERS = ("ANALYSIS:", "THOUGHT:", "ACTION:")
_FENCE = re.compile(r"```[A-Za-z0-9_+-]*\n(.*?)```", re.DOTALL)
_DECISION_LINE = re.compile(r"^\s*DECISION:\s*(ACCEPT|REJECT)\s*\.?\s*$", re.IGNORECASE)
_VERDICT_LINE = re.compile(r"^\s*VERDICT:\s*(.+?)\s*$", re.IGNORECASE)

UNPARSEABLE_FEEDBACK = "unparseable verdict"


def parse_sections(text: str) -> ProposalSections:
    """Split a proposal on the literal ANALYSIS:/THOUGHT:/ACTION: headers.

    Headers must appear in that order (first occurrence each). The error names
    the first expected header that is absent from its position, so a proposal
    opening with THOUGHT reports ANALYSIS as missing.
    """
    positions = {h: text.find(h) for h in _HEADERS}
    present = sorted((pos, h) for h, pos in positions.items() if pos >= 0)
    appearance = [h for _, h in present]
    for index, header in enumerate(_HEADERS):
        if index >= len(appearance) or appearance[index] != header:
            raise MalformedProposalError(header.rstrip(":"))

    bodies: dict[str, str] = {}
    for index, (pos, header) in enumerate(present):
        start = pos + len(header)
        end = present[index + 1][0] if index + 1 < len(present) else len(text)
        bodies[header] = text[start:end].strip()

    action = bodies["ACTION:"]
    fence = _FENCE.search(action)
    if fence:
        action = fence.group(1).strip()
    for header in _HEADERS:
        body = action if header == "ACTION:" else bodies[header]
        if not body:
            raise MalformedProposalError(header.rstrip(":"))
    return ProposalSections(
        analysis=bodies["ANALYSIS:"], thought=bodies["THOUGHT:"], action_code=action
    )


def render_proposal(sections: ProposalSections) -> str:
    return (
        f"ANALYSIS:\n{sections.analysis}\n\n"
        f"THOUGHT:\n{sections.thought}\n\n"
        f"ACTION:\n```python\n{sections.action_code}\n```"
    )


def parse_decision(role: AgentRole, text: str) -> CommitteeDecision:
    """Total: the last DECISION line wins; everything else is feedback; no
    DECISION line at all is the fail-closed REJECT."""
    verdict: Verdict | None = None
    feedback_lines: list[str] = []
    for line in text.splitlines():
        match = _DECISION_LINE.match(line)
        if match:
            verdict = Verdict(match.group(1).upper())
        else:
            feedback_lines.append(line)
    feedback = "\n".join(feedback_lines).strip()
    if verdict is None:
        return CommitteeDecision(role=role, verdict=Verdict.REJECT, feedback=UNPARSEABLE_FEEDBACK)
    if verdict is Verdict.REJECT and not feedback:
        feedback = "(no feedback given)"
    return CommitteeDecision(role=role, verdict=verdict, feedback=feedback)


def parse_repetition_verdict(text: str, pool_ids: Sequence[str]) -> str | None:
    """Duplicate id, or None for unique. Fail-open: unparseable output is
    treated as UNIQUE with a warning."""
    last_verdict: str | None = None
    for line in text.splitlines():
        match = _VERDICT_LINE.match(line)
        if match:
            last_verdict = match.group(1).strip()
    if last_verdict is not None:
        if last_verdict.upper() == "UNIQUE":
            return None
        if last_verdict in pool_ids:
            return last_verdict
    if re.search(r"\bUNIQUE\b", text):
        return None
    mentions = [(text.find(pid), pid) for pid in pool_ids if pid in text]
    if mentions:
        return min(mentions)[1]
    logger.warning("unparseable repetition verdict treated as UNIQUE: %.80r", text)
    return None
