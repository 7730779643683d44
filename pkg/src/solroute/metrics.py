"""Scoring: metric cards, per-item scorers, open-form answer mapping for
multiple choice, and agent-assisted metric selection.

Mapping rules favor precision over recall: a prediction that names two
different choice labels, or matches two choice texts, is UNMAPPED (scored
zero) rather than guessed at. Ground truths pass through the same mapping,
so any systematic bias cancels.
"""

from __future__ import annotations

import logging
import re
import statistics
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

from .agents import AgentRegistry, AgentRole, run_agent
from .core import Instance, TaskSpec
from .errors import ConfigError, ShapeMismatchError
from .gateway import Gateway, text_message

logger = logging.getLogger(__name__)


class _Unmapped:
    """Sentinel for predictions that cannot be attributed to any choice."""

    __slots__ = ()

    def __repr__(self) -> str:
        return "UNMAPPED"


UNMAPPED = _Unmapped()

DEFAULT_NUMERIC_EPS = 1e-6


# ---------------------------------------------------------------------------
# text normalization and open-form mapping
# ---------------------------------------------------------------------------

_PUNCT = re.compile(r"[^\w\s]", re.UNICODE)
_CHOICE_LINE = re.compile(r"^\s*\(([A-Z])\)\s*(.+?)\s*$", re.MULTILINE)

_PAREN_LABEL = re.compile(r"\(([A-Z])\)")
_HALF_PAREN_LABEL = re.compile(r"\b([A-Z])\)")
_ANSWER_IS_LABEL = re.compile(r"(?i:answer\s+is)\s*\(?([A-Z])\)?")
_BARE_LABEL = re.compile(r"^\s*([A-Z])\s*\.?\s*$")


def normalize_text(text: str) -> str:
    """Casefold, strip punctuation, collapse whitespace."""
    lowered = _PUNCT.sub(" ", str(text).casefold())
    return " ".join(lowered.split())


def parse_choices(request_prompt: str) -> tuple[tuple[str, str], ...]:
    """``(A) some text`` lines, as (label, text) pairs in prompt order."""
    return tuple((m.group(1), m.group(2)) for m in _CHOICE_LINE.finditer(request_prompt))


def map_open_form(prediction: object, choices: Sequence[tuple[str, str]]) -> object:
    """Choice label for a free-form prediction, or UNMAPPED.

    Stage 1 looks for explicit labels ("(B)", "B)", "answer is B", or the
    whole prediction being a single capital letter); exactly one distinct
    label must survive. Stage 2 falls back to normalized choice-text
    containment, again requiring a unique match.
    """
    text = str(prediction)
    labels = {label for label, _ in choices}

    found: set[str] = set()
    for pattern in (_PAREN_LABEL, _HALF_PAREN_LABEL, _ANSWER_IS_LABEL):
        for match in pattern.finditer(text):
            if match.group(1) in labels:
                found.add(match.group(1))
    bare = _BARE_LABEL.match(text)
    if bare and bare.group(1) in labels:
        found.add(bare.group(1))
    if len(found) > 1:
        return UNMAPPED
    if len(found) == 1:
        return next(iter(found))

    norm_pred = normalize_text(text)
    if not norm_pred:
        return UNMAPPED
    contained = [
        label
        for label, choice_text in choices
        if normalize_text(choice_text) and normalize_text(choice_text) in norm_pred
    ]
    if len(contained) == 1:
        return contained[0]
    return UNMAPPED


# ---------------------------------------------------------------------------
# per-item scorers
# ---------------------------------------------------------------------------

_FLOAT = re.compile(r"[-+]?\d*\.?\d+(?:[eE][-+]?\d+)?")


def _first_float(value: object) -> float | None:
    if isinstance(value, bool):
        return None
    if isinstance(value, (int, float)):
        return float(value)
    match = _FLOAT.search(str(value))
    return float(match.group(0)) if match else None


def score_exact_match(prediction: object, instance: Instance) -> float:
    if instance.ground_truth is None:
        raise ValueError(f"instance {instance.id} has no ground truth")
    return 1.0 if normalize_text(prediction) == normalize_text(instance.ground_truth) else 0.0


def score_multiple_choice(prediction: object, instance: Instance) -> float:
    if instance.ground_truth is None:
        raise ValueError(f"instance {instance.id} has no ground truth")
    choices = parse_choices(instance.request_prompt)
    if not choices:
        return 0.0
    predicted = map_open_form(prediction, choices)
    gold = map_open_form(instance.ground_truth, choices)
    if predicted is UNMAPPED or gold is UNMAPPED:
        return 0.0
    return 1.0 if predicted == gold else 0.0


def score_numeric(
    prediction: object, instance: Instance, eps: float = DEFAULT_NUMERIC_EPS
) -> float:
    if instance.ground_truth is None:
        raise ValueError(f"instance {instance.id} has no ground truth")
    predicted = _first_float(prediction)
    gold = _first_float(instance.ground_truth)
    if predicted is None or gold is None:
        return 0.0
    return 1.0 if abs(predicted - gold) <= eps * max(1.0, abs(gold)) else 0.0


# ---------------------------------------------------------------------------
# metric registry
# ---------------------------------------------------------------------------

Scorer = Callable[[object, Instance], float]


@dataclass(frozen=True)
class MetricCard:
    name: str
    description: str
    when_to_use: str
    example: str

    def __post_init__(self) -> None:
        if not self.name.strip() or not self.description.strip():
            raise ValueError("metric cards need a name and a description")


class ChooserKind(str, Enum):
    AGENT = "AGENT"
    USER = "USER"


@dataclass(frozen=True)
class MetricChoice:
    metric_name: str
    chosen_by: ChooserKind
    fallback: bool = False


class MetricRegistry:
    def __init__(self) -> None:
        self._cards: dict[str, MetricCard] = {}
        self._scorers: dict[str, Scorer] = {}

    def register(self, card: MetricCard, scorer: Scorer, replace: bool = False) -> None:
        if card.name in self._cards and not replace:
            raise ValueError(f"metric {card.name!r} already registered")
        self._cards[card.name] = card
        self._scorers[card.name] = scorer

    def names(self) -> tuple[str, ...]:
        return tuple(sorted(self._cards))

    def card(self, name: str) -> MetricCard:
        if name not in self._cards:
            raise ConfigError(f"unknown metric {name!r}")
        return self._cards[name]

    def scorer(self, name: str) -> Scorer:
        if name not in self._scorers:
            raise ConfigError(f"unknown metric {name!r}")
        return self._scorers[name]

    def canonical_name(self, name: str) -> str | None:
        for known in self._cards:
            if known.casefold() == name.strip().casefold():
                return known
        return None


def default_metric_pool() -> tuple[MetricCard, ...]:
    return (
        MetricCard(
            name="EXACT_MATCH",
            description="1.0 when the normalized prediction equals the normalized "
            "ground truth (casefolded, punctuation stripped, whitespace collapsed).",
            when_to_use="Short free-form answers with a single canonical phrasing: "
            "labels, names, yes/no.",
            example='prediction "The Red Fox." matches ground truth "the red fox".',
        ),
        MetricCard(
            name="MULTIPLE_CHOICE_ACCURACY",
            description="Maps both prediction and ground truth onto the (A)/(B)/... "
            "choices embedded in the request prompt and scores label equality. "
            "Unmappable predictions score zero.",
            when_to_use="Prompts that enumerate lettered answer choices.",
            example='prediction "the answer is B" scores 1.0 when the truth is "(B)".',
        ),
        MetricCard(
            name="NUMERIC_TOLERANCE",
            description="Extracts the first number from prediction and ground truth "
            "and scores 1.0 when they differ by at most eps * max(1, |truth|).",
            when_to_use="Counting, measurement, or estimation tasks where formatting "
            "noise around a number is irrelevant.",
            example='prediction "about 12.0 items" matches ground truth "12".',
        ),
    )


def default_registry() -> MetricRegistry:
    registry = MetricRegistry()
    cards = {card.name: card for card in default_metric_pool()}
    registry.register(cards["EXACT_MATCH"], score_exact_match)
    registry.register(cards["MULTIPLE_CHOICE_ACCURACY"], score_multiple_choice)
    registry.register(cards["NUMERIC_TOLERANCE"], score_numeric)
    return registry


def load_metric_pool(path: str | Path) -> tuple[MetricCard, ...]:
    import json

    with open(path, encoding="utf-8") as fh:
        entries = json.load(fh)
    return tuple(
        MetricCard(
            name=entry["name"],
            description=entry["description"],
            when_to_use=entry.get("when_to_use", ""),
            example=entry.get("example", ""),
        )
        for entry in entries
    )


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalResult:
    p: float
    per_item: tuple[float, ...]


def evaluate(
    predictions: Sequence[object],
    instances: Sequence[Instance],
    metric_name: str,
    registry: MetricRegistry | None = None,
) -> EvalResult:
    registry = registry or default_registry()
    if len(predictions) != len(instances):
        raise ShapeMismatchError(
            f"{len(predictions)} predictions for {len(instances)} instances"
        )
    if not instances:
        raise ShapeMismatchError("cannot evaluate zero instances")
    scorer = registry.scorer(metric_name)
    per_item = tuple(scorer(p, i) for p, i in zip(predictions, instances))
    return EvalResult(p=statistics.fmean(per_item), per_item=per_item)


# ---------------------------------------------------------------------------
# metric routing
# ---------------------------------------------------------------------------

_METRIC_LINE = re.compile(r"^\s*METRIC:\s*(\S+)\s*$", re.IGNORECASE | re.MULTILINE)


def parse_metric_choice(text: str, registry: MetricRegistry) -> str | None:
    matches = _METRIC_LINE.findall(text)
    if not matches:
        return None
    return registry.canonical_name(matches[-1])


def _routing_prompt(task: TaskSpec, registry: MetricRegistry) -> str:
    blocks = ["METRIC DEFINITIONS:"]
    for name in registry.names():
        card = registry.card(name)
        blocks.append(
            f"### METRIC: {card.name}\n"
            f"DESCRIPTION: {card.description}\n"
            f"WHEN TO USE: {card.when_to_use}\n"
            f"EXAMPLE: {card.example}"
        )
    blocks.append("TASK:\n" + task.description)
    lines = ["EXAMPLE INSTANCES:"]
    for instance in task.labeled_instances[: task.example_count]:
        lines.append(f"INSTANCE {instance.id}")
        lines.append("REQUEST: " + instance.request_prompt)
        lines.append(f"GROUND TRUTH: {instance.ground_truth}")
    blocks.append("\n".join(lines))
    return "\n\n".join(blocks)


def route_metric(
    task: TaskSpec,
    agents: AgentRegistry,
    gateway: Gateway,
    registry: MetricRegistry | None = None,
    user_choice: str | None = None,
    session_id: str = "metric",
) -> MetricChoice:
    """Pick the metric for a task. A user choice bypasses the agent entirely;
    otherwise the metric router gets one retry before the EXACT_MATCH
    fallback."""
    registry = registry or default_registry()
    if user_choice is not None:
        canonical = registry.canonical_name(user_choice)
        if canonical is None:
            raise ConfigError(f"unknown metric {user_choice!r}")
        return MetricChoice(metric_name=canonical, chosen_by=ChooserKind.USER)

    context = [text_message("user", _routing_prompt(task, registry))]
    for attempt in range(2):
        reply = run_agent(
            agents,
            gateway,
            AgentRole.METRIC_ROUTER,
            context,
            session_id=session_id,
            values={"task_id": task.task_id},
        )
        name = parse_metric_choice(reply, registry)
        if name is not None:
            return MetricChoice(metric_name=name, chosen_by=ChooserKind.AGENT)
        logger.warning(
            "metric router reply %d unparseable for task %s", attempt + 1, task.task_id
        )
    logger.warning("metric routing failed twice; falling back to EXACT_MATCH")
    return MetricChoice(
        metric_name="EXACT_MATCH", chosen_by=ChooserKind.AGENT, fallback=True
    )
