"""Domain types shared by every other module: tasks, instances, solutions,
pools, and model cards, plus validation and the labeled/unlabeled split.

All types are immutable values; pools are replaced, never mutated in place, so
they are safe to share across threads. Admission is serialized by the
conversation engine.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from .errors import IdCollisionError

logger = logging.getLogger(__name__)

# Validation codes reported by validate_task_spec.
FILE_MISSING = "FILE_MISSING"
SPLIT_INVALID = "SPLIT_INVALID"
EXAMPLE_UNLABELED = "EXAMPLE_UNLABELED"
DUPLICATE_ID = "DUPLICATE_ID"
CONSTRAINT_INVALID = "CONSTRAINT_INVALID"


class ConstraintKind(str, Enum):
    MAX_LATENCY_PER_INSTANCE = "MAX_LATENCY_PER_INSTANCE"
    MAX_MONETARY_COST_PER_INSTANCE = "MAX_MONETARY_COST_PER_INSTANCE"
    MIN_ACCURACY = "MIN_ACCURACY"
    FORBIDDEN_MODEL = "FORBIDDEN_MODEL"


class CostClass(str, Enum):
    LOCAL = "LOCAL"
    REMOTE_API = "REMOTE_API"


@dataclass(frozen=True)
class Instance:
    """One task instance: images, a request prompt, and an optional label."""

    id: str
    images: tuple[str, ...]
    request_prompt: str
    ground_truth: str | None = None

    @property
    def labeled(self) -> bool:
        return bool(self.ground_truth)


@dataclass(frozen=True)
class Constraint:
    kind: ConstraintKind
    value: float | str


@dataclass(frozen=True)
class TaskSpec:
    """A user task: N instances of which the first ``example_count`` are the
    labeled examples shown to the router."""

    task_id: str
    description: str
    instances: tuple[Instance, ...]
    example_count: int
    constraints: tuple[Constraint, ...] = ()

    @property
    def labeled_instances(self) -> tuple[Instance, ...]:
        return tuple(inst for inst in self.instances if inst.labeled)


@dataclass(frozen=True)
class Provenance:
    session_id: str
    iteration_index: int
    backend_id: str


@dataclass(frozen=True)
class Solution:
    """An admitted proposal: the three sections plus provenance."""

    id: str
    analysis: str
    thought: str
    action_code: str
    declared_models: tuple[str, ...]
    provenance: Provenance
    created_at: float

    def __post_init__(self) -> None:
        if not self.action_code.strip():
            raise ValueError("action_code must be non-empty")


@dataclass(frozen=True)
class SolutionPool:
    task_id: str
    solutions: tuple[Solution, ...] = ()

    def ids(self) -> tuple[str, ...]:
        return tuple(s.id for s in self.solutions)

    def __len__(self) -> int:
        return len(self.solutions)


@dataclass(frozen=True)
class ArgSpec:
    name: str
    type: str
    description: str


@dataclass(frozen=True)
class ModelCard:
    """Documentation of one pooled model as shown to the router agents."""

    name: str
    functionality: str
    input_args: tuple[ArgSpec, ...]
    return_args: tuple[ArgSpec, ...]
    example_usage: str
    cost_class: CostClass = CostClass.LOCAL

    def __post_init__(self) -> None:
        for fname in ("name", "functionality", "example_usage"):
            if not getattr(self, fname).strip():
                raise ValueError(f"ModelCard.{fname} must be non-empty")
        if not self.input_args or not self.return_args:
            raise ValueError("ModelCard argument lists must be non-empty")


@dataclass(frozen=True)
class Violation:
    code: str
    message: str
    instance_id: str | None = None
    field: str | None = None


def example_count_ceiling(total_instances: int) -> int:
    """Largest allowed example count for a task of the given size."""
    return max(4, math.ceil(total_instances / 10))


def validate_task_spec(spec: TaskSpec) -> list[Violation]:
    """Check every task invariant; an empty report means the spec is valid.

    Image references are checked for readability, which makes this the one
    core operation that touches the filesystem.
    """
    report: list[Violation] = []
    n, total = spec.example_count, len(spec.instances)

    if n < 1:
        report.append(Violation(SPLIT_INVALID, f"example_count must be >= 1, got {n}"))
    if n >= total:
        report.append(
            Violation(SPLIT_INVALID, f"example_count {n} must be < instance count {total}")
        )
    ceiling = example_count_ceiling(total)
    if 1 <= n < total and n > ceiling:
        report.append(
            Violation(
                SPLIT_INVALID,
                f"example_count {n} exceeds the allowed ceiling {ceiling} for {total} instances",
            )
        )

    seen: set[str] = set()
    for idx, inst in enumerate(spec.instances):
        if inst.id in seen:
            report.append(
                Violation(DUPLICATE_ID, f"instance id {inst.id!r} appears more than once", inst.id, "id")
            )
        seen.add(inst.id)
        if idx < n and not inst.labeled:
            report.append(
                Violation(
                    EXAMPLE_UNLABELED,
                    f"instance {inst.id!r} is within the first {n} but has no ground_truth",
                    inst.id,
                    "ground_truth",
                )
            )
        for image in inst.images:
            path = Path(image)
            if not path.is_file():
                report.append(
                    Violation(FILE_MISSING, f"image {image!r} is not a readable file", inst.id, "images")
                )

    for constraint in spec.constraints:
        if constraint.kind is ConstraintKind.FORBIDDEN_MODEL:
            if not isinstance(constraint.value, str) or not constraint.value.strip():
                report.append(
                    Violation(CONSTRAINT_INVALID, "FORBIDDEN_MODEL requires a model name", field="constraints")
                )
            continue
        try:
            value = float(constraint.value)  # type: ignore[arg-type]
        except (TypeError, ValueError):
            report.append(
                Violation(CONSTRAINT_INVALID, f"{constraint.kind.value} requires a number", field="constraints")
            )
            continue
        if value <= 0:
            report.append(
                Violation(
                    CONSTRAINT_INVALID, f"{constraint.kind.value} must be strictly positive", field="constraints"
                )
            )
        elif constraint.kind is ConstraintKind.MIN_ACCURACY and value > 1:
            report.append(
                Violation(CONSTRAINT_INVALID, "MIN_ACCURACY must be in (0, 1]", field="constraints")
            )

    return report


def split_examples(spec: TaskSpec) -> tuple[list[Instance], list[Instance]]:
    """Prefix split into (examples, remainder), preserving instance order."""
    n = spec.example_count
    return list(spec.instances[:n]), list(spec.instances[n:])


def admit(pool: SolutionPool, candidate: Solution, duplicate_of: str | None = None) -> SolutionPool:
    """Append ``candidate`` to the pool, or log and skip it when flagged as a
    duplicate. Pools are values: the result is a new pool either way."""
    if candidate.id in pool.ids():
        raise IdCollisionError(f"solution id {candidate.id!r} already in pool")
    if duplicate_of is not None:
        logger.info(
            "rejected duplicate solution %s (matches pool member %s)", candidate.id, duplicate_of
        )
        return pool
    return SolutionPool(task_id=pool.task_id, solutions=pool.solutions + (candidate,))


# ---------------------------------------------------------------------------
# JSON (de)serialization. Field order is part of the pool-file contract.
# ---------------------------------------------------------------------------


def instance_to_dict(inst: Instance) -> dict:
    data: dict = {"id": inst.id, "images": list(inst.images), "request_prompt": inst.request_prompt}
    if inst.ground_truth is not None:
        data["ground_truth"] = inst.ground_truth
    return data


def task_spec_to_dict(spec: TaskSpec) -> dict:
    return {
        "task_id": spec.task_id,
        "description": spec.description,
        "example_count": spec.example_count,
        "constraints": [{"kind": c.kind.value, "value": c.value} for c in spec.constraints],
        "instances": [instance_to_dict(i) for i in spec.instances],
    }


def task_spec_from_dict(data: dict, base_dir: Path | None = None) -> TaskSpec:
    """Build a TaskSpec from parsed JSON. Relative image paths are resolved
    against ``base_dir`` (the task file's directory) so specs stay portable."""

    def resolve(image: str) -> str:
        path = Path(image)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        return str(path)

    instances = tuple(
        Instance(
            id=str(item["id"]),
            images=tuple(resolve(img) for img in item.get("images", [])),
            request_prompt=str(item.get("request_prompt", "")),
            ground_truth=item.get("ground_truth"),
        )
        for item in data.get("instances", [])
    )
    constraints = tuple(
        Constraint(kind=ConstraintKind(item["kind"]), value=item["value"])
        for item in data.get("constraints", [])
    )
    return TaskSpec(
        task_id=str(data["task_id"]),
        description=str(data.get("description", "")),
        instances=instances,
        example_count=int(data.get("example_count", 0)),
        constraints=constraints,
    )


def load_task_spec(path: str | Path) -> TaskSpec:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    return task_spec_from_dict(data, base_dir=path.parent)


def solution_to_dict(solution: Solution) -> dict:
    return {
        "id": solution.id,
        "analysis": solution.analysis,
        "thought": solution.thought,
        "action_code": solution.action_code,
        "declared_models": list(solution.declared_models),
        "provenance": {
            "session_id": solution.provenance.session_id,
            "iteration_index": solution.provenance.iteration_index,
            "backend_id": solution.provenance.backend_id,
        },
        "created_at": solution.created_at,
    }


def solution_from_dict(data: dict) -> Solution:
    prov = data["provenance"]
    return Solution(
        id=data["id"],
        analysis=data["analysis"],
        thought=data["thought"],
        action_code=data["action_code"],
        declared_models=tuple(data.get("declared_models", [])),
        provenance=Provenance(prov["session_id"], prov["iteration_index"], prov["backend_id"]),
        created_at=float(data["created_at"]),
    )


def pool_to_dict(pool: SolutionPool) -> dict:
    return {"task_id": pool.task_id, "solutions": [solution_to_dict(s) for s in pool.solutions]}


def pool_from_dict(data: dict) -> SolutionPool:
    return SolutionPool(
        task_id=data["task_id"],
        solutions=tuple(solution_from_dict(item) for item in data.get("solutions", [])),
    )


def save_pool(pool: SolutionPool, path: str | Path) -> None:
    Path(path).write_text(json.dumps(pool_to_dict(pool), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def load_pool(path: str | Path) -> SolutionPool:
    with open(path, encoding="utf-8") as fh:
        return pool_from_dict(json.load(fh))


def card_to_dict(card: ModelCard) -> dict:
    return {
        "name": card.name,
        "functionality": card.functionality,
        "input_args": [{"name": a.name, "type": a.type, "description": a.description} for a in card.input_args],
        "return_args": [{"name": a.name, "type": a.type, "description": a.description} for a in card.return_args],
        "example_usage": card.example_usage,
        "cost_class": card.cost_class.value,
    }


def card_from_dict(data: dict) -> ModelCard:
    def args(items: list) -> tuple[ArgSpec, ...]:
        return tuple(ArgSpec(a["name"], a.get("type", "any"), a.get("description", "")) for a in items)

    return ModelCard(
        name=data["name"],
        functionality=data["functionality"],
        input_args=args(data.get("input_args", [])),
        return_args=args(data.get("return_args", [])),
        example_usage=data["example_usage"],
        cost_class=CostClass(data.get("cost_class", "LOCAL")),
    )


def load_model_cards(path: str | Path) -> list[ModelCard]:
    """Load a model pool; duplicate card names are rejected."""
    with open(path, encoding="utf-8") as fh:
        items = json.load(fh)
    cards = [card_from_dict(item) for item in items]
    names = [c.name for c in cards]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate model card names in {path}")
    return cards
