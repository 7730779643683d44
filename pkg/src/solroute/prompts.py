"""Renders the router input from its five parts (model definitions,
requirements, in-context examples, solution-pool view, user spec) and packages
it as a multimodal message sequence.

Rendering is pure: no clock, no randomness, and byte-identical output for
equal inputs. Each part is wrapped in unique sentinel headers so the assembled
prompt can be parsed back into its parts exactly (see ``parse_router_prompt``).

The requirements text and the four in-context examples are configuration, not
code: editable template files with ``{{name}}`` placeholders (see
docs/prompting.md), with defaults shipped under ``solroute/templates/``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

from .core import Constraint, Instance, ModelCard, SolutionPool, TaskSpec, split_examples
from .errors import EmptyModelPoolError, ImageLoadError
from .gateway import ImagePart, Message, Part, TextPart

SECTION_NAMES = (
    "model_definitions",
    "requirements",
    "incontext_examples",
    "solution_pool",
    "user_spec",
)

_EXAMPLE_MARKER = re.compile(r"<<<EXAMPLE (\d+)>>>")
_PLACEHOLDER = re.compile(r"\{\{(\w+)\}\}")
_SECTION = re.compile(r"<<<SECTION:(\w+)>>>\n(.*?)\n<<<END_SECTION:\1>>>", re.DOTALL)

_MIME_BY_SUFFIX = {
    ".png": "image/png",
    ".jpg": "image/jpeg",
    ".jpeg": "image/jpeg",
    ".gif": "image/gif",
    ".webp": "image/webp",
    ".bmp": "image/bmp",
}


def load_template(path: str | Path) -> str:
    return Path(path).read_text(encoding="utf-8")


def default_template(name: str) -> str:
    return resources.files("solroute.templates").joinpath(f"{name}.tmpl").read_text(encoding="utf-8")


def render_template(text: str, values: Mapping[str, object] | None = None) -> str:
    """Substitute ``{{name}}`` placeholders; unknown names are left intact so
    a template typo is visible in the output rather than silently dropped."""
    values = values or {}

    def sub(match: re.Match) -> str:
        key = match.group(1)
        return str(values[key]) if key in values else match.group(0)

    return _PLACEHOLDER.sub(sub, text)


@dataclass(frozen=True)
class ImageRef:
    instance_id: str
    path: str


@dataclass(frozen=True)
class PromptBundle:
    """The five rendered parts plus the image attachments, in instance order."""

    model_definitions: str
    requirements: str
    incontext_examples: str
    solution_pool_view: str
    user_spec_text: str
    images: tuple[ImageRef, ...] = ()

    def __post_init__(self) -> None:
        markers = _EXAMPLE_MARKER.findall(self.incontext_examples)
        if len(markers) != 4:
            raise ValueError(
                f"incontext_examples must contain exactly 4 example blocks, found {len(markers)}"
            )


def render_model_definitions(cards: Sequence[ModelCard]) -> str:
    if not cards:
        raise EmptyModelPoolError("cannot render an empty model pool")
    blocks = []
    for card in sorted(cards, key=lambda c: c.name):
        args_in = "; ".join(f"{a.name} ({a.type}): {a.description}" for a in card.input_args)
        args_out = "; ".join(f"{a.name} ({a.type}): {a.description}" for a in card.return_args)
        blocks.append(
            "\n".join(
                [
                    f"### MODEL: {card.name}",
                    f"FUNCTIONALITY: {card.functionality}",
                    f"INPUT ARGS: {args_in}",
                    f"RETURN ARGS: {args_out}",
                    "EXAMPLE USAGE:",
                    card.example_usage,
                    f"COST CLASS: {card.cost_class.value}",
                ]
            )
        )
    return "\n\n".join(blocks)


def render_solution_pool(pool: SolutionPool) -> str:
    """Code-only pool view; the literal string EMPTY stands for no solutions."""
    if not pool.solutions:
        return "EMPTY"
    blocks = []
    for index, solution in enumerate(pool.solutions, start=1):
        blocks.append(f"SOLUTION {index} (id={solution.id}):\n```python\n{solution.action_code}\n```")
    return "\n\n".join(blocks)


def _render_constraints(constraints: Sequence[Constraint]) -> str:
    if not constraints:
        return "none"
    return "\n".join(f"- {c.kind.value}: {c.value}" for c in constraints)


def render_user_spec(task: TaskSpec, examples: Sequence[Instance]) -> tuple[str, tuple[ImageRef, ...]]:
    """The task definition with every example instance embedded (prompt,
    ground truth, image attachment markers), plus the ordered attachment list."""
    images: list[ImageRef] = []
    lines = [
        "TASK DEFINITION:",
        task.description,
        "",
        "CONSTRAINTS:",
        _render_constraints(task.constraints),
        "",
        f"EXAMPLE INSTANCES ({len(examples)} of {len(task.instances)} total):",
    ]
    for instance in examples:
        lines.append(f"INSTANCE {instance.id}:")
        lines.append(f"  REQUEST: {instance.request_prompt}")
        if instance.images:
            refs = []
            for path in instance.images:
                images.append(ImageRef(instance.id, path))
                refs.append(f"[image {len(images)}]")
            lines.append(f"  IMAGES: {' '.join(refs)} (attached in order)")
        else:
            lines.append("  IMAGES: none")
        lines.append(f"  GROUND TRUTH: {instance.ground_truth}")
    return "\n".join(lines), tuple(images)


@dataclass(frozen=True)
class PromptTemplates:
    requirements: str
    incontext_examples: str


def default_templates() -> PromptTemplates:
    return PromptTemplates(
        requirements=default_template("requirements"),
        incontext_examples=default_template("incontext_examples"),
    )


def build_bundle(
    task: TaskSpec,
    cards: Sequence[ModelCard],
    pool: SolutionPool,
    templates: PromptTemplates | None = None,
) -> PromptBundle:
    templates = templates or default_templates()
    examples, _ = split_examples(task)
    user_text, images = render_user_spec(task, examples)
    values = {"task_id": task.task_id, "description": task.description}
    return PromptBundle(
        model_definitions=render_model_definitions(cards),
        requirements=render_template(templates.requirements, values),
        incontext_examples=render_template(templates.incontext_examples, values),
        solution_pool_view=render_solution_pool(pool),
        user_spec_text=user_text,
        images=images,
    )


def _section(name: str, content: str) -> str:
    return f"<<<SECTION:{name}>>>\n{content}\n<<<END_SECTION:{name}>>>"


def _load_image(ref: ImageRef) -> ImagePart:
    path = Path(ref.path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ImageLoadError(
            f"cannot read image {ref.path!r} for instance {ref.instance_id}: {exc}",
            instance_id=ref.instance_id,
        ) from exc
    mime = _MIME_BY_SUFFIX.get(path.suffix.lower(), "application/octet-stream")
    return ImagePart(data=data, mime=mime)


def assemble_router_prompt(bundle: PromptBundle) -> tuple[Message, Message]:
    """System message (definitions + requirements + examples) followed by a
    user message (pool view + user spec) carrying the image parts in instance
    order. Total part count: 2 text parts + one per image."""
    system_text = "\n\n".join(
        [
            _section("model_definitions", bundle.model_definitions),
            _section("requirements", bundle.requirements),
            _section("incontext_examples", bundle.incontext_examples),
        ]
    )
    user_text = "\n\n".join(
        [
            _section("solution_pool", bundle.solution_pool_view),
            _section("user_spec", bundle.user_spec_text),
        ]
    )
    user_parts: list[Part] = [TextPart(user_text)]
    user_parts.extend(_load_image(ref) for ref in bundle.images)
    return (
        Message(role="system", parts=(TextPart(system_text),)),
        Message(role="user", parts=tuple(user_parts)),
    )


def parse_router_prompt(messages: Sequence[Message]) -> dict[str, str]:
    """Recover section contents from an assembled prompt (round-trip check)."""
    sections: dict[str, str] = {}
    for message in messages:
        for part in message.parts:
            if isinstance(part, TextPart):
                for match in _SECTION.finditer(part.text):
                    sections[match.group(1)] = match.group(2)
    return sections
