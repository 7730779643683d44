"""Shared fixtures: tiny on-disk task specs, model cards, and a 1x1 PNG."""

from __future__ import annotations

import base64
from pathlib import Path

import pytest

from solroute.core import ArgSpec, Constraint, ConstraintKind, Instance, ModelCard, TaskSpec

# Outcome per acceptance criterion, printed as a summary section so the
# pass/fail line per criterion survives output capture.
_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "criterion(num, description): acceptance criterion test"
    )


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    num, description = marker.args
    if report.failed:
        _CRITERIA[num] = (description, "FAIL")
    elif report.when == "call" and report.passed:
        _CRITERIA.setdefault(num, (description, "PASS"))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        description, status = _CRITERIA[num]
        terminalreporter.write_line(f"criterion {num:2d} {status}: {description}")

# Smallest valid PNG (1x1 red pixel), checked in as bytes so tests never
# depend on an imaging library.
TINY_PNG = base64.b64decode(
    "iVBORw0KGgoAAAANSUhEUgAAAAEAAAABCAYAAAAfFcSJAAAADUlEQVR4nGP4z8DwHwAFAAH/q842"
    "iQAAAABJRU5ErkJggg=="
)


def write_png(path: Path, marker: str = "") -> Path:
    """Optionally append a trailing ``key=value`` marker the stub tools read."""
    path.parent.mkdir(parents=True, exist_ok=True)
    data = TINY_PNG
    if marker:
        data += b"\n" + marker.encode("ascii") + b"\n"
    path.write_bytes(data)
    return path


def make_instance(idx: int, image_dir: Path | None, labeled: bool = True) -> Instance:
    images: tuple[str, ...] = ()
    if image_dir is not None:
        images = (str(write_png(image_dir / f"img_{idx:02d}.png")),)
    return Instance(
        id=f"i{idx}",
        images=images,
        request_prompt=f"What is shown in image {idx}?",
        ground_truth=f"answer-{idx}" if labeled else None,
    )


def make_task(
    image_dir: Path | None,
    total: int = 10,
    examples: int = 2,
    labeled: int | None = None,
    constraints: tuple[Constraint, ...] = (),
) -> TaskSpec:
    """Build a spec whose first ``labeled`` instances carry ground truth
    (defaults to ``examples``)."""
    if labeled is None:
        labeled = examples
    instances = tuple(make_instance(i, image_dir, labeled=i < labeled) for i in range(total))
    return TaskSpec(
        task_id="task-fixture",
        description="Describe the content of each image.",
        instances=instances,
        example_count=examples,
        constraints=constraints,
    )


def make_card(name: str = "color_probe", cost_class: str = "LOCAL") -> ModelCard:
    from solroute.core import CostClass

    return ModelCard(
        name=name,
        functionality=f"{name} inspects an image and returns a structured result.",
        input_args=(ArgSpec("image", "str", "image file name from the inputs manifest"),),
        return_args=(ArgSpec("result", "str", "structured result value"),),
        example_usage=f'call_tool("{name}", image="inputs/img_0.png")',
        cost_class=CostClass(cost_class),
    )


@pytest.fixture
def task(tmp_path: Path) -> TaskSpec:
    return make_task(tmp_path / "images")


@pytest.fixture
def cards() -> list[ModelCard]:
    return [make_card("color_probe"), make_card("depth_probe")]


MIN_ACCURACY = ConstraintKind.MIN_ACCURACY


# ---------------------------------------------------------------------------
# on-disk engine fixture: a full config directory with a scripted backend
# ---------------------------------------------------------------------------

FIXTURE_COLORS = ("red", "green", "blue", "yellow")

FIXTURE_CODE_REMOTE = """manifest = load_manifest()
result = call_tool("vision_api_probe", image=manifest["images"][0])
emit_answer(result["color"])
"""

FIXTURE_CODE_LOCAL = """import time

manifest = load_manifest()
probe = call_tool("color_probe", image=manifest["images"][0])
time.sleep(0.05)
emit_answer(probe["color"])
"""


def write_engine_fixture(
    root: Path,
    total: int = 8,
    labeled: int = 4,
    example_count: int = 4,
    budget: int = 2,
    deterministic_timing: bool = False,
    task_id: str = "colors-fixture",
    config_extra: dict | None = None,
) -> Path:
    """Write a complete config directory (task, images, cards, agents,
    prices, scripted backend) under ``root``; returns the config path.

    The scripted backend plays two sessions: a metered remote-probe solution,
    then a free local-probe one. Both answer the color marker embedded in
    each image, so every labeled instance scores 1.0 under EXACT_MATCH.
    """
    import json

    root.mkdir(parents=True, exist_ok=True)
    (root / "images").mkdir(exist_ok=True)

    instances = []
    for i in range(total):
        color = FIXTURE_COLORS[i % len(FIXTURE_COLORS)]
        name = f"img_{i:02d}.png"
        write_png(root / "images" / name, marker=f"color={color}")
        inst = {
            "id": f"i{i}",
            "images": [f"images/{name}"],
            "request_prompt": "What color is the object in this image?",
        }
        if i < labeled:
            inst["ground_truth"] = color
        instances.append(inst)

    (root / "task.json").write_text(
        json.dumps(
            {
                "task_id": task_id,
                "description": "Name the dominant color of each image.",
                "example_count": example_count,
                "constraints": [],
                "instances": instances,
            },
            indent=2,
        )
    )

    cards = []
    for name, cost in (("color_probe", "LOCAL"), ("vision_api_probe", "REMOTE_API")):
        cards.append(
            {
                "name": name,
                "functionality": f"{name} names the dominant color of an image.",
                "input_args": [{"name": "image", "type": "path"}],
                "return_args": [{"name": "color", "type": "str"}],
                "example_usage": f'call_tool("{name}", image=manifest["images"][0])',
                "cost_class": cost,
            }
        )
    (root / "cards.json").write_text(json.dumps(cards, indent=2))

    roles = (
        "SOLUTION_PROPOSER",
        "SOLUTION_ENGINEER",
        "REQUIREMENT_CHECKER",
        "CODE_CHECKER",
        "REPETITION_CHECKER",
        "METRIC_ROUTER",
    )
    (root / "agents.json").write_text(
        json.dumps({role: {"model": "fixture-model"} for role in roles}, indent=2)
    )

    (root / "prices.json").write_text(
        json.dumps({"stub-remote-vision": [4.0, 0.0], "fixture-model": [0.0, 0.0]})
    )

    script = {
        "SOLUTION_PROPOSER": [
            "ANALYSIS:\nEmpty pool; the remote probe answers directly.\n\n"
            "THOUGHT:\nCall vision_api_probe per instance.",
            "ANALYSIS:\nA remote solution exists; a local probe adds a free "
            "alternative.\n\nTHOUGHT:\nCall color_probe per instance.",
        ],
        "SOLUTION_ENGINEER": [
            "ACTION:\n```python\n" + FIXTURE_CODE_REMOTE + "```",
            "ACTION:\n```python\n" + FIXTURE_CODE_LOCAL + "```",
        ],
        "REQUIREMENT_CHECKER": "Examples all match.\nDECISION: ACCEPT",
        "CODE_CHECKER": "Answer emitted once.\nDECISION: ACCEPT",
        "REPETITION_CHECKER": "Different model from the pool.\nVERDICT: UNIQUE",
        "METRIC_ROUTER": "Single-word answers.\nMETRIC: EXACT_MATCH",
    }
    (root / "scripted.json").write_text(json.dumps(script, indent=2))

    config = {
        "cards_path": "cards.json",
        "agents_path": "agents.json",
        "prices_path": "prices.json",
        "backend": {"mode": "scripted", "script_path": "scripted.json"},
        "sandbox_timeout": 30.0,
        "session": {"max_iterations": 6},
        "budget": budget,
        "bench": {"seed": 0, "repeats": 1, "parallelism": 4},
        "runs_root": "runs",
        "deterministic_timing": deterministic_timing,
    }
    config.update(config_extra or {})
    config_path = root / "config.json"
    config_path.write_text(json.dumps(config, indent=2))
    return config_path
