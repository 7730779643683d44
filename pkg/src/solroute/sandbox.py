"""Subprocess execution of generated action code.

Each instance runs in a fresh temporary working directory containing only the
staged ``inputs/`` tree (images plus a manifest without ground truth). The
script is the fixed prelude followed by the action code; results come back
over stdout through sentinel-framed lines so ordinary prints cannot be
mistaken for answers.
"""

from __future__ import annotations

import json
import os
import shutil
import subprocess
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

from .core import Instance

ANSWER_MARKER = "@@ANSWER@@"
TRACE_MARKER = "@@TRACE@@"

#: Harness functions available to action code. Names prefixed ``_sr_`` keep
#: the injected imports out of the way of generated identifiers.
PRELUDE = '''\
import json as _sr_json
import os as _sr_os
import sys as _sr_sys
import urllib.request as _sr_urlreq
import urllib.error as _sr_urlerr


def emit_answer(value):
    _sr_sys.stdout.write("@@ANSWER@@ " + _sr_json.dumps(value) + "\\n")
    _sr_sys.stdout.flush()


def emit_trace(label, value):
    _sr_sys.stdout.write(
        "@@TRACE@@ " + _sr_json.dumps(str(label)) + " " + _sr_json.dumps(value) + "\\n"
    )
    _sr_sys.stdout.flush()


def load_manifest():
    with open(_sr_os.path.join("inputs", "manifest.json"), encoding="utf-8") as fh:
        return _sr_json.load(fh)


def call_tool(name, **kwargs):
    base = _sr_os.environ.get("TOOL_BRIDGE_URL")
    if not base:
        raise RuntimeError("tool bridge is not configured")
    # String args naming sandbox-local files are rewritten to absolute paths
    # so the bridge process can read them.
    kwargs = {
        k: (_sr_os.path.abspath(v) if isinstance(v, str) and _sr_os.path.isfile(v) else v)
        for k, v in kwargs.items()
    }
    request = _sr_urlreq.Request(
        base.rstrip("/") + "/tool/" + name,
        data=_sr_json.dumps(kwargs).encode("utf-8"),
        method="POST",
        headers={"Content-Type": "application/json"},
    )
    tag = _sr_os.environ.get("TOOL_USAGE_TAG", "")
    if tag:
        request.add_header("X-Usage-Tag", tag)
    try:
        with _sr_urlreq.urlopen(request, timeout=60) as response:
            raw = response.read()
    except _sr_urlerr.HTTPError as exc:
        detail = exc.read().decode("utf-8", "replace").strip()
        raise RuntimeError("tool %s failed (%s): %s" % (name, exc.code, detail))
    return _sr_json.loads(raw.decode("utf-8"))["result"]
'''


class ExecStatus(str, Enum):
    OK = "OK"
    RUNTIME_ERROR = "RUNTIME_ERROR"
    TIMEOUT = "TIMEOUT"
    PROTOCOL_ERROR = "PROTOCOL_ERROR"


@dataclass(frozen=True)
class ExecutionRequest:
    action_code: str
    instance: Instance
    timeout: float = 30.0
    tools_url: str = ""
    usage_tag: str = ""
    grace: float = 2.0
    interpreter: tuple[str, ...] = (sys.executable, "{script}")


@dataclass(frozen=True)
class ExecutionReport:
    instance_id: str
    status: ExecStatus
    answer: object = None
    traces: tuple[tuple[str, object], ...] = ()
    wall_time: float = 0.0
    exit_code: int | None = None
    stderr_tail: str = ""


# ---------------------------------------------------------------------------
# sentinel framing
# ---------------------------------------------------------------------------


def format_answer_line(value: object) -> str:
    return f"{ANSWER_MARKER} {json.dumps(value)}"


def format_trace_line(label: str, value: object) -> str:
    return f"{TRACE_MARKER} {json.dumps(str(label))} {json.dumps(value)}"


def parse_answer_line(line: str) -> object:
    """Payload after the marker; non-JSON payloads come back as raw strings
    so hand-written scripts that skip json.dumps still produce an answer."""
    payload = line[len(ANSWER_MARKER) :].strip()
    try:
        return json.loads(payload)
    except json.JSONDecodeError:
        return payload


def parse_trace_line(line: str) -> tuple[str, object] | None:
    payload = line[len(TRACE_MARKER) :].strip()
    decoder = json.JSONDecoder()
    try:
        label, end = decoder.raw_decode(payload)
        value = json.loads(payload[end:].strip())
    except (json.JSONDecodeError, ValueError):
        return None
    if not isinstance(label, str):
        return None
    return label, value


def parse_stdout(stdout: str) -> tuple[list[object], list[tuple[str, object]]]:
    answers: list[object] = []
    traces: list[tuple[str, object]] = []
    for line in stdout.splitlines():
        stripped = line.strip()
        if stripped.startswith(ANSWER_MARKER):
            answers.append(parse_answer_line(stripped))
        elif stripped.startswith(TRACE_MARKER):
            parsed = parse_trace_line(stripped)
            if parsed is not None:
                traces.append(parsed)
    return answers, traces


# ---------------------------------------------------------------------------
# staging and execution
# ---------------------------------------------------------------------------


def stage_inputs(workdir: Path, instance: Instance) -> Path:
    """Copy images to inputs/img_<k>.<ext> and write the manifest the action
    code reads. Ground truth never enters the sandbox."""
    inputs = workdir / "inputs"
    inputs.mkdir(parents=True, exist_ok=True)
    image_names: list[str] = []
    for k, source in enumerate(instance.images):
        source = Path(source)
        suffix = source.suffix or ".png"
        name = f"img_{k}{suffix}"
        shutil.copyfile(source, inputs / name)
        image_names.append(f"inputs/{name}")
    manifest = {
        "instance_id": instance.id,
        "request_prompt": instance.request_prompt,
        "images": image_names,
    }
    with open(inputs / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, ensure_ascii=False)
        fh.write("\n")
    return inputs


_ENV_PASSTHROUGH = ("PATH", "LANG", "LC_ALL")
_STDERR_TAIL_BYTES = 4096


def _child_env(workdir: Path, request: ExecutionRequest) -> dict[str, str]:
    env = {name: os.environ[name] for name in _ENV_PASSTHROUGH if name in os.environ}
    env["HOME"] = str(workdir)
    env["TMPDIR"] = str(workdir)
    env["PYTHONDONTWRITEBYTECODE"] = "1"
    env["PYTHONIOENCODING"] = "utf-8"
    if request.tools_url:
        env["TOOL_BRIDGE_URL"] = request.tools_url
    if request.usage_tag:
        env["TOOL_USAGE_TAG"] = request.usage_tag
    return env


def _mask_workdir(text: str, workdir: Path) -> str:
    for literal in {str(workdir), str(workdir.resolve())}:
        text = text.replace(literal, "<workdir>")
    return text


def execute(request: ExecutionRequest) -> ExecutionReport:
    """Run one instance to completion, enforcing the timeout with a terminate
    grace period before the hard kill."""
    with tempfile.TemporaryDirectory(prefix="solroute-") as tmp:
        workdir = Path(tmp)
        stage_inputs(workdir, request.instance)
        script = workdir / "action.py"
        script.write_text(
            PRELUDE + "\n# --- action code ---\n" + request.action_code + "\n",
            encoding="utf-8",
        )
        argv = [part.format(script=str(script)) for part in request.interpreter]

        started = time.monotonic()
        proc = subprocess.Popen(
            argv,
            cwd=workdir,
            env=_child_env(workdir, request),
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            text=True,
        )
        timed_out = False
        try:
            stdout, stderr = proc.communicate(timeout=request.timeout)
        except subprocess.TimeoutExpired:
            timed_out = True
            proc.terminate()
            try:
                stdout, stderr = proc.communicate(timeout=request.grace)
            except subprocess.TimeoutExpired:
                proc.kill()
                stdout, stderr = proc.communicate()
        wall_time = time.monotonic() - started

        answers, traces = parse_stdout(stdout or "")
        if timed_out:
            status = ExecStatus.TIMEOUT
        elif proc.returncode != 0:
            status = ExecStatus.RUNTIME_ERROR
        elif len(answers) != 1:
            status = ExecStatus.PROTOCOL_ERROR
        else:
            status = ExecStatus.OK

        tail = (stderr or "")[-_STDERR_TAIL_BYTES:]
        return ExecutionReport(
            instance_id=request.instance.id,
            status=status,
            answer=answers[0] if len(answers) == 1 else None,
            traces=tuple(traces),
            wall_time=wall_time,
            exit_code=None if timed_out else proc.returncode,
            stderr_tail=_mask_workdir(tail, workdir),
        )


def execute_over(
    action_code: str,
    instances: Sequence[Instance],
    *,
    timeout: float = 30.0,
    tools_url: str = "",
    usage_tag: str = "",
    max_workers: int = 4,
    interpreter: Sequence[str] | None = None,
) -> list[ExecutionReport]:
    """One report per instance, in instance order, regardless of completion
    order across the worker pool."""
    requests = [
        ExecutionRequest(
            action_code=action_code,
            instance=instance,
            timeout=timeout,
            tools_url=tools_url,
            usage_tag=usage_tag,
            **({"interpreter": tuple(interpreter)} if interpreter else {}),
        )
        for instance in instances
    ]
    if not requests:
        return []
    workers = max(1, min(max_workers, len(requests)))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(execute, requests))
