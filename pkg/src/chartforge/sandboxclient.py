"""Client side of the script-execution sandbox.

The sandbox itself is a separate runner process speaking JSON over stdio
(one request in, one result out). This module holds the wire-format types,
the subprocess client, and an in-process stub used by tests so the full
pipeline runs without the runner installed.
"""

from __future__ import annotations

import base64
import json
import os
import shutil
import subprocess
import time
from dataclasses import dataclass
from pathlib import Path

from .errors import SandboxEnvironmentError
from .model import RenderStatus

FIGURE_FILENAME = "figure.png"
STDERR_TAIL_LIMIT = 4096
DEFAULT_TIMEOUT_S = 30
RUNNER_GRACE_S = 5  # the runner must return within timeout + grace

SANDBOX_CMD_ENV = "CHARTFORGE_SANDBOX_CMD"
SANDBOX_PY_ENV = "CHARTFORGE_SANDBOX_PY"


@dataclass(frozen=True)
class SandboxRequest:
    script: str
    timeout_s: int = DEFAULT_TIMEOUT_S
    workdir: str = ""

    def __post_init__(self):
        if not self.script:
            raise ValueError("script must be non-empty")
        if self.timeout_s < 1:
            raise ValueError("timeout_s must be positive")

    def to_json_dict(self) -> dict:
        return {
            "script": self.script,
            "timeout_s": self.timeout_s,
            "workdir": self.workdir,
        }


@dataclass(frozen=True)
class SandboxResult:
    status: RenderStatus
    exit_code: int | None
    stderr_tail: str
    figure_file: str | None
    wall_time_ms: int

    @classmethod
    def from_json_dict(cls, d: dict) -> SandboxResult:
        return cls(
            status=RenderStatus(d["status"]),
            exit_code=d.get("exit_code"),
            stderr_tail=d.get("stderr_tail", "")[-STDERR_TAIL_LIMIT:],
            figure_file=d.get("figure_file"),
            wall_time_ms=int(d.get("wall_time_ms", 0)),
        )


def default_sandbox_command() -> list[str]:
    override = os.environ.get(SANDBOX_CMD_ENV)
    if override:
        return override.split()
    return ["sandbox-runner"]


def _prepare_workdir(workdir: str | Path) -> Path:
    path = Path(workdir)
    if path.exists():
        if any(path.iterdir()):
            shutil.rmtree(path)
            path.mkdir(parents=True)
    else:
        path.mkdir(parents=True)
    return path


class SubprocessSandbox:
    """Talks to the external runner: request JSON on stdin, result on stdout."""

    def __init__(self, command: list[str] | None = None):
        self.command = command or default_sandbox_command()

    def execute(self, request: SandboxRequest) -> SandboxResult:
        workdir = _prepare_workdir(request.workdir)
        payload = json.dumps(request.to_json_dict())
        try:
            proc = subprocess.run(
                self.command + ["--json"],
                input=payload,
                capture_output=True,
                text=True,
                timeout=request.timeout_s + RUNNER_GRACE_S + 10,
                cwd=workdir,
            )
        except FileNotFoundError as exc:
            raise SandboxEnvironmentError(
                f"sandbox runner not found: {self.command[0]} ({exc})"
            ) from exc
        except subprocess.TimeoutExpired as exc:
            raise SandboxEnvironmentError(
                f"sandbox runner did not return within its grace window: {exc}"
            ) from exc
        if not proc.stdout.strip():
            raise SandboxEnvironmentError(
                f"sandbox runner produced no result (exit {proc.returncode}): "
                f"{proc.stderr[-500:]}"
            )
        try:
            result = json.loads(proc.stdout)
        except json.JSONDecodeError as exc:
            raise SandboxEnvironmentError(
                f"sandbox runner emitted invalid JSON: {proc.stdout[:200]!r}"
            ) from exc
        if "error" in result:
            detail = result["error"].get("detail", "unknown")
            raise SandboxEnvironmentError(f"sandbox environment error: {detail}")
        return SandboxResult.from_json_dict(result)


# A decodable 1x1 PNG so stubbed renders still produce a real image file.
_TINY_PNG = base64.b64decode(
    "iVBORw0KGgoAAAANSUhEUgAAAAEAAAABCAIAAACQd1PeAAAADElEQVR4nGMwK1gA"
    "AAImAUd8WsNMAAAAAElFTkSuQmCC"
)


class StubSandbox:
    """In-process stand-in that mimics the runner's observable behavior.

    Scripts are classified, not executed: real syntax errors are detected
    by compiling, and a few markers stand in for runtime behavior
    (``while True`` loops time out, ``raise`` fails, a script that never
    saves produces no figure). Successful runs drop a tiny valid PNG in
    the workdir so downstream figure checks stay honest.
    """

    def __init__(self):
        self.calls = 0

    def execute(self, request: SandboxRequest) -> SandboxResult:
        self.calls += 1
        started = time.monotonic()
        workdir = _prepare_workdir(request.workdir)
        script = request.script

        try:
            compile(script, "<stub>", "exec")
        except SyntaxError as exc:
            return self._result(RenderStatus.EXEC_ERROR, 1, f"SyntaxError: {exc}", None, started)
        if "while True" in script:
            return self._result(RenderStatus.TIMEOUT, None, "", None, started)
        if "raise " in script:
            return self._result(
                RenderStatus.EXEC_ERROR, 1, "Traceback (stub): script raised", None, started
            )
        if "savefig" not in script:
            return self._result(RenderStatus.NO_FIGURE, 0, "", None, started)

        figure = workdir / FIGURE_FILENAME
        figure.write_bytes(_TINY_PNG)
        return self._result(RenderStatus.OK, 0, "", str(figure), started)

    def _result(self, status, exit_code, stderr, figure, started) -> SandboxResult:
        return SandboxResult(
            status=status,
            exit_code=exit_code,
            stderr_tail=stderr[-STDERR_TAIL_LIMIT:],
            figure_file=figure,
            wall_time_ms=int((time.monotonic() - started) * 1000),
        )
