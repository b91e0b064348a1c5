"""Verification oracle: reproduction command plus regression suite.

A task ships a reproduction (PoC) command, a regression command, and an
optional build command, each with a pass predicate. ``check_vul`` runs them
against the current workspace and reports whether the vulnerability is
mitigated and whether previously-passing regression tests still pass. The
baseline pass set is computed once on the pristine checkout; tests already
failing there are out of scope and never surface in verdicts.
"""

from __future__ import annotations

import re
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path

from .errors import BuildToolMissing, OracleTimeout, PristineCheckFailed
from .workspace import cap_output

DEFAULT_COMMAND_TIMEOUT = 600.0
DEFAULT_TOTAL_BUDGET = 1800.0

SANITIZER_MARKERS = (
    "ERROR: AddressSanitizer",
    "ERROR: LeakSanitizer",
    "ERROR: MemorySanitizer",
    "ERROR: UndefinedBehaviorSanitizer",
    "SUMMARY: AddressSanitizer",
)

EXIT_ZERO = "exit_zero"
SANITIZER_CLEAN = "sanitizer_clean"


def predicate_passes(predicate: str, exit_code: int, output: str) -> bool:
    if predicate == EXIT_ZERO:
        return exit_code == 0
    if predicate == SANITIZER_CLEAN:
        # Sanitizers may exit 0 under some configs; require a clean log too.
        return exit_code == 0 and not any(m in output for m in SANITIZER_MARKERS)
    raise ValueError(f"unknown pass predicate: {predicate!r}")


_PASS_LINE_RE = re.compile(r"^(?:PASS|ok)[:\s]+(\S+)", re.MULTILINE)
_FAIL_LINE_RE = re.compile(r"^(?:FAIL|not ok)[:\s]+(\S+)", re.MULTILINE)


def parse_test_results(output: str) -> tuple[set[str], set[str]]:
    """Extract (passing, failing) test names from PASS/FAIL-style lines."""
    return set(_PASS_LINE_RE.findall(output)), set(_FAIL_LINE_RE.findall(output))


@dataclass
class OracleSpec:
    poc_command: str
    regression_command: str
    build_command: str | None = None
    pass_predicates: dict[str, str] = field(default_factory=dict)

    def predicate(self, which: str) -> str:
        defaults = {
            "poc_command": SANITIZER_CLEAN,
            "regression_command": EXIT_ZERO,
            "build_command": EXIT_ZERO,
        }
        return self.pass_predicates.get(which, defaults[which])

    def validate(self) -> None:
        if not self.poc_command.strip():
            raise ValueError("poc_command must be non-empty")
        for which in ("poc_command", "regression_command", "build_command"):
            predicate_passes(self.predicate(which), 0, "")


@dataclass
class VerificationVerdict:
    vuln_mitigated: bool
    functionality_preserved: bool
    build_ok: bool
    logs: str

    def to_json(self) -> dict:
        return {
            "vuln_mitigated": self.vuln_mitigated,
            "functionality_preserved": self.functionality_preserved,
            "build_ok": self.build_ok,
            "logs": self.logs,
        }


class OracleRunner:
    """Runs the oracle for one task; caches the pristine baseline."""

    def __init__(
        self,
        root: Path,
        spec: OracleSpec,
        command_timeout: float = DEFAULT_COMMAND_TIMEOUT,
        total_budget: float = DEFAULT_TOTAL_BUDGET,
    ) -> None:
        self.root = Path(root)
        self.spec = spec
        self.command_timeout = command_timeout
        self.total_budget = total_budget
        self.elapsed = 0.0
        self.check_vul_calls = 0
        self.baseline_passing: set[str] | None = None
        self.baseline_predicate_ok: bool | None = None

    def _run(self, command: str) -> tuple[int, str]:
        if self.elapsed >= self.total_budget:
            raise OracleTimeout(f"oracle budget of {self.total_budget:.0f}s exhausted")
        started = time.monotonic()
        try:
            proc = subprocess.run(
                command,
                shell=True,
                cwd=self.root,
                capture_output=True,
                text=True,
                timeout=min(self.command_timeout, self.total_budget - self.elapsed),
            )
        except subprocess.TimeoutExpired as exc:
            self.elapsed += time.monotonic() - started
            raise OracleTimeout(f"command exceeded {self.command_timeout:.0f}s: {command}") from exc
        self.elapsed += time.monotonic() - started
        output = (proc.stdout or "") + (proc.stderr or "")
        if proc.returncode == 127:
            raise BuildToolMissing(f"command not found: {command}")
        return proc.returncode, output

    def run_poc(self) -> tuple[int, str]:
        """Run the reproduction command alone (used to refresh crash evidence)."""
        return self._run(self.spec.poc_command)

    def validate_pristine(self) -> None:
        """Check the PoC fails on the untouched repo and record the baseline
        regression pass set. Must run before any candidate is applied."""
        if self.spec.build_command:
            code, out = self._run(self.spec.build_command)
            if not predicate_passes(self.spec.predicate("build_command"), code, out):
                raise PristineCheckFailed(f"build fails on pristine repo:\n{cap_output(out, 2000)}")
        code, out = self._run(self.spec.poc_command)
        if predicate_passes(self.spec.predicate("poc_command"), code, out):
            raise PristineCheckFailed(
                "reproduction command passes on the pristine repo; nothing to fix"
            )
        code, out = self._run(self.spec.regression_command)
        passing, _ = parse_test_results(out)
        self.baseline_passing = passing
        self.baseline_predicate_ok = predicate_passes(
            self.spec.predicate("regression_command"), code, out
        )

    def check_vul(self) -> VerificationVerdict:
        """Run build, PoC, and regression suite against the current tree."""
        self.check_vul_calls += 1
        logs: list[str] = []
        if self.spec.build_command:
            code, out = self._run(self.spec.build_command)
            logs.append(f"$ {self.spec.build_command}\n{out}")
            if not predicate_passes(self.spec.predicate("build_command"), code, out):
                return VerificationVerdict(False, False, False, cap_output("\n".join(logs)))

        code, out = self._run(self.spec.poc_command)
        logs.append(f"$ {self.spec.poc_command}\n{out}")
        mitigated = predicate_passes(self.spec.predicate("poc_command"), code, out)

        code, out = self._run(self.spec.regression_command)
        logs.append(f"$ {self.spec.regression_command}\n{out}")
        preserved = self._regressions_preserved(code, out)
        return VerificationVerdict(mitigated, preserved, True, cap_output("\n".join(logs)))

    def _regressions_preserved(self, code: int, output: str) -> bool:
        if self.baseline_passing:
            passing, _ = parse_test_results(output)
            return self.baseline_passing <= passing
        if self.baseline_predicate_ok:
            return predicate_passes(self.spec.predicate("regression_command"), code, output)
        # Nothing passed on the pristine repo, so nothing can regress.
        return True
