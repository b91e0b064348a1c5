"""Repair-session state shared between the agent loop and memory consolidation."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .localizer import LocalizationObject
from .memory import RetrievalKeys
from .oracle import VerificationVerdict
from .workspace import CompressedContext


class Phase(str, Enum):
    LOCATE = "locate"
    PATCH = "patch"
    VERIFY = "verify"
    DONE = "done"


class Outcome(str, Enum):
    SUCCESS = "success"
    EXHAUSTED = "exhausted"


@dataclass
class Attempt:
    patch: str
    verdict: VerificationVerdict
    localization: LocalizationObject | None = None


@dataclass
class RepairSession:
    """Full state of one task's repair lifecycle."""

    keys: RetrievalKeys
    phase: Phase = Phase.LOCATE
    failed_attempts: int = 0
    current_loc: LocalizationObject | None = None
    current_patch: str | None = None
    compressed: CompressedContext | None = None
    attempts: list[Attempt] = field(default_factory=list)
    outcome: Outcome | None = None
    # Pristine text of every file touched by any candidate; lets memory
    # consolidation rebuild per-candidate file states without the workspace.
    pristine_files: dict[str, str] = field(default_factory=dict)

    @property
    def final_patch(self) -> str:
        if self.outcome != Outcome.SUCCESS or not self.attempts:
            return ""
        return self.attempts[-1].patch

    @property
    def last_failed_patch(self) -> str | None:
        """Most recent failed candidate with a non-empty diff, if any."""
        for attempt in reversed(self.attempts):
            verdict = attempt.verdict
            failed = not (verdict.vuln_mitigated and verdict.functionality_preserved)
            if failed and attempt.patch.strip():
                return attempt.patch
        return None
