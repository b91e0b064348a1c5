"""Unified-diff helpers: validate, parse, apply, generate, and summarize.

All patches produced by the engine come from ``git diff`` and therefore
carry ``a/``/``b/`` path prefixes; the helpers here tolerate both prefixed
and bare paths so hand-written fixtures also work.
"""

from __future__ import annotations

import difflib
import re
from dataclasses import dataclass, field

from .errors import PatchApplyError

_HUNK_RE = re.compile(r"^@@ -(\d+)(?:,(\d+))? \+(\d+)(?:,(\d+))? @@")
_FILE_OLD_RE = re.compile(r"^--- (?:a/)?(.+?)\s*$")
_FILE_NEW_RE = re.compile(r"^\+\+\+ (?:b/)?(.+?)\s*$")

DEV_NULL = "/dev/null"


@dataclass
class Hunk:
    old_start: int
    old_count: int
    new_start: int
    new_count: int
    lines: list[str] = field(default_factory=list)  # prefixed with ' ', '-', '+'


@dataclass
class FilePatch:
    old_path: str
    new_path: str
    hunks: list[Hunk] = field(default_factory=list)

    @property
    def path(self) -> str:
        return self.new_path if self.new_path != DEV_NULL else self.old_path

    @property
    def is_new_file(self) -> bool:
        return self.old_path == DEV_NULL

    @property
    def is_deleted_file(self) -> bool:
        return self.new_path == DEV_NULL


def looks_like_unified_diff(text: str) -> bool:
    """Cheap structural check: a ---/+++ header pair followed by a hunk."""
    if not text or not text.strip():
        return False
    saw_old = saw_new = False
    for line in text.splitlines():
        if _FILE_OLD_RE.match(line):
            saw_old = True
        elif _FILE_NEW_RE.match(line):
            saw_new = saw_old and True
        elif saw_old and saw_new and _HUNK_RE.match(line):
            return True
    return False


def parse_patch(text: str) -> list[FilePatch]:
    """Split a unified diff into per-file patches with parsed hunks."""
    patches: list[FilePatch] = []
    current: FilePatch | None = None
    hunk: Hunk | None = None
    pending_old: str | None = None
    for line in text.splitlines():
        if line.startswith("diff --git") or line.startswith("index "):
            hunk = None
            continue
        m = _FILE_OLD_RE.match(line)
        if m and not line.startswith("----"):
            pending_old = DEV_NULL if m.group(1) == DEV_NULL else m.group(1)
            hunk = None
            continue
        m = _FILE_NEW_RE.match(line)
        if m and pending_old is not None:
            new_path = DEV_NULL if m.group(1) == DEV_NULL else m.group(1)
            current = FilePatch(old_path=pending_old, new_path=new_path)
            patches.append(current)
            pending_old = None
            continue
        m = _HUNK_RE.match(line)
        if m and current is not None:
            hunk = Hunk(
                old_start=int(m.group(1)),
                old_count=int(m.group(2) or "1"),
                new_start=int(m.group(3)),
                new_count=int(m.group(4) or "1"),
            )
            current.hunks.append(hunk)
            continue
        if hunk is not None and line[:1] in (" ", "-", "+"):
            hunk.lines.append(line)
        elif hunk is not None and line.startswith("\\ No newline"):
            hunk.lines.append(line)
    return patches


def changed_files(text: str) -> list[str]:
    """Repo-relative paths touched by the diff, in order of appearance."""
    seen: list[str] = []
    for fp in parse_patch(text):
        if fp.path not in seen:
            seen.append(fp.path)
    return seen


def _apply_hunks(lines: list[str], hunks: list[Hunk]) -> list[str]:
    out: list[str] = []
    cursor = 0  # index into `lines`
    offset = 0
    for hunk in hunks:
        old_block = [l[1:] for l in hunk.lines if l[:1] in (" ", "-")]
        new_block = [l[1:] for l in hunk.lines if l[:1] in (" ", "+")]
        target = hunk.old_start - 1 + offset
        pos = _locate(lines, old_block, target)
        if pos is None or pos < cursor:
            raise PatchApplyError(
                f"hunk @@ -{hunk.old_start} @@ does not match the file contents"
            )
        out.extend(lines[cursor:pos])
        out.extend(new_block)
        cursor = pos + len(old_block)
        offset = pos - (hunk.old_start - 1)
    out.extend(lines[cursor:])
    return out


def _locate(lines: list[str], block: list[str], around: int, radius: int = 200) -> int | None:
    if not block:
        return max(0, min(around, len(lines)))
    for delta in range(radius + 1):
        for pos in (around + delta, around - delta):
            if 0 <= pos <= len(lines) - len(block) and lines[pos : pos + len(block)] == block:
                return pos
    return None


def apply_patch(text: str, files: dict[str, str]) -> dict[str, str]:
    """Apply a unified diff to in-memory file contents.

    `files` maps repo-relative paths to text; the returned mapping reflects
    the post-patch state (new files added, deleted files removed). Raises
    PatchApplyError when a hunk cannot be located.
    """
    result = dict(files)
    for fp in parse_patch(text):
        if fp.is_new_file:
            new_lines = [l[1:] for h in fp.hunks for l in h.lines if l[:1] == "+"]
            result[fp.new_path] = "".join(l + "\n" for l in new_lines)
            continue
        if fp.old_path not in result:
            raise PatchApplyError(f"patch refers to unknown file {fp.old_path!r}")
        if fp.is_deleted_file:
            del result[fp.old_path]
            continue
        original = result[fp.old_path]
        lines = original.split("\n")
        trailing_newline = original.endswith("\n")
        if trailing_newline:
            lines = lines[:-1]
        patched = _apply_hunks(lines, fp.hunks)
        no_newline = any(l.startswith("\\ No newline") for h in fp.hunks for l in h.lines[-1:])
        body = "\n".join(patched)
        if patched and (trailing_newline or not no_newline):
            body += "\n"
        if fp.old_path != fp.new_path:
            del result[fp.old_path]
        result[fp.path] = body
    return result


def diff_texts(a: str, b: str, a_label: str, b_label: str) -> str:
    """Unified diff of two text blobs with a/ b/ prefixed labels."""
    out = difflib.unified_diff(
        a.splitlines(keepends=True),
        b.splitlines(keepends=True),
        fromfile=f"a/{a_label}",
        tofile=f"b/{b_label}",
    )
    return "".join(out)


def diff_file_states(before: dict[str, str], after: dict[str, str]) -> str:
    """Unified diff between two file-content mappings, path-sorted."""
    chunks: list[str] = []
    for path in sorted(set(before) | set(after)):
        a = before.get(path, "")
        b = after.get(path, "")
        if a == b:
            continue
        a_label = f"a/{path}" if path in before else DEV_NULL
        b_label = f"b/{path}" if path in after else DEV_NULL
        chunks.append(
            "".join(
                difflib.unified_diff(
                    a.splitlines(keepends=True),
                    b.splitlines(keepends=True),
                    fromfile=a_label,
                    tofile=b_label,
                )
            )
        )
    return "".join(chunks)


def hunk_summary(text: str) -> str:
    """One-line description of a patch: first touched location and change."""
    for fp in parse_patch(text):
        for hunk in fp.hunks:
            changed = next((l for l in hunk.lines if l[:1] in ("+", "-")), None)
            if changed is not None:
                return f"{fp.path}:{hunk.old_start} {changed[:1]}`{changed[1:].strip()}`"
    return "(no hunks)"


def hunk_texts(text: str) -> list[str]:
    """Each hunk rendered as header plus body, tagged with its file path."""
    out: list[str] = []
    for fp in parse_patch(text):
        for hunk in fp.hunks:
            header = (
                f"--- {fp.old_path}\n+++ {fp.new_path}\n"
                f"@@ -{hunk.old_start},{hunk.old_count} "
                f"+{hunk.new_start},{hunk.new_count} @@"
            )
            out.append(header + "\n" + "\n".join(hunk.lines))
    return out
